#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "appnet/hash.h"
#include "appnet/model.h"
#include "appnet/service_table.h"
#include "appnet/wire.h"

namespace appnet {

struct GossipConfig {
  uint32_t k_indirect = 3;
  uint32_t suspect_periods = 4;
  uint32_t piggyback = 6;  // rumors per list per envelope
  uint32_t lambda = 3;     // retransmit budget multiplier
  uint32_t anti_entropy_every = 10;
  uint32_t join_attempts = 4;
};

enum class MemberStatus : uint8_t { Alive = 0, Suspect = 1, Dead = 2 };

std::string_view member_status_name(MemberStatus s);

struct MemberRecord {
  HostId host;
  RealEndpoint addr;  // gossip listener
  MemberStatus status = MemberStatus::Alive;
  uint64_t incarnation = 0;
  uint64_t last_change = 0;  // local logical time; not transmitted
  bool gateway = false;
};

enum class EnvelopeKind : uint8_t { Ping = 1, PingReq = 2, Ack = 3, Sync = 4, SyncReply = 5 };

std::string_view envelope_kind_name(EnvelopeKind k);

inline constexpr uint8_t kGossipVersion = 0x01;
inline constexpr size_t kMaxEnvelopeBytes = 60000;

struct GossipEnvelope {
  EnvelopeKind kind = EnvelopeKind::Ping;
  HostId sender;
  uint32_t seq = 0;
  // PingReq: the member to probe. Forwarded Ack: the member that answered.
  HostId subject;
  std::vector<MemberRecord> rumors;
  std::vector<ServiceEntry> deltas;
  std::optional<std::vector<DigestItem>> digest;
};

/// Wire layout: version, kind, sender[16], seq u32, subject[16], then three
/// sections (rumors, deltas, digest). A section is a u32 byte length
/// (0xFFFFFFFF = absent) followed by u16-length-prefixed items.
Bytes encode_envelope(const GossipEnvelope& env);
GossipEnvelope decode_envelope(std::span<const uint8_t> bytes);

struct Outgoing {
  HostId to;  // zero when only the address is known (initial join)
  RealEndpoint addr;
  GossipEnvelope env;
  // Sync traffic travels over a reliable stream; probes are datagrams.
  bool reliable = false;
};

struct GossipResult {
  std::vector<MemberRecord> changes;
  std::vector<Outgoing> out;
};

/// SWIM-style membership with piggybacked service-table deltas. Single
/// owner; driven by tick() and handle_envelope().
class Gossip {
 public:
  Gossip(MemberRecord self, ServiceTable& table, GossipConfig cfg = {});

  void join(RealEndpoint peer);
  bool joined() const { return join_state_ == JoinState::Joined; }
  bool join_failed() const { return join_state_ == JoinState::Failed; }

  std::vector<Outgoing> tick(uint64_t round, Rng& rng);
  GossipResult handle_envelope(const GossipEnvelope& env, RealEndpoint from, uint64_t now);
  /// Suspects older than the suspicion timeout become Dead; their entries
  /// are tombstoned in the table.
  std::vector<HostId> suspect_timeout_sweep(uint64_t now);
  MemberRecord refute(uint64_t observed_incarnation);
  GossipEnvelope anti_entropy(const HostId& peer) const;

  void enqueue_delta(const ServiceEntry& e);

  const MemberRecord& self() const { return self_; }
  const std::map<HostId, MemberRecord>& members() const { return members_; }
  const MemberRecord* member(const HostId& h) const;
  std::vector<HostId> alive_members() const;  // excludes self
  /// Alive gateway hosts, self included when applicable, sorted.
  std::vector<HostId> alive_gateways() const;

  size_t pending_rumors() const { return member_rumors_.size() + delta_rumors_.size(); }
  uint64_t decode_errors() const { return decode_errors_; }
  void count_decode_error() { ++decode_errors_; }

 private:
  enum class JoinState { Standalone, Joining, Joined, Failed };

  struct Probe {
    uint64_t sent = 0;
    bool indirect = false;
    uint32_t seq = 0;
  };
  struct IndirectRelay {
    HostId origin;
    uint32_t origin_seq;
    HostId target;
  };
  template <typename T>
  struct Rumor {
    T item;
    uint32_t sent = 0;
  };

  uint32_t retransmit_limit() const;
  void enqueue_member(const MemberRecord& m);
  bool apply_member(const MemberRecord& m, uint64_t now, GossipResult& res);
  void mark(const HostId& h, MemberStatus status, uint64_t now, GossipResult* res);
  GossipEnvelope make(EnvelopeKind kind);
  void piggyback(GossipEnvelope& env);
  std::vector<MemberRecord> full_membership() const;
  GossipEnvelope sync_envelope(EnvelopeKind kind, const std::vector<ServiceEntry>& deltas,
                               bool with_digest) const;
  Outgoing to_member(const HostId& h, GossipEnvelope env, bool reliable = false) const;
  bool probeable(const MemberRecord& m) const { return m.status != MemberStatus::Dead; }

  MemberRecord self_;
  ServiceTable& table_;
  GossipConfig cfg_;
  std::map<HostId, MemberRecord> members_;

  std::vector<HostId> probe_order_;
  size_t probe_index_ = 0;
  std::map<HostId, Probe> probes_;
  std::map<uint32_t, IndirectRelay> relays_;
  uint32_t next_seq_ = 1;

  std::map<HostId, Rumor<MemberRecord>> member_rumors_;
  std::map<EntryId, Rumor<ServiceEntry>> delta_rumors_;

  JoinState join_state_ = JoinState::Standalone;
  std::optional<RealEndpoint> join_peer_;
  uint32_t join_tries_ = 0;
  uint64_t next_join_round_ = 0;

  uint64_t decode_errors_ = 0;
};

}  // namespace appnet
