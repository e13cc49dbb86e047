#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "appnet/fd.h"
#include "appnet/model.h"
#include "appnet/service_table.h"
#include "appnet/transport.h"
#include "appnet/trap.h"

namespace appnet {

enum class ChannelKind { Local, Remote };

struct ConnMeta {
  SockAddr local_virtual;
  SockAddr peer_virtual;
  ChannelKind channel_kind = ChannelKind::Remote;
};

enum class Strategy { Rendezvous, RoundRobin };

struct SelectionStrategy {
  Strategy mode = Strategy::Rendezvous;
  uint64_t seed = 0;
};


struct PolicyDecision {
  bool allow = true;
  std::string reason;
};

/// Allow iff the server carries no "grp" tag or the two "grp" value sets
/// intersect.
PolicyDecision policy_allows(const TagSet& client_tags, const TagSet& server_tags);

uint64_t rendezvous_score(const AppId& client, const ServiceKey& key, const ServiceEntry& cand,
                          uint64_t seed);

/// Order in which candidates are tried: the selected one first, then the
/// fallbacks. `rr_counter` is the client's round-robin position for `key`.
std::vector<size_t> selection_order(const AppIdentity& client, const ServiceKey& key,
                                    std::span<const ServiceEntry> candidates,
                                    const SelectionStrategy& strategy, uint64_t rr_counter);

/// Picks one candidate; advances `rr_counter` for RoundRobin.
const ServiceEntry& select_endpoint(const AppIdentity& client, const ServiceKey& key,
                                    std::span<const ServiceEntry> candidates,
                                    const SelectionStrategy& strategy, uint64_t& rr_counter);

enum class NameQuery { SockName, PeerName };

SockAddr handle_name_query(const std::optional<ConnMeta>& meta, NameQuery which);

inline constexpr uint16_t kEphemeralPortBase = 49152;
inline constexpr int kMaxConnectAttempts = 3;

struct SwitchCounters {
  uint64_t datagrams_dropped = 0;
  uint64_t datagrams_relayed = 0;
  uint64_t dns_queries = 0;
  uint64_t connects_local = 0;
  uint64_t connects_remote = 0;
  uint64_t refused_unidentified = 0;
};

/// Trap handler semantics for one node: owns every attached application's
/// virtual handles. Single-owner; the node serializes access.
class Switch : public TransportSink {
 public:
  Switch(HostId local, ServiceTable& table, Transport& transport, SelectionStrategy strategy);

  void add_app(const AppIdentity& app);
  /// Closes all of the app's handles; its entries are tombstoned.
  void remove_app(const AppId& app, uint64_t now);
  bool has_app(const AppId& app) const { return apps_.count(app) > 0; }
  const AppIdentity* app(const AppId& id) const;

  /// Executes one trap request. Never throws for request-level failures;
  /// they come back as the reply's error.
  TrapResponse handle(const AppId& app, const TrapRequest& req, uint64_t now);

  /// Connect on behalf of a synthetic client (gateway proxy).
  UniqueFd connect_as(const AppIdentity& client, const ServiceKey& key, ConnMeta* meta = nullptr);

  bool deliver_stream(RealEndpoint local, UniqueFd conn, std::optional<Preamble> preamble) override;
  void deliver_datagram(RealEndpoint local, RealEndpoint from,
                        std::span<const uint8_t> wire) override;

  /// True when an Accept or RecvFrom on this handle would complete now.
  bool ready(const AppId& app, uint32_t handle) const;

  const SwitchCounters& counters() const { return counters_; }
  uint64_t trap_messages(const AppId& app) const;
  void count_trap_message(const AppId& app);
  const SelectionStrategy& strategy() const { return strategy_; }
  void set_strategy(SelectionStrategy s) { strategy_ = s; }

  /// ConnMeta of a connected handle (tests and the harness).
  std::optional<ConnMeta> meta(const AppId& app, uint32_t handle) const;

 private:
  struct PendingConn {
    UniqueFd fd;
    ConnMeta meta;
  };
  struct InboundDatagram {
    SockAddr from;
    Bytes payload;
  };
  struct Handle {
    VHandle vh;
    std::optional<ServiceKey> bound;
    std::optional<RealEndpoint> real;
    uint16_t local_port = 0;
    std::deque<PendingConn> accept_queue;
    std::optional<ConnMeta> meta;
    std::map<ServiceKey, EntryId> pinned;
    std::map<SockAddr, RealEndpoint> learned;
    std::deque<InboundDatagram> inbox;
  };
  struct App {
    AppIdentity id;
    std::map<uint32_t, Handle> handles;
    uint32_t next_handle = 1;
    uint16_t next_ephemeral = kEphemeralPortBase;
    std::map<ServiceKey, uint64_t> rr;
    uint64_t trap_messages = 0;
  };
  struct Established {
    UniqueFd fd;
    ConnMeta meta;
  };

  TrapReply do_bind(App& app, Handle& h, SockAddr requested, uint64_t now);
  TrapReply do_listen(App& app, Handle& h);
  Established do_connect(App& app, Handle* h, SockAddr dest);
  TrapReply do_accept(App& app, Handle& h, UniqueFd& out);
  TrapReply do_sendto(App& app, Handle& h, SockAddr dest, std::span<const uint8_t> payload);
  TrapReply do_recvfrom(Handle& h);
  void close_handle(App& app, uint32_t id, uint64_t now);

  ServiceKey resolve_dest(const App& app, SockAddr dest) const;
  std::vector<ServiceEntry> allowed_candidates(const App& app, const ServiceKey& key) const;
  uint16_t ephemeral_port(App& app);
  void ensure_datagram_endpoint(App& app, Handle& h);

  HostId local_;
  ServiceTable& table_;
  Transport& transport_;
  SelectionStrategy strategy_;
  std::map<AppId, App> apps_;
  std::map<RealEndpoint, std::pair<AppId, uint32_t>> by_real_;
  SwitchCounters counters_;
};

}  // namespace appnet
