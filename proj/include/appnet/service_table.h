#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "appnet/model.h"
#include "appnet/wire.h"

namespace appnet {

enum class EntryKind : uint8_t {
  Service = 0,
  // Gateway binding annotation: key is the exposed service, real is the
  // gateway's external endpoint, host is the gateway, tags are admit tags.
  Exposure = 1,
};

enum class EntryState : uint8_t { Alive = 0, Tombstone = 1 };

struct EntryId {
  EntryKind kind = EntryKind::Service;
  ServiceKey key;
  HostId host;
  AppId app;

  auto operator<=>(const EntryId&) const = default;
};

struct ServiceEntry {
  EntryKind kind = EntryKind::Service;
  ServiceKey key;
  RealEndpoint real;
  HostId host;
  AppId app_id;
  TagSet tags;
  std::optional<std::string> name;
  uint64_t incarnation = 1;
  EntryState state = EntryState::Alive;
  // Node-local logical time of the last applied change; never transmitted.
  uint64_t stamp = 0;
  std::optional<ExposeRequest> expose;

  EntryId id() const { return EntryId{kind, key, host, app_id}; }
  bool alive() const { return state == EntryState::Alive; }

  // Field-wise equality excluding the node-local stamp.
  bool same_version(const ServiceEntry& o) const;
};

enum class MergeOutcome { Applied, Stale, Refuted };

struct DigestItem {
  EntryId id;
  uint64_t incarnation = 0;
};

void encode_entry(ByteWriter& w, const ServiceEntry& e);
ServiceEntry decode_entry(ByteReader& r);
void encode_entry_id(ByteWriter& w, const EntryId& id);
EntryId decode_entry_id(ByteReader& r);

/// Replicated registry of (vip, port) -> real endpoints. Single-owner; not
/// thread-safe.
class ServiceTable {
 public:
  using ChangeSink = std::function<void(const ServiceEntry&)>;

  static constexpr uint64_t kDefaultTombTtl = 30;

  explicit ServiceTable(HostId local, uint64_t tomb_ttl = kDefaultTombTtl);

  /// Called with every entry whose state this table changed; the node feeds
  /// these into gossip dissemination.
  void set_change_sink(ChangeSink sink) { sink_ = std::move(sink); }

  MergeOutcome insert_local(ServiceEntry entry);
  MergeOutcome merge_remote(const ServiceEntry& entry, uint64_t now);

  /// Alive service entries for `key`, ordered by (host, app).
  std::vector<ServiceEntry> lookup(const ServiceKey& key) const;
  std::optional<VirtualIp> lookup_name(const std::string& name) const;
  /// Name recorded for `vip` by any Alive entry, if any.
  std::optional<std::string> name_of(VirtualIp vip) const;

  size_t tombstone_host(const HostId& host, uint64_t now);
  size_t tombstone_app(const AppId& app, uint64_t now);
  bool tombstone_entry(const EntryId& id, uint64_t now);
  size_t gc_tombstones(uint64_t now);

  const ServiceEntry* find(const EntryId& id) const;
  std::vector<ServiceEntry> entries() const;
  std::vector<ServiceEntry> alive(EntryKind kind) const;
  std::vector<DigestItem> digest() const;
  /// Entries that are absent from, or newer than, `digest`.
  std::vector<ServiceEntry> newer_than(const std::vector<DigestItem>& digest) const;

  /// One line per service entry:
  /// vip:port \t real_ip:port \t host \t state \t incarnation \t name \t tags
  std::string dump() const;

  const HostId& local() const { return local_; }
  size_t size() const { return entries_.size(); }

 private:
  void changed(const ServiceEntry& e) {
    if (sink_) sink_(e);
  }

  HostId local_;
  uint64_t tomb_ttl_;
  std::map<EntryId, ServiceEntry> entries_;
  ChangeSink sink_;
};

}  // namespace appnet
