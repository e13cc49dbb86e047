#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "appnet/gateway.h"
#include "appnet/gossip.h"
#include "appnet/hash.h"
#include "appnet/model.h"
#include "appnet/service_table.h"
#include "appnet/switch.h"
#include "appnet/trap.h"

namespace appnet {

inline constexpr uint16_t kGossipPort = 7946;

struct NodeConfig {
  RealEndpoint bind;  // gossip listener
  std::optional<RealEndpoint> join;
  bool gateway = false;
  SelectionStrategy strategy;
  std::filesystem::path run_dir;
  GossipConfig gossip;
  uint64_t tomb_ttl = ServiceTable::kDefaultTombTtl;
  std::optional<HostId> id;  // random when absent
  uint64_t seed = 1;
};

/// An encoded gossip envelope ready for the network.
struct WireOut {
  HostId to;
  RealEndpoint addr;
  EnvelopeKind kind = EnvelopeKind::Ping;
  Bytes bytes;
  bool reliable = false;
};

/// Per-host composition: table, gossip, switch, sandboxes and the gateway
/// role. Not thread-safe; the owner serializes every call.
class Node : public TrapService {
 public:
  Node(NodeConfig cfg, Transport& transport);

  const HostId& id() const { return id_; }
  const NodeConfig& config() const { return cfg_; }

  AppIdentity add_app(const AppSpec& spec);
  /// Returns the number of entries tombstoned. Throws UnknownApp.
  size_t remove_app(const AppId& app);
  std::vector<AppIdentity> apps() const;
  const AppIdentity* app(const AppId& id) const {
    auto it = apps_.find(id);
    return it == apps_.end() ? nullptr : &it->second;
  }

  /// Generator end of an in-process trap channel for `app`.
  std::unique_ptr<TrapChannel> attach(const AppId& app);
  /// Marks the app's sandbox attached without creating a channel (the
  /// runtime serves the app over a Unix socket instead).
  void attach_external(const AppId& app) { registry_.attach(app); }
  void detach(const AppId& app) { registry_.detach(app); }

  ServedReply serve(const AppId& app, std::span<const uint8_t> request) override;
  /// Observes every decoded trap reply (identity scans).
  void set_reply_observer(std::function<void(const AppId&, const TrapReply&)> fn) {
    observer_ = std::move(fn);
  }

  std::vector<WireOut> tick(uint64_t round);
  std::vector<WireOut> on_envelope(std::span<const uint8_t> bytes, RealEndpoint from);

  /// Upstream connection for an external client arriving at `external_port`.
  UniqueFd gateway_connect(uint16_t external_port, ConnMeta* meta = nullptr);
  /// Active exposures placed on this node.
  std::vector<GatewayBinding> gateway_bindings() const;
  ProxyCounters& proxy_counters() { return proxy_; }

  uint64_t now() const { return now_; }
  ServiceTable& table() { return table_; }
  const ServiceTable& table() const { return table_; }
  Gossip& gossip() { return gossip_; }
  const Gossip& gossip() const { return gossip_; }
  Switch& sw() { return switch_; }
  Transport& transport() { return transport_; }
  const Switch& sw() const { return switch_; }
  uint64_t exposure_failures() const { return exposure_failures_; }

 private:
  std::vector<WireOut> encode(std::vector<Outgoing> out);
  void reconcile_gateway();
  VirtualIp resolve_vip(const AppSpec& spec, const AppId& app) const;

  NodeConfig cfg_;
  HostId id_;
  Transport& transport_;
  ServiceTable table_;
  Gossip gossip_;
  Switch switch_;
  SandboxRegistry registry_;
  std::map<AppId, AppIdentity> apps_;
  Rng rng_;
  uint64_t now_ = 0;
  uint64_t next_app_ = 1;
  ProxyCounters proxy_;
  uint64_t exposure_failures_ = 0;
  std::function<void(const AppId&, const TrapReply&)> observer_;
};

}  // namespace appnet
