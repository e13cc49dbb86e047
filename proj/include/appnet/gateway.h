#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "appnet/fd.h"
#include "appnet/model.h"
#include "appnet/service_table.h"

namespace appnet {

inline constexpr uint16_t kGatewayPortMin = 30000;
inline constexpr uint16_t kGatewayPortMax = 32767;
inline constexpr std::string_view kExternalGroup = "__external__";

struct GatewayBinding {
  enum class State { Active, Released };

  ServiceKey key;
  HostId gateway;
  uint16_t external_port = 0;
  State state = State::Active;
  TagSet admit;
};

/// Deterministic placement of an exposure: the lowest alive gateway id, the
/// requested port or the lowest free one in [30000, 32767].
/// Throws NoGateway, NoSuchService or PortUnavailable.
GatewayBinding expose(const ServiceKey& key, ExposeRequest request,
                      std::span<const HostId> alive_gateways,
                      std::span<const GatewayBinding> active, bool key_has_alive_entry,
                      const TagSet& admit = {});

GatewayBinding binding_from_entry(const ServiceEntry& e);
ServiceEntry entry_from_binding(const GatewayBinding& b, Ipv4 gateway_ip);

/// Identity the gateway uses when it connects inward for an external client.
AppIdentity synthetic_client(const GatewayBinding& b);

struct ProxyCounters {
  std::atomic<uint64_t> outbound_read{0};    // external -> gateway
  std::atomic<uint64_t> outbound_written{0}; // gateway -> service
  std::atomic<uint64_t> inbound_read{0};     // service -> gateway
  std::atomic<uint64_t> inbound_written{0};  // gateway -> external
};

/// Copies bytes both ways until both directions reach EOF. Blocks; runs
/// one worker per direction.
void proxy_session(UniqueFd external, UniqueFd upstream, ProxyCounters& counters);
/// Same, leaving the descriptors open.
void proxy_session(int external, int upstream, ProxyCounters& counters);

}  // namespace appnet
