#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>

#include "appnet/model.h"
#include "appnet/wire.h"

namespace appnet {

class ServiceTable;

/// Probe i of the AutoPool sequence for `name`: FNV-1a over the name bytes
/// followed by i as a big-endian u32, reduced mod 2^24.
uint32_t auto_pool_probe(std::string_view name, uint32_t i);
/// Probe i of the LinkLocal sequence for `app_id`, reduced mod 2^16.
uint32_t link_local_probe(std::string_view app_id, uint32_t i);

/// Returns the name currently holding a vip, if any.
using VipHolder = std::function<std::optional<std::string>(VirtualIp)>;

/// 240.x.y.z for `name`; skips 240.0.0.0 and vips held by a different name.
VirtualIp allocate_internal_ip(const std::string& name, const VipHolder& holder = {});
/// 169.254.x.y for an anonymous application; skips .0.0, .255.255 and taken values.
VirtualIp allocate_link_local(const AppId& app, const std::function<bool(VirtualIp)>& taken = {});

// --- DNS ------------------------------------------------------------------

inline constexpr uint16_t kDnsTypeA = 1;
inline constexpr uint16_t kDnsTypeAAAA = 28;
inline constexpr uint16_t kDnsClassIn = 1;
inline constexpr uint32_t kDnsTtl = 1;
inline constexpr uint16_t kDnsPort = 53;

enum class DnsRcode : uint8_t { NoError = 0, FormErr = 1, ServFail = 2, NXDomain = 3, NotImp = 4 };

struct DnsAnswer {
  DnsRcode rcode = DnsRcode::NoError;
  std::optional<VirtualIp> vip;
  uint32_t ttl = 0;
};

/// Logical answer for one question, resolved from the service table.
DnsAnswer dns_answer(const ServiceTable& table, std::string_view name, uint16_t qtype);

/// Full wire exchange: query bytes in, response bytes out (<= 512 bytes).
Bytes dns_respond(const ServiceTable& table, std::span<const uint8_t> query);

Bytes encode_dns_query(uint16_t id, std::string_view name, uint16_t qtype = kDnsTypeA);

struct DnsResponse {
  uint16_t id = 0;
  DnsRcode rcode = DnsRcode::NoError;
  std::optional<Ipv4> addr;
  uint32_t ttl = 0;
};
DnsResponse parse_dns_response(std::span<const uint8_t> bytes);

}  // namespace appnet
