#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "appnet/error.h"

namespace appnet {

/// Opaque 16-byte node identifier, rendered as lowercase hex.
struct HostId {
  std::array<uint8_t, 16> bytes{};

  static HostId random();
  /// Deterministic id for simulated nodes.
  static HostId from_seed(uint64_t seed, std::string_view label);
  static std::optional<HostId> parse(std::string_view hex);

  std::string hex() const;
  bool is_zero() const;

  auto operator<=>(const HostId&) const = default;
};

/// Plain IPv4 address value; no invariants beyond 32 bits.
struct Ipv4 {
  uint32_t value = 0;

  static std::optional<Ipv4> parse(std::string_view s);
  std::string str() const;

  bool is_loopback() const { return (value >> 24) == 127; }
  bool is_any() const { return value == 0; }

  auto operator<=>(const Ipv4&) const = default;
};

/// Tag key consulted by the segmentation policy.
inline constexpr std::string_view kPolicyKey = "grp";

enum class PoolClass { UserVirtual, AutoPool, LinkLocal };

inline constexpr uint32_t kAutoPoolBase = 0xF0000000;   // 240.0.0.0/8
inline constexpr uint32_t kLinkLocalBase = 0xA9FE0000;  // 169.254.0.0/16

/// Network-independent application identifier in IPv4 form.
class VirtualIp {
 public:
  /// Throws InvalidVip for 0.0.0.0 and 255.255.255.255.
  explicit VirtualIp(uint32_t addr);
  explicit VirtualIp(Ipv4 addr) : VirtualIp(addr.value) {}

  static VirtualIp parse(std::string_view s);

  uint32_t value() const { return addr_; }
  Ipv4 ip() const { return Ipv4{addr_}; }
  std::string str() const { return ip().str(); }

  auto operator<=>(const VirtualIp&) const = default;

 private:
  uint32_t addr_;
};

PoolClass classify_vip(VirtualIp addr);
std::string_view pool_name(PoolClass pool);

/// The port an application asked for, scoped by its virtual ip.
struct ServiceKey {
  VirtualIp vip{1};
  uint16_t port = 1;

  std::string str() const;
  auto operator<=>(const ServiceKey&) const = default;
};

/// Where a service actually listens on the host network.
struct RealEndpoint {
  Ipv4 host_ip;
  uint16_t port = 0;

  std::string str() const;
  static std::optional<RealEndpoint> parse(std::string_view s);
  auto operator<=>(const RealEndpoint&) const = default;
};

/// Virtual (ip, port) pair as seen by applications.
struct SockAddr {
  Ipv4 ip;
  uint16_t port = 0;

  std::string str() const;
  static std::optional<SockAddr> parse(std::string_view s);
  auto operator<=>(const SockAddr&) const = default;
};

/// key=value attributes; each key holds a non-empty set of values.
class TagSet {
 public:
  using Map = std::map<std::string, std::set<std::string>>;

  /// Throws InvalidTag on a malformed key or value.
  void add(std::string_view key, std::string_view value);
  void merge(const TagSet& other);

  bool empty() const { return entries_.empty(); }
  bool has(std::string_view key) const { return entries_.find(std::string(key)) != entries_.end(); }
  const std::set<std::string>* values(std::string_view key) const;
  const Map& entries() const { return entries_; }

  /// Sorted "key=value" strings, one per value.
  std::vector<std::string> pairs() const;
  /// Comma-joined pairs, "-" when empty.
  std::string str() const;

  bool operator==(const TagSet&) const = default;

 private:
  Map entries_;
};

TagSet normalize_tags(std::span<const std::string> pairs);

/// External exposure request; port 0 means "auto".
struct ExposeRequest {
  uint16_t port = 0;
  bool operator==(const ExposeRequest&) const = default;
};

struct AppSpec {
  std::optional<std::string> name;
  std::optional<VirtualIp> vip;
  TagSet tags;
  std::optional<ExposeRequest> expose;

  bool anonymous() const { return !name && !vip; }
  bool operator==(const AppSpec&) const = default;
};

AppSpec parse_app_spec(std::span<const std::string> args);
std::vector<std::string> render_app_spec(const AppSpec& spec);
bool valid_dns_name(std::string_view name);

struct AppId {
  std::string value;
  auto operator<=>(const AppId&) const = default;
};

struct AppIdentity {
  AppId app_id;
  HostId host;
  AppSpec spec;
  VirtualIp effective_vip{1};
};

}  // namespace appnet
