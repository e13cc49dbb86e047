#include "appnet/model.h"

#include <cctype>
#include <charconv>
#include <cstdio>
#include <random>

#include "appnet/hash.h"

namespace appnet {

std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::InvalidVip: return "InvalidVip";
    case Errc::InvalidTag: return "InvalidTag";
    case Errc::InvalidName: return "InvalidName";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::DuplicateAppBinding: return "DuplicateAppBinding";
    case Errc::AmbiguousName: return "AmbiguousName";
    case Errc::DecodeError: return "DecodeError";
    case Errc::AttachFailed: return "AttachFailed";
    case Errc::AddrInUse: return "AddrInUse";
    case Errc::AddrNotAvailable: return "AddrNotAvailable";
    case Errc::Unidentified: return "Unidentified";
    case Errc::NoSuchService: return "NoSuchService";
    case Errc::Denied: return "Denied";
    case Errc::ConnRefused: return "ConnRefused";
    case Errc::NotConnected: return "NotConnected";
    case Errc::MessageTooLong: return "MessageTooLong";
    case Errc::PoolExhausted: return "PoolExhausted";
    case Errc::NoGateway: return "NoGateway";
    case Errc::PortUnavailable: return "PortUnavailable";
    case Errc::UnknownApp: return "UnknownApp";
    case Errc::BadHandle: return "BadHandle";
    case Errc::WouldBlock: return "WouldBlock";
    case Errc::BindFailed: return "BindFailed";
    case Errc::JoinUnreachable: return "JoinUnreachable";
    case Errc::AssertionFailed: return "AssertionFailed";
    case Errc::Io: return "Io";
  }
  return "Unknown";
}

// --- HostId ---------------------------------------------------------------

HostId HostId::random() {
  std::random_device rd;
  HostId id;
  for (size_t i = 0; i < id.bytes.size(); i += 4) {
    uint32_t r = rd();
    for (size_t j = 0; j < 4; ++j) id.bytes[i + j] = static_cast<uint8_t>(r >> (8 * j));
  }
  return id;
}

HostId HostId::from_seed(uint64_t seed, std::string_view label) {
  Rng rng(fnv1a64(label, mix64(seed)));
  HostId id;
  for (size_t i = 0; i < id.bytes.size(); i += 8) {
    uint64_t r = rng.next();
    for (size_t j = 0; j < 8; ++j) id.bytes[i + j] = static_cast<uint8_t>(r >> (8 * j));
  }
  return id;
}

std::optional<HostId> HostId::parse(std::string_view hex) {
  if (hex.size() != 32) return std::nullopt;
  HostId id;
  for (size_t i = 0; i < 16; ++i) {
    unsigned v = 0;
    auto [p, ec] = std::from_chars(hex.data() + 2 * i, hex.data() + 2 * i + 2, v, 16);
    if (ec != std::errc() || p != hex.data() + 2 * i + 2) return std::nullopt;
    id.bytes[i] = static_cast<uint8_t>(v);
  }
  return id;
}

std::string HostId::hex() const {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(32);
  for (uint8_t b : bytes) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0xf]);
  }
  return out;
}

bool HostId::is_zero() const {
  for (uint8_t b : bytes)
    if (b) return false;
  return true;
}

// --- addresses ------------------------------------------------------------

std::optional<Ipv4> Ipv4::parse(std::string_view s) {
  uint32_t value = 0;
  const char* p = s.data();
  const char* end = s.data() + s.size();
  for (int octet = 0; octet < 4; ++octet) {
    if (octet > 0) {
      if (p == end || *p != '.') return std::nullopt;
      ++p;
    }
    if (p == end || !std::isdigit(static_cast<unsigned char>(*p))) return std::nullopt;
    unsigned v = 0;
    auto [next, ec] = std::from_chars(p, end, v);
    if (ec != std::errc() || v > 255 || next - p > 3) return std::nullopt;
    value = value << 8 | v;
    p = next;
  }
  if (p != end) return std::nullopt;
  return Ipv4{value};
}

std::string Ipv4::str() const {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%u.%u.%u.%u", value >> 24, (value >> 16) & 0xff,
                (value >> 8) & 0xff, value & 0xff);
  return buf;
}

VirtualIp::VirtualIp(uint32_t addr) : addr_(addr) {
  if (addr == 0 || addr == 0xFFFFFFFF) throw Error(Errc::InvalidVip, "vip cannot be " + ip().str());
}

VirtualIp VirtualIp::parse(std::string_view s) {
  auto ip = Ipv4::parse(s);
  if (!ip) throw Error(Errc::InvalidVip, "malformed address '" + std::string(s) + "'");
  return VirtualIp(*ip);
}

PoolClass classify_vip(VirtualIp addr) {
  if ((addr.value() & 0xFFFF0000) == kLinkLocalBase) return PoolClass::LinkLocal;
  if ((addr.value() & 0xFF000000) == kAutoPoolBase) return PoolClass::AutoPool;
  return PoolClass::UserVirtual;
}

std::string_view pool_name(PoolClass pool) {
  switch (pool) {
    case PoolClass::UserVirtual: return "UserVirtual";
    case PoolClass::AutoPool: return "AutoPool";
    case PoolClass::LinkLocal: return "LinkLocal";
  }
  return "?";
}

namespace {

std::optional<std::pair<Ipv4, uint16_t>> parse_ip_port(std::string_view s) {
  auto colon = s.rfind(':');
  if (colon == std::string_view::npos) return std::nullopt;
  auto ip = Ipv4::parse(s.substr(0, colon));
  if (!ip) return std::nullopt;
  auto ps = s.substr(colon + 1);
  unsigned port = 0;
  auto [p, ec] = std::from_chars(ps.data(), ps.data() + ps.size(), port);
  if (ps.empty() || ec != std::errc() || p != ps.data() + ps.size() || port > 65535)
    return std::nullopt;
  return std::pair{*ip, static_cast<uint16_t>(port)};
}

}  // namespace

std::string ServiceKey::str() const { return vip.str() + ":" + std::to_string(port); }
std::string RealEndpoint::str() const { return host_ip.str() + ":" + std::to_string(port); }
std::string SockAddr::str() const { return ip.str() + ":" + std::to_string(port); }

std::optional<RealEndpoint> RealEndpoint::parse(std::string_view s) {
  auto p = parse_ip_port(s);
  if (!p) return std::nullopt;
  return RealEndpoint{p->first, p->second};
}

std::optional<SockAddr> SockAddr::parse(std::string_view s) {
  auto p = parse_ip_port(s);
  if (!p) return std::nullopt;
  return SockAddr{p->first, p->second};
}

// --- tags -----------------------------------------------------------------

namespace {

bool valid_tag_key(std::string_view k) {
  if (k.empty() || k.size() > 64) return false;
  for (char c : k)
    if (c == '=' || std::isspace(static_cast<unsigned char>(c))) return false;
  return true;
}

}  // namespace

void TagSet::add(std::string_view key, std::string_view value) {
  if (!valid_tag_key(key)) throw Error(Errc::InvalidTag, "bad tag key '" + std::string(key) + "'");
  if (value.empty() || value.size() > 256)
    throw Error(Errc::InvalidTag, "bad tag value for '" + std::string(key) + "'");
  entries_[std::string(key)].insert(std::string(value));
}

void TagSet::merge(const TagSet& other) {
  for (const auto& [k, vs] : other.entries_) entries_[k].insert(vs.begin(), vs.end());
}

const std::set<std::string>* TagSet::values(std::string_view key) const {
  auto it = entries_.find(std::string(key));
  return it == entries_.end() ? nullptr : &it->second;
}

std::vector<std::string> TagSet::pairs() const {
  std::vector<std::string> out;
  for (const auto& [k, vs] : entries_)
    for (const auto& v : vs) out.push_back(k + "=" + v);
  return out;
}

std::string TagSet::str() const {
  if (entries_.empty()) return "-";
  std::string out;
  for (const auto& p : pairs()) {
    if (!out.empty()) out += ',';
    out += p;
  }
  return out;
}

TagSet normalize_tags(std::span<const std::string> pairs) {
  TagSet tags;
  for (const auto& p : pairs) {
    auto eq = p.find('=');
    if (eq == std::string::npos || p.find('=', eq + 1) != std::string::npos)
      throw Error(Errc::InvalidTag, "expected key=value, got '" + p + "'");
    tags.add(std::string_view(p).substr(0, eq), std::string_view(p).substr(eq + 1));
  }
  return tags;
}

// --- app spec -------------------------------------------------------------

bool valid_dns_name(std::string_view name) {
  if (name.empty() || name.size() > 253) return false;
  size_t label = 0;
  char prev = '.';
  for (char c : name) {
    if (c == '.') {
      if (label == 0 || prev == '-') return false;
      label = 0;
    } else if (std::isalnum(static_cast<unsigned char>(c)) || c == '-') {
      if (label == 0 && c == '-') return false;
      if (++label > 63) return false;
    } else {
      return false;
    }
    prev = c;
  }
  return label > 0 && prev != '-';
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::optional<uint16_t> parse_port(std::string_view s) {
  unsigned v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size() || v == 0 || v > 65535)
    return std::nullopt;
  return static_cast<uint16_t>(v);
}

}  // namespace

AppSpec parse_app_spec(std::span<const std::string> args) {
  AppSpec spec;
  std::vector<std::string> tag_pairs;
  auto value_of = [&](size_t& i) -> const std::string& {
    if (i + 1 >= args.size()) throw Error(Errc::InvalidArgument, args[i] + " requires a value");
    return args[++i];
  };
  for (size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a == "--name") {
      const auto& n = value_of(i);
      if (!valid_dns_name(n)) throw Error(Errc::InvalidName, "invalid name '" + n + "'");
      spec.name = lower(n);
    } else if (a == "--ip") {
      VirtualIp vip = VirtualIp::parse(value_of(i));
      if (classify_vip(vip) != PoolClass::UserVirtual)
        throw Error(Errc::InvalidVip, vip.str() + " is in the reserved " +
                                          std::string(pool_name(classify_vip(vip))) + " pool");
      if (vip.ip().is_loopback())
        throw Error(Errc::InvalidVip, vip.str() + " is a loopback address");
      spec.vip = vip;
    } else if (a == "--tag") {
      tag_pairs.push_back(value_of(i));
    } else if (a == "--expose") {
      ExposeRequest req;
      if (i + 1 < args.size() && !args[i + 1].starts_with("--")) {
        const auto& v = args[++i];
        if (v != "auto") {
          auto port = parse_port(v);
          if (!port) throw Error(Errc::InvalidArgument, "invalid expose port '" + v + "'");
          req.port = *port;
        }
      }
      spec.expose = req;
    } else {
      throw Error(Errc::InvalidArgument, "unknown flag '" + a + "'");
    }
  }
  spec.tags = normalize_tags(tag_pairs);
  return spec;
}

std::vector<std::string> render_app_spec(const AppSpec& spec) {
  std::vector<std::string> out;
  if (spec.name) {
    out.push_back("--name");
    out.push_back(*spec.name);
  }
  if (spec.vip) {
    out.push_back("--ip");
    out.push_back(spec.vip->str());
  }
  for (auto& p : spec.tags.pairs()) {
    out.push_back("--tag");
    out.push_back(std::move(p));
  }
  if (spec.expose) {
    out.push_back("--expose");
    out.push_back(spec.expose->port ? std::to_string(spec.expose->port) : "auto");
  }
  return out;
}

}  // namespace appnet
