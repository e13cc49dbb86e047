#include "appnet/names.h"

#include <cctype>

#include "appnet/hash.h"
#include "appnet/service_table.h"

namespace appnet {

namespace {

uint64_t probe_hash(std::string_view key, uint32_t i) {
  const uint8_t suffix[4] = {static_cast<uint8_t>(i >> 24), static_cast<uint8_t>(i >> 16),
                             static_cast<uint8_t>(i >> 8), static_cast<uint8_t>(i)};
  return fnv1a64(std::span<const uint8_t>(suffix), fnv1a64(key));
}

constexpr uint32_t kMaxProbes = 1u << 16;

}  // namespace

uint32_t auto_pool_probe(std::string_view name, uint32_t i) {
  return static_cast<uint32_t>(probe_hash(name, i) & 0xFFFFFF);
}

uint32_t link_local_probe(std::string_view app_id, uint32_t i) {
  return static_cast<uint32_t>(probe_hash(app_id, i) & 0xFFFF);
}

VirtualIp allocate_internal_ip(const std::string& name, const VipHolder& holder) {
  for (uint32_t i = 0; i < kMaxProbes; ++i) {
    uint32_t low = auto_pool_probe(name, i);
    if (low == 0) continue;
    VirtualIp vip(kAutoPoolBase | low);
    if (holder) {
      auto owner = holder(vip);
      if (owner && *owner != name) continue;
    }
    return vip;
  }
  throw Error(Errc::PoolExhausted, "no free AutoPool address for '" + name + "'");
}

VirtualIp allocate_link_local(const AppId& app, const std::function<bool(VirtualIp)>& taken) {
  for (uint32_t i = 0; i < kMaxProbes; ++i) {
    uint32_t low = link_local_probe(app.value, i);
    if (low == 0 || low == 0xFFFF) continue;
    VirtualIp vip(kLinkLocalBase | low);
    if (taken && taken(vip)) continue;
    return vip;
  }
  throw Error(Errc::PoolExhausted, "no free LinkLocal address");
}

// --- DNS ------------------------------------------------------------------

namespace {

std::string canonical(std::string_view name) {
  std::string out(name);
  if (!out.empty() && out.back() == '.') out.pop_back();
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

void encode_qname(ByteWriter& w, std::string_view name) {
  std::string n = canonical(name);
  size_t start = 0;
  while (start < n.size()) {
    size_t dot = n.find('.', start);
    if (dot == std::string::npos) dot = n.size();
    size_t len = dot - start;
    if (len == 0 || len > 63) throw Error(Errc::InvalidName, "bad DNS label in '" + n + "'");
    w.u8(static_cast<uint8_t>(len));
    w.raw(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(n.data() + start), len));
    start = dot + 1;
  }
  w.u8(0);
}

// Questions never use compression pointers.
std::string decode_qname(ByteReader& r) {
  std::string name;
  size_t total = 0;
  for (;;) {
    uint8_t len = r.u8();
    if (len == 0) break;
    if (len > 63) throw Error(Errc::DecodeError, "bad label");
    auto label = r.raw(len);
    total += len + 1;
    if (total > 255) throw Error(Errc::DecodeError, "name too long");
    if (!name.empty()) name.push_back('.');
    name.append(label.begin(), label.end());
  }
  return name;
}

Bytes header_only(uint16_t id, uint16_t flags, DnsRcode rcode) {
  ByteWriter w;
  w.u16(id);
  w.u16(static_cast<uint16_t>(0x8000 | (flags & 0x7900) | static_cast<uint16_t>(rcode)));
  w.u16(0);
  w.u16(0);
  w.u16(0);
  w.u16(0);
  return w.take();
}

}  // namespace

DnsAnswer dns_answer(const ServiceTable& table, std::string_view name, uint16_t qtype) {
  if (qtype != kDnsTypeA) return {DnsRcode::NotImp, std::nullopt, 0};
  std::optional<VirtualIp> vip;
  try {
    vip = table.lookup_name(canonical(name));
  } catch (const Error&) {
    return {DnsRcode::ServFail, std::nullopt, 0};
  }
  if (!vip) return {DnsRcode::NXDomain, std::nullopt, 0};
  return {DnsRcode::NoError, vip, kDnsTtl};
}

Bytes dns_respond(const ServiceTable& table, std::span<const uint8_t> query) {
  if (query.size() < 12) {
    uint16_t id = query.size() >= 2 ? static_cast<uint16_t>(query[0] << 8 | query[1]) : 0;
    return header_only(id, 0, DnsRcode::FormErr);
  }
  ByteReader r(query);
  uint16_t id = r.u16();
  uint16_t flags = r.u16();
  uint16_t qd = r.u16();
  r.u16();
  r.u16();
  r.u16();
  // Echo opcode and RD only.
  const uint16_t echo = flags & 0x7900;
  if (flags & 0x8000 || qd != 1) return header_only(id, echo, DnsRcode::FormErr);
  if ((flags >> 11) & 0xF) return header_only(id, echo, DnsRcode::NotImp);

  std::string name;
  uint16_t qtype = 0, qclass = 0;
  try {
    name = decode_qname(r);
    qtype = r.u16();
    qclass = r.u16();
  } catch (const Error&) {
    return header_only(id, echo, DnsRcode::FormErr);
  }

  DnsAnswer ans = qclass == kDnsClassIn ? dns_answer(table, name, qtype)
                                        : DnsAnswer{DnsRcode::NotImp, std::nullopt, 0};
  ByteWriter w;
  w.u16(id);
  w.u16(static_cast<uint16_t>(0x8000 | 0x0400 | echo | static_cast<uint16_t>(ans.rcode)));
  w.u16(1);
  w.u16(ans.vip ? 1 : 0);
  w.u16(0);
  w.u16(0);
  encode_qname(w, name);
  w.u16(qtype);
  w.u16(qclass);
  if (ans.vip) {
    w.u16(0xC00C);
    w.u16(kDnsTypeA);
    w.u16(kDnsClassIn);
    w.u32(ans.ttl);
    w.u16(4);
    w.u32(ans.vip->value());
  }
  return w.take();
}

Bytes encode_dns_query(uint16_t id, std::string_view name, uint16_t qtype) {
  ByteWriter w;
  w.u16(id);
  w.u16(0x0100);  // RD
  w.u16(1);
  w.u16(0);
  w.u16(0);
  w.u16(0);
  encode_qname(w, name);
  w.u16(qtype);
  w.u16(kDnsClassIn);
  return w.take();
}

DnsResponse parse_dns_response(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  DnsResponse out;
  out.id = r.u16();
  uint16_t flags = r.u16();
  out.rcode = static_cast<DnsRcode>(flags & 0xF);
  uint16_t qd = r.u16();
  uint16_t an = r.u16();
  r.u16();
  r.u16();
  for (uint16_t i = 0; i < qd; ++i) {
    decode_qname(r);
    r.u16();
    r.u16();
  }
  for (uint16_t i = 0; i < an; ++i) {
    uint8_t first = r.u8();
    if ((first & 0xC0) == 0xC0) {
      r.u8();
    } else if (first != 0) {
      r.raw(first);
      while (uint8_t len = r.u8()) r.raw(len);
    }
    uint16_t type = r.u16();
    r.u16();
    uint32_t ttl = r.u32();
    auto rdata = r.raw(r.u16());
    if (type == kDnsTypeA && rdata.size() == 4 && !out.addr) {
      out.addr = Ipv4{static_cast<uint32_t>(rdata[0]) << 24 | rdata[1] << 16 | rdata[2] << 8 |
                      rdata[3]};
      out.ttl = ttl;
    }
  }
  return out;
}

}  // namespace appnet
