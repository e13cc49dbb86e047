#include "appnet/gateway.h"

#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <set>
#include <thread>

#include "appnet/names.h"

namespace appnet {

GatewayBinding expose(const ServiceKey& key, ExposeRequest request,
                      std::span<const HostId> alive_gateways,
                      std::span<const GatewayBinding> active, bool key_has_alive_entry,
                      const TagSet& admit) {
  if (alive_gateways.empty()) throw Error(Errc::NoGateway);
  if (!key_has_alive_entry) throw Error(Errc::NoSuchService, "nothing to expose at " + key.str());
  HostId gw = *std::min_element(alive_gateways.begin(), alive_gateways.end());

  std::set<uint16_t> used;
  for (const auto& b : active)
    if (b.gateway == gw && b.state == GatewayBinding::State::Active) used.insert(b.external_port);

  GatewayBinding out;
  out.key = key;
  out.gateway = gw;
  out.admit = admit;
  if (request.port) {
    if (used.count(request.port))
      throw Error(Errc::PortUnavailable, "port " + std::to_string(request.port) + " is taken");
    out.external_port = request.port;
    return out;
  }
  for (uint32_t p = kGatewayPortMin; p <= kGatewayPortMax; ++p) {
    if (!used.count(static_cast<uint16_t>(p))) {
      out.external_port = static_cast<uint16_t>(p);
      return out;
    }
  }
  throw Error(Errc::PortUnavailable, "gateway port range exhausted");
}

GatewayBinding binding_from_entry(const ServiceEntry& e) {
  GatewayBinding b;
  b.key = e.key;
  b.gateway = e.host;
  b.external_port = e.real.port;
  b.state = e.alive() ? GatewayBinding::State::Active : GatewayBinding::State::Released;
  b.admit = e.tags;
  return b;
}

ServiceEntry entry_from_binding(const GatewayBinding& b, Ipv4 gateway_ip) {
  ServiceEntry e;
  e.kind = EntryKind::Exposure;
  e.key = b.key;
  e.real = RealEndpoint{gateway_ip, b.external_port};
  e.host = b.gateway;
  e.app_id = AppId{"gw-" + std::to_string(b.external_port)};
  e.tags = b.admit;
  return e;
}

AppIdentity synthetic_client(const GatewayBinding& b) {
  AppIdentity id;
  id.app_id = AppId{"gw-" + b.gateway.hex().substr(0, 12) + "-" + std::to_string(b.external_port)};
  id.host = b.gateway;
  id.spec.tags.add(kPolicyKey, kExternalGroup);
  if (const auto* grp = b.admit.values(kPolicyKey))
    for (const auto& v : *grp) id.spec.tags.add(kPolicyKey, v);
  id.effective_vip = allocate_link_local(id.app_id);
  return id;
}

namespace {

void pump(int from, int to, std::atomic<uint64_t>& read_count, std::atomic<uint64_t>& write_count) {
  char buf[64 * 1024];
  for (;;) {
    ssize_t n = ::read(from, buf, sizeof buf);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) break;
    read_count += static_cast<uint64_t>(n);
    ssize_t off = 0;
    while (off < n) {
      ssize_t w = ::send(to, buf + off, static_cast<size_t>(n - off), MSG_NOSIGNAL);
      if (w < 0 && errno == EINTR) continue;
      if (w <= 0) {
        ::shutdown(from, SHUT_RD);
        ::shutdown(to, SHUT_WR);
        return;
      }
      off += w;
      write_count += static_cast<uint64_t>(w);
    }
  }
  ::shutdown(to, SHUT_WR);
}

}  // namespace

void proxy_session(UniqueFd external, UniqueFd upstream, ProxyCounters& counters) {
  proxy_session(external.get(), upstream.get(), counters);
}

void proxy_session(int ext, int up, ProxyCounters& counters) {
  std::thread back([&] { pump(up, ext, counters.inbound_read, counters.inbound_written); });
  pump(ext, up, counters.outbound_read, counters.outbound_written);
  back.join();
}

}  // namespace appnet
