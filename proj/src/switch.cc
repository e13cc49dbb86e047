#include "appnet/switch.h"

#include <sys/socket.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <numeric>

#include "appnet/hash.h"
#include "appnet/names.h"

namespace appnet {

// --- preamble -------------------------------------------------------------

Bytes encode_preamble(const Preamble& p) {
  ByteWriter w;
  w.u32(kPreambleMagic);
  w.u8(kPreambleVersion);
  w.u32(p.vip.value);
  w.u16(p.port);
  return w.take();
}

std::optional<Preamble> decode_preamble(std::span<const uint8_t> bytes) {
  if (bytes.size() < kPreambleSize) return std::nullopt;
  ByteReader r(bytes.first(kPreambleSize));
  if (r.u32() != kPreambleMagic || r.u8() != kPreambleVersion) return std::nullopt;
  Preamble p;
  p.vip.value = r.u32();
  p.port = r.u16();
  if (p.vip.value == 0) return std::nullopt;
  return p;
}

// --- pure pieces ----------------------------------------------------------

PolicyDecision policy_allows(const TagSet& client_tags, const TagSet& server_tags) {
  const auto* server = server_tags.values(kPolicyKey);
  if (!server) return {true, {}};
  const auto* client = client_tags.values(kPolicyKey);
  if (client) {
    for (const auto& v : *client)
      if (server->count(v)) return {true, {}};
  }
  return {false, "no common grp"};
}

uint64_t rendezvous_score(const AppId& client, const ServiceKey& key, const ServiceEntry& cand,
                          uint64_t seed) {
  uint64_t h = fnv1a64(client.value);
  ByteWriter w;
  w.u8(0);
  w.u32(key.vip.value());
  w.u16(key.port);
  w.raw(cand.host.bytes);
  h = fnv1a64(w.bytes(), h);
  h = fnv1a64(cand.app_id.value, h);
  return mix64(h ^ seed);
}

std::vector<size_t> selection_order(const AppIdentity& client, const ServiceKey& key,
                                    std::span<const ServiceEntry> candidates,
                                    const SelectionStrategy& strategy, uint64_t rr_counter) {
  std::vector<size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), size_t{0});
  if (candidates.empty()) return order;
  if (strategy.mode == Strategy::RoundRobin) {
    std::rotate(order.begin(), order.begin() + static_cast<long>(rr_counter % candidates.size()),
                order.end());
    return order;
  }
  std::vector<uint64_t> scores(candidates.size());
  for (size_t i = 0; i < candidates.size(); ++i)
    scores[i] = rendezvous_score(client.app_id, key, candidates[i], strategy.seed);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  return order;
}

const ServiceEntry& select_endpoint(const AppIdentity& client, const ServiceKey& key,
                                    std::span<const ServiceEntry> candidates,
                                    const SelectionStrategy& strategy, uint64_t& rr_counter) {
  if (candidates.empty()) throw Error(Errc::NoSuchService);
  auto order = selection_order(client, key, candidates, strategy, rr_counter);
  if (strategy.mode == Strategy::RoundRobin) ++rr_counter;
  return candidates[order.front()];
}

SockAddr handle_name_query(const std::optional<ConnMeta>& meta, NameQuery which) {
  if (!meta) throw Error(Errc::NotConnected);
  return which == NameQuery::SockName ? meta->local_virtual : meta->peer_virtual;
}

// --- switch ---------------------------------------------------------------

Switch::Switch(HostId local, ServiceTable& table, Transport& transport, SelectionStrategy strategy)
    : local_(local), table_(table), transport_(transport), strategy_(strategy) {}

void Switch::add_app(const AppIdentity& app) {
  App a;
  a.id = app;
  apps_.emplace(app.app_id, std::move(a));
}

const AppIdentity* Switch::app(const AppId& id) const {
  auto it = apps_.find(id);
  return it == apps_.end() ? nullptr : &it->second.id;
}

void Switch::remove_app(const AppId& id, uint64_t now) {
  auto it = apps_.find(id);
  if (it == apps_.end()) return;
  std::vector<uint32_t> handles;
  for (const auto& [h, _] : it->second.handles) handles.push_back(h);
  for (uint32_t h : handles) close_handle(it->second, h, now);
  apps_.erase(it);
}

uint64_t Switch::trap_messages(const AppId& app) const {
  auto it = apps_.find(app);
  return it == apps_.end() ? 0 : it->second.trap_messages;
}

void Switch::count_trap_message(const AppId& app) {
  auto it = apps_.find(app);
  if (it != apps_.end()) ++it->second.trap_messages;
}

std::optional<ConnMeta> Switch::meta(const AppId& app, uint32_t handle) const {
  auto it = apps_.find(app);
  if (it == apps_.end()) return std::nullopt;
  auto h = it->second.handles.find(handle);
  if (h == it->second.handles.end()) return std::nullopt;
  return h->second.meta;
}

bool Switch::ready(const AppId& app, uint32_t handle) const {
  auto it = apps_.find(app);
  if (it == apps_.end()) return true;
  auto h = it->second.handles.find(handle);
  if (h == it->second.handles.end()) return true;
  return !h->second.accept_queue.empty() || !h->second.inbox.empty();
}

TrapResponse Switch::handle(const AppId& app_id, const TrapRequest& req, uint64_t now) {
  TrapResponse res;
  auto ait = apps_.find(app_id);
  if (ait == apps_.end()) {
    res.reply.error = Errc::UnknownApp;
    return res;
  }
  App& app = ait->second;
  ++app.trap_messages;
  try {
    if (req.op == TrapOp::Socket) {
      uint32_t id = app.next_handle++;
      Handle h;
      h.vh = VHandle{id, req.kind, HandleRole::Unbound};
      app.handles.emplace(id, std::move(h));
      res.reply.handle = id;
      return res;
    }
    auto hit = app.handles.find(req.handle);
    if (hit == app.handles.end()) throw Error(Errc::BadHandle);
    Handle& h = hit->second;
    switch (req.op) {
      case TrapOp::Socket:
        break;
      case TrapOp::Bind:
        res.reply = do_bind(app, h, *req.addr, now);
        break;
      case TrapOp::Listen:
        res.reply = do_listen(app, h);
        break;
      case TrapOp::Connect: {
        if (h.vh.role != HandleRole::Unbound && h.vh.role != HandleRole::Bound)
          throw Error(Errc::InvalidArgument, "handle cannot connect in its current state");
        if (h.vh.kind == SocketKind::Datagram) {
          ServiceKey key = resolve_dest(app, *req.addr);
          auto allowed = allowed_candidates(app, key);
          const ServiceEntry& pick =
              select_endpoint(app.id, key, allowed, strategy_, app.rr[key]);
          ensure_datagram_endpoint(app, h);
          h.pinned[key] = pick.id();
          h.meta = ConnMeta{SockAddr{app.id.effective_vip.ip(), h.local_port},
                            SockAddr{key.vip.ip(), key.port},
                            pick.host == local_ ? ChannelKind::Local : ChannelKind::Remote};
          h.vh.role = HandleRole::Connected;
          res.reply.addr = h.meta->peer_virtual;
          break;
        }
        Established est = do_connect(app, &h, *req.addr);
        h.meta = est.meta;
        h.vh.role = HandleRole::Connected;
        res.reply.addr = est.meta.peer_virtual;
        res.reply.handle_transfer = true;
        res.transferred = std::move(est.fd);
        break;
      }
      case TrapOp::Accept:
        res.reply = do_accept(app, h, res.transferred);
        break;
      case TrapOp::GetSockName:
        if (h.meta) {
          res.reply.addr = handle_name_query(h.meta, NameQuery::SockName);
        } else if (h.bound) {
          res.reply.addr = SockAddr{h.bound->vip.ip(), h.bound->port};
        } else if (h.local_port) {
          res.reply.addr = SockAddr{app.id.effective_vip.ip(), h.local_port};
        } else {
          throw Error(Errc::NotConnected);
        }
        break;
      case TrapOp::GetPeerName:
        res.reply.addr = handle_name_query(h.meta, NameQuery::PeerName);
        break;
      case TrapOp::SendTo:
        res.reply = do_sendto(app, h, *req.addr, req.payload);
        break;
      case TrapOp::RecvFrom:
        res.reply = do_recvfrom(h);
        break;
      case TrapOp::Close:
        close_handle(app, req.handle, now);
        break;
    }
  } catch (const Error& e) {
    res = TrapResponse{};
    res.reply.error = e.code();
  }
  return res;
}

ServiceKey Switch::resolve_dest(const App& app, SockAddr dest) const {
  if (dest.port == 0) throw Error(Errc::InvalidArgument, "destination port 0");
  // Loopback inside a distributed application reaches its own vip.
  if (dest.ip.is_loopback() || dest.ip.is_any()) return ServiceKey{app.id.effective_vip, dest.port};
  return ServiceKey{VirtualIp(dest.ip), dest.port};
}

std::vector<ServiceEntry> Switch::allowed_candidates(const App& app, const ServiceKey& key) const {
  auto cands = table_.lookup(key);
  if (cands.empty()) throw Error(Errc::NoSuchService, "no instances of " + key.str());
  std::vector<ServiceEntry> allowed;
  for (auto& c : cands)
    if (policy_allows(app.id.spec.tags, c.tags).allow) allowed.push_back(std::move(c));
  if (allowed.empty()) throw Error(Errc::Denied, "policy denies " + key.str());
  return allowed;
}

uint16_t Switch::ephemeral_port(App& app) {
  uint16_t p = app.next_ephemeral;
  app.next_ephemeral = p == 65535 ? kEphemeralPortBase : static_cast<uint16_t>(p + 1);
  return p;
}

TrapReply Switch::do_bind(App& app, Handle& h, SockAddr requested, uint64_t now) {
  if (h.vh.role != HandleRole::Unbound) throw Error(Errc::InvalidArgument, "already bound");
  if (app.id.spec.anonymous())
    throw Error(Errc::Unidentified, "an application without identity cannot serve");
  const VirtualIp vip = app.id.effective_vip;
  if (!requested.ip.is_any() && !requested.ip.is_loopback() && requested.ip != vip.ip())
    throw Error(Errc::AddrNotAvailable, requested.ip.str() + " is not this application's address");

  uint16_t port = requested.port;
  if (port == 0) {
    for (uint32_t p = kEphemeralPortBase; p <= 65535; ++p) {
      if (table_.lookup(ServiceKey{vip, static_cast<uint16_t>(p)}).empty()) {
        port = static_cast<uint16_t>(p);
        break;
      }
    }
    if (port == 0) throw Error(Errc::AddrInUse, "no free service port");
  }
  const ServiceKey key{vip, port};
  if (const ServiceEntry* e = table_.find(EntryId{EntryKind::Service, key, local_, app.id.app_id});
      e && e->alive())
    throw Error(Errc::AddrInUse, key.str() + " already bound by this application");

  RealEndpoint real = h.vh.kind == SocketKind::Stream ? transport_.open_stream_listener()
                                                      : transport_.open_datagram();
  ServiceEntry entry;
  entry.key = key;
  entry.real = real;
  entry.host = local_;
  entry.app_id = app.id.app_id;
  entry.tags = app.id.spec.tags;
  entry.name = app.id.spec.name;
  entry.expose = app.id.spec.expose;
  entry.stamp = now;
  try {
    table_.insert_local(entry);
  } catch (const Error&) {
    transport_.close_endpoint(real);
    throw Error(Errc::AddrInUse);
  }
  h.bound = key;
  h.real = real;
  h.local_port = port;
  h.vh.role = HandleRole::Bound;
  by_real_[real] = {app.id.app_id, h.vh.id};
  return {};
}

TrapReply Switch::do_listen(App&, Handle& h) {
  if (h.vh.kind != SocketKind::Stream || h.vh.role != HandleRole::Bound)
    throw Error(Errc::InvalidArgument, "listen requires a bound stream handle");
  h.vh.role = HandleRole::Listening;
  return {};
}

Switch::Established Switch::do_connect(App& app, Handle* h, SockAddr dest) {
  const ServiceKey key = resolve_dest(app, dest);
  auto allowed = allowed_candidates(app, key);
  uint64_t& rr = app.rr[key];
  auto order = selection_order(app.id, key, allowed, strategy_, rr);
  if (strategy_.mode == Strategy::RoundRobin) ++rr;

  const uint16_t client_port = h && h->bound ? h->local_port : ephemeral_port(app);
  if (h) h->local_port = client_port;
  const SockAddr self{app.id.effective_vip.ip(), client_port};
  const SockAddr peer{key.vip.ip(), key.port};

  for (size_t i = 0; i < order.size() && i < kMaxConnectAttempts; ++i) {
    const ServiceEntry& cand = allowed[order[i]];
    if (cand.host == local_) {
      auto target = by_real_.find(cand.real);
      if (target == by_real_.end()) continue;
      Handle& server = apps_.at(target->second.first).handles.at(target->second.second);
      if (server.vh.role != HandleRole::Listening) continue;
      int sv[2];
      if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0)
        throw Error(Errc::Io, std::string("socketpair: ") + std::strerror(errno));
      UniqueFd client_end(sv[0]);
      server.accept_queue.push_back(
          PendingConn{UniqueFd(sv[1]), ConnMeta{peer, self, ChannelKind::Local}});
      ++counters_.connects_local;
      return Established{std::move(client_end), ConnMeta{self, peer, ChannelKind::Local}};
    }
    try {
      UniqueFd fd = transport_.connect_stream(cand.real, Preamble{self.ip, self.port});
      ++counters_.connects_remote;
      return Established{std::move(fd), ConnMeta{self, peer, ChannelKind::Remote}};
    } catch (const Error& e) {
      if (e.code() != Errc::ConnRefused) throw;
    }
  }
  throw Error(Errc::ConnRefused, "no instance of " + key.str() + " accepted the connection");
}

UniqueFd Switch::connect_as(const AppIdentity& client, const ServiceKey& key, ConnMeta* meta) {
  auto it = apps_.find(client.app_id);
  if (it == apps_.end()) {
    add_app(client);
    it = apps_.find(client.app_id);
  }
  Established est = do_connect(it->second, nullptr, SockAddr{key.vip.ip(), key.port});
  if (meta) *meta = est.meta;
  return std::move(est.fd);
}

TrapReply Switch::do_accept(App& app, Handle& h, UniqueFd& out) {
  if (h.vh.role != HandleRole::Listening) throw Error(Errc::InvalidArgument, "not listening");
  if (h.accept_queue.empty()) throw Error(Errc::WouldBlock);
  PendingConn pc = std::move(h.accept_queue.front());
  h.accept_queue.pop_front();
  uint32_t id = app.next_handle++;
  Handle conn;
  conn.vh = VHandle{id, SocketKind::Stream, HandleRole::Connected};
  conn.meta = pc.meta;
  app.handles.emplace(id, std::move(conn));
  TrapReply r;
  r.handle = id;
  r.addr = pc.meta.peer_virtual;
  r.handle_transfer = true;
  out = std::move(pc.fd);
  return r;
}

void Switch::ensure_datagram_endpoint(App& app, Handle& h) {
  if (h.real) return;
  h.real = transport_.open_datagram();
  if (!h.local_port) h.local_port = ephemeral_port(app);
  by_real_[*h.real] = {app.id.app_id, h.vh.id};
}

TrapReply Switch::do_sendto(App& app, Handle& h, SockAddr dest, std::span<const uint8_t> payload) {
  if (h.vh.kind != SocketKind::Datagram) throw Error(Errc::InvalidArgument, "not a datagram handle");
  if (payload.size() > kMaxDatagram) throw Error(Errc::MessageTooLong);
  ensure_datagram_endpoint(app, h);

  Bytes wire = encode_preamble(Preamble{app.id.effective_vip.ip(), h.local_port});
  wire.insert(wire.end(), payload.begin(), payload.end());
  auto send = [&](RealEndpoint to, bool local) {
    ++counters_.datagrams_relayed;
    if (local)
      deliver_datagram(to, *h.real, wire);
    else
      transport_.send_datagram(*h.real, to, std::move(wire));
  };

  // Replies go back to whoever reached us.
  if (auto l = h.learned.find(dest); l != h.learned.end()) {
    send(l->second, l->second.host_ip == transport_.host_ip() && by_real_.count(l->second));
    return {};
  }

  const ServiceKey key = resolve_dest(app, dest);
  if (auto p = h.pinned.find(key); p != h.pinned.end()) {
    const ServiceEntry* e = table_.find(p->second);
    if (e && e->alive() && policy_allows(app.id.spec.tags, e->tags).allow) {
      send(e->real, e->host == local_);
      return {};
    }
    h.pinned.erase(p);
  }
  if (table_.lookup(key).empty() && key.port == kDnsPort) {
    ++counters_.dns_queries;
    h.inbox.push_back(InboundDatagram{dest, dns_respond(table_, payload)});
    return {};
  }
  auto allowed = allowed_candidates(app, key);
  const ServiceEntry& pick = select_endpoint(app.id, key, allowed, strategy_, app.rr[key]);
  h.pinned[key] = pick.id();
  send(pick.real, pick.host == local_);
  return {};
}

TrapReply Switch::do_recvfrom(Handle& h) {
  if (h.vh.kind != SocketKind::Datagram) throw Error(Errc::InvalidArgument, "not a datagram handle");
  if (h.inbox.empty()) throw Error(Errc::WouldBlock);
  InboundDatagram d = std::move(h.inbox.front());
  h.inbox.pop_front();
  TrapReply r;
  r.addr = d.from;
  r.payload = std::move(d.payload);
  return r;
}

bool Switch::deliver_stream(RealEndpoint local, UniqueFd conn, std::optional<Preamble> preamble) {
  if (!preamble) {
    ++counters_.refused_unidentified;
    return false;
  }
  auto target = by_real_.find(local);
  if (target == by_real_.end()) return false;
  Handle& h = apps_.at(target->second.first).handles.at(target->second.second);
  if (h.vh.role != HandleRole::Listening || !h.bound) return false;
  h.accept_queue.push_back(PendingConn{
      std::move(conn), ConnMeta{SockAddr{h.bound->vip.ip(), h.bound->port},
                                SockAddr{preamble->vip, preamble->port}, ChannelKind::Remote}});
  return true;
}

void Switch::deliver_datagram(RealEndpoint local, RealEndpoint from, std::span<const uint8_t> wire) {
  auto target = by_real_.find(local);
  auto preamble = decode_preamble(wire);
  if (target == by_real_.end() || !preamble) {
    ++counters_.datagrams_dropped;
    return;
  }
  Handle& h = apps_.at(target->second.first).handles.at(target->second.second);
  if (h.vh.kind != SocketKind::Datagram) {
    ++counters_.datagrams_dropped;
    return;
  }
  SockAddr src{preamble->vip, preamble->port};
  h.learned[src] = from;
  auto body = wire.subspan(kPreambleSize);
  h.inbox.push_back(InboundDatagram{src, Bytes(body.begin(), body.end())});
}

void Switch::close_handle(App& app, uint32_t id, uint64_t now) {
  auto it = app.handles.find(id);
  if (it == app.handles.end()) return;
  Handle& h = it->second;
  if (h.bound)
    table_.tombstone_entry(EntryId{EntryKind::Service, *h.bound, local_, app.id.app_id}, now);
  if (h.real) {
    by_real_.erase(*h.real);
    transport_.close_endpoint(*h.real);
  }
  app.handles.erase(it);
}

}  // namespace appnet
