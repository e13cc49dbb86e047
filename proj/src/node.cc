#include "appnet/node.h"

#include <algorithm>
#include <set>

#include "appnet/names.h"

namespace appnet {

namespace {

MemberRecord self_record(const NodeConfig& cfg, const HostId& id) {
  MemberRecord m;
  m.host = id;
  m.addr = cfg.bind;
  m.gateway = cfg.gateway;
  return m;
}

}  // namespace

Node::Node(NodeConfig cfg, Transport& transport)
    : cfg_(std::move(cfg)),
      id_(cfg_.id.value_or(HostId::random())),
      transport_(transport),
      table_(id_, cfg_.tomb_ttl),
      gossip_(self_record(cfg_, id_), table_, cfg_.gossip),
      switch_(id_, table_, transport, cfg_.strategy),
      rng_(cfg_.seed) {
  table_.set_change_sink([this](const ServiceEntry& e) { gossip_.enqueue_delta(e); });
  if (cfg_.join) gossip_.join(*cfg_.join);
}

VirtualIp Node::resolve_vip(const AppSpec& spec, const AppId& app) const {
  if (spec.vip) {
    if (spec.vip->ip().is_loopback() || classify_vip(*spec.vip) != PoolClass::UserVirtual)
      throw Error(Errc::InvalidVip, spec.vip->str() + " is reserved");
    if (spec.name) {
      auto existing = table_.lookup_name(*spec.name);
      if (existing && *existing != *spec.vip)
        throw Error(Errc::AmbiguousName, *spec.name + " already maps to " + existing->str());
    }
    return *spec.vip;
  }
  if (spec.name) {
    if (auto existing = table_.lookup_name(*spec.name)) return *existing;
    return allocate_internal_ip(*spec.name, [this](VirtualIp v) { return table_.name_of(v); });
  }
  std::set<uint32_t> taken;
  for (const auto& [_, a] : apps_) taken.insert(a.effective_vip.value());
  return allocate_link_local(app, [&](VirtualIp v) { return taken.count(v.value()) > 0; });
}

AppIdentity Node::add_app(const AppSpec& spec) {
  if (spec.name && !valid_dns_name(*spec.name)) throw Error(Errc::InvalidName, *spec.name);
  AppIdentity id;
  id.app_id = AppId{id_.hex().substr(0, 12) + "-" + std::to_string(next_app_)};
  id.host = id_;
  id.spec = spec;
  id.effective_vip = resolve_vip(spec, id.app_id);
  ++next_app_;
  switch_.add_app(id);
  registry_.register_app(id.app_id);
  apps_.emplace(id.app_id, id);
  return id;
}

size_t Node::remove_app(const AppId& app) {
  if (!switch_.has_app(app)) throw Error(Errc::UnknownApp, app.value);
  size_t alive = 0;
  for (const auto& e : table_.entries())
    if (e.alive() && e.host == id_ && e.app_id == app) ++alive;
  switch_.remove_app(app, now_);
  table_.tombstone_app(app, now_);
  registry_.unregister_app(app);
  apps_.erase(app);
  return alive;
}

std::vector<AppIdentity> Node::apps() const {
  std::vector<AppIdentity> out;
  for (const auto& [_, a] : apps_) out.push_back(a);
  return out;
}

std::unique_ptr<TrapChannel> Node::attach(const AppId& app) {
  registry_.attach(app);
  return std::make_unique<InProcessChannel>(*this, app);
}

ServedReply Node::serve(const AppId& app, std::span<const uint8_t> request) {
  ServedReply out;
  TrapResponse res;
  if (!registry_.attached(app) || !switch_.has_app(app)) {
    res.reply.error = Errc::AttachFailed;
  } else {
    try {
      TrapRequest req = decode_request(request);
      res = switch_.handle(app, req, now_);
    } catch (const Error& e) {
      res.reply.error = e.code();
    }
  }
  if (observer_) observer_(app, res.reply);
  out.reply = encode_reply(res.reply);
  out.transferred = std::move(res.transferred);
  return out;
}

std::vector<WireOut> Node::encode(std::vector<Outgoing> out) {
  std::vector<WireOut> wires;
  wires.reserve(out.size());
  for (auto& o : out) {
    WireOut w;
    w.to = o.to;
    w.addr = o.addr;
    w.kind = o.env.kind;
    w.bytes = encode_envelope(o.env);
    w.reliable = o.reliable;
    wires.push_back(std::move(w));
  }
  return wires;
}

std::vector<WireOut> Node::tick(uint64_t round) {
  now_ = round;
  auto out = gossip_.tick(round, rng_);
  table_.gc_tombstones(round);
  reconcile_gateway();
  return encode(std::move(out));
}

std::vector<WireOut> Node::on_envelope(std::span<const uint8_t> bytes, RealEndpoint from) {
  GossipEnvelope env;
  try {
    env = decode_envelope(bytes);
  } catch (const Error&) {
    gossip_.count_decode_error();
    return {};
  }
  auto res = gossip_.handle_envelope(env, from, now_);
  reconcile_gateway();
  return encode(std::move(res.out));
}

void Node::reconcile_gateway() {
  if (!cfg_.gateway) return;
  const auto gateways = gossip_.alive_gateways();
  const auto exposures = table_.alive(EntryKind::Exposure);

  // Release bindings whose service vanished or that a lower gateway also holds.
  for (const auto& x : exposures) {
    if (x.host != id_) continue;
    bool service_alive = !table_.lookup(x.key).empty();
    bool shadowed = std::any_of(exposures.begin(), exposures.end(), [&](const ServiceEntry& o) {
      return o.key == x.key && o.host < id_ &&
             std::binary_search(gateways.begin(), gateways.end(), o.host);
    });
    if (!service_alive || shadowed) table_.tombstone_entry(x.id(), now_);
  }

  if (gateways.empty() || gateways.front() != id_) return;

  const auto services = table_.alive(EntryKind::Service);
  std::map<ServiceKey, const ServiceEntry*> wanted;
  for (const auto& e : services)
    if (e.expose) wanted.emplace(e.key, &e);
  if (wanted.empty()) return;

  const auto current = table_.alive(EntryKind::Exposure);
  std::vector<GatewayBinding> active;
  for (const auto& x : current) active.push_back(binding_from_entry(x));
  for (const auto& [key, svc] : wanted) {
    bool placed = std::any_of(current.begin(), current.end(),
                              [&](const ServiceEntry& x) { return x.key == key; });
    if (placed) continue;
    try {
      GatewayBinding b = expose(key, *svc->expose, gateways, active, true, svc->tags);
      ServiceEntry entry = entry_from_binding(b, transport_.host_ip());
      entry.stamp = now_;
      table_.insert_local(entry);
      active.push_back(b);
    } catch (const Error&) {
      ++exposure_failures_;
    }
  }
}

std::vector<GatewayBinding> Node::gateway_bindings() const {
  std::vector<GatewayBinding> out;
  for (const auto& x : table_.alive(EntryKind::Exposure))
    if (x.host == id_) out.push_back(binding_from_entry(x));
  return out;
}

UniqueFd Node::gateway_connect(uint16_t external_port, ConnMeta* meta) {
  for (const auto& b : gateway_bindings()) {
    if (b.external_port != external_port) continue;
    return switch_.connect_as(synthetic_client(b), b.key, meta);
  }
  throw Error(Errc::NoSuchService, "nothing exposed on port " + std::to_string(external_port));
}

}  // namespace appnet
