#include "appnet/sim.h"

#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <sstream>

#include "appnet/names.h"
#include "json.hpp"

namespace appnet {

using nlohmann::json;

namespace {

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_all(int fd, const void* data, size_t n) {
  const auto* p = static_cast<const uint8_t*>(data);
  while (n) {
    ssize_t w = ::send(fd, p, n, MSG_NOSIGNAL);
    if (w < 0 && errno == EINTR) continue;
    if (w <= 0) throw Error(Errc::Io, std::string("write: ") + std::strerror(errno));
    p += w;
    n -= static_cast<size_t>(w);
  }
}

bool read_exact(int fd, void* data, size_t n) {
  auto* p = static_cast<uint8_t*>(data);
  while (n) {
    ssize_t r = ::read(fd, p, n);
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) return false;
    p += r;
    n -= static_cast<size_t>(r);
  }
  return true;
}

std::string channel_name(ChannelKind k) { return k == ChannelKind::Local ? "local" : "remote"; }

}  // namespace

// --- transport ----------------------------------------------------------------

RealEndpoint SimTransport::open_stream_listener() {
  RealEndpoint ep{ip_, next_port_++};
  net_.endpoints_.insert(ep);
  net_.ever_opened_.insert(ep);
  return ep;
}

RealEndpoint SimTransport::open_datagram() { return open_stream_listener(); }

void SimTransport::close_endpoint(RealEndpoint ep) { net_.endpoints_.erase(ep); }

UniqueFd SimTransport::connect_stream(RealEndpoint to, const Preamble& preamble) {
  auto dest = net_.node_at(to.host_ip);
  if (!dest || !net_.alive(*dest) || net_.blocked(node_, *dest) || !net_.endpoints_.count(to))
    throw Error(Errc::ConnRefused, to.str() + " unreachable");
  int sv[2];
  if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0)
    throw Error(Errc::Io, std::string("socketpair: ") + std::strerror(errno));
  UniqueFd client(sv[0]), server(sv[1]);
  Bytes pre = encode_preamble(preamble);
  write_all(client.get(), pre.data(), pre.size());
  Bytes got(kPreambleSize);
  if (!read_exact(server.get(), got.data(), got.size())) throw Error(Errc::ConnRefused);
  if (!net_.node(*dest).sw().deliver_stream(to, std::move(server), decode_preamble(got)))
    throw Error(Errc::ConnRefused, to.str() + " refused");
  return client;
}

void SimTransport::send_datagram(RealEndpoint from, RealEndpoint to, Bytes wire) {
  net_.enqueue(node_, from, to, std::move(wire), false, false);
}

// --- cluster ------------------------------------------------------------------

SimCluster::SimCluster(uint64_t seed, NetProfile net) : seed_(seed), net_(net), rng_(mix64(seed)) {}

SimCluster::~SimCluster() {
  // Applications hold channels into their nodes; drop them first.
  apps_.clear();
}

Node& SimCluster::start(const std::string& name, NodeOptions opts) {
  if (nodes_.count(name)) throw Error(Errc::InvalidArgument, "node " + name + " already started");
  const Ipv4 ip{0xAC1F0000u + static_cast<uint32_t>(nodes_.size() + 1)};  // 172.31.0.x
  SimNode sn;
  sn.name = name;
  sn.transport = std::make_unique<SimTransport>(*this, name, ip);
  NodeConfig cfg;
  cfg.bind = RealEndpoint{ip, kGossipPort};
  if (opts.join) cfg.join = RealEndpoint{ip_of(*opts.join), kGossipPort};
  cfg.gateway = opts.gateway;
  cfg.strategy = opts.strategy;
  cfg.id = HostId::from_seed(seed_, name);
  cfg.seed = fnv1a64(name, mix64(seed_));
  sn.node = std::make_unique<Node>(cfg, *sn.transport);
  sn.node->set_reply_observer([this](const AppId&, const TrapReply& r) { scan_reply(r); });
  by_ip_[ip.value] = name;
  Node& n = *sn.node;
  nodes_.emplace(name, std::move(sn));
  note(json{{"tick", tick_}, {"ev", "start"}, {"node", name}, {"id", n.id().hex()},
            {"gateway", opts.gateway}}
           .dump());
  return n;
}

Node& SimCluster::node(const std::string& name) {
  auto it = nodes_.find(name);
  if (it == nodes_.end()) throw Error(Errc::InvalidArgument, "unknown node " + name);
  return *it->second.node;
}

bool SimCluster::alive(const std::string& name) const {
  auto it = nodes_.find(name);
  return it != nodes_.end() && it->second.alive;
}

std::vector<std::string> SimCluster::alive_nodes() const {
  std::vector<std::string> out;
  for (const auto& [n, sn] : nodes_)
    if (sn.alive) out.push_back(n);
  return out;
}

Ipv4 SimCluster::ip_of(const std::string& name) const {
  auto it = nodes_.find(name);
  if (it == nodes_.end()) throw Error(Errc::InvalidArgument, "unknown node " + name);
  return it->second.transport->host_ip();
}

std::optional<std::string> SimCluster::node_at(Ipv4 ip) const {
  auto it = by_ip_.find(ip.value);
  if (it == by_ip_.end()) return std::nullopt;
  return it->second;
}

void SimCluster::crash(const std::string& name) {
  auto it = nodes_.find(name);
  if (it == nodes_.end()) throw Error(Errc::InvalidArgument, "unknown node " + name);
  it->second.alive = false;
  note(json{{"tick", tick_}, {"ev", "crash"}, {"node", name}}.dump());
}

void SimCluster::partition(const std::set<std::string>& a, const std::set<std::string>& b) {
  partitions_.emplace_back(a, b);
  note(json{{"tick", tick_}, {"ev", "partition"}, {"a", a}, {"b", b}}.dump());
}

void SimCluster::heal() {
  partitions_.clear();
  note(json{{"tick", tick_}, {"ev", "heal"}}.dump());
}

bool SimCluster::blocked(const std::string& a, const std::string& b) const {
  for (const auto& [x, y] : partitions_) {
    if ((x.count(a) && y.count(b)) || (x.count(b) && y.count(a))) return true;
  }
  return false;
}

void SimCluster::enqueue(const std::string& from, RealEndpoint src, RealEndpoint dst, Bytes bytes,
                         bool gossip, bool reliable) {
  ++sent_;
  if (!reliable && net_.loss > 0 && rng_.unit() < net_.loss) {
    ++dropped_;
    note(json{{"tick", tick_}, {"ev", "lost"}, {"from", from}, {"to", dst.str()}}.dump());
    return;
  }
  uint64_t lat = net_.latency_min;
  if (net_.latency_max > net_.latency_min) lat += rng_.below(net_.latency_max - net_.latency_min + 1);
  queue_.push(Message{tick_ + lat, msg_seq_++, from, src, dst, std::move(bytes), gossip});
}

void SimCluster::send_wires(const std::string& from, std::vector<WireOut> wires) {
  const RealEndpoint src = node(from).config().bind;
  for (auto& w : wires) {
    note(json{{"tick", tick_},
              {"ev", "send"},
              {"from", from},
              {"to", w.addr.str()},
              {"kind", envelope_kind_name(w.kind)},
              {"len", w.bytes.size()},
              {"hash", hex64(fnv1a64(w.bytes))}}
             .dump());
    enqueue(from, src, w.addr, std::move(w.bytes), true, w.reliable);
  }
}

void SimCluster::drain() {
  // Guards against a protocol bug turning into an endless same-tick loop.
  size_t budget = 1'000'000;
  while (!queue_.empty() && queue_.top().at <= tick_ && budget--) {
    Message m = queue_.top();
    queue_.pop();
    auto dest = node_at(m.dst.host_ip);
    if (!dest || !alive(*dest) || blocked(m.from, *dest)) {
      ++dropped_;
      continue;
    }
    Node& n = node(*dest);
    if (m.gossip) {
      if (m.dst != n.config().bind) continue;
      send_wires(*dest, n.on_envelope(m.bytes, m.src));
    } else {
      n.sw().deliver_datagram(m.dst, m.src, m.bytes);
    }
  }
}

void SimCluster::step() {
  ++tick_;
  for (auto& [name, sn] : nodes_) {
    if (!sn.alive) continue;
    send_wires(name, sn.node->tick(tick_));
  }
  drain();
}

void SimCluster::run_until(uint64_t tick) {
  while (tick_ < tick) step();
}

// --- applications ---------------------------------------------------------------

AppIdentity SimCluster::add_app(const std::string& node_name, const std::string& label,
                                const AppSpec& spec) {
  if (apps_.count(label)) throw Error(Errc::InvalidArgument, "app label " + label + " in use");
  Node& n = node(node_name);
  AppIdentity id = n.add_app(spec);
  SimApp a;
  a.node = node_name;
  a.id = id;
  a.sockets = std::make_unique<VirtualSockets>(n.attach(id.app_id));
  apps_.emplace(label, std::move(a));
  note(json{{"tick", tick_},
            {"ev", "add"},
            {"node", node_name},
            {"app", label},
            {"vip", id.effective_vip.str()},
            {"pool", pool_name(classify_vip(id.effective_vip))}}
           .dump());
  return id;
}

void SimCluster::remove_app(const std::string& label) {
  auto it = apps_.find(label);
  if (it == apps_.end()) throw Error(Errc::InvalidArgument, "unknown app " + label);
  const std::string node_name = it->second.node;
  const AppId id = it->second.id.app_id;
  apps_.erase(it);
  size_t n = node(node_name).remove_app(id);
  note(json{{"tick", tick_}, {"ev", "remove"}, {"app", label}, {"tombstoned", n}}.dump());
}

const AppIdentity& SimCluster::identity(const std::string& label) const {
  auto it = apps_.find(label);
  if (it == apps_.end()) throw Error(Errc::InvalidArgument, "unknown app " + label);
  return it->second.id;
}

std::string SimCluster::node_of(const std::string& label) const {
  auto it = apps_.find(label);
  if (it == apps_.end()) throw Error(Errc::InvalidArgument, "unknown app " + label);
  return it->second.node;
}

VirtualSockets& SimCluster::sockets(const std::string& label) {
  auto it = apps_.find(label);
  if (it == apps_.end()) throw Error(Errc::InvalidArgument, "unknown app " + label);
  return *it->second.sockets;
}

uint32_t SimCluster::serve(const std::string& label, uint16_t port, SocketKind kind) {
  VirtualSockets& s = sockets(label);
  uint32_t h = s.socket(kind);
  s.bind(h, SockAddr{Ipv4{0}, port});
  if (kind == SocketKind::Stream) s.listen(h);
  apps_.at(label).served.emplace_back(h, kind);
  note(json{{"tick", tick_},
            {"ev", "serve"},
            {"app", label},
            {"port", port},
            {"kind", kind == SocketKind::Stream ? "stream" : "datagram"}}
           .dump());
  return h;
}

std::optional<std::pair<std::string, VirtualSockets::Accepted>> SimCluster::find_accept() {
  for (auto& [label, a] : apps_) {
    if (!alive(a.node)) continue;
    for (auto [h, kind] : a.served) {
      if (kind != SocketKind::Stream) continue;
      try {
        return std::make_pair(label, a.sockets->accept(h));
      } catch (const Error& e) {
        if (e.code() != Errc::WouldBlock) throw;
      }
    }
  }
  return std::nullopt;
}

ConnectOutcome SimCluster::connect(const std::string& client, SockAddr dest) {
  ConnectOutcome out;
  VirtualSockets& s = sockets(client);
  const std::string client_node = node_of(client);
  uint32_t h = s.socket(SocketKind::Stream);
  int fd = -1;
  try {
    fd = s.connect(h, dest);
  } catch (const Error& e) {
    out.error = e.code();
  }
  if (!out.error) {
    out.client_local = s.getsockname(h);
    if (auto m = node(client_node).sw().meta(identity(client).app_id, h)) out.channel = m->channel_kind;
    auto acc = find_accept();
    if (!acc) {
      out.error = Errc::Io;
    } else {
      out.reached = acc->first;
      VirtualSockets& srv = sockets(acc->first);
      out.server_peer = srv.getpeername(acc->second.handle);
      srv.getsockname(acc->second.handle);
      char buf[4];
      write_all(fd, "ping", 4);
      if (read_exact(acc->second.fd, buf, 4)) {
        write_all(acc->second.fd, buf, 4);
        char back[4];
        out.echoed = read_exact(fd, back, 4) && std::memcmp(back, "ping", 4) == 0;
      }
      srv.close(acc->second.handle);
    }
  }
  s.close(h);
  json ev{{"tick", tick_}, {"ev", "connect"}, {"client", client}, {"dest", dest.str()}};
  if (out.error) {
    ev["error"] = errc_name(*out.error);
  } else {
    ev["reached"] = out.reached;
    ev["channel"] = channel_name(out.channel);
    ev["echo"] = out.echoed;
  }
  note(ev.dump());
  return out;
}

bool SimCluster::raw_connect(const std::string& from_node, RealEndpoint to) {
  auto dest = node_at(to.host_ip);
  bool accepted = false;
  if (dest && alive(*dest) && !blocked(from_node, *dest) && endpoints_.count(to)) {
    int sv[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0)
      throw Error(Errc::Io, std::string("socketpair: ") + std::strerror(errno));
    UniqueFd client(sv[0]);
    accepted = node(*dest).sw().deliver_stream(to, UniqueFd(sv[1]), std::nullopt);
  }
  note(json{{"tick", tick_}, {"ev", "raw_connect"}, {"node", from_node}, {"accepted", accepted}}
           .dump());
  return accepted;
}

std::optional<std::string> SimCluster::datagram(const std::string& client, SockAddr dest,
                                                const std::string& text) {
  VirtualSockets& s = sockets(client);
  uint32_t h = s.socket(SocketKind::Datagram);
  std::optional<std::string> reached;
  const Bytes body(text.begin(), text.end());
  try {
    s.sendto(h, dest, body);
    drain();
    for (auto& [label, a] : apps_) {
      if (reached || !alive(a.node)) continue;
      for (auto [sh, kind] : a.served) {
        if (kind != SocketKind::Datagram) continue;
        try {
          auto d = a.sockets->recvfrom(sh);
          if (d.payload != body) continue;
          reached = label;
          a.sockets->sendto(sh, d.from, d.payload);
          break;
        } catch (const Error& e) {
          if (e.code() != Errc::WouldBlock) throw;
        }
      }
    }
    drain();
    if (reached) {
      auto back = s.recvfrom(h);
      if (back.payload != body) reached.reset();
    }
  } catch (const Error& e) {
    if (e.code() != Errc::WouldBlock && e.code() != Errc::Denied && e.code() != Errc::NoSuchService)
      throw;
    reached.reset();
  }
  s.close(h);
  note(json{{"tick", tick_},
            {"ev", "datagram"},
            {"client", client},
            {"dest", dest.str()},
            {"reached", reached.value_or("")}}
           .dump());
  return reached;
}

void SimCluster::scan_reply(const TrapReply& r) {
  ++scanned_;
  if (!r.addr) return;
  const bool host_ip = by_ip_.count(r.addr->ip.value) > 0;
  const bool real = ever_opened_.count(RealEndpoint{r.addr->ip, r.addr->port}) > 0;
  if (host_ip || real) leaks_.push_back(r.addr->str());
}

// --- scripts ------------------------------------------------------------------

namespace {

std::vector<std::string> split_words(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::set<std::string> split_set(const std::string& s) {
  std::set<std::string> out;
  size_t start = 0;
  while (start <= s.size()) {
    size_t comma = s.find(',', start);
    if (comma == std::string::npos) comma = s.size();
    if (comma > start) out.insert(s.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

std::string join_set(const std::set<std::string>& s) {
  std::string out;
  for (const auto& v : s) out += (out.empty() ? "" : ",") + v;
  return out.empty() ? "-" : out;
}

uint64_t to_u64(const std::string& s, size_t line) {
  try {
    size_t used = 0;
    uint64_t v = std::stoull(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw Error(Errc::InvalidArgument, "line " + std::to_string(line) + ": bad number '" + s + "'");
}

std::string outcome_name(const std::optional<Errc>& e) {
  if (!e) return "allow";
  switch (*e) {
    case Errc::Denied: return "deny";
    case Errc::ConnRefused: return "refused";
    case Errc::NoSuchService: return "nosuch";
    case Errc::Unidentified: return "unidentified";
    default: return std::string(errc_name(*e));
  }
}

}  // namespace

ClusterScript parse_script(const std::string& text) {
  ClusterScript script;
  std::istringstream in(text);
  std::string raw;
  size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.resize(hash);
    auto w = split_words(raw);
    if (w.empty()) continue;
    if (w[0] == "seed" && w.size() == 2) {
      script.seed = to_u64(w[1], line);
    } else if (w[0] == "net") {
      for (size_t i = 1; i < w.size(); ++i) {
        if (w[i] == "loss" && i + 1 < w.size()) {
          script.net.loss = std::stod(w[++i]);
        } else if (w[i] == "latency" && i + 2 < w.size()) {
          script.net.latency_min = static_cast<uint32_t>(to_u64(w[++i], line));
          script.net.latency_max = static_cast<uint32_t>(to_u64(w[++i], line));
        } else {
          throw Error(Errc::InvalidArgument, "line " + std::to_string(line) + ": bad net option");
        }
      }
      if (script.net.loss < 0 || script.net.loss > 1 || script.net.latency_max < script.net.latency_min)
        throw Error(Errc::InvalidArgument, "line " + std::to_string(line) + ": bad net profile");
    } else if (w[0] == "tick" && w.size() >= 3) {
      ScriptEvent ev;
      ev.tick = to_u64(w[1], line);
      ev.line = line;
      ev.words.assign(w.begin() + 2, w.end());
      script.events.push_back(std::move(ev));
    } else {
      throw Error(Errc::InvalidArgument, "line " + std::to_string(line) + ": unrecognized '" + w[0] + "'");
    }
  }
  std::stable_sort(script.events.begin(), script.events.end(),
                   [](const ScriptEvent& a, const ScriptEvent& b) { return a.tick < b.tick; });
  return script;
}

namespace {

class Runner {
 public:
  explicit Runner(const ClusterScript& s) : script_(s), sim_(s.seed, s.net) {}

  ScriptResult run() {
    for (const auto& ev : script_.events) {
      sim_.run_until(ev.tick);
      current_ = &ev;
      try {
        exec(ev.words);
      } catch (const Error& e) {
        if (e.code() == Errc::AssertionFailed) throw;
        throw Error(e.code(), where() + e.what());
      }
    }
    return ScriptResult{sim_.trace(), assertions_, sim_.identity_leaks(), sim_.trap_replies_scanned()};
  }

 private:
  std::string where() const {
    return "tick " + std::to_string(current_->tick) + " (line " + std::to_string(current_->line) + "): ";
  }

  [[noreturn]] void fail(const std::string& what, const std::string& expected,
                         const std::string& observed) {
    sim_.note(json{{"tick", sim_.tick()},
                   {"ev", "assert"},
                   {"what", what},
                   {"ok", false},
                   {"expected", expected},
                   {"observed", observed}}
                  .dump());
    throw Error(Errc::AssertionFailed,
                where() + what + "\n  expected: " + expected + "\n  observed: " + observed);
  }

  void pass(const std::string& what) {
    ++assertions_;
    sim_.note(json{{"tick", sim_.tick()}, {"ev", "assert"}, {"what", what}, {"ok", true}}.dump());
  }

  const std::string& arg(const std::vector<std::string>& w, size_t i) {
    if (i >= w.size()) throw Error(Errc::InvalidArgument, "missing argument to " + w[0]);
    return w[i];
  }

  /// ip:port, or name:port resolved through the client's DNS.
  std::optional<SockAddr> destination(const std::string& client, const std::string& text) {
    auto colon = text.rfind(':');
    if (colon == std::string::npos) throw Error(Errc::InvalidArgument, "bad destination " + text);
    uint16_t port = static_cast<uint16_t>(to_u64(text.substr(colon + 1), current_->line));
    std::string host = text.substr(0, colon);
    auto ip = sim_.sockets(client).resolve(host);
    if (!ip) return std::nullopt;
    return SockAddr{*ip, port};
  }

  ServiceKey key_of(const std::string& text) {
    auto sa = SockAddr::parse(text);
    if (!sa) throw Error(Errc::InvalidArgument, "bad service key " + text);
    return ServiceKey{VirtualIp(sa->ip), sa->port};
  }

  void exec(const std::vector<std::string>& w) {
    const std::string& a = w[0];
    if (a == "start") {
      NodeOptions o;
      for (size_t i = 2; i < w.size(); ++i) {
        if (w[i] == "--gateway") {
          o.gateway = true;
        } else if (w[i] == "--join") {
          o.join = arg(w, ++i);
        } else if (w[i] == "--strategy") {
          const auto& s = arg(w, ++i);
          if (s == "rr") o.strategy.mode = Strategy::RoundRobin;
          else if (s == "rendezvous") o.strategy.mode = Strategy::Rendezvous;
          else throw Error(Errc::InvalidArgument, "unknown strategy " + s);
        } else {
          throw Error(Errc::InvalidArgument, "unknown start option " + w[i]);
        }
      }
      sim_.start(arg(w, 1), o);
    } else if (a == "add") {
      std::vector<std::string> spec(w.begin() + 3, w.end());
      arg(w, 2);
      sim_.add_app(w[1], w[2], parse_app_spec(spec));
    } else if (a == "serve") {
      const bool udp = w.size() > 3 && w[3] == "udp";
      sim_.serve(arg(w, 1), static_cast<uint16_t>(to_u64(arg(w, 2), current_->line)),
                 udp ? SocketKind::Datagram : SocketKind::Stream);
    } else if (a == "connect") {
      connect(w);
    } else if (a == "datagram") {
      const std::string& client = arg(w, 1);
      auto dest = destination(client, arg(w, 2));
      std::optional<std::string> got;
      if (dest) got = sim_.datagram(client, *dest, "dgram-" + std::to_string(current_->line));
      if (w.size() > 4 && w[3] == "expect") {
        const std::string want = w[4];
        const std::string have = got.value_or("none");
        if (want != have) fail("datagram " + client + " -> " + w[2], want, have);
        pass("datagram " + client + " -> " + w[2]);
      }
    } else if (a == "raw_connect") {
      const ServiceKey key = key_of(arg(w, 2));
      auto entries = sim_.node(arg(w, 1)).table().lookup(key);
      if (entries.empty()) throw Error(Errc::NoSuchService, "no entry for " + key.str());
      bool accepted = sim_.raw_connect(w[1], entries.front().real);
      if (w.size() > 4 && w[3] == "expect") {
        const std::string have = accepted ? "accepted" : "refused";
        if (have != w[4]) fail("raw_connect " + w[2], w[4], have);
        pass("raw_connect " + w[2]);
      }
    } else if (a == "crash") {
      sim_.crash(arg(w, 1));
    } else if (a == "remove") {
      sim_.remove_app(arg(w, 1));
    } else if (a == "partition") {
      sim_.partition(split_set(arg(w, 1)), split_set(arg(w, 2)));
    } else if (a == "heal") {
      sim_.heal();
    } else if (a == "assert") {
      check(w);
    } else {
      throw Error(Errc::InvalidArgument, "unknown action " + a);
    }
  }

  void connect(const std::vector<std::string>& w) {
    const std::string& client = arg(w, 1);
    const std::string& dest_text = arg(w, 2);
    std::string outcome;
    ConnectOutcome co;
    auto dest = destination(client, dest_text);
    if (!dest) {
      outcome = "nxdomain";
    } else {
      co = sim_.connect(client, *dest);
      outcome = outcome_name(co.error);
      if (!co.error) {
        reached_[dest->str()].insert(co.reached);
        if (!co.echoed) outcome = "no-echo";
      }
    }
    const std::string what = "connect " + client + " -> " + dest_text;
    for (size_t i = 3; i + 1 < w.size(); i += 2) {
      const std::string& k = w[i];
      const std::string& v = w[i + 1];
      if (k == "expect") {
        if (outcome != v) fail(what, v, outcome);
      } else if (k == "reach") {
        auto allowed = split_set(v);
        if (!allowed.count(co.reached)) fail(what + " reach", join_set(allowed), co.reached.empty() ? "-" : co.reached);
      } else if (k == "channel") {
        const std::string have = co.error ? "-" : channel_name(co.channel);
        if (have != v) fail(what + " channel", v, have);
      } else {
        throw Error(Errc::InvalidArgument, "unknown connect option " + k);
      }
    }
    if (w.size() > 3) pass(what);
  }

  std::map<std::string, std::set<std::string>> alive_view(Node& n) {
    std::map<std::string, std::set<std::string>> v;
    for (const auto& e : n.table().entries()) {
      if (!e.alive()) continue;
      v[e.key.str()].insert(e.app_id.value + "@" + e.host.hex().substr(0, 8) + "#" +
                            std::to_string(e.incarnation) +
                            (e.kind == EntryKind::Exposure ? "x" : ""));
    }
    return v;
  }

  static std::string render(const std::map<std::string, std::set<std::string>>& v) {
    std::string out;
    for (const auto& [k, s] : v) out += k + "=" + join_set(s) + " ";
    return out.empty() ? "(empty)" : out;
  }

  void check(const std::vector<std::string>& w) {
    const std::string& what = arg(w, 1);
    auto nodes = sim_.alive_nodes();
    // A trailing `on a,b` narrows the check to those nodes.
    if (w.size() >= 3 && w[w.size() - 2] == "on") {
      auto only = split_set(w.back());
      std::erase_if(nodes, [&](const std::string& n) { return !only.count(n); });
    }
    if (what == "converged") {
      if (nodes.empty()) return pass("converged");
      auto ref = alive_view(sim_.node(nodes.front()));
      for (const auto& n : nodes) {
        auto v = alive_view(sim_.node(n));
        if (v != ref) fail("converged", nodes.front() + ": " + render(ref), n + ": " + render(v));
      }
      pass("converged");
    } else if (what == "entries") {
      const ServiceKey key = key_of(arg(w, 2));
      const size_t want = to_u64(arg(w, 3), current_->line);
      for (const auto& n : nodes) {
        size_t have = sim_.node(n).table().lookup(key).size();
        if (have != want)
          fail("entries " + key.str() + " on " + n, std::to_string(want), std::to_string(have));
      }
      pass("entries " + key.str());
    } else if (what == "member") {
      const std::string& observer = arg(w, 2);
      const std::string& subject = arg(w, 3);
      const std::string& want = arg(w, 4);
      const auto* m = sim_.node(observer).gossip().member(sim_.node(subject).id());
      std::string have = m ? std::string(member_status_name(m->status)) : "unknown";
      if (have != want) fail("member " + subject + " at " + observer, want, have);
      pass("member " + subject + " at " + observer);
    } else if (what == "tombstoned") {
      const HostId gone = sim_.node(arg(w, 2)).id();
      for (const auto& n : nodes) {
        for (const auto& e : sim_.node(n).table().entries()) {
          if (e.host == gone && e.alive())
            fail("tombstoned " + w[2] + " on " + n, "no alive entries", e.key.str() + " alive");
        }
      }
      pass("tombstoned " + w[2]);
    } else if (what == "dns") {
      const std::string& name = arg(w, 2);
      const std::string& want = arg(w, 3);
      for (const auto& n : nodes) {
        auto ans = dns_answer(sim_.node(n).table(), name, kDnsTypeA);
        std::string have = ans.rcode == DnsRcode::NXDomain ? "nxdomain"
                           : ans.vip                        ? ans.vip->str()
                                                            : "rcode" + std::to_string(int(ans.rcode));
        if (ans.vip && ans.ttl != kDnsTtl) have += " ttl " + std::to_string(ans.ttl);
        if (have != want) fail("dns " + name + " on " + n, want, have);
      }
      pass("dns " + name);
    } else if (what == "opaque") {
      if (!sim_.identity_leaks().empty())
        fail("opaque", "0 real endpoints", std::to_string(sim_.identity_leaks().size()) + " (" +
                                              sim_.identity_leaks().front() + ")");
      pass("opaque");
    } else if (what == "reached") {
      const std::string& dest = arg(w, 2);
      auto want = split_set(arg(w, 3));
      auto have = reached_[dest];
      if (have != want) fail("reached " + dest, join_set(want), join_set(have));
      pass("reached " + dest);
    } else {
      throw Error(Errc::InvalidArgument, "unknown assertion " + what);
    }
  }

  const ClusterScript& script_;
  SimCluster sim_;
  const ScriptEvent* current_ = nullptr;
  size_t assertions_ = 0;
  std::map<std::string, std::set<std::string>> reached_;
};

}  // namespace

ScriptResult run_script(const ClusterScript& script) { return Runner(script).run(); }

}  // namespace appnet
