#include "appnet/runtime.h"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <iostream>

#include "json.hpp"

namespace appnet {

using nlohmann::json;

namespace {

sockaddr_in to_sockaddr(Ipv4 ip, uint16_t port) {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_addr.s_addr = htonl(ip.value);
  sa.sin_port = htons(port);
  return sa;
}

RealEndpoint from_sockaddr(const sockaddr_in& sa) {
  return RealEndpoint{Ipv4{ntohl(sa.sin_addr.s_addr)}, ntohs(sa.sin_port)};
}

uint16_t local_port(int fd) {
  sockaddr_in sa{};
  socklen_t len = sizeof sa;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&sa), &len);
  return ntohs(sa.sin_port);
}

/// Waits until `fd` is readable; false once `keep_going` turns false.
template <typename Pred>
bool wait_readable(int fd, Pred keep_going) {
  while (keep_going()) {
    pollfd p{fd, POLLIN, 0};
    int r = ::poll(&p, 1, 100);
    if (r > 0) return true;
    if (r < 0 && errno != EINTR) return false;
  }
  return false;
}

bool write_all(int fd, const void* data, size_t n) {
  const auto* p = static_cast<const uint8_t*>(data);
  while (n) {
    ssize_t w = ::send(fd, p, n, MSG_NOSIGNAL);
    if (w < 0 && errno == EINTR) continue;
    if (w <= 0) return false;
    p += w;
    n -= static_cast<size_t>(w);
  }
  return true;
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

void set_recv_timeout(int fd, int ms) {
  timeval tv{ms / 1000, (ms % 1000) * 1000};
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
}

UniqueFd tcp_connect(RealEndpoint to, int timeout_ms) {
  UniqueFd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC | SOCK_NONBLOCK, 0));
  if (!fd) return fd;
  sockaddr_in sa = to_sockaddr(to.host_ip, to.port);
  if (::connect(fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) {
    if (errno != EINPROGRESS) return UniqueFd();
    pollfd p{fd.get(), POLLOUT, 0};
    if (::poll(&p, 1, timeout_ms) <= 0) return UniqueFd();
    int err = 0;
    socklen_t len = sizeof err;
    ::getsockopt(fd.get(), SOL_SOCKET, SO_ERROR, &err, &len);
    if (err != 0) return UniqueFd();
  }
  int flags = ::fcntl(fd.get(), F_GETFL);
  ::fcntl(fd.get(), F_SETFL, flags & ~O_NONBLOCK);
  return fd;
}

void reset_and_close(UniqueFd fd) {
  linger l{1, 0};
  ::setsockopt(fd.get(), SOL_SOCKET, SO_LINGER, &l, sizeof l);
}

UniqueFd unix_listener(const std::filesystem::path& path, int type) {
  std::error_code ec;
  std::filesystem::create_directories(path.parent_path(), ec);
  std::filesystem::remove(path, ec);
  UniqueFd fd(::socket(AF_UNIX, type | SOCK_CLOEXEC, 0));
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  const std::string p = path.string();
  if (!fd || p.size() >= sizeof addr.sun_path)
    throw Error(Errc::BindFailed, "cannot create unix socket " + p);
  std::memcpy(addr.sun_path, p.c_str(), p.size() + 1);
  if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
      ::listen(fd.get(), 16) != 0)
    throw Error(Errc::BindFailed, "cannot bind " + p + ": " + std::strerror(errno));
  return fd;
}

}  // namespace

// --- transport ----------------------------------------------------------------

PosixTransport::PosixTransport(Ipv4 host_ip, std::mutex& mu, std::condition_variable& cv)
    : ip_(host_ip), mu_(mu), cv_(cv) {}

PosixTransport::~PosixTransport() { shutdown(); }

void PosixTransport::shutdown() {
  stopping_ = true;
  std::vector<std::unique_ptr<Endpoint>> all;
  {
    std::lock_guard lock(eps_mu_);
    for (auto& [_, e] : eps_) all.push_back(std::move(e));
    eps_.clear();
    for (auto& e : closed_) all.push_back(std::move(e));
    closed_.clear();
  }
  for (auto& e : all)
    if (e->worker.joinable()) e->worker.join();
}

RealEndpoint PosixTransport::open(bool stream) {
  UniqueFd fd(::socket(AF_INET, (stream ? SOCK_STREAM : SOCK_DGRAM) | SOCK_CLOEXEC, 0));
  if (!fd) throw Error(Errc::BindFailed, std::strerror(errno));
  sockaddr_in sa = to_sockaddr(ip_, 0);
  if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0)
    throw Error(Errc::BindFailed, std::string("bind: ") + std::strerror(errno));
  if (stream && ::listen(fd.get(), 128) != 0)
    throw Error(Errc::BindFailed, std::string("listen: ") + std::strerror(errno));
  RealEndpoint ep{ip_, local_port(fd.get())};
  auto e = std::make_unique<Endpoint>();
  const int raw = fd.get();
  e->fd = std::move(fd);
  e->stream = stream;
  Endpoint* ptr = e.get();
  std::lock_guard lock(eps_mu_);
  eps_[ep] = std::move(e);
  ptr->worker = std::thread([this, ep, raw, stream] {
    if (stream)
      accept_loop(ep, raw);
    else
      datagram_loop(ep, raw);
  });
  return ep;
}

RealEndpoint PosixTransport::open_stream_listener() { return open(true); }
RealEndpoint PosixTransport::open_datagram() { return open(false); }

void PosixTransport::close_endpoint(RealEndpoint ep) {
  std::lock_guard lock(eps_mu_);
  auto it = eps_.find(ep);
  if (it == eps_.end()) return;
  ::shutdown(it->second->fd.get(), SHUT_RDWR);
  closed_.push_back(std::move(it->second));
  eps_.erase(it);
}

void PosixTransport::accept_loop(RealEndpoint ep, int fd) {
  auto open = [&] {
    if (stopping_) return false;
    std::lock_guard lock(eps_mu_);
    return eps_.count(ep) > 0;
  };
  while (wait_readable(fd, open)) {
    UniqueFd conn(::accept4(fd, nullptr, nullptr, SOCK_CLOEXEC));
    if (!conn) {
      if (errno == EINTR || errno == ECONNABORTED || errno == EAGAIN) continue;
      return;
    }
    set_recv_timeout(conn.get(), 2000);
    uint8_t buf[kPreambleSize];
    std::optional<Preamble> pre;
    if (read_exact(conn.get(), buf, sizeof buf)) pre = decode_preamble(buf);
    set_recv_timeout(conn.get(), 0);
    {
      std::lock_guard lock(mu_);
      if (stopping_ || !sink_) return;
      sink_->deliver_stream(ep, std::move(conn), pre);
    }
    cv_.notify_all();
  }
}

void PosixTransport::datagram_loop(RealEndpoint ep, int fd) {
  auto open = [&] {
    if (stopping_) return false;
    std::lock_guard lock(eps_mu_);
    return eps_.count(ep) > 0;
  };
  Bytes buf(65536);
  while (wait_readable(fd, open)) {
    sockaddr_in from{};
    socklen_t len = sizeof from;
    ssize_t n = ::recvfrom(fd, buf.data(), buf.size(), 0, reinterpret_cast<sockaddr*>(&from), &len);
    if (n < 0) {
      if (errno == EINTR) continue;
      return;
    }
    {
      std::lock_guard lock(mu_);
      if (stopping_ || !sink_) return;
      sink_->deliver_datagram(ep, from_sockaddr(from),
                              std::span<const uint8_t>(buf.data(), static_cast<size_t>(n)));
    }
    cv_.notify_all();
  }
}

UniqueFd PosixTransport::connect_stream(RealEndpoint to, const Preamble& preamble) {
  UniqueFd fd = tcp_connect(to, 1000);
  if (!fd) throw Error(Errc::ConnRefused, to.str() + " unreachable");
  Bytes pre = encode_preamble(preamble);
  if (!write_all(fd.get(), pre.data(), pre.size())) throw Error(Errc::ConnRefused, to.str());
  return fd;
}

void PosixTransport::send_datagram(RealEndpoint from, RealEndpoint to, Bytes wire) {
  int fd = -1;
  {
    std::lock_guard lock(eps_mu_);
    auto it = eps_.find(from);
    if (it != eps_.end()) fd = it->second->fd.get();
  }
  UniqueFd temp;
  if (fd < 0) {
    temp.reset(::socket(AF_INET, SOCK_DGRAM | SOCK_CLOEXEC, 0));
    fd = temp.get();
  }
  sockaddr_in sa = to_sockaddr(to.host_ip, to.port);
  ::sendto(fd, wire.data(), wire.size(), MSG_NOSIGNAL, reinterpret_cast<sockaddr*>(&sa), sizeof sa);
}

// --- runtime --------------------------------------------------------------------

class NodeRuntime::BlockingChannel : public TrapChannel {
 public:
  BlockingChannel(NodeRuntime& rt, AppId app) : rt_(rt), app_(std::move(app)) {}

  TrapResponse call(const TrapRequest& req) override {
    Bytes wire = encode_request(req);
    ServedReply served;
    {
      std::unique_lock lock(rt_.mu_);
      served = rt_.serve_blocking(lock, app_, wire);
    }
    rt_.cv_.notify_all();
    TrapResponse out;
    out.reply = decode_reply(served.reply);
    out.transferred = std::move(served.transferred);
    return out;
  }

 private:
  NodeRuntime& rt_;
  AppId app_;
};

NodeRuntime::NodeRuntime(RuntimeConfig cfg) : cfg_(std::move(cfg)) {}

NodeRuntime::~NodeRuntime() { stop(); }

void NodeRuntime::start() {
  const RealEndpoint bind = cfg_.node.bind;
  const Ipv4 host = bind.host_ip.is_any() ? Ipv4{0x7F000001} : bind.host_ip;

  // Gossip needs the same port number on UDP and TCP.
  for (int attempt = 0; attempt < 20; ++attempt) {
    UniqueFd udp(::socket(AF_INET, SOCK_DGRAM | SOCK_CLOEXEC, 0));
    sockaddr_in sa = to_sockaddr(bind.host_ip, bind.port);
    if (::bind(udp.get(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0)
      throw Error(Errc::BindFailed, "gossip " + bind.str() + ": " + std::strerror(errno));
    const uint16_t port = local_port(udp.get());
    UniqueFd tcp(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
    int one = 1;
    ::setsockopt(tcp.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sa = to_sockaddr(bind.host_ip, port);
    if (::bind(tcp.get(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) == 0 &&
        ::listen(tcp.get(), 64) == 0) {
      gossip_udp_ = std::move(udp);
      sync_tcp_ = std::move(tcp);
      advertised_ = RealEndpoint{host, port};
      break;
    }
    if (bind.port != 0)
      throw Error(Errc::BindFailed, "gossip " + bind.str() + ": " + std::strerror(errno));
  }
  if (!gossip_udp_) throw Error(Errc::BindFailed, "no port free for both UDP and TCP");

  std::filesystem::create_directories(cfg_.node.run_dir / "apps");
  NodeConfig nc = cfg_.node;
  nc.bind = advertised_;
  transport_ = std::make_unique<PosixTransport>(host, mu_, cv_);
  node_ = std::make_unique<Node>(nc, *transport_);
  transport_->set_sink(&node_->sw());

  if (cfg_.control) {
    const auto path = cfg_.node.run_dir / "control";
    UniqueFd probe(::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0));
    sockaddr_un addr{};
    addr.sun_family = AF_UNIX;
    std::strncpy(addr.sun_path, path.c_str(), sizeof addr.sun_path - 1);
    if (::connect(probe.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0)
      throw Error(Errc::BindFailed, "a daemon is already serving " + path.string());
    control_fd_ = unix_listener(path, SOCK_STREAM);
  }

  running_ = true;
  threads_.emplace_back([this] { gossip_loop(); });
  threads_.emplace_back([this] { sync_loop(); });
  threads_.emplace_back([this] { tick_loop(); });
  if (cfg_.control) threads_.emplace_back([this] { control_loop(); });
}

void NodeRuntime::stop() {
  if (!running_.exchange(false)) return;
  cv_.notify_all();
  for (auto& t : threads_)
    if (t.joinable()) t.join();
  threads_.clear();

  std::vector<std::unique_ptr<TrapServer>> traps;
  {
    std::lock_guard lock(mu_);
    for (auto& [_, t] : traps_) traps.push_back(std::move(t));
    traps_.clear();
    for (auto& t : retired_traps_) traps.push_back(std::move(t));
    retired_traps_.clear();
  }
  for (auto& t : traps) {
    int c = t->conn.load();
    if (c >= 0) ::shutdown(c, SHUT_RDWR);
    if (t->worker.joinable()) t->worker.join();
  }

  std::vector<std::unique_ptr<GatewayListener>> gws;
  {
    std::lock_guard lock(gw_mu_);
    for (auto& [_, g] : gateways_) gws.push_back(std::move(g));
    gateways_.clear();
    for (auto& g : retired_gateways_) gws.push_back(std::move(g));
    retired_gateways_.clear();
  }
  for (auto& g : gws)
    if (g->worker.joinable()) g->worker.join();

  std::vector<std::thread> sessions;
  {
    std::lock_guard lock(sessions_mu_);
    for (const auto& [fd, _] : session_fds_) ::shutdown(fd, SHUT_RDWR);
    sessions.swap(sessions_);
  }
  for (auto& s : sessions)
    if (s.joinable()) s.join();

  std::vector<std::thread> controls;
  {
    std::lock_guard lock(control_mu_);
    for (int fd : control_conns_) ::shutdown(fd, SHUT_RDWR);
    controls.swap(control_threads_);
  }
  for (auto& c : controls)
    if (c.joinable()) c.join();

  if (transport_) transport_->shutdown();
  if (cfg_.control) {
    std::error_code ec;
    std::filesystem::remove(cfg_.node.run_dir / "control", ec);
  }
}

ServedReply NodeRuntime::serve_blocking(std::unique_lock<std::mutex>& lock, const AppId& app,
                                        std::span<const uint8_t> frame) {
  try {
    TrapRequest req = decode_request(frame);
    if (req.op == TrapOp::Accept || req.op == TrapOp::RecvFrom) {
      cv_.wait(lock, [&] { return !running_ || node_->sw().ready(app, req.handle); });
    }
  } catch (const Error&) {
    // Malformed frames get their error reply from serve().
  }
  return node_->serve(app, frame);
}

AppIdentity NodeRuntime::add_app(const AppSpec& spec) {
  AppIdentity id = with_node([&](Node& n) { return n.add_app(spec); });
  try {
    start_trap_server(id.app_id);
  } catch (...) {
    with_node([&](Node& n) { return n.remove_app(id.app_id); });
    throw;
  }
  return id;
}

size_t NodeRuntime::remove_app(const AppId& app) {
  size_t n;
  std::unique_ptr<TrapServer> ts;
  {
    std::lock_guard lock(mu_);
    n = node_->remove_app(app);
    auto it = traps_.find(app);
    if (it != traps_.end()) {
      ts = std::move(it->second);
      traps_.erase(it);
    }
  }
  cv_.notify_all();
  if (ts) {
    int c = ts->conn.load();
    if (c >= 0) ::shutdown(c, SHUT_RDWR);
    std::error_code ec;
    std::filesystem::remove_all(trap_path(cfg_.node.run_dir, app).parent_path(), ec);
    std::lock_guard lock(mu_);
    retired_traps_.push_back(std::move(ts));
  }
  return n;
}

std::unique_ptr<TrapChannel> NodeRuntime::local_channel(const AppId& app) {
  with_node([&](Node& n) {
    n.attach_external(app);
    return 0;
  });
  return std::make_unique<BlockingChannel>(*this, app);
}

void NodeRuntime::start_trap_server(const AppId& app) {
  auto ts = std::make_unique<TrapServer>();
  ts->listen = unix_listener(trap_path(cfg_.node.run_dir, app), SOCK_SEQPACKET);
  TrapServer* raw = ts.get();
  std::lock_guard lock(mu_);
  traps_[app] = std::move(ts);
  raw->worker = std::thread([this, app, raw] { trap_loop(app, raw); });
}

void NodeRuntime::trap_loop(AppId app, TrapServer* ts) {
  auto live = [&] {
    if (!running_) return false;
    std::lock_guard lock(mu_);
    return traps_.count(app) > 0;
  };
  const Bytes refused = [] {
    TrapReply r;
    r.error = Errc::AttachFailed;
    return encode_reply(r);
  }();
  UniqueFd conn;
  bool attached = false;
  std::vector<UniqueFd> extra;  // later sessions for the same app; refused per request
  auto end_session = [&] {
    ts->conn = -1;
    conn.reset();
    if (attached) {
      std::lock_guard lock(mu_);
      node_->detach(app);
    }
    attached = false;
  };
  while (live()) {
    std::vector<pollfd> fds;
    fds.push_back({ts->listen.get(), POLLIN, 0});
    fds.push_back({conn ? conn.get() : -1, POLLIN, 0});
    for (const auto& e : extra) fds.push_back({e.get(), POLLIN, 0});
    int r = ::poll(fds.data(), fds.size(), 100);
    if (r < 0 && errno != EINTR) break;
    if (r <= 0) continue;

    if (fds[0].revents & POLLIN) {
      UniqueFd c(::accept4(ts->listen.get(), nullptr, nullptr, SOCK_CLOEXEC));
      if (c && !conn) {
        std::lock_guard lock(mu_);
        try {
          node_->attach_external(app);
          attached = true;
        } catch (const Error&) {
          attached = false;
        }
        conn = std::move(c);
        ts->conn = conn.get();
      } else if (c) {
        extra.push_back(std::move(c));
      }
    }

    for (size_t i = extra.size(); i-- > 0;) {
      if (!fds[2 + i].revents) continue;
      Bytes frame;
      bool got = false;
      try {
        got = recv_frame(extra[i].get(), frame, nullptr);
        if (got) send_frame(extra[i].get(), refused);
      } catch (const Error&) {
        got = false;
      }
      if (!got) extra.erase(extra.begin() + static_cast<long>(i));
    }

    if (conn && fds[1].revents) {
      Bytes frame;
      bool got = false;
      try {
        got = recv_frame(conn.get(), frame, nullptr);
      } catch (const Error&) {
      }
      if (!got) {
        end_session();
        continue;
      }
      ServedReply served;
      if (!attached) {
        served.reply = refused;
      } else {
        std::unique_lock lock(mu_);
        served = serve_blocking(lock, app, frame);
      }
      cv_.notify_all();
      try {
        send_frame(conn.get(), served.reply, served.transferred ? served.transferred.get() : -1);
      } catch (const Error&) {
        end_session();
      }
    }
  }
  if (conn) end_session();
}

void NodeRuntime::send(std::vector<WireOut> wires) {
  for (auto& w : wires) {
    if (w.reliable) {
      UniqueFd fd = tcp_connect(w.addr, 500);
      if (!fd) continue;
      uint8_t len[4] = {static_cast<uint8_t>(w.bytes.size() >> 24),
                        static_cast<uint8_t>(w.bytes.size() >> 16),
                        static_cast<uint8_t>(w.bytes.size() >> 8),
                        static_cast<uint8_t>(w.bytes.size())};
      if (write_all(fd.get(), len, 4)) write_all(fd.get(), w.bytes.data(), w.bytes.size());
    } else {
      sockaddr_in sa = to_sockaddr(w.addr.host_ip, w.addr.port);
      ::sendto(gossip_udp_.get(), w.bytes.data(), w.bytes.size(), MSG_NOSIGNAL,
               reinterpret_cast<sockaddr*>(&sa), sizeof sa);
    }
  }
}

void NodeRuntime::gossip_loop() {
  Bytes buf(65536);
  while (wait_readable(gossip_udp_.get(), [&] { return running_.load(); })) {
    sockaddr_in from{};
    socklen_t len = sizeof from;
    ssize_t n = ::recvfrom(gossip_udp_.get(), buf.data(), buf.size(), 0,
                           reinterpret_cast<sockaddr*>(&from), &len);
    if (n < 0) continue;
    std::vector<WireOut> out;
    {
      std::lock_guard lock(mu_);
      out = node_->on_envelope(std::span<const uint8_t>(buf.data(), static_cast<size_t>(n)),
                               from_sockaddr(from));
    }
    cv_.notify_all();
    send(std::move(out));
  }
}

void NodeRuntime::sync_loop() {
  while (wait_readable(sync_tcp_.get(), [&] { return running_.load(); })) {
    sockaddr_in from{};
    socklen_t len = sizeof from;
    UniqueFd conn(::accept4(sync_tcp_.get(), reinterpret_cast<sockaddr*>(&from), &len, SOCK_CLOEXEC));
    if (!conn) continue;
    set_recv_timeout(conn.get(), 2000);
    uint8_t hdr[4];
    if (!read_exact(conn.get(), hdr, 4)) continue;
    const uint32_t size = (uint32_t{hdr[0]} << 24) | (uint32_t{hdr[1]} << 16) |
                          (uint32_t{hdr[2]} << 8) | uint32_t{hdr[3]};
    if (size > kMaxEnvelopeBytes) continue;
    Bytes body(size);
    if (!read_exact(conn.get(), body.data(), size)) continue;
    std::vector<WireOut> out;
    {
      std::lock_guard lock(mu_);
      out = node_->on_envelope(body, from_sockaddr(from));
    }
    cv_.notify_all();
    send(std::move(out));
  }
}

void NodeRuntime::tick_loop() {
  while (running_) {
    std::vector<WireOut> out;
    {
      std::unique_lock lock(mu_);
      if (cv_.wait_for(lock, cfg_.period, [&] { return !running_; })) break;
      out = node_->tick(++round_);
    }
    cv_.notify_all();
    send(std::move(out));
    sync_gateways();
  }
}

std::vector<uint16_t> NodeRuntime::gateway_ports() {
  std::lock_guard lock(gw_mu_);
  std::vector<uint16_t> out;
  for (const auto& [p, _] : gateways_) out.push_back(p);
  return out;
}

void NodeRuntime::sync_gateways() {
  std::set<uint16_t> wanted;
  with_node([&](Node& n) {
    for (const auto& b : n.gateway_bindings()) wanted.insert(b.external_port);
    return 0;
  });
  std::lock_guard lock(gw_mu_);
  for (auto it = gateways_.begin(); it != gateways_.end();) {
    if (wanted.count(it->first)) {
      ++it;
      continue;
    }
    // Released: stop listening and end the sessions riding on it.
    {
      std::lock_guard sl(sessions_mu_);
      for (const auto& [fd, port] : session_fds_)
        if (port == it->first) ::shutdown(fd, SHUT_RDWR);
    }
    ::shutdown(it->second->fd.get(), SHUT_RDWR);
    retired_gateways_.push_back(std::move(it->second));
    it = gateways_.erase(it);
  }
  for (uint16_t port : wanted) {
    if (gateways_.count(port)) continue;
    UniqueFd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
    int one = 1;
    ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in sa = to_sockaddr(Ipv4{0}, port);
    if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0 ||
        ::listen(fd.get(), 64) != 0) {
      std::cerr << "appnet: gateway port " << port << " unavailable: " << std::strerror(errno)
                << "\n";
      continue;
    }
    auto g = std::make_unique<GatewayListener>();
    const int raw = fd.get();
    g->fd = std::move(fd);
    g->worker = std::thread([this, port, raw] { gateway_loop(port, raw); });
    gateways_[port] = std::move(g);
  }
}

void NodeRuntime::gateway_loop(uint16_t port, int fd) {
  auto live = [&] {
    if (!running_) return false;
    std::lock_guard lock(gw_mu_);
    return gateways_.count(port) > 0;
  };
  while (wait_readable(fd, live)) {
    UniqueFd ext(::accept4(fd, nullptr, nullptr, SOCK_CLOEXEC));
    if (!ext) continue;
    UniqueFd up;
    {
      std::lock_guard lock(mu_);
      try {
        up = node_->gateway_connect(port);
      } catch (const Error&) {
      }
    }
    cv_.notify_all();
    if (!up) {
      reset_and_close(std::move(ext));
      continue;
    }
    std::lock_guard sl(sessions_mu_);
    const int e = ext.get(), u = up.get();
    session_fds_[e] = port;
    session_fds_[u] = port;
    sessions_.emplace_back([this, ext = std::move(ext), up = std::move(up), e, u]() mutable {
      proxy_session(e, u, node_->proxy_counters());
      std::lock_guard lock(sessions_mu_);
      session_fds_.erase(e);
      session_fds_.erase(u);
      ext.reset();
      up.reset();
    });
  }
}

std::string NodeRuntime::control(const std::string& request_json) {
  json reply;
  try {
    json req = json::parse(request_json);
    const std::string op = req.value("op", "");
    if (op == "add") {
      std::vector<std::string> args = req.value("args", std::vector<std::string>{});
      AppIdentity id = add_app(parse_app_spec(args));
      reply = {{"ok", true},
               {"app_id", id.app_id.value},
               {"vip", id.effective_vip.str()},
               {"trap", trap_path(cfg_.node.run_dir, id.app_id).string()}};
    } else if (op == "remove") {
      size_t n = remove_app(AppId{req.value("app_id", "")});
      reply = {{"ok", true}, {"tombstoned", n}};
    } else if (op == "list") {
      reply = {{"ok", true}, {"dump", with_node([](Node& n) { return n.table().dump(); })}};
    } else if (op == "status") {
      reply = with_node([&](Node& n) {
        json members = json::array();
        for (const auto& [h, m] : n.gossip().members())
          members.push_back({{"host", h.hex()},
                             {"addr", m.addr.str()},
                             {"status", member_status_name(m.status)},
                             {"gateway", m.gateway}});
        json apps = json::array();
        for (const auto& a : n.apps())
          apps.push_back({{"app_id", a.app_id.value}, {"vip", a.effective_vip.str()}});
        return json{{"ok", true},
                    {"id", n.id().hex()},
                    {"addr", advertised_.str()},
                    {"joined", n.gossip().joined()},
                    {"join_failed", n.gossip().join_failed()},
                    {"members", members},
                    {"apps", apps}};
      });
      reply["gateway_ports"] = gateway_ports();
    } else {
      throw Error(Errc::InvalidArgument, "unknown op '" + op + "'");
    }
  } catch (const Error& e) {
    reply = {{"ok", false}, {"code", errc_name(e.code())}, {"error", e.what()}};
  } catch (const json::exception& e) {
    reply = {{"ok", false}, {"code", "InvalidArgument"}, {"error", e.what()}};
  }
  return reply.dump();
}

void NodeRuntime::control_loop() {
  while (wait_readable(control_fd_.get(), [&] { return running_.load(); })) {
    int c = ::accept4(control_fd_.get(), nullptr, nullptr, SOCK_CLOEXEC);
    if (c < 0) continue;
    std::lock_guard lock(control_mu_);
    control_conns_.insert(c);
    control_threads_.emplace_back([this, c] {
      UniqueFd conn(c);
      std::string pending;
      char buf[4096];
      for (;;) {
        ssize_t n = ::read(c, buf, sizeof buf);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) break;
        pending.append(buf, static_cast<size_t>(n));
        size_t nl;
        while ((nl = pending.find('\n')) != std::string::npos) {
          std::string line = pending.substr(0, nl);
          pending.erase(0, nl + 1);
          std::string out = control(line) + "\n";
          if (!write_all(c, out.data(), out.size())) break;
        }
      }
      std::lock_guard l(control_mu_);
      control_conns_.erase(c);
      conn.reset();
    });
  }
}

}  // namespace appnet
