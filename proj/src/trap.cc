#include "appnet/trap.h"

#include <sys/socket.h>
#include <sys/un.h>

#include <cerrno>
#include <cstdlib>
#include <cstring>

#include "appnet/names.h"

namespace appnet {

std::string_view trap_op_name(TrapOp op) {
  switch (op) {
    case TrapOp::Socket: return "Socket";
    case TrapOp::Bind: return "Bind";
    case TrapOp::Listen: return "Listen";
    case TrapOp::Connect: return "Connect";
    case TrapOp::Accept: return "Accept";
    case TrapOp::GetSockName: return "GetSockName";
    case TrapOp::GetPeerName: return "GetPeerName";
    case TrapOp::SendTo: return "SendTo";
    case TrapOp::RecvFrom: return "RecvFrom";
    case TrapOp::Close: return "Close";
  }
  return "?";
}

// --- codec ----------------------------------------------------------------

namespace {

bool op_has_addr(TrapOp op) {
  return op == TrapOp::Bind || op == TrapOp::Connect || op == TrapOp::SendTo;
}

constexpr uint8_t kFlagHandle = 0x01;
constexpr uint8_t kFlagAddr = 0x02;
constexpr uint8_t kFlagTransfer = 0x04;
constexpr uint8_t kMaxErrc = static_cast<uint8_t>(Errc::Io);

void write_payload(ByteWriter& w, const Bytes& payload) {
  if (payload.size() > kMaxDatagram) throw Error(Errc::MessageTooLong);
  w.u32(static_cast<uint32_t>(payload.size()));
  w.raw(payload);
}

Bytes read_payload(ByteReader& r) {
  uint32_t len = r.u32();
  if (len > kMaxDatagram) throw Error(Errc::DecodeError, "payload length out of range");
  auto b = r.raw(len);
  return Bytes(b.begin(), b.end());
}

}  // namespace

Bytes encode_request(const TrapRequest& r) {
  ByteWriter w;
  w.u8(kTrapVersion);
  w.u8(static_cast<uint8_t>(r.op));
  w.u32(r.handle);
  SockAddr a = op_has_addr(r.op) && r.addr ? *r.addr : SockAddr{};
  w.u32(a.ip.value);
  w.u16(a.port);
  if (r.op == TrapOp::Socket)
    write_payload(w, Bytes{static_cast<uint8_t>(r.kind)});
  else if (r.op == TrapOp::SendTo)
    write_payload(w, r.payload);
  else
    w.u32(0);
  return w.take();
}

TrapRequest decode_request(std::span<const uint8_t> bytes) {
  ByteReader rd(bytes);
  if (rd.u8() != kTrapVersion) throw Error(Errc::DecodeError, "unsupported trap version");
  uint8_t op = rd.u8();
  if (op < 1 || op > 10) throw Error(Errc::DecodeError, "unknown trap op");
  TrapRequest r;
  r.op = static_cast<TrapOp>(op);
  r.handle = rd.u32();
  SockAddr a;
  a.ip.value = rd.u32();
  a.port = rd.u16();
  Bytes payload = read_payload(rd);
  if (!rd.done()) throw Error(Errc::DecodeError, "trailing bytes in trap request");

  if (r.op == TrapOp::Socket) {
    if (r.handle != 0 || payload.size() != 1 || payload[0] > 1)
      throw Error(Errc::DecodeError, "malformed Socket request");
    r.kind = static_cast<SocketKind>(payload[0]);
  } else if (r.handle == 0) {
    throw Error(Errc::DecodeError, "missing handle");
  }
  if (op_has_addr(r.op)) {
    r.addr = a;
  } else if (a.ip.value != 0 || a.port != 0) {
    throw Error(Errc::DecodeError, "unexpected address");
  }
  if (r.op == TrapOp::SendTo)
    r.payload = std::move(payload);
  else if (r.op != TrapOp::Socket && !payload.empty())
    throw Error(Errc::DecodeError, "unexpected payload");
  return r;
}

Bytes encode_reply(const TrapReply& r) {
  ByteWriter w;
  w.u8(kTrapVersion);
  w.u8(r.error ? static_cast<uint8_t>(1 + static_cast<uint8_t>(*r.error)) : 0);
  uint8_t flags = (r.handle ? kFlagHandle : 0) | (r.addr ? kFlagAddr : 0) |
                  (r.handle_transfer ? kFlagTransfer : 0);
  w.u8(flags);
  w.u32(r.handle.value_or(0));
  SockAddr a = r.addr.value_or(SockAddr{});
  w.u32(a.ip.value);
  w.u16(a.port);
  write_payload(w, r.payload);
  return w.take();
}

TrapReply decode_reply(std::span<const uint8_t> bytes) {
  ByteReader rd(bytes);
  if (rd.u8() != kTrapVersion) throw Error(Errc::DecodeError, "unsupported trap version");
  TrapReply r;
  uint8_t status = rd.u8();
  if (status > kMaxErrc + 1) throw Error(Errc::DecodeError, "unknown status");
  if (status) r.error = static_cast<Errc>(status - 1);
  uint8_t flags = rd.u8();
  if (flags & ~(kFlagHandle | kFlagAddr | kFlagTransfer))
    throw Error(Errc::DecodeError, "unknown reply flags");
  uint32_t handle = rd.u32();
  SockAddr a;
  a.ip.value = rd.u32();
  a.port = rd.u16();
  r.payload = read_payload(rd);
  if (!rd.done()) throw Error(Errc::DecodeError, "trailing bytes in trap reply");
  if (flags & kFlagHandle) r.handle = handle;
  if (flags & kFlagAddr) r.addr = a;
  r.handle_transfer = flags & kFlagTransfer;
  return r;
}

// --- channels -------------------------------------------------------------

TrapResponse InProcessChannel::call(const TrapRequest& req) {
  Bytes wire = encode_request(req);
  ServedReply served = service_.serve(app_, wire);
  TrapResponse out;
  out.reply = decode_reply(served.reply);
  out.transferred = std::move(served.transferred);
  return out;
}

void send_frame(int sock, std::span<const uint8_t> frame, int pass_fd) {
  iovec iov{const_cast<uint8_t*>(frame.data()), frame.size()};
  msghdr msg{};
  msg.msg_iov = &iov;
  msg.msg_iovlen = 1;
  alignas(cmsghdr) char ctrl[CMSG_SPACE(sizeof(int))] = {};
  if (pass_fd >= 0) {
    msg.msg_control = ctrl;
    msg.msg_controllen = sizeof ctrl;
    cmsghdr* c = CMSG_FIRSTHDR(&msg);
    c->cmsg_level = SOL_SOCKET;
    c->cmsg_type = SCM_RIGHTS;
    c->cmsg_len = CMSG_LEN(sizeof(int));
    std::memcpy(CMSG_DATA(c), &pass_fd, sizeof(int));
  }
  for (;;) {
    if (::sendmsg(sock, &msg, MSG_NOSIGNAL) >= 0) return;
    if (errno != EINTR) throw Error(Errc::Io, std::string("trap send: ") + std::strerror(errno));
  }
}

bool recv_frame(int sock, Bytes& frame, UniqueFd* received) {
  frame.resize(kMaxDatagram + 64);
  iovec iov{frame.data(), frame.size()};
  msghdr msg{};
  msg.msg_iov = &iov;
  msg.msg_iovlen = 1;
  alignas(cmsghdr) char ctrl[CMSG_SPACE(sizeof(int))] = {};
  msg.msg_control = ctrl;
  msg.msg_controllen = sizeof ctrl;
  ssize_t n;
  do {
    n = ::recvmsg(sock, &msg, MSG_CMSG_CLOEXEC);
  } while (n < 0 && errno == EINTR);
  if (n < 0) throw Error(Errc::Io, std::string("trap recv: ") + std::strerror(errno));
  if (n == 0) return false;
  frame.resize(static_cast<size_t>(n));
  for (cmsghdr* c = CMSG_FIRSTHDR(&msg); c; c = CMSG_NXTHDR(&msg, c)) {
    if (c->cmsg_level == SOL_SOCKET && c->cmsg_type == SCM_RIGHTS) {
      int fd;
      std::memcpy(&fd, CMSG_DATA(c), sizeof(int));
      if (received)
        received->reset(fd);
      else
        ::close(fd);
    }
  }
  return true;
}

std::unique_ptr<UnixTrapChannel> UnixTrapChannel::connect(const std::filesystem::path& path) {
  UniqueFd s(::socket(AF_UNIX, SOCK_SEQPACKET | SOCK_CLOEXEC, 0));
  if (!s) throw Error(Errc::AttachFailed, std::strerror(errno));
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  std::string p = path.string();
  if (p.size() >= sizeof addr.sun_path) throw Error(Errc::AttachFailed, "trap path too long");
  std::memcpy(addr.sun_path, p.c_str(), p.size() + 1);
  if (::connect(s.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
    throw Error(Errc::AttachFailed, "cannot reach trap handler at " + p + ": " + std::strerror(errno));
  return std::make_unique<UnixTrapChannel>(std::move(s));
}

TrapResponse UnixTrapChannel::call(const TrapRequest& req) {
  Bytes wire = encode_request(req);
  send_frame(sock_.get(), wire);
  Bytes frame;
  TrapResponse out;
  if (!recv_frame(sock_.get(), frame, &out.transferred))
    throw Error(Errc::Io, "trap handler closed the channel");
  out.reply = decode_reply(frame);
  if (out.reply.error == Errc::AttachFailed) throw Error(Errc::AttachFailed);
  return out;
}

void SandboxRegistry::unregister_app(const AppId& app) {
  registered_.erase(app);
  attached_.erase(app);
}

void SandboxRegistry::attach(const AppId& app) {
  if (!registered_.count(app)) throw Error(Errc::AttachFailed, app.value + " is not registered");
  if (!attached_.insert(app).second)
    throw Error(Errc::AttachFailed, app.value + " already has a trap channel");
}

std::filesystem::path trap_path(const std::filesystem::path& run_dir, const AppId& app) {
  return run_dir / "apps" / app.value / "trap";
}

// --- generator shim -------------------------------------------------------

VirtualSockets VirtualSockets::from_env() {
  const char* path = std::getenv("APPNET_TRAP");
  if (!path) throw Error(Errc::AttachFailed, "APPNET_TRAP is not set");
  return VirtualSockets(UnixTrapChannel::connect(path));
}

TrapResponse VirtualSockets::call(const TrapRequest& req) {
  ++calls_;
  TrapResponse res = channel_->call(req);
  if (res.reply.error) throw Error(*res.reply.error);
  return res;
}

uint32_t VirtualSockets::socket(SocketKind kind) {
  TrapRequest r;
  r.op = TrapOp::Socket;
  r.kind = kind;
  return call(r).reply.handle.value();
}

void VirtualSockets::bind(uint32_t h, SockAddr addr) {
  call(TrapRequest{TrapOp::Bind, h, addr, {}, {}});
}

void VirtualSockets::listen(uint32_t h) { call(TrapRequest{TrapOp::Listen, h, {}, {}, {}}); }

int VirtualSockets::connect(uint32_t h, SockAddr dest) {
  TrapResponse res = call(TrapRequest{TrapOp::Connect, h, dest, {}, {}});
  if (!res.transferred) return -1;  // datagram handles pin an address only
  int fd = res.transferred.get();
  fds_[h] = std::move(res.transferred);
  return fd;
}

VirtualSockets::Accepted VirtualSockets::accept(uint32_t h) {
  TrapResponse res = call(TrapRequest{TrapOp::Accept, h, {}, {}, {}});
  uint32_t nh = res.reply.handle.value();
  int fd = res.transferred.get();
  fds_[nh] = std::move(res.transferred);
  return Accepted{nh, res.reply.addr.value_or(SockAddr{}), fd};
}

SockAddr VirtualSockets::getsockname(uint32_t h) {
  return call(TrapRequest{TrapOp::GetSockName, h, {}, {}, {}}).reply.addr.value();
}

SockAddr VirtualSockets::getpeername(uint32_t h) {
  return call(TrapRequest{TrapOp::GetPeerName, h, {}, {}, {}}).reply.addr.value();
}

void VirtualSockets::sendto(uint32_t h, SockAddr dest, std::span<const uint8_t> payload) {
  if (payload.size() > kMaxDatagram) throw Error(Errc::MessageTooLong);
  call(TrapRequest{TrapOp::SendTo, h, dest, Bytes(payload.begin(), payload.end()), {}});
}

VirtualSockets::Datagram VirtualSockets::recvfrom(uint32_t h) {
  TrapResponse res = call(TrapRequest{TrapOp::RecvFrom, h, {}, {}, {}});
  return Datagram{res.reply.addr.value_or(SockAddr{}), std::move(res.reply.payload)};
}

void VirtualSockets::close(uint32_t h) {
  fds_.erase(h);
  call(TrapRequest{TrapOp::Close, h, {}, {}, {}});
}

std::optional<Ipv4> VirtualSockets::resolve(const std::string& name) {
  if (auto ip = Ipv4::parse(name)) return ip;
  uint32_t h = socket(SocketKind::Datagram);
  uint16_t id = dns_id_++;
  Bytes q = encode_dns_query(id, name);
  std::optional<Ipv4> out;
  try {
    sendto(h, SockAddr{Ipv4{0x7F000035}, kDnsPort}, q);  // 127.0.0.53:53
    Datagram d = recvfrom(h);
    DnsResponse resp = parse_dns_response(d.payload);
    if (resp.id == id && resp.rcode == DnsRcode::NoError) out = resp.addr;
  } catch (...) {
    close(h);
    throw;
  }
  close(h);
  return out;
}

int VirtualSockets::fd(uint32_t h) const {
  auto it = fds_.find(h);
  return it == fds_.end() ? -1 : it->second.get();
}

}  // namespace appnet
