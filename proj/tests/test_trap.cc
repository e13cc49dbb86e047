#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/socket.h>
#include <unistd.h>

#include <random>
#include <thread>

#include "appnet/trap.h"

using namespace appnet;

namespace {

TrapRequest random_request(std::mt19937& gen) {
  TrapRequest r;
  r.op = static_cast<TrapOp>(1 + gen() % 10);
  r.handle = r.op == TrapOp::Socket ? 0 : 1 + gen() % 1000;
  if (r.op == TrapOp::Socket) r.kind = gen() % 2 ? SocketKind::Stream : SocketKind::Datagram;
  if (r.op == TrapOp::Bind || r.op == TrapOp::Connect || r.op == TrapOp::SendTo)
    r.addr = SockAddr{Ipv4{static_cast<uint32_t>(gen())}, static_cast<uint16_t>(gen())};
  if (r.op == TrapOp::SendTo) {
    r.payload.resize(gen() % 2000);
    for (auto& b : r.payload) b = static_cast<uint8_t>(gen());
  }
  return r;
}

TrapReply random_reply(std::mt19937& gen) {
  TrapReply r;
  if (gen() % 4 == 0) r.error = static_cast<Errc>(gen() % 26);
  if (gen() % 2) r.handle = static_cast<uint32_t>(gen());
  if (gen() % 2) r.addr = SockAddr{Ipv4{static_cast<uint32_t>(gen())}, static_cast<uint16_t>(gen())};
  r.handle_transfer = !r.error && gen() % 3 == 0;
  if (gen() % 3 == 0) {
    r.payload.resize(gen() % 1500);
    for (auto& b : r.payload) b = static_cast<uint8_t>(gen());
  }
  return r;
}

/// Serves one Unix trap channel with a fixed behaviour: Socket hands out
/// handles, Connect transfers one end of a fresh socketpair that already
/// holds data from an eager writer.
void fake_handler(int sock) {
  uint32_t next = 1;
  Bytes frame;
  while (recv_frame(sock, frame)) {
    TrapRequest req = decode_request(frame);
    TrapReply rep;
    int pass = -1;
    int pair[2] = {-1, -1};
    if (req.op == TrapOp::Socket) {
      rep.handle = next++;
    } else if (req.op == TrapOp::Connect) {
      ::socketpair(AF_UNIX, SOCK_STREAM, 0, pair);
      const char hello[] = "early bytes";
      ::write(pair[1], hello, sizeof hello - 1);
      ::close(pair[1]);
      rep.handle_transfer = true;
      pass = pair[0];
    } else {
      rep.error = Errc::BadHandle;
    }
    send_frame(sock, encode_reply(rep), pass);
    if (pass >= 0) ::close(pass);
  }
}

}  // namespace

TEST_CASE("connect request round trips bit-exactly") {
  TrapRequest r;
  r.op = TrapOp::Connect;
  r.handle = 3;
  r.addr = SockAddr::parse("10.1.1.1:80");
  Bytes wire = encode_request(r);
  CHECK(wire[0] == kTrapVersion);
  CHECK(wire[1] == static_cast<uint8_t>(TrapOp::Connect));
  CHECK(decode_request(wire) == r);
  CHECK(encode_request(decode_request(wire)) == wire);
}

TEST_CASE("randomized codec round trips") {
  std::mt19937 gen(17);
  for (int i = 0; i < 5000; ++i) {
    TrapRequest q = random_request(gen);
    CHECK(decode_request(encode_request(q)) == q);
    TrapReply p = random_reply(gen);
    CHECK(decode_reply(encode_reply(p)) == p);
  }
  TrapRequest send;
  send.op = TrapOp::SendTo;
  send.handle = 2;
  send.addr = SockAddr::parse("10.0.0.1:53");
  send.payload.assign(1400, 0xAB);
  CHECK(decode_request(encode_request(send)) == send);
}

TEST_CASE("malformed frames are rejected") {
  TrapRequest r;
  r.op = TrapOp::SendTo;
  r.handle = 1;
  r.addr = SockAddr::parse("10.0.0.1:53");
  r.payload = {1, 2, 3};
  Bytes wire = encode_request(r);
  for (size_t cut = 0; cut < wire.size(); ++cut) {
    Bytes part(wire.begin(), wire.begin() + static_cast<long>(cut));
    CHECK_THROWS_AS(decode_request(part), Error);
  }
  Bytes bad_op = wire;
  bad_op[1] = 0x42;
  CHECK_THROWS_AS(decode_request(bad_op), Error);
  Bytes bad_ver = wire;
  bad_ver[0] = 9;
  CHECK_THROWS_AS(decode_request(bad_ver), Error);
  Bytes trailing = wire;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_request(trailing), Error);
}

TEST_CASE("sandbox registry allows one channel per registered app") {
  SandboxRegistry reg;
  AppId a{"a"};
  CHECK_THROWS_AS(reg.attach(a), Error);
  reg.register_app(a);
  reg.attach(a);
  CHECK(reg.attached(a));
  try {
    reg.attach(a);
    FAIL("second attach accepted");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::AttachFailed);
  }
  reg.detach(a);
  reg.attach(a);
  reg.unregister_app(a);
  CHECK_FALSE(reg.attached(a));
}

TEST_CASE("unix channel moves live handles without losing early bytes") {
  int sp[2];
  REQUIRE(::socketpair(AF_UNIX, SOCK_SEQPACKET, 0, sp) == 0);
  std::thread handler(fake_handler, sp[1]);
  {
    VirtualSockets vs(std::make_unique<UnixTrapChannel>(UniqueFd(sp[0])));
    uint32_t h = vs.socket(SocketKind::Stream);
    CHECK(h == 1);
    int fd = vs.connect(h, *SockAddr::parse("10.1.1.1:80"));
    REQUIRE(fd >= 0);
    char buf[64] = {};
    ssize_t n = ::read(fd, buf, sizeof buf);
    CHECK(std::string(buf, static_cast<size_t>(std::max<ssize_t>(n, 0))) == "early bytes");
    CHECK(vs.trap_calls() == 2);
    try {
      vs.listen(h);
      FAIL("no error");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::BadHandle);
    }
  }
  handler.join();
  ::close(sp[1]);
}

TEST_CASE("trap path convention") {
  CHECK(trap_path("/run/x", AppId{"abc-1"}) == std::filesystem::path("/run/x/apps/abc-1/trap"));
}
