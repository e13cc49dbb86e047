#include "appnet/bench.h"

#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <thread>
#include <vector>

#include "appnet/runtime.h"

namespace appnet {

namespace {

void echo_until_eof(int fd) {
  std::vector<char> buf(256 * 1024);
  for (;;) {
    ssize_t n = ::read(fd, buf.data(), buf.size());
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return;
    ssize_t off = 0;
    while (off < n) {
      ssize_t w = ::send(fd, buf.data() + off, static_cast<size_t>(n - off), MSG_NOSIGNAL);
      if (w < 0 && errno == EINTR) continue;
      if (w <= 0) return;
      off += w;
    }
  }
}

/// Bytes per second of round-tripped payload.
double drive(int fd, size_t size, double seconds) {
  std::vector<char> out(size, 'x'), in(size);
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  const auto until = start + std::chrono::duration<double>(seconds);
  uint64_t moved = 0;
  while (clock::now() < until) {
    size_t off = 0;
    while (off < size) {
      ssize_t w = ::send(fd, out.data() + off, size - off, MSG_NOSIGNAL);
      if (w < 0 && errno == EINTR) continue;
      if (w <= 0) throw Error(Errc::Io, "bench write failed");
      off += static_cast<size_t>(w);
    }
    size_t got = 0;
    while (got < size) {
      ssize_t r = ::read(fd, in.data() + got, size - got);
      if (r < 0 && errno == EINTR) continue;
      if (r <= 0) throw Error(Errc::Io, "bench read failed");
      got += static_cast<size_t>(r);
    }
    moved += size;
  }
  const double elapsed = std::chrono::duration<double>(clock::now() - start).count();
  return static_cast<double>(moved) / elapsed;
}

double measure(int client_fd, int server_fd, size_t size, double seconds) {
  std::thread echo([server_fd] { echo_until_eof(server_fd); });
  double bps = 0;
  try {
    bps = drive(client_fd, size, seconds);
  } catch (...) {
    ::shutdown(client_fd, SHUT_RDWR);
    echo.join();
    throw;
  }
  ::shutdown(client_fd, SHUT_WR);
  echo.join();
  return bps;
}

}  // namespace

BenchResult bench_local_vs_hairpin(size_t msg_size, double seconds) {
  if (msg_size == 0 || seconds <= 0) throw Error(Errc::InvalidArgument, "size and seconds must be positive");
  char tmpl[] = "/tmp/appnet-bench-XXXXXX";
  if (!::mkdtemp(tmpl)) throw Error(Errc::Io, "mkdtemp failed");
  const std::filesystem::path dir = tmpl;

  RuntimeConfig cfg;
  cfg.node.bind = RealEndpoint{Ipv4{0x7F000001}, 0};
  cfg.node.run_dir = dir;
  cfg.control = false;
  BenchResult result;
  result.size = msg_size;
  {
    NodeRuntime rt(cfg);
    rt.start();

    AppSpec server_spec;
    server_spec.name = "bench-echo";
    server_spec.vip = VirtualIp::parse("10.77.0.1");
    const AppIdentity server = rt.add_app(server_spec);
    const AppIdentity client = rt.add_app(AppSpec{});
    VirtualSockets srv(rt.local_channel(server.app_id));
    VirtualSockets cli(rt.local_channel(client.app_id));

    const uint16_t port = 7000;
    uint32_t lh = srv.socket(SocketKind::Stream);
    srv.bind(lh, SockAddr{Ipv4{0}, port});
    srv.listen(lh);

    // Fast path: the switch hands both ends a local channel.
    uint32_t ch = cli.socket(SocketKind::Stream);
    int cfd = cli.connect(ch, SockAddr{server.effective_vip.ip(), port});
    auto acc = srv.accept(lh);
    result.local_bps = measure(cfd, acc.fd, msg_size, seconds);
    cli.close(ch);
    srv.close(acc.handle);

    // Hairpin: the same listener reached through the host's TCP stack.
    const RealEndpoint real = rt.with_node([&](Node& n) {
      return n.table().lookup(ServiceKey{server.effective_vip, port}).front().real;
    });
    Transport& tr = rt.with_node([](Node& n) -> Transport& { return n.transport(); });
    UniqueFd tcp = tr.connect_stream(real, Preamble{client.effective_vip.ip(), 49999});
    auto acc2 = srv.accept(lh);
    result.hairpin_bps = measure(tcp.get(), acc2.fd, msg_size, seconds);
    srv.close(acc2.handle);
    srv.close(lh);
    rt.stop();
  }
  std::error_code ec;
  std::filesystem::remove_all(dir, ec);
  result.ratio = result.hairpin_bps > 0 ? result.local_bps / result.hairpin_bps : 0;
  return result;
}

std::string bench_csv_header() { return "size,local_bps,hairpin_bps,ratio"; }

std::string bench_csv_row(const BenchResult& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.0f,%.0f,%.3f", r.size, r.local_bps, r.hairpin_bps, r.ratio);
  return buf;
}

}  // namespace appnet
