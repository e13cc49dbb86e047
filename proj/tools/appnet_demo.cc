// Small programs meant to run under `appnet run`.
#include <signal.h>
#include <sys/socket.h>
#include <unistd.h>

#include <iostream>
#include <string>
#include <thread>

#include "appnet/trap.h"

using namespace appnet;

namespace {

void echo(int fd) {
  char buf[65536];
  for (;;) {
    ssize_t n = ::read(fd, buf, sizeof buf);
    if (n <= 0) return;
    if (::send(fd, buf, static_cast<size_t>(n), MSG_NOSIGNAL) != n) return;
  }
}

int usage() {
  std::cerr << "usage: appnet_demo echo-server <port> | echo-client <host-or-vip> <port> <text>\n";
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  ::signal(SIGPIPE, SIG_IGN);
  if (argc < 3) return usage();
  const std::string mode = argv[1];
  try {
    VirtualSockets vs = VirtualSockets::from_env();
    if (mode == "echo-server") {
      const auto port = static_cast<uint16_t>(std::stoi(argv[2]));
      uint32_t h = vs.socket(SocketKind::Stream);
      vs.bind(h, SockAddr{Ipv4{0}, port});
      vs.listen(h);
      std::cerr << "listening on " << vs.getsockname(h).str() << "\n";
      for (;;) {
        auto a = vs.accept(h);
        std::cerr << "peer " << a.peer.str() << "\n";
        int fd = ::dup(a.fd);
        vs.close(a.handle);
        std::thread([fd] {
          echo(fd);
          ::close(fd);
        }).detach();
      }
    }
    if (mode == "echo-client" && argc >= 5) {
      std::optional<Ipv4> ip = Ipv4::parse(argv[2]);
      if (!ip) ip = vs.resolve(argv[2]);
      if (!ip) {
        std::cerr << "NXDOMAIN " << argv[2] << "\n";
        return 1;
      }
      uint32_t h = vs.socket(SocketKind::Stream);
      int fd = vs.connect(h, SockAddr{*ip, static_cast<uint16_t>(std::stoi(argv[3]))});
      const std::string text = argv[4];
      ::send(fd, text.data(), text.size(), MSG_NOSIGNAL);
      ::shutdown(fd, SHUT_WR);
      std::string back;
      char buf[4096];
      ssize_t n;
      while ((n = ::read(fd, buf, sizeof buf)) > 0) back.append(buf, static_cast<size_t>(n));
      std::cout << back << "\n";
      std::cerr << "local " << vs.getsockname(h).str() << " peer " << vs.getpeername(h).str() << "\n";
      return back == text ? 0 : 1;
    }
  } catch (const Error& e) {
    std::cerr << errc_name(e.code()) << ": " << e.what() << "\n";
    return 1;
  }
  return usage();
}
