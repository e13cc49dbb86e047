#pragma once
// Helpers for tests that run real nodes on loopback.

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <thread>

#include "appnet/runtime.h"

namespace rt_util {

using namespace appnet;

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    char tmpl[] = "/tmp/appnet-t-XXXXXX";
    path = ::mkdtemp(tmpl);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

inline RuntimeConfig config(const std::filesystem::path& dir, bool gateway = false,
                            std::optional<RealEndpoint> join = std::nullopt) {
  RuntimeConfig c;
  c.node.bind = RealEndpoint{Ipv4{0x7F000001}, 0};
  c.node.join = join;
  c.node.gateway = gateway;
  c.node.run_dir = dir;
  c.period = std::chrono::milliseconds(50);
  return c;
}

inline bool wait_for(const std::function<bool()>& pred, double seconds = 10) {
  const auto until = std::chrono::steady_clock::now() + std::chrono::duration<double>(seconds);
  while (std::chrono::steady_clock::now() < until) {
    if (pred()) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  return pred();
}

inline bool write_all(int fd, const char* p, size_t n) {
  while (n) {
    ssize_t w = ::send(fd, p, n, MSG_NOSIGNAL);
    if (w <= 0) return false;
    p += w;
    n -= static_cast<size_t>(w);
  }
  return true;
}

inline void echo_until_eof(int fd) {
  char buf[65536];
  ssize_t n;
  while ((n = ::read(fd, buf, sizeof buf)) > 0)
    if (!write_all(fd, buf, static_cast<size_t>(n))) break;
  ::shutdown(fd, SHUT_WR);
}

/// Plain TCP connect to 127.0.0.1:port; -1 on failure.
inline int tcp_connect(uint16_t port) {
  int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(port);
  sa.sin_addr.s_addr = htonl(0x7F000001);
  if (::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) {
    ::close(fd);
    return -1;
  }
  return fd;
}

/// Sends `payload` and collects everything echoed back until EOF.
inline std::string round_trip(int fd, const std::string& payload) {
  std::string got;
  std::thread reader([&] {
    char buf[65536];
    ssize_t n;
    while ((n = ::read(fd, buf, sizeof buf)) > 0) got.append(buf, static_cast<size_t>(n));
  });
  write_all(fd, payload.data(), payload.size());
  ::shutdown(fd, SHUT_WR);
  reader.join();
  return got;
}

}  // namespace rt_util
