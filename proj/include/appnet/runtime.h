#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "appnet/node.h"
#include "appnet/transport.h"

namespace appnet {

/// Transport over real sockets. Listener and receiver threads hand traffic
/// to the sink while holding the owner's mutex, then wake waiters.
class PosixTransport : public Transport {
 public:
  PosixTransport(Ipv4 host_ip, std::mutex& mu, std::condition_variable& cv);
  ~PosixTransport() override;

  void set_sink(TransportSink* sink) { sink_ = sink; }
  /// Stops every receiver thread. Call without holding the mutex.
  void shutdown();

  Ipv4 host_ip() const override { return ip_; }
  RealEndpoint open_stream_listener() override;
  RealEndpoint open_datagram() override;
  void close_endpoint(RealEndpoint ep) override;
  UniqueFd connect_stream(RealEndpoint to, const Preamble& preamble) override;
  void send_datagram(RealEndpoint from, RealEndpoint to, Bytes wire) override;

 private:
  struct Endpoint {
    UniqueFd fd;
    std::thread worker;
    bool stream = true;
  };

  RealEndpoint open(bool stream);
  void accept_loop(RealEndpoint ep, int fd);
  void datagram_loop(RealEndpoint ep, int fd);

  Ipv4 ip_;
  std::mutex& mu_;
  std::condition_variable& cv_;
  TransportSink* sink_ = nullptr;
  std::mutex eps_mu_;
  std::map<RealEndpoint, std::unique_ptr<Endpoint>> eps_;
  std::vector<std::unique_ptr<Endpoint>> closed_;
  std::atomic<bool> stopping_{false};
};

struct RuntimeConfig {
  NodeConfig node;
  std::chrono::milliseconds period{200};
  bool control = true;  // serve <run_dir>/control
};

/// A node on real sockets: gossip over UDP with a TCP side channel for
/// Sync traffic, trap servers on Unix seqpacket sockets, gateway listeners
/// and the control socket. One mutex guards the node.
class NodeRuntime {
 public:
  explicit NodeRuntime(RuntimeConfig cfg);
  ~NodeRuntime();

  NodeRuntime(const NodeRuntime&) = delete;
  NodeRuntime& operator=(const NodeRuntime&) = delete;

  /// Throws BindFailed when the gossip address is taken.
  void start();
  void stop();

  RealEndpoint gossip_addr() const { return advertised_; }
  const std::filesystem::path& run_dir() const { return cfg_.node.run_dir; }

  /// Adds an application and starts its trap server.
  AppIdentity add_app(const AppSpec& spec);
  size_t remove_app(const AppId& app);
  /// In-process generator end; Accept and RecvFrom block until ready.
  std::unique_ptr<TrapChannel> local_channel(const AppId& app);

  /// Runs `fn` with the node locked.
  template <typename Fn>
  decltype(auto) with_node(Fn&& fn) {
    std::lock_guard lock(mu_);
    return fn(*node_);
  }

  /// External ports with a live listener.
  std::vector<uint16_t> gateway_ports();
  uint64_t rounds() const { return round_.load(); }

  /// Handles one control request (a JSON object) and returns the reply.
  std::string control(const std::string& request_json);

 private:
  struct TrapServer {
    UniqueFd listen;
    std::atomic<int> conn{-1};
    std::thread worker;
  };
  struct GatewayListener {
    UniqueFd fd;
    std::thread worker;
  };
  class BlockingChannel;

  ServedReply serve_blocking(std::unique_lock<std::mutex>& lock, const AppId& app,
                             std::span<const uint8_t> frame);
  void start_trap_server(const AppId& app);
  void trap_loop(AppId app, TrapServer* ts);
  void gossip_loop();
  void sync_loop();
  void tick_loop();
  void control_loop();
  void send(std::vector<WireOut> wires);
  void sync_gateways();
  void gateway_loop(uint16_t port, int fd);

  RuntimeConfig cfg_;
  RealEndpoint advertised_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::unique_ptr<PosixTransport> transport_;
  std::unique_ptr<Node> node_;

  UniqueFd gossip_udp_;
  UniqueFd sync_tcp_;
  UniqueFd control_fd_;
  std::vector<std::thread> threads_;
  std::atomic<bool> running_{false};
  std::atomic<uint64_t> round_{0};

  std::map<AppId, std::unique_ptr<TrapServer>> traps_;
  std::vector<std::unique_ptr<TrapServer>> retired_traps_;

  std::mutex gw_mu_;
  std::map<uint16_t, std::unique_ptr<GatewayListener>> gateways_;
  std::vector<std::unique_ptr<GatewayListener>> retired_gateways_;
  std::mutex sessions_mu_;
  std::vector<std::thread> sessions_;
  std::map<int, uint16_t> session_fds_;  // fd -> external port

  std::mutex control_mu_;
  std::vector<std::thread> control_threads_;
  std::set<int> control_conns_;
};

}  // namespace appnet
