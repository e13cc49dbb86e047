#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "appnet/hash.h"
#include "appnet/node.h"
#include "appnet/trap.h"

namespace appnet {

struct NetProfile {
  double loss = 0.0;
  uint32_t latency_min = 0;  // ticks
  uint32_t latency_max = 0;
};

class SimCluster;

/// Transport backed by the simulated network. Streams are socketpairs
/// connected synchronously; datagrams go through the tick-scheduled queue.
class SimTransport : public Transport {
 public:
  SimTransport(SimCluster& net, std::string node, Ipv4 ip) : net_(net), node_(std::move(node)), ip_(ip) {}

  Ipv4 host_ip() const override { return ip_; }
  RealEndpoint open_stream_listener() override;
  RealEndpoint open_datagram() override;
  void close_endpoint(RealEndpoint ep) override;
  UniqueFd connect_stream(RealEndpoint to, const Preamble& preamble) override;
  void send_datagram(RealEndpoint from, RealEndpoint to, Bytes wire) override;

 private:
  SimCluster& net_;
  std::string node_;
  Ipv4 ip_;
  uint16_t next_port_ = 20000;
};

struct ConnectOutcome {
  std::optional<Errc> error;  // nullopt: connected
  std::string reached;        // label of the accepting application
  ChannelKind channel = ChannelKind::Remote;
  SockAddr client_local;      // getsockname on the client
  SockAddr server_peer;       // getpeername on the server
  bool echoed = false;
};

struct NodeOptions {
  bool gateway = false;
  std::optional<std::string> join;
  SelectionStrategy strategy;
};

/// Deterministic in-process cluster on a logical clock. Single-threaded.
class SimCluster {
 public:
  explicit SimCluster(uint64_t seed, NetProfile net = {});
  ~SimCluster();

  Node& start(const std::string& name, NodeOptions opts = {});
  Node& node(const std::string& name);
  bool alive(const std::string& name) const;
  std::vector<std::string> alive_nodes() const;
  Ipv4 ip_of(const std::string& name) const;

  void crash(const std::string& name);
  void partition(const std::set<std::string>& a, const std::set<std::string>& b);
  void heal();
  void set_profile(NetProfile net) { net_ = net; }

  /// One protocol period on every live node, then delivery until quiet.
  void step();
  void run_until(uint64_t tick);
  uint64_t tick() const { return tick_; }

  // --- applications, driven through their trap channels --------------------
  AppIdentity add_app(const std::string& node, const std::string& label, const AppSpec& spec);
  void remove_app(const std::string& label);
  const AppIdentity& identity(const std::string& label) const;
  std::string node_of(const std::string& label) const;
  VirtualSockets& sockets(const std::string& label);
  /// Binds and listens (stream) or binds (datagram) on the app's vip.
  uint32_t serve(const std::string& label, uint16_t port, SocketKind kind = SocketKind::Stream);
  /// Connects, finds the accepting application, exchanges one echo.
  ConnectOutcome connect(const std::string& client, SockAddr dest);
  /// Connects straight to a real endpoint without identifying itself.
  bool raw_connect(const std::string& from_node, RealEndpoint to);
  /// Sends one datagram and reports which application received it.
  std::optional<std::string> datagram(const std::string& client, SockAddr dest,
                                      const std::string& text);

  // --- observation ----------------------------------------------------------
  const std::vector<std::string>& trace() const { return trace_; }
  void note(const std::string& json_line) { trace_.push_back(json_line); }
  /// Trap reply addresses that matched a real endpoint or host address.
  const std::vector<std::string>& identity_leaks() const { return leaks_; }
  uint64_t trap_replies_scanned() const { return scanned_; }
  uint64_t messages_sent() const { return sent_; }
  uint64_t messages_dropped() const { return dropped_; }

 private:
  friend class SimTransport;

  struct Message {
    uint64_t at;
    uint64_t seq;
    std::string from;
    RealEndpoint src;
    RealEndpoint dst;
    Bytes bytes;
    bool gossip;
    bool operator>(const Message& o) const { return std::tie(at, seq) > std::tie(o.at, o.seq); }
  };
  struct SimNode {
    std::string name;
    std::unique_ptr<SimTransport> transport;
    std::unique_ptr<Node> node;
    bool alive = true;
  };
  struct SimApp {
    std::string node;
    AppIdentity id;
    std::unique_ptr<VirtualSockets> sockets;
    std::vector<std::pair<uint32_t, SocketKind>> served;
  };

  bool blocked(const std::string& a, const std::string& b) const;
  std::optional<std::string> node_at(Ipv4 ip) const;
  void enqueue(const std::string& from, RealEndpoint src, RealEndpoint dst, Bytes bytes,
               bool gossip, bool reliable);
  void send_wires(const std::string& from, std::vector<WireOut> wires);
  void drain();
  void scan_reply(const TrapReply& r);
  std::optional<std::pair<std::string, VirtualSockets::Accepted>> find_accept();

  uint64_t seed_;
  NetProfile net_;
  Rng rng_;
  uint64_t tick_ = 0;
  uint64_t msg_seq_ = 0;
  std::map<std::string, SimNode> nodes_;
  std::map<uint32_t, std::string> by_ip_;
  std::set<RealEndpoint> endpoints_;
  std::set<RealEndpoint> ever_opened_;
  std::vector<std::pair<std::set<std::string>, std::set<std::string>>> partitions_;
  std::priority_queue<Message, std::vector<Message>, std::greater<>> queue_;
  std::map<std::string, SimApp> apps_;
  std::vector<std::string> trace_;
  std::vector<std::string> leaks_;
  uint64_t scanned_ = 0;
  uint64_t sent_ = 0;
  uint64_t dropped_ = 0;
};

// --- scripts ----------------------------------------------------------------

struct ScriptEvent {
  uint64_t tick = 0;
  size_t line = 0;
  std::vector<std::string> words;  // action followed by its arguments
};

struct ClusterScript {
  uint64_t seed = 1;
  NetProfile net;
  std::vector<ScriptEvent> events;  // sorted by tick, stable by line
};

/// Line format: `seed <n>`, `net loss <p> latency <min> <max>`, and
/// `tick <n> <action> <args...>`. '#' starts a comment.
ClusterScript parse_script(const std::string& text);

struct ScriptResult {
  std::vector<std::string> trace;  // JSON lines
  size_t assertions = 0;
  std::vector<std::string> identity_leaks;
  uint64_t trap_replies_scanned = 0;
};

/// Runs the script to its last event. A failed assertion throws
/// AssertionFailed naming the tick, the expectation and the observation.
ScriptResult run_script(const ClusterScript& script);

}  // namespace appnet
