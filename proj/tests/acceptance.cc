// Acceptance run: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include "appnet/bench.h"
#include "appnet/names.h"
#include "appnet/sim.h"
#include "merge_oracle.h"
#include "runtime_util.h"

using namespace appnet;
using namespace rt_util;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

AppSpec spec(std::vector<std::string> args) { return parse_app_spec(args); }

// Identity scan totals across every scenario below.
struct Scan {
  std::mutex mu;
  uint64_t replies = 0;
  std::vector<std::string> leaks;
  std::vector<std::string> scenarios;

  void add(const std::string& name, SimCluster& sim) {
    std::lock_guard lk(mu);
    replies += sim.trap_replies_scanned();
    leaks.insert(leaks.end(), sim.identity_leaks().begin(), sim.identity_leaks().end());
    scenarios.push_back(name);
  }
} scan;

// Runtime nodes: every reply address must be virtual. Real endpoints and
// host addresses all live in 127/8 here.
void observe_runtime(NodeRuntime& rt, const std::string& name) {
  {
    std::lock_guard lk(scan.mu);
    scan.scenarios.push_back(name);
  }
  rt.with_node([](Node& n) {
    n.set_reply_observer([](const AppId& app, const TrapReply& r) {
      std::lock_guard lk(scan.mu);
      ++scan.replies;
      if (r.addr && (r.addr->ip.value >> 24) == 127) scan.leaks.push_back(app.value + " saw " + r.addr->str());
    });
  });
}

uint64_t fnv_score(const std::string& client, const ServiceKey& key, const ServiceEntry& c, uint64_t seed) {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto eat = [&](uint8_t b) {
    h ^= b;
    h *= 0x100000001b3ULL;
  };
  for (unsigned char ch : client) eat(ch);
  eat(0);
  const uint32_t v = key.vip.value();
  for (int s = 24; s >= 0; s -= 8) eat(static_cast<uint8_t>(v >> s));
  eat(static_cast<uint8_t>(key.port >> 8));
  eat(static_cast<uint8_t>(key.port));
  for (uint8_t b : c.host.bytes) eat(b);
  for (unsigned char ch : c.app_id.value) eat(ch);
  uint64_t z = h ^ seed;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Brute force: score every candidate, keep the first maximum.
AppId oracle_pick(const std::string& client, const ServiceKey& key, const std::vector<ServiceEntry>& cands,
                  uint64_t seed) {
  size_t best = 0;
  for (size_t i = 1; i < cands.size(); ++i)
    if (fnv_score(client, key, cands[i], seed) > fnv_score(client, key, cands[best], seed)) best = i;
  return cands[best].app_id;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// --- 1 ------------------------------------------------------------------------

Verdict three_tier() {
  const auto t0 = std::chrono::steady_clock::now();
  ClusterScript script = parse_script(read_file(APPNET_SOURCE_DIR "/scenarios/three_tier.script"));
  ScriptResult r = run_script(script);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  {
    std::lock_guard lk(scan.mu);
    scan.replies += r.trap_replies_scanned;
    scan.leaks.insert(scan.leaks.end(), r.identity_leaks.begin(), r.identity_leaks.end());
    scan.scenarios.push_back("three-tier");
  }
  const uint64_t last = script.events.empty() ? 0 : script.events.back().tick;
  return {secs < 5.0, fmt("%zu assertions held through tick %llu in %.3f s (limit 5 s)", r.assertions,
                          static_cast<unsigned long long>(last), secs)};
}

// --- 2 ------------------------------------------------------------------------

const ServiceKey kLbKey{VirtualIp::parse("10.50.0.1"), 80};

void lb_cluster(SimCluster& sim, SelectionStrategy strategy) {
  sim.start("h1");
  sim.start("h2", {.join = "h1"});
  sim.start("h3", {.join = "h1", .strategy = strategy});
  sim.add_app("h1", "s1", spec({"--ip", "10.50.0.1"}));
  sim.add_app("h2", "s2", spec({"--ip", "10.50.0.1"}));
  sim.serve("s1", 80);
  sim.serve("s2", 80);
}

struct LbRun {
  std::vector<std::string> reached;
  size_t oracle_agree = 0;
  size_t errors = 0;
};

LbRun rendezvous_run(uint64_t seed, uint64_t strategy_seed) {
  SimCluster sim(seed);
  lb_cluster(sim, {Strategy::Rendezvous, strategy_seed});
  for (int i = 0; i < 1000; ++i) sim.add_app("h3", fmt("client%04d", i), {});
  sim.run_until(8);
  const auto cands = sim.node("h3").table().lookup(kLbKey);
  std::map<std::string, std::string> label_of;
  label_of[sim.identity("s1").app_id.value] = "s1";
  label_of[sim.identity("s2").app_id.value] = "s2";
  LbRun out;
  for (int i = 0; i < 1000; ++i) {
    const std::string c = fmt("client%04d", i);
    ConnectOutcome o = sim.connect(c, SockAddr{kLbKey.vip.ip(), kLbKey.port});
    if (o.error) ++out.errors;
    out.reached.push_back(o.reached);
    if (cands.size() == 2 && label_of[oracle_pick(sim.identity(c).app_id.value, kLbKey, cands, strategy_seed).value] == o.reached)
      ++out.oracle_agree;
  }
  scan.add("rendezvous", sim);
  return out;
}

Verdict load_balancing() {
  const uint64_t strategy_seed = 0x5eed;
  LbRun a = rendezvous_run(21, strategy_seed);
  LbRun b = rendezvous_run(21, strategy_seed);
  const auto n1 = std::count(a.reached.begin(), a.reached.end(), "s1");
  const auto n2 = std::count(a.reached.begin(), a.reached.end(), "s2");

  SimCluster rr(22);
  lb_cluster(rr, {Strategy::RoundRobin, 0});
  rr.add_app("h3", "one", {});
  rr.run_until(8);
  std::string seq;
  bool alternates = true;
  for (int i = 0; i < 20; ++i) {
    ConnectOutcome o = rr.connect("one", SockAddr{kLbKey.vip.ip(), kLbKey.port});
    seq += o.reached == "s1" ? 'a' : o.reached == "s2" ? 'b' : '?';
    if (o.error) alternates = false;
  }
  for (size_t i = 1; i < seq.size(); ++i)
    if (seq[i] == seq[i - 1] || seq[i] == '?' || (i >= 2 && seq[i] != seq[i - 2])) alternates = false;
  scan.add("round-robin", rr);

  const bool pass = a.errors == 0 && n1 >= 300 && n2 >= 300 && a.oracle_agree == 1000 &&
                    a.reached == b.reached && alternates;
  return {pass, fmt("rendezvous s1=%ld s2=%ld (min 300), oracle agreement %zu/1000, rerun %s; "
                    "round robin %s",
                    static_cast<long>(n1), static_cast<long>(n2), a.oracle_agree,
                    a.reached == b.reached ? "identical" : "DIFFERS", seq.c_str())};
}

// --- 3 ------------------------------------------------------------------------

struct Spread {
  bool ok = false;
  uint64_t ticks = 0;       // after insertion until every table holds the entry
  uint64_t flood_ticks = 0; // flooding every delta to every member each tick
  std::string why;
};

Spread spread(uint64_t seed, double loss, uint64_t limit) {
  SimCluster sim(seed, NetProfile{.loss = loss});
  std::vector<std::string> names;
  for (int i = 0; i < 16; ++i) {
    names.push_back(fmt("n%02d", i));
    if (i == 0) sim.start(names.back());
    else sim.start(names.back(), {.join = "n00"});
  }
  auto full = [&] {
    for (const auto& n : names)
      if (sim.node(n).gossip().alive_members().size() != 15) return false;
    return true;
  };
  while (!full() && sim.tick() < 200) sim.step();
  Spread s;
  if (!full()) {
    s.why = "membership did not converge";
    return s;
  }
  const uint64_t t0 = sim.tick();
  sim.add_app("n07", "fresh", spec({"--ip", "10.90.0.7"}));
  sim.serve("fresh", 443);
  const ServiceKey key{VirtualIp::parse("10.90.0.7"), 443};

  // Oracle: with every holder sending to every member, the set of holders
  // after one tick is every node reachable in one hop.
  std::set<std::string> holders{"n07"};
  while (holders.size() < names.size()) {
    holders.insert(names.begin(), names.end());
    ++s.flood_ticks;
  }

  auto holding = [&] {
    size_t n = 0;
    for (const auto& name : names) n += sim.node(name).table().lookup(key).size() == 1;
    return n;
  };
  while (holding() < names.size() && sim.tick() < t0 + limit + 20) sim.step();
  s.ticks = sim.tick() - t0;
  s.ok = holding() == names.size() && s.ticks <= limit && s.ticks >= s.flood_ticks;
  if (!s.ok) s.why = fmt("%zu/16 hold it after %llu ticks", holding(), static_cast<unsigned long long>(s.ticks));
  scan.add("spread", sim);
  return s;
}

Verdict convergence() {
  const GossipConfig cfg;
  const uint64_t lossless_limit = 10;
  const uint64_t lossy_limit = 10 + cfg.anti_entropy_every;
  bool pass = true;
  uint64_t worst0 = 0, worst10 = 0, flood = 0;
  std::string why;
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    Spread a = spread(seed, 0.0, lossless_limit);
    Spread b = spread(seed + 100, 0.10, lossy_limit);
    worst0 = std::max(worst0, a.ticks);
    worst10 = std::max(worst10, b.ticks);
    flood = std::max(flood, a.flood_ticks);
    if (!a.ok && why.empty()) why = fmt(" [loss 0 seed %llu: %s]", static_cast<unsigned long long>(seed), a.why.c_str());
    if (!b.ok && why.empty()) why = fmt(" [loss 0.1 seed %llu: %s]", static_cast<unsigned long long>(seed + 100), b.why.c_str());
    pass = pass && a.ok && b.ok;
  }
  return {pass, fmt("16 nodes, 10 seeds each: loss 0 worst %llu ticks (limit %llu, flood bound %llu); "
                    "loss 0.1 worst %llu ticks (limit %llu)%s",
                    static_cast<unsigned long long>(worst0), static_cast<unsigned long long>(lossless_limit),
                    static_cast<unsigned long long>(flood), static_cast<unsigned long long>(worst10),
                    static_cast<unsigned long long>(lossy_limit), why.c_str())};
}

// --- 4 ------------------------------------------------------------------------

Verdict failure_handling() {
  const GossipConfig cfg;
  SimCluster sim(41);
  const std::vector<std::string> hosts = {"h1", "h2", "h3", "h4", "h5"};
  sim.start("h1");
  for (size_t i = 1; i < hosts.size(); ++i) sim.start(hosts[i], {.join = "h1"});
  const ServiceKey key{VirtualIp::parse("10.70.0.1"), 80};
  sim.add_app("h1", "s1", spec({"--ip", "10.70.0.1"}));
  sim.add_app("h2", "s2", spec({"--ip", "10.70.0.1"}));
  sim.serve("s1", 80);
  sim.serve("s2", 80);
  const size_t per_tick = 20;
  const uint64_t window = cfg.suspect_periods + 2;
  for (size_t i = 0; i < per_tick * window; ++i) sim.add_app("h3", fmt("c%03zu", i), {});
  sim.run_until(15);
  const auto before = sim.node("h3").table().lookup(key);
  if (before.size() != 2) return {false, "both instances were not visible before the crash"};
  const HostId gone = sim.node("h1").id();
  std::vector<EntryId> gone_ids;
  for (const auto& e : sim.node("h2").table().entries())
    if (e.host == gone) gone_ids.push_back(e.id());

  const uint64_t tc = sim.tick();
  sim.crash("h1");
  size_t total = 0, survivor = 0, preferred_crashed = 0;
  for (uint64_t k = 1; k <= window; ++k) {
    sim.step();
    for (size_t j = 0; j < per_tick; ++j) {
      const std::string c = fmt("c%03zu", (k - 1) * per_tick + j);
      if (oracle_pick(sim.identity(c).app_id.value, key, before, 0) == sim.identity("s1").app_id) ++preferred_crashed;
      ConnectOutcome o = sim.connect(c, SockAddr{key.vip.ip(), key.port});
      ++total;
      if (!o.error && o.reached == "s2") ++survivor;
    }
  }

  // Probe cycle over the other members, one indirect round, the suspicion
  // timeout, then the convergence bound of criterion 3.
  const uint64_t bound = (hosts.size() - 1) + 1 + cfg.suspect_periods + 10;
  auto tombstoned = [&] {
    for (size_t i = 1; i < hosts.size(); ++i) {
      for (const auto& id : gone_ids) {
        const ServiceEntry* e = sim.node(hosts[i]).table().find(id);
        if (!e || e->alive()) return false;
      }
    }
    return true;
  };
  while (!tombstoned() && sim.tick() < tc + bound + 20) sim.step();
  const uint64_t took = sim.tick() - tc;
  const bool tombs = tombstoned() && took <= bound;
  scan.add("failover", sim);
  return {survivor == total && tombs && !gone_ids.empty(),
          fmt("%zu/%zu connects in ticks +1..+%llu reached the survivor (%zu would have preferred the "
              "crashed host); %zu entries tombstoned on all 4 survivors after %llu ticks (bound %llu)",
              survivor, total, static_cast<unsigned long long>(window), preferred_crashed, gone_ids.size(),
              static_cast<unsigned long long>(took), static_cast<unsigned long long>(bound))};
}

// --- 6 ------------------------------------------------------------------------

Verdict dns() {
  SimCluster sim(61);
  sim.start("h1");
  sim.start("h2", {.join = "h1"});
  sim.add_app("h1", "web", spec({"--name", "web", "--ip", "10.60.0.1"}));
  sim.add_app("h2", "cli", {});
  sim.serve("web", 80);
  sim.run_until(8);
  VirtualSockets& vs = sim.sockets("cli");
  auto query = [&](uint16_t id, const std::string& name) {
    uint32_t h = vs.socket(SocketKind::Datagram);
    vs.sendto(h, SockAddr{Ipv4{0x7F000035}, kDnsPort}, encode_dns_query(id, name));
    auto d = vs.recvfrom(h);
    vs.close(h);
    return parse_dns_response(d.payload);
  };
  DnsResponse hit = query(0x1111, "web");
  DnsResponse miss = query(0x2222, "nosuch");
  const bool hit_ok = hit.id == 0x1111 && hit.rcode == DnsRcode::NoError && hit.addr &&
                      *hit.addr == Ipv4::parse("10.60.0.1") && hit.ttl == 1;
  const bool miss_ok = miss.id == 0x2222 && miss.rcode == DnsRcode::NXDomain && !miss.addr;
  ConnectOutcome o = hit.addr ? sim.connect("cli", SockAddr{*hit.addr, 80}) : ConnectOutcome{Errc::NoSuchService};
  const bool reach_ok = !o.error && o.reached == "web";
  scan.add("dns", sim);
  return {hit_ok && miss_ok && reach_ok,
          fmt("web -> %s ttl %u; connect reached '%s'; unknown name rcode %d", hit.addr ? hit.addr->str().c_str() : "-",
              hit.ttl, o.reached.c_str(), static_cast<int>(miss.rcode))};
}

// --- 7 ------------------------------------------------------------------------

// Server half: reads to EOF, answers with the byte count.
std::thread count_once(VirtualSockets& vs, uint32_t listener) {
  return std::thread([&vs, listener] {
    auto a = vs.accept(listener);
    std::vector<char> buf(1 << 20);
    uint64_t total = 0;
    ssize_t n;
    while ((n = ::read(a.fd, buf.data(), buf.size())) > 0) total += static_cast<uint64_t>(n);
    write_all(a.fd, reinterpret_cast<const char*>(&total), sizeof total);
    vs.close(a.handle);
  });
}

Verdict separation() {
  TempDir d1, d2;
  NodeRuntime a(config(d1.path));
  a.start();
  observe_runtime(a, "runtime transfer");
  RuntimeConfig cb = config(d2.path, false, a.gossip_addr());
  NodeRuntime bj(cb);
  bj.start();
  observe_runtime(bj, "runtime transfer");
  if (!wait_for([&] { return bj.with_node([](Node& n) { return n.gossip().joined(); }); }))
    return {false, "nodes did not join"};
  auto srv = a.add_app(spec({"--ip", "10.80.0.1"}));
  auto cli = bj.add_app({});
  VirtualSockets sv(a.local_channel(srv.app_id));
  uint32_t l = sv.socket(SocketKind::Stream);
  sv.bind(l, SockAddr{Ipv4{0}, 9000});
  sv.listen(l);
  const ServiceKey key{srv.effective_vip, 9000};
  if (!wait_for([&] { return bj.with_node([&](Node& n) { return n.table().lookup(key).size() == 1; }); }))
    return {false, "service not visible"};

  VirtualSockets cv(UnixTrapChannel::connect(trap_path(d2.path, cli.app_id)));
  auto traps = [&] { return bj.with_node([&](Node& n) { return n.sw().trap_messages(cli.app_id); }); };
  auto transfer = [&](uint64_t bytes, bool& ok) {
    const uint64_t t0 = traps();
    std::thread server = count_once(sv, l);
    uint32_t h = cv.socket(SocketKind::Stream);
    int fd = cv.connect(h, SockAddr{key.vip.ip(), key.port});
    std::vector<char> chunk(1 << 20, 'x');
    uint64_t left = bytes;
    ok = true;
    while (left && ok) {
      const size_t n = static_cast<size_t>(std::min<uint64_t>(left, chunk.size()));
      ok = write_all(fd, chunk.data(), n);
      left -= n;
    }
    ::shutdown(fd, SHUT_WR);
    uint64_t echoed = 0;
    ok = ok && ::read(fd, &echoed, sizeof echoed) == sizeof echoed && echoed == bytes;
    server.join();
    cv.close(h);
    return traps() - t0;
  };
  bool ok1 = false, ok100 = false;
  const auto t_start = std::chrono::steady_clock::now();
  const uint64_t m1 = transfer(1'000'000, ok1);
  const uint64_t m100 = transfer(100'000'000, ok100);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  auto proxied = [](NodeRuntime& rt) {
    return rt.with_node([](Node& n) {
      auto& p = n.proxy_counters();
      return p.outbound_read + p.outbound_written + p.inbound_read + p.inbound_written;
    });
  };
  const uint64_t handler_bytes = proxied(a) + proxied(bj);
  a.stop();
  bj.stop();
  return {ok1 && ok100 && m1 == m100 && m1 > 0 && handler_bytes == 0,
          fmt("trap messages 1 MB: %llu, 100 MB: %llu; handler data-path bytes %llu; transfers %s in %.2f s",
              static_cast<unsigned long long>(m1), static_cast<unsigned long long>(m100),
              static_cast<unsigned long long>(handler_bytes), ok1 && ok100 ? "complete" : "INCOMPLETE", secs)};
}

// --- 8 ------------------------------------------------------------------------

Verdict gateway() {
  TempDir d;
  NodeRuntime g(config(d.path, true));
  g.start();
  observe_runtime(g, "runtime gateway");
  const uint16_t port = 31601;
  auto srv = g.add_app(spec({"--ip", "10.81.0.1", "--expose", std::to_string(port)}));
  VirtualSockets sv(g.local_channel(srv.app_id));
  uint32_t l = sv.socket(SocketKind::Stream);
  sv.bind(l, SockAddr{Ipv4{0}, 7});
  sv.listen(l);
  if (!wait_for([&] {
        auto ports = g.gateway_ports();
        return std::find(ports.begin(), ports.end(), port) != ports.end();
      }))
    return {false, "exposed port never opened"};
  std::thread server([&] {
    auto a = sv.accept(l);
    echo_until_eof(a.fd);
    sv.close(a.handle);
  });
  int fd = tcp_connect(port);
  if (fd < 0) {
    sv.close(l);
    server.join();
    return {false, "external connect failed"};
  }
  std::string payload(1 << 20, '\0');
  for (size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<char>((i * 131) ^ (i >> 9));
  const std::string back = round_trip(fd, payload);
  ::close(fd);
  server.join();
  auto& pc = g.with_node([](Node& n) -> ProxyCounters& { return n.proxy_counters(); });
  wait_for([&] { return pc.inbound_written.load() == payload.size(); }, 5);
  const uint64_t n = payload.size();
  const bool conserved = pc.outbound_read == n && pc.outbound_written == n && pc.inbound_read == n &&
                         pc.inbound_written == n;
  std::string detail = fmt("external->service %llu read / %llu written, service->external %llu read / %llu "
                           "written (sent %llu), echo %s",
                           static_cast<unsigned long long>(pc.outbound_read.load()),
                           static_cast<unsigned long long>(pc.outbound_written.load()),
                           static_cast<unsigned long long>(pc.inbound_read.load()),
                           static_cast<unsigned long long>(pc.inbound_written.load()),
                           static_cast<unsigned long long>(n), back == payload ? "identical" : "DIFFERS");
  g.stop();
  return {conserved && back == payload, detail};
}

// --- 9 ------------------------------------------------------------------------

Verdict fast_path() {
  BenchResult r = bench_local_vs_hairpin(65536, 1.0);
  return {r.local_bps >= r.hairpin_bps && r.hairpin_bps > 0,
          fmt("size 65536: local %.1f MB/s, hairpin %.1f MB/s, ratio %.2f (informational)", r.local_bps / 1e6,
              r.hairpin_bps / 1e6, r.ratio)};
}

// --- 10 -----------------------------------------------------------------------

Verdict merge_properties() {
  merge_oracle::SuiteResult r = merge_oracle::run(20261018, 10000);
  return {r.failures == 0 && r.cases >= 10000,
          fmt("%zu randomized cases, %zu failures%s%s", r.cases, r.failures, r.failures ? ": " : "",
              r.first_failure.c_str())};
}

// --- 5 ------------------------------------------------------------------------

Verdict identity() {
  std::lock_guard lk(scan.mu);
  std::string where;
  for (const auto& s : scan.scenarios)
    if (where.find(s) == std::string::npos) where += (where.empty() ? "" : ", ") + s;
  std::string detail = fmt("%llu trap replies scanned across %s; %zu real addresses found",
                           static_cast<unsigned long long>(scan.replies), where.c_str(), scan.leaks.size());
  if (!scan.leaks.empty()) detail += " (first: " + scan.leaks.front() + ")";
  return {scan.leaks.empty() && scan.replies > 0, detail};
}

Verdict guarded(const std::function<Verdict()>& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    return {false, std::string("threw: ") + e.what()};
  }
}

}  // namespace

int main() {
  std::signal(SIGPIPE, SIG_IGN);
  const std::vector<std::pair<int, std::pair<std::string, std::function<Verdict()>>>> order = {
      {1, {"three-tier segmentation scenario", three_tier}},
      {2, {"load balancing", load_balancing}},
      {3, {"gossip convergence", convergence}},
      {4, {"failure handling", failure_handling}},
      {6, {"dns", dns}},
      {7, {"control/data separation", separation}},
      {8, {"gateway", gateway}},
      {9, {"same-host fast path", fast_path}},
      {10, {"merge properties", merge_properties}},
      // Last: totals the scans of every scenario above.
      {5, {"identity consistency", identity}},
  };
  std::map<int, std::pair<std::string, Verdict>> results;
  for (const auto& [n, item] : order) results[n] = {item.first, guarded(item.second)};
  int failed = 0;
  for (const auto& [n, r] : results) {
    std::printf("%s criterion %d (%s): %s\n", r.second.pass ? "PASS" : "FAIL", n, r.first.c_str(),
                r.second.detail.c_str());
    failed += !r.second.pass;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(results.size()) - failed, results.size());
  return failed == 0 ? 0 : 1;
}
