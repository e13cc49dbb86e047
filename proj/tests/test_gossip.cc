#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <deque>
#include <memory>
#include <set>

#include "appnet/gossip.h"

using namespace appnet;

namespace {

struct Peer {
  std::unique_ptr<ServiceTable> table;
  std::unique_ptr<Gossip> gossip;
  RealEndpoint addr;
  bool down = false;
};

/// Direct message router between Gossip instances; no loss, no latency.
struct Mesh {
  std::vector<Peer> peers;
  std::deque<Outgoing> queue;
  std::vector<std::pair<size_t, Outgoing>> log;  // (sender index, message)
  uint64_t now = 0;
  Rng rng{9};

  size_t add(GossipConfig cfg = {}) {
    Peer p;
    p.addr = RealEndpoint{Ipv4{0x0A000001u + static_cast<uint32_t>(peers.size())}, 7946};
    HostId id = HostId::from_seed(77, "n" + std::to_string(peers.size()));
    p.table = std::make_unique<ServiceTable>(id);
    MemberRecord self;
    self.host = id;
    self.addr = p.addr;
    p.gossip = std::make_unique<Gossip>(self, *p.table, cfg);
    Gossip* g = p.gossip.get();
    p.table->set_change_sink([g](const ServiceEntry& e) { g->enqueue_delta(e); });
    peers.push_back(std::move(p));
    return peers.size() - 1;
  }
  Gossip& g(size_t i) { return *peers[i].gossip; }
  size_t index_of(RealEndpoint a) const {
    for (size_t i = 0; i < peers.size(); ++i)
      if (peers[i].addr == a) return i;
    return peers.size();
  }
  void send(size_t from, std::vector<Outgoing> out) {
    for (auto& o : out) {
      log.emplace_back(from, o);
      queue.push_back(std::move(o));
    }
  }
  void drain() {
    while (!queue.empty()) {
      Outgoing o = std::move(queue.front());
      queue.pop_front();
      size_t to = index_of(o.addr);
      if (to >= peers.size() || peers[to].down) continue;
      // Round-trip through the codec so every message is wire-checked.
      GossipEnvelope env = decode_envelope(encode_envelope(o.env));
      size_t from = 0;
      for (size_t i = 0; i < peers.size(); ++i)
        if (peers[i].gossip->self().host == env.sender) from = i;
      auto res = g(to).handle_envelope(env, peers[from].addr, now);
      send(to, std::move(res.out));
    }
  }
  void round() {
    ++now;
    for (size_t i = 0; i < peers.size(); ++i)
      if (!peers[i].down) send(i, g(i).tick(now, rng));
    drain();
  }
};

ServiceEntry service(const HostId& host, uint16_t port) {
  ServiceEntry e;
  e.key = ServiceKey{VirtualIp::parse("10.9.9.9"), port};
  e.real = RealEndpoint{Ipv4{0xC0A80001}, 40000};
  e.host = host;
  e.app_id = AppId{"a" + std::to_string(port)};
  return e;
}

}  // namespace

TEST_CASE("a lone node sends nothing") {
  Mesh m;
  m.add();
  for (int i = 0; i < 20; ++i) CHECK(m.g(0).tick(i + 1, m.rng).empty());
}

TEST_CASE("two nodes ping each other once per round") {
  Mesh m;
  m.add();
  m.add();
  m.g(1).join(m.peers[0].addr);
  m.round();
  m.round();
  REQUIRE(m.g(0).joined() == false);  // the seed itself never joins anyone
  REQUIRE(m.g(1).joined());
  REQUIRE(m.g(0).member(m.g(1).self().host));
  m.log.clear();
  m.round();
  for (size_t i = 0; i < 2; ++i) {
    size_t pings = 0;
    for (const auto& [from, o] : m.log)
      if (from == i && o.env.kind == EnvelopeKind::Ping) {
        ++pings;
        CHECK(o.to == m.g(1 - i).self().host);
      }
    CHECK(pings == 1);
  }
  CHECK(m.g(0).member(m.g(1).self().host)->status == MemberStatus::Alive);
  CHECK(m.g(1).member(m.g(0).self().host)->status == MemberStatus::Alive);
}

TEST_CASE("envelope codec") {
  GossipEnvelope env;
  env.kind = EnvelopeKind::Sync;
  env.sender = HostId::from_seed(1, "s");
  env.seq = 99;
  env.subject = HostId::from_seed(1, "t");
  MemberRecord r;
  r.host = env.subject;
  r.addr = RealEndpoint{Ipv4{0x7F000001}, 7946};
  r.status = MemberStatus::Suspect;
  r.incarnation = 4;
  r.gateway = true;
  env.rumors.push_back(r);
  env.deltas.push_back(service(env.sender, 80));
  env.digest = std::vector<DigestItem>{{env.deltas[0].id(), 1}};
  Bytes wire = encode_envelope(env);
  CHECK(wire[0] == kGossipVersion);
  CHECK(wire[1] == static_cast<uint8_t>(EnvelopeKind::Sync));
  GossipEnvelope back = decode_envelope(wire);
  CHECK(back.kind == env.kind);
  CHECK(back.seq == 99);
  CHECK(back.subject == env.subject);
  REQUIRE(back.rumors.size() == 1);
  CHECK(back.rumors[0].status == MemberStatus::Suspect);
  CHECK(back.rumors[0].incarnation == 4);
  CHECK(back.rumors[0].gateway);
  REQUIRE(back.deltas.size() == 1);
  CHECK(back.deltas[0].same_version(env.deltas[0]));
  REQUIRE(back.digest);
  CHECK(back.digest->size() == 1);
  CHECK(encode_envelope(back) == wire);

  for (size_t cut = 0; cut < wire.size(); ++cut) {
    Bytes part(wire.begin(), wire.begin() + static_cast<long>(cut));
    CHECK_THROWS_AS(decode_envelope(part), Error);
  }
  Bytes bad = wire;
  bad[0] = 0x7F;
  CHECK_THROWS_AS(decode_envelope(bad), Error);
}

TEST_CASE("oversized envelopes stay under the bound") {
  GossipEnvelope env;
  env.kind = EnvelopeKind::SyncReply;
  env.sender = HostId::from_seed(1, "s");
  for (uint16_t p = 1; p < 3000; ++p) env.deltas.push_back(service(env.sender, p));
  CHECK_THROWS_AS(encode_envelope(env), Error);

  ServiceTable table(env.sender);
  for (uint16_t p = 1; p < 3000; ++p) table.insert_local(service(env.sender, p));
  MemberRecord self;
  self.host = env.sender;
  Gossip g(self, table);
  CHECK(encode_envelope(g.anti_entropy(env.sender)).size() <= kMaxEnvelopeBytes);
}

TEST_CASE("member precedence at equal incarnation") {
  Mesh m;
  m.add();
  m.add();
  m.g(1).join(m.peers[0].addr);
  m.round();
  const HostId other = m.g(1).self().host;
  auto rumor = [&](MemberStatus s, uint64_t inc) {
    GossipEnvelope env;
    env.kind = EnvelopeKind::Ack;
    env.sender = HostId::from_seed(5, "third");
    MemberRecord r = *m.g(0).member(other);
    r.status = s;
    r.incarnation = inc;
    env.rumors.push_back(r);
    m.g(0).handle_envelope(env, RealEndpoint{Ipv4{1}, 1}, m.now);
    return m.g(0).member(other)->status;
  };
  CHECK(rumor(MemberStatus::Suspect, 0) == MemberStatus::Suspect);
  CHECK(rumor(MemberStatus::Alive, 0) == MemberStatus::Suspect);
  CHECK(rumor(MemberStatus::Dead, 0) == MemberStatus::Dead);
  CHECK(rumor(MemberStatus::Suspect, 0) == MemberStatus::Dead);
  CHECK(rumor(MemberStatus::Alive, 1) == MemberStatus::Alive);
}

TEST_CASE("a suspected node refutes") {
  Mesh m;
  m.add();
  m.add();
  m.g(1).join(m.peers[0].addr);
  m.round();
  GossipEnvelope env;
  env.kind = EnvelopeKind::Ack;
  env.sender = m.g(0).self().host;
  MemberRecord r = m.g(1).self();
  r.status = MemberStatus::Suspect;
  env.rumors.push_back(r);
  m.g(1).handle_envelope(env, m.peers[0].addr, m.now);
  CHECK(m.g(1).self().incarnation == r.incarnation + 1);
  CHECK(m.g(1).self().status == MemberStatus::Alive);
  CHECK(m.g(1).refute(7).incarnation == 8);
}

TEST_CASE("suspect timeout tombstones the host's entries") {
  Mesh m;
  m.add();
  m.add();
  m.add();
  m.g(1).join(m.peers[0].addr);
  m.g(2).join(m.peers[0].addr);
  const HostId h2 = m.g(2).self().host;
  m.peers[2].table->insert_local(service(h2, 80));
  for (int i = 0; i < 15; ++i) m.round();
  REQUIRE(m.peers[0].table->lookup(service(h2, 80).key).size() == 1);
  REQUIRE(m.peers[1].table->lookup(service(h2, 80).key).size() == 1);

  m.peers[2].down = true;
  const uint64_t crashed = m.now;
  GossipConfig cfg;
  uint64_t dead_at = 0;
  for (int i = 0; i < 30 && !dead_at; ++i) {
    m.round();
    const auto* a = m.g(0).member(h2);
    const auto* b = m.g(1).member(h2);
    if (a->status == MemberStatus::Dead && b->status == MemberStatus::Dead) dead_at = m.now;
  }
  REQUIRE(dead_at);
  // Detection needs at most two full probe cycles plus the suspicion window.
  CHECK(dead_at - crashed <= 2 * 2 + 2 + cfg.suspect_periods + 2);
  CHECK(m.peers[0].table->lookup(service(h2, 80).key).empty());
  CHECK(m.peers[1].table->lookup(service(h2, 80).key).empty());
}

TEST_CASE("no false deaths in a healthy cluster") {
  Mesh m;
  for (int i = 0; i < 6; ++i) m.add();
  for (size_t i = 1; i < 6; ++i) m.g(i).join(m.peers[0].addr);
  for (int r = 0; r < 60; ++r) m.round();
  for (size_t i = 0; i < 6; ++i) {
    CHECK(m.g(i).alive_members().size() == 5);
    for (const auto& [h, rec] : m.g(i).members()) CHECK(rec.status == MemberStatus::Alive);
  }
}

TEST_CASE("anti-entropy fills gaps") {
  Mesh m;
  m.add();
  m.add();
  const HostId h0 = m.g(0).self().host;
  for (uint16_t p = 1; p <= 50; ++p) m.peers[0].table->insert_local(service(h0, p));
  m.g(1).join(m.peers[0].addr);
  m.round();
  CHECK(m.peers[1].table->size() == 50);

  GossipEnvelope sync = m.g(1).anti_entropy(h0);
  CHECK(sync.kind == EnvelopeKind::Sync);
  REQUIRE(sync.digest);
  CHECK(sync.digest->size() == 50);
}

TEST_CASE("deltas spread to every node in a 16 node mesh") {
  Mesh m;
  for (int i = 0; i < 16; ++i) m.add();
  for (size_t i = 1; i < 16; ++i) m.g(i).join(m.peers[0].addr);
  for (int r = 0; r < 20; ++r) m.round();
  const HostId h5 = m.g(5).self().host;
  m.peers[5].table->insert_local(service(h5, 443));
  const uint64_t t0 = m.now;
  uint64_t done = 0;
  while (!done && m.now < t0 + 40) {
    m.round();
    bool all = true;
    for (auto& p : m.peers) all = all && p.table->lookup(service(h5, 443).key).size() == 1;
    if (all) done = m.now;
  }
  REQUIRE(done);
  CHECK(done - t0 <= 10);
}

TEST_CASE("join gives up after the configured attempts") {
  Mesh m;
  m.add();
  m.g(0).join(RealEndpoint{Ipv4{0x0B000001}, 7946});
  for (int r = 0; r < 60; ++r) m.round();
  CHECK(m.g(0).join_failed());
}
