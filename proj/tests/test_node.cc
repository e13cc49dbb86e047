#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "appnet/sim.h"

using namespace appnet;

namespace {

AppSpec spec(std::vector<std::string> args) { return parse_app_spec(args); }

Errc add_error(SimCluster& sim, const std::string& node, const std::string& label, AppSpec s) {
  try {
    sim.add_app(node, label, s);
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return Errc::Io;
}

/// Alive entries as comparable tuples, incarnations left out.
std::set<std::string> alive_view(const ServiceTable& t) {
  std::set<std::string> out;
  for (const auto& e : t.entries())
    if (e.alive()) out.insert(e.key.str() + " " + e.host.hex() + " " + e.app_id.value);
  return out;
}

}  // namespace

TEST_CASE("effective vip resolution") {
  SimCluster sim(1);
  sim.start("h1");
  auto web = sim.add_app("h1", "web", spec({"--name", "web", "--ip", "10.1.1.1", "--tag", "grp=1"}));
  CHECK(web.effective_vip == VirtualIp::parse("10.1.1.1"));
  CHECK(web.app_id.value.rfind(sim.node("h1").id().hex().substr(0, 12), 0) == 0);
  auto anon = sim.add_app("h1", "anon", {});
  CHECK(classify_vip(anon.effective_vip) == PoolClass::LinkLocal);
  auto named = sim.add_app("h1", "db", spec({"--name", "db"}));
  CHECK(classify_vip(named.effective_vip) == PoolClass::AutoPool);
  CHECK(anon.app_id != web.app_id);
}

TEST_CASE("names bind to one vip") {
  SimCluster sim(2);
  sim.start("h1");
  sim.add_app("h1", "web", spec({"--name", "web", "--ip", "10.1.1.1"}));
  sim.serve("web", 80);
  CHECK(add_error(sim, "h1", "web2", spec({"--name", "web", "--ip", "10.1.1.9"})) == Errc::AmbiguousName);
  // A second instance by name alone lands on the same vip.
  auto again = sim.add_app("h1", "web3", spec({"--name", "web"}));
  CHECK(again.effective_vip == VirtualIp::parse("10.1.1.1"));
}

TEST_CASE("remove tombstones and detaches") {
  SimCluster sim(3);
  Node& n = sim.start("h1");
  auto web = sim.add_app("h1", "web", spec({"--ip", "10.1.1.1"}));
  sim.serve("web", 80);
  sim.serve("web", 81);
  CHECK(n.remove_app(web.app_id) == 2);
  CHECK(n.table().lookup(ServiceKey{VirtualIp::parse("10.1.1.1"), 80}).empty());
  CHECK(n.apps().empty());
  try {
    n.remove_app(web.app_id);
    FAIL("second remove accepted");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::UnknownApp);
  }
}

TEST_CASE("attach rules") {
  SimCluster sim(4);
  Node& n = sim.start("h1");
  auto a = n.add_app({});
  auto ch = n.attach(a.app_id);
  CHECK_THROWS_AS(n.attach(a.app_id), Error);
  CHECK_THROWS_AS(n.attach(AppId{"nobody"}), Error);
  TrapRequest req;
  req.op = TrapOp::Socket;
  CHECK(ch->call(req).reply.ok());
  ServedReply r = n.serve(AppId{"nobody"}, encode_request(req));
  CHECK(decode_reply(r.reply).error == Errc::AttachFailed);
  Bytes junk = {1, 2};
  CHECK(decode_reply(n.serve(a.app_id, junk).reply).error == Errc::DecodeError);
}

TEST_CASE("single-config join converges") {
  SimCluster sim(5);
  sim.start("h1");
  for (int i = 0; i < 30; ++i) {
    sim.add_app("h1", "s" + std::to_string(i), spec({"--ip", "10.2.0." + std::to_string(i + 1)}));
    sim.serve("s" + std::to_string(i), 80);
  }
  sim.run_until(5);
  sim.start("h2", {.join = "h1"});
  sim.step();
  sim.step();
  CHECK(sim.node("h2").gossip().joined());
  CHECK(alive_view(sim.node("h2").table()) == alive_view(sim.node("h1").table()));
}

TEST_CASE("join failure leaves a standalone node") {
  SimCluster sim(6);
  sim.start("h1");
  sim.crash("h1");
  Node& n = sim.start("h2", {.join = "h1"});
  sim.run_until(60);
  CHECK(n.gossip().join_failed());
  sim.add_app("h2", "web", spec({"--ip", "10.1.1.1"}));
  sim.serve("web", 80);
  CHECK(n.table().lookup(ServiceKey{VirtualIp::parse("10.1.1.1"), 80}).size() == 1);
}

TEST_CASE("crashing a node matches removing its apps") {
  auto build = [](SimCluster& sim) {
    sim.start("h1");
    sim.start("h2", {.join = "h1"});
    sim.start("h3", {.join = "h1"});
    sim.add_app("h1", "a", spec({"--ip", "10.3.0.1"}));
    sim.add_app("h2", "b", spec({"--ip", "10.3.0.1"}));
    sim.add_app("h3", "c", spec({"--ip", "10.3.0.2"}));
    sim.add_app("h3", "d", spec({"--name", "dee"}));
    for (auto l : {"a", "b", "c", "d"}) sim.serve(l, 80);
    sim.run_until(12);
  };
  SimCluster crashed(7), removed(7);
  build(crashed);
  build(removed);
  crashed.crash("h3");
  removed.remove_app("c");
  removed.remove_app("d");
  crashed.run_until(40);
  removed.run_until(40);
  for (auto n : {"h1", "h2"}) {
    CHECK(alive_view(crashed.node(n).table()) == alive_view(removed.node(n).table()));
    CHECK(alive_view(crashed.node(n).table()).size() == 2);
  }
}

TEST_CASE("node tick on a lone node emits nothing") {
  SimCluster sim(8);
  Node& n = sim.start("h1");
  for (uint64_t r = 1; r < 30; ++r) CHECK(n.tick(r).empty());
}
