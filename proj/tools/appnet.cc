#include <sched.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "appnet/bench.h"
#include "appnet/runtime.h"
#include "appnet/sim.h"
#include "json.hpp"

using json = nlohmann::json;
using namespace appnet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitSpec = 2;
constexpr int kExitUnreachable = 3;

std::filesystem::path default_run_dir() {
  if (const char* d = std::getenv("APPNET_RUN_DIR")) return d;
  return "/tmp/appnet";
}

struct Unreachable {
  std::string why;
};

json control_request(const std::filesystem::path& run_dir, const json& req) {
  const auto path = (run_dir / "control").string();
  UniqueFd fd(::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0));
  sockaddr_un sa{};
  sa.sun_family = AF_UNIX;
  if (path.size() >= sizeof sa.sun_path) throw Unreachable{"control path too long"};
  std::memcpy(sa.sun_path, path.c_str(), path.size() + 1);
  if (!fd || ::connect(fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0)
    throw Unreachable{"no daemon at " + path};
  const std::string line = req.dump() + "\n";
  if (::send(fd.get(), line.data(), line.size(), MSG_NOSIGNAL) != static_cast<ssize_t>(line.size()))
    throw Unreachable{"daemon closed the control socket"};
  std::string in;
  char buf[4096];
  while (in.find('\n') == std::string::npos) {
    ssize_t n = ::read(fd.get(), buf, sizeof buf);
    if (n <= 0) throw Unreachable{"daemon closed the control socket"};
    in.append(buf, static_cast<size_t>(n));
  }
  return json::parse(in.substr(0, in.find('\n')));
}

int report_error(const json& reply) {
  std::cerr << "appnet: " << reply.value("code", "Error") << ": " << reply.value("error", "") << "\n";
  const std::string code = reply.value("code", "");
  if (code == "UnknownApp" || code == "Io") return kExitFailure;
  return kExitSpec;
}

int cmd_daemon(const std::string& bind, const std::string& join, bool gateway,
               const std::string& strategy, const std::filesystem::path& run_dir, int period_ms) {
  RuntimeConfig cfg;
  auto ep = RealEndpoint::parse(bind);
  if (!ep) {
    std::cerr << "appnet: bad --bind '" << bind << "'\n";
    return kExitSpec;
  }
  cfg.node.bind = *ep;
  if (!join.empty()) {
    auto j = RealEndpoint::parse(join);
    if (!j) {
      std::cerr << "appnet: bad --join '" << join << "'\n";
      return kExitSpec;
    }
    cfg.node.join = *j;
  }
  cfg.node.gateway = gateway;
  cfg.node.strategy.mode = strategy == "rr" ? Strategy::RoundRobin : Strategy::Rendezvous;
  cfg.node.run_dir = run_dir;
  cfg.period = std::chrono::milliseconds(period_ms);

  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  NodeRuntime rt(cfg);
  try {
    rt.start();
  } catch (const Error& e) {
    std::cerr << "appnet: " << errc_name(e.code()) << ": " << e.what() << "\n";
    return kExitFailure;
  }
  std::cerr << "appnet: node " << rt.with_node([](Node& n) { return n.id().hex(); }) << " on "
            << rt.gossip_addr().str() << ", run dir " << run_dir.string() << "\n";
  int sig = 0;
  sigwait(&set, &sig);
  rt.stop();
  return kExitOk;
}

volatile sig_atomic_t g_child = 0;

void forward_signal(int sig) {
  if (g_child > 0) ::kill(g_child, sig);
}

int cmd_run(const std::filesystem::path& run_dir, const std::vector<std::string>& spec_args,
            const std::vector<std::string>& program) {
  try {
    parse_app_spec(spec_args);
  } catch (const Error& e) {
    std::cerr << "appnet: " << errc_name(e.code()) << ": " << e.what() << "\n";
    return kExitSpec;
  }
  if (program.empty()) {
    std::cerr << "appnet: run needs a program after --\n";
    return kExitSpec;
  }
  json reply = control_request(run_dir, {{"op", "add"}, {"args", spec_args}});
  if (!reply.value("ok", false)) return report_error(reply);
  const std::string app_id = reply["app_id"];
  std::cerr << "appnet: " << app_id << " vip " << reply["vip"].get<std::string>() << "\n";

  pid_t pid = ::fork();
  if (pid == 0) {
    // Without CAP_SYS_ADMIN the child keeps the host network namespace.
    (void)::unshare(CLONE_NEWNET);
    ::setenv("APPNET_TRAP", reply["trap"].get<std::string>().c_str(), 1);
    ::setenv("APPNET_APP_ID", app_id.c_str(), 1);
    std::vector<char*> argv;
    for (const auto& a : program) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);
    ::execvp(argv[0], argv.data());
    std::perror("appnet: exec");
    ::_exit(127);
  }
  int status = 0;
  if (pid > 0) {
    g_child = pid;
    struct sigaction sa{};
    sa.sa_handler = forward_signal;
    ::sigaction(SIGINT, &sa, nullptr);
    ::sigaction(SIGTERM, &sa, nullptr);
    while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
    }
  }
  try {
    control_request(run_dir, {{"op", "remove"}, {"app_id", app_id}});
  } catch (const Unreachable&) {
  }
  if (pid < 0) return kExitFailure;
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  return 128 + (WIFSIGNALED(status) ? WTERMSIG(status) : 0);
}

int cmd_sim(const std::string& file, bool trace) {
  std::ifstream in(file);
  if (!in) {
    std::cerr << "appnet: cannot read " << file << "\n";
    return kExitSpec;
  }
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    ScriptResult r = run_script(parse_script(ss.str()));
    if (trace)
      for (const auto& l : r.trace) std::cout << l << "\n";
    std::cerr << "appnet: " << r.assertions << " assertions held\n";
    return kExitOk;
  } catch (const Error& e) {
    std::cerr << "appnet: " << errc_name(e.code()) << ": " << e.what() << "\n";
    return e.code() == Errc::AssertionFailed ? kExitFailure : kExitSpec;
  }
}

}  // namespace

int main(int argc, char** argv) {
  ::signal(SIGPIPE, SIG_IGN);

  // `run` keeps everything before `--` for the app spec grammar.
  if (argc >= 2 && std::string(argv[1]) == "run") {
    std::vector<std::string> spec, program;
    bool after = false;
    for (int i = 2; i < argc; ++i) {
      std::string a = argv[i];
      if (!after && a == "--") {
        after = true;
        continue;
      }
      (after ? program : spec).push_back(a);
    }
    if (!spec.empty() && (spec[0] == "-h" || spec[0] == "--help")) {
      std::cout << "Usage: appnet run [--name N] [--ip A] [--tag k=v]... [--expose [port]] -- <program> [args...]\n";
      return kExitOk;
    }
    try {
      return cmd_run(default_run_dir(), spec, program);
    } catch (const Unreachable& u) {
      std::cerr << "appnet: " << u.why << "\n";
      return kExitUnreachable;
    }
  }

  CLI::App app{"appnet: application network node and tools"};
  app.require_subcommand(1);
  std::filesystem::path run_dir = default_run_dir();

  auto* daemon = app.add_subcommand("daemon", "Run a node");
  std::string bind = "0.0.0.0:7946", join, strategy = "rendezvous";
  bool gateway = false;
  int period_ms = 200;
  daemon->add_option("--bind", bind, "Gossip address ip:port");
  daemon->add_option("--join", join, "Seed node ip:port");
  daemon->add_flag("--gateway", gateway, "Serve exposed services on external ports");
  daemon->add_option("--strategy", strategy, "Endpoint selection")->check(CLI::IsMember({"rr", "rendezvous"}));
  daemon->add_option("--run-dir", run_dir, "Runtime directory");
  daemon->add_option("--period", period_ms, "Protocol period in milliseconds")->check(CLI::PositiveNumber);

  app.add_subcommand("run", "Run a program inside the application network (see `appnet run --help`)");

  auto* list = app.add_subcommand("list", "Print the service table");
  auto* remove = app.add_subcommand("remove", "Remove an application");
  std::string app_id;
  remove->add_option("app_id", app_id)->required();
  auto* status = app.add_subcommand("status", "Print node status as JSON");

  auto* bench = app.add_subcommand("bench", "Same-host fast path against a loopback TCP hairpin");
  size_t size = 65536;
  double seconds = 1.0;
  bench->add_option("--size", size, "Message size in bytes")->check(CLI::PositiveNumber);
  bench->add_option("--seconds", seconds, "Duration per path")->check(CLI::PositiveNumber);

  auto* sim = app.add_subcommand("sim", "Run a cluster script in the simulator");
  std::string script;
  bool trace = false;
  sim->add_option("script", script)->required();
  sim->add_flag("--trace", trace, "Print the JSON-lines trace");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitSpec;
  }

  try {
    if (*daemon) return cmd_daemon(bind, join, gateway, strategy, run_dir, period_ms);
    if (*list) {
      json r = control_request(run_dir, {{"op", "list"}});
      if (!r.value("ok", false)) return report_error(r);
      std::cout << r["dump"].get<std::string>();
      return kExitOk;
    }
    if (*remove) {
      json r = control_request(run_dir, {{"op", "remove"}, {"app_id", app_id}});
      if (!r.value("ok", false)) return report_error(r);
      std::cout << "removed " << app_id << " (" << r["tombstoned"].get<size_t>() << " entries)\n";
      return kExitOk;
    }
    if (*status) {
      json r = control_request(run_dir, {{"op", "status"}});
      std::cout << r.dump(2) << "\n";
      return r.value("ok", false) ? kExitOk : kExitFailure;
    }
    if (*bench) {
      BenchResult r = bench_local_vs_hairpin(size, seconds);
      std::cout << bench_csv_header() << "\n" << bench_csv_row(r) << "\n";
      return kExitOk;
    }
    if (*sim) return cmd_sim(script, trace);
  } catch (const Unreachable& u) {
    std::cerr << "appnet: " << u.why << "\n";
    return kExitUnreachable;
  } catch (const Error& e) {
    std::cerr << "appnet: " << errc_name(e.code()) << ": " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
