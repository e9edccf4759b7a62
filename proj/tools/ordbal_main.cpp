// SPDX-License-Identifier: Apache-2.0
//
// ordbal command-line entry point.
//
// Exit codes: 0 success, 2 invalid configuration, 3 runtime abort,
// 4 handshake rejected. Set ORDBAL_LOG (trace, debug, info, warn, error)
// for log verbosity; logs go to stderr.

#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "ordbal/config.hpp"
#include "ordbal/experiment.hpp"
#include "ordbal/transport.hpp"

namespace {

namespace fs = std::filesystem;
using namespace ordbal;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitHandshake = 4;

struct CommonOptions {
  std::string config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> policy;
  std::optional<std::size_t> m;
  std::optional<std::uint32_t> epochs;
  std::optional<double> alpha;
  std::optional<std::string> engine;
  std::optional<std::string> transport;

  ConfigOverrides overrides() const {
    ConfigOverrides o;
    if (out) o.out = fs::path(*out);
    o.seed = seed;
    o.policy = policy;
    o.m = m;
    o.epochs = epochs;
    o.alpha = alpha;
    o.engine = engine;
    o.transport = transport;
    return o;
  }
};

void add_common(CLI::App* cmd, CommonOptions& opts, bool training) {
  cmd->add_option("--config", opts.config, "INI config file")->required();
  cmd->add_option("--out", opts.out, "output directory");
  cmd->add_option("--seed", opts.seed, "run a single seed");
  cmd->add_option("--policy", opts.policy, "ordering policy");
  cmd->add_option("--m", opts.m, "number of workers");
  cmd->add_option("--epochs", opts.epochs, "number of epochs");
  cmd->add_option("--engine", opts.engine, "greedy, randomized or thresholded:<w>");
  if (training) {
    cmd->add_option("--alpha", opts.alpha, "step size");
    cmd->add_option("--transport", opts.transport, "direct, memory or tcp:host:port");
  }
}

int exit_code(const std::exception_ptr& error) {
  try {
    std::rethrow_exception(error);
  } catch (const ConfigError& e) {
    fmt::print(stderr, "error: invalid configuration: {}\n", e.what());
    return kExitConfig;
  } catch (const LoadError& e) {
    fmt::print(stderr, "error: cannot load data: {}\n", e.what());
    return kExitConfig;
  } catch (const HandshakeError& e) {
    fmt::print(stderr, "error: handshake rejected: {}\n", e.what());
    return kExitHandshake;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: run aborted: {}\n", e.what());
    return kExitRuntime;
  }
}

void echo(std::string_view resolved) {
  fmt::print("# resolved configuration\n{}\n", resolved);
  std::fflush(stdout);
}

bool is_vector_config(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.find("[vectors]") != std::string::npos) return true;
  }
  return false;
}

int finish(const ExperimentConfig& config, const ExperimentResult& result) {
  write_outputs(config, result);
  if (!result.ok()) return exit_code(result.failure);
  fmt::print("wrote {}\n", config.out.string());
  return kExitOk;
}

int cmd_train(const CommonOptions& opts) {
  const auto config = load_experiment_config(opts.config, opts.overrides());
  echo(render_config(config));
  return finish(config, run_experiment(config));
}

int cmd_herding_bound(const CommonOptions& opts) {
  const auto config = load_vector_config(opts.config, opts.overrides());
  echo(render_config(config));
  const auto rows = herding_bound_experiment(config);
  fs::create_directories(config.out);
  const fs::path csv = config.out / "herding_bound.csv";
  std::ofstream(csv, std::ios::binary | std::ios::trunc) << herding_csv(rows);
  nlohmann::json manifest = {{"config", config_to_json(config)},
                             {"git_revision", git_revision()},
                             {"vector_stream", "(seed, 0, 0, \"vectors\")"},
                             {"initial_permutation_stream", "(seed, 1, worker, \"init\")"}};
  std::ofstream(config.out / "manifest.json", std::ios::trunc) << manifest.dump(2) << "\n";
  fmt::print("wrote {}\n", csv.string());
  return kExitOk;
}

struct BoundCheckOptions {
  std::size_t trials = 1000;
  std::uint64_t seed = 0;
  double delta = 0.01;
};

int cmd_bound_check(const BoundCheckOptions& opts) {
  if (!(opts.delta > 0.0 && opts.delta < 1.0)) throw ConfigError("--delta must lie in (0, 1)");
  const auto reorder = check_reorder_inequality(opts.trials, opts.seed);
  const auto balance = check_balance_bound(opts.trials, 1000, 16, opts.delta, opts.seed);
  const auto pair = check_pair_balance_step(opts.trials, opts.delta, opts.seed);
  auto line = [](std::string_view name, const BoundCheckSummary& s, double need) {
    const bool ok = s.pass_rate() >= need;
    fmt::print("{} {}: {}/{} trials within bound (need {:.0f}%), worst ratio {:.4f}\n",
               ok ? "PASS" : "FAIL", name, s.passed, s.trials, need * 100.0, s.worst_ratio);
    return ok;
  };
  bool ok = line("reorder inequality", reorder, 1.0);
  ok = line("balance prefix bound (N=1000, d=16)", balance, 0.99) && ok;
  ok = line("pair-balance one-step contraction", pair, 0.99) && ok;
  return ok ? kExitOk : kExitRuntime;
}

struct EndpointOptions {
  std::optional<std::string> address;
  std::size_t worker_id = 0;
  int retries = 20;
  int retry_delay_ms = 50;
};

TcpAddress endpoint_address(const EndpointOptions& ep, const ExperimentConfig& config) {
  if (ep.address) return TcpAddress::parse(*ep.address);
  if (config.transport.mode == TransportMode::kTcp) return config.transport.address;
  throw ConfigError("no address: pass --listen/--connect or set run.transport = tcp:host:port");
}

int cmd_serve(const CommonOptions& opts, const EndpointOptions& ep) {
  const auto config = load_experiment_config(opts.config, opts.overrides());
  echo(render_config(config));
  TcpListener listener(endpoint_address(ep, config));
  spdlog::info("listening on port {}", listener.port());
  return finish(config, serve_experiment(config, listener, config_hash(config)));
}

int cmd_worker(const CommonOptions& opts, const EndpointOptions& ep) {
  const auto config = load_experiment_config(opts.config, opts.overrides());
  echo(render_config(config));
  RetryPolicy retry;
  retry.attempts = ep.retries;
  retry.initial_delay = std::chrono::milliseconds(ep.retry_delay_ms);
  run_remote_worker(config, ep.worker_id, endpoint_address(ep, config), config_hash(config),
                    retry);
  return kExitOk;
}

int cmd_validate(const CommonOptions& opts) {
  if (is_vector_config(opts.config)) {
    echo(render_config(load_vector_config(opts.config, opts.overrides())));
  } else {
    echo(render_config(load_experiment_config(opts.config, opts.overrides())));
  }
  fmt::print("configuration is valid\n");
  return kExitOk;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("ordbal");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  if (const char* level = std::getenv("ORDBAL_LOG")) {
    spdlog::set_level(spdlog::level::from_str(level));
  }
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"ordbal: coordinated example ordering for distributed SGD"};
  app.require_subcommand(1);

  CommonOptions train_opts;
  auto* train = app.add_subcommand("train", "run a training experiment");
  add_common(train, train_opts, true);

  CommonOptions herd_opts;
  auto* herd = app.add_subcommand("herding-bound", "parallel herding bounds on random vectors");
  add_common(herd, herd_opts, false);

  BoundCheckOptions bound_opts;
  auto* bound = app.add_subcommand("bound-check", "statistical checks of the balancing bounds");
  bound->add_option("--trials", bound_opts.trials, "trials per check");
  bound->add_option("--seed", bound_opts.seed, "seed");
  bound->add_option("--delta", bound_opts.delta, "failure probability");

  CommonOptions serve_opts;
  EndpointOptions serve_ep;
  auto* serve = app.add_subcommand("serve", "parameter server over TCP");
  add_common(serve, serve_opts, true);
  serve->add_option("--listen", serve_ep.address, "host:port to listen on");

  CommonOptions worker_opts;
  EndpointOptions worker_ep;
  auto* worker = app.add_subcommand("worker", "one worker over TCP");
  add_common(worker, worker_opts, true);
  worker->add_option("--connect", worker_ep.address, "server host:port");
  worker->add_option("--worker-id", worker_ep.worker_id, "worker id in [0, m)")->required();
  worker->add_option("--retries", worker_ep.retries, "connection attempts");
  worker->add_option("--retry-delay-ms", worker_ep.retry_delay_ms, "first retry delay");

  CommonOptions validate_opts;
  auto* validate = app.add_subcommand("validate-config", "check a config without running it");
  add_common(validate, validate_opts, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train->parsed()) return cmd_train(train_opts);
    if (herd->parsed()) return cmd_herding_bound(herd_opts);
    if (bound->parsed()) return cmd_bound_check(bound_opts);
    if (serve->parsed()) return cmd_serve(serve_opts, serve_ep);
    if (worker->parsed()) return cmd_worker(worker_opts, worker_ep);
    if (validate->parsed()) return cmd_validate(validate_opts);
  } catch (...) {
    return exit_code(std::current_exception());
  }
  return kExitConfig;
}
