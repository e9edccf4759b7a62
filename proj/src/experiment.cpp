// SPDX-License-Identifier: Apache-2.0

#include "ordbal/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "ordbal/config.hpp"

#ifndef ORDBAL_GIT_REVISION
#define ORDBAL_GIT_REVISION "unknown"
#endif

namespace ordbal {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

TransportSpec TransportSpec::parse(std::string_view text) {
  if (text == "direct") return {TransportMode::kDirect, {}};
  if (text == "memory") return {TransportMode::kMemory, {}};
  if (text.starts_with("tcp:")) return {TransportMode::kTcp, TcpAddress::parse(text.substr(4))};
  throw ConfigError(
      fmt::format("unknown transport '{}' (expected direct, memory or tcp:host:port)", text));
}

std::string TransportSpec::to_string() const {
  switch (mode) {
    case TransportMode::kDirect:
      return "direct";
    case TransportMode::kMemory:
      return "memory";
    case TransportMode::kTcp:
      return "tcp:" + address.to_string();
  }
  return "unknown";
}

void ExperimentConfig::validate() const {
  if (workers == 0) throw ConfigError("run.m must be at least 1");
  if (workers > 0xFFFF) throw ConfigError("run.m must fit in 16 bits");
  if (policy.centralized() && workers != 1) {
    throw ConfigError(fmt::format(
        "run.policy = {} is centralized and requires run.m = 1, but run.m = {}",
        policy_name(policy.kind), workers));
  }
  if (block == 0) throw ConfigError("run.b must be at least 1");
  if (epochs == 0) throw ConfigError("run.epochs must be at least 1");
  if (!std::isfinite(alpha) || alpha < 0.0) {
    throw ConfigError(fmt::format("run.alpha = {} must be finite and nonnegative", alpha));
  }
  if (seeds.empty()) throw ConfigError("run.seeds must list at least one seed");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("run.seeds must not repeat a seed");
  }
  if (!std::isfinite(task.lambda) || task.lambda < 0.0) {
    throw ConfigError("task.lambda must be finite and nonnegative");
  }
  if (task.source == DataSource::kSynthetic) {
    if (task.dim == 0) throw ConfigError("task.dim must be at least 1");
    if (!std::isfinite(task.noise) || task.noise < 0.0) {
      throw ConfigError("task.noise must be finite and nonnegative");
    }
    if (task.examples < 2 * workers * block) {
      throw ConfigError(fmt::format(
          "task.examples = {} is too small for run.m = {} and run.b = {} (need at least {})",
          task.examples, workers, block, 2 * workers * block));
    }
  } else if (task.csv_path.empty()) {
    throw ConfigError("task.source = csv requires task.csv_path");
  }
}

// ---------------------------------------------------------------------------
// Seed setup

SeedData prepare_seed(const ExperimentConfig& config, std::uint64_t seed) {
  SeedData data;
  if (config.task.source == DataSource::kSynthetic) {
    data.dataset = std::make_unique<Dataset>(generate_synthetic(
        config.task.kind, config.task.examples, config.task.dim, config.task.data_seed,
        config.task.noise));
  } else {
    CsvOptions options;
    options.standardize = config.task.standardize;
    if (!config.task.label_map.empty()) options.label_map = parse_label_map(config.task.label_map);
    data.dataset = std::make_unique<Dataset>(load_csv(config.task.csv_path, options));
  }
  data.objective =
      std::make_unique<Objective>(config.task.kind, config.task.lambda, *data.dataset);
  RngStream shard_stream(seed, 0, 0, "shard");
  data.plan = shard_examples(data.dataset->examples, config.workers, config.block, shard_stream);
  data.context = OrderingContext{seed, config.workers, data.plan.units(), data.dataset->dim};
  for (const auto& shard : data.plan.shards) {
    data.training_examples.insert(data.training_examples.end(), shard.examples.begin(),
                                  shard.examples.end());
  }
  return data;
}

Worker make_worker(const ExperimentConfig& config, const SeedData& data, std::size_t id) {
  if (id >= data.plan.shards.size()) {
    throw ConfigError(fmt::format("worker id {} out of range for m = {}", id,
                                  data.plan.shards.size()));
  }
  return Worker(id, *data.objective, data.plan.shards[id], config.block,
                DenseVector(data.context.dim), config.alpha);
}

std::string_view git_revision() noexcept { return ORDBAL_GIT_REVISION; }

double full_train_loss(const SeedData& data, std::span<const double> weights) {
  return data.objective->mean_loss(weights, data.training_examples);
}

// ---------------------------------------------------------------------------
// Server-side driver

namespace {

// Mirrors the workers' model, stores every gradient at its unit slot, and
// tracks drift within the epoch.
class EpochRecorder final : public StepObserver {
 public:
  EpochRecorder(const ExperimentConfig& config, const SeedData& data, DenseVector& weights,
                std::vector<Permutation> perms, std::uint32_t epoch, SeedRun& run)
      : config_(config),
        data_(data),
        weights_(weights),
        perms_(std::move(perms)),
        epoch_(epoch),
        run_(run),
        grads_(data.context.workers, data.context.units, data.context.dim) {
    drift_.start(weights_);
  }

  void on_step(std::uint32_t step, std::span<const DenseVector> grads,
               const DenseVector& avg) override {
    for (std::size_t i = 0; i < grads.size(); ++i) {
      auto slot = grads_.mutable_at(i, perms_[i][step - 1]);
      std::copy(grads[i].values().begin(), grads[i].values().end(), slot.begin());
    }
    apply_update(weights_, config_.alpha, avg);
    drift_.observe(weights_);
    if (config_.per_step_loss) {
      run_.step_losses.push_back({epoch_, step, full_train_loss(data_, weights_.values())});
    }
  }

  const VectorSet& gradients() const noexcept { return grads_; }
  double drift() const noexcept { return drift_.value(); }

 private:
  const ExperimentConfig& config_;
  const SeedData& data_;
  DenseVector& weights_;
  std::vector<Permutation> perms_;
  std::uint32_t epoch_;
  SeedRun& run_;
  VectorSet grads_;
  DriftTracker drift_;
};

SeedRun fresh_run(std::uint64_t seed) {
  SeedRun run;
  run.seed = seed;
  return run;
}

std::string single_line(std::string text) {
  std::replace(text.begin(), text.end(), '\n', ' ');
  std::replace(text.begin(), text.end(), '\r', ' ');
  return text;
}

std::string describe_exception(const std::exception_ptr& error) {
  try {
    std::rethrow_exception(error);
  } catch (const std::exception& e) {
    return e.what();
  } catch (...) {
    return "unknown error";
  }
}

void record_failure(ExperimentResult& result, SeedRun& run, std::exception_ptr error) {
  run.error = single_line(describe_exception(error));
  spdlog::error("seed {} aborted: {}", run.seed, *run.error);
  if (!result.failure) result.failure = error;
}

// A worker's own error explains a server-side disconnect better than the
// disconnect itself.
void merge_worker_errors(ExperimentResult& result, SeedRun& run,
                         const std::vector<std::exception_ptr>& worker_errors) {
  for (const auto& e : worker_errors) {
    if (!e) continue;
    if (!run.error) {
      record_failure(result, run, e);
    } else {
      run.error = *run.error + "; worker: " + single_line(describe_exception(e));
    }
  }
}

nlohmann::json seed_provenance(const ExperimentConfig& config, const SeedData& data,
                               std::uint64_t seed) {
  return {{"seed", seed},
          {"dataset", data.dataset->provenance},
          {"examples_used", data.training_examples.size()},
          {"discarded", data.plan.discarded.size()},
          {"units_per_worker", data.plan.units()},
          {"streams",
           {{"shard", {seed, 0, 0, "shard"}},
            {"initial_permutation", {seed, 1, "worker", "init"}},
            {"engine",
             config.policy.kind == PolicyKind::kCdGrab ||
                     config.policy.kind == PolicyKind::kCentralizedPairBalance
                 ? nlohmann::json{seed, "epoch", 0, "pairbalance"}
             : config.policy.kind == PolicyKind::kIdGrabPairBal
                 ? nlohmann::json{seed, "epoch", "worker", "pairbalance"}
             : config.policy.kind == PolicyKind::kDrr
                 ? nlohmann::json{seed, "epoch + 1", "worker", "drr"}
                 : nlohmann::json{seed, "epoch", "worker", "balance"}}}}};
}

nlohmann::json base_provenance(const ExperimentConfig& config) {
  return {{"config", config_to_json(config)},
          {"config_hash", fmt::format("{:016x}", config_hash(config))},
          {"git_revision", git_revision()},
          {"seeds", nlohmann::json::array()}};
}

}  // namespace

void drive_seed(const ExperimentConfig& config, const SeedData& data, WorkerGroup& group,
                SeedRun& run) {
  using Clock = std::chrono::steady_clock;
  ParameterServer server(config.policy, data.context);
  DenseVector weights(data.context.dim);
  run.seed = data.context.seed;
  run.permutations.assign(1, std::vector<Permutation>(server.permutations().begin(),
                                                      server.permutations().end()));
  run.final_weights.assign(weights.values().begin(), weights.values().end());
  for (std::uint32_t t = 1; t <= config.epochs; ++t) {
    const auto started = Clock::now();
    group.assign_permutations(t, server.permutations());
    EpochRecorder recorder(config, data, weights, run.permutations.back(), t, run);
    auto next = run_epoch(server, group, &recorder);
    const auto elapsed = std::chrono::duration<double, std::milli>(Clock::now() - started);

    EpochMetrics m;
    m.seed = run.seed;
    m.epoch = t;
    m.loss = full_train_loss(data, weights.values());
    const DenseVector full_grad = data.objective->mean_gradient(weights, data.training_examples);
    m.grad_norm_sq = dot(full_grad, full_grad);
    m.herding_bound = parallel_herding_bound(recorder.gradients(), next);
    m.delta_t = recorder.drift();
    m.wall_ms = config.wall_clock ? elapsed.count() : 0.0;
    run.epochs.push_back(m);
    run.permutations.push_back(std::move(next));
    run.final_weights.assign(weights.values().begin(), weights.values().end());
    spdlog::debug("seed {} epoch {} loss {:.6g} herding {:.6g}", run.seed, t, m.loss,
                  m.herding_bound);
  }
  group.finish();
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  config.validate();
  if (config.transport.mode == TransportMode::kTcp) {
    TcpListener listener(config.transport.address);
    const TcpAddress local{config.transport.address.host, listener.port()};
    const auto hash = config_hash(config);
    std::vector<std::exception_ptr> worker_errors(config.workers);
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < config.workers; ++i) {
      threads.emplace_back([&, i] {
        try {
          run_remote_worker(config, i, local, hash);
        } catch (...) {
          worker_errors[i] = std::current_exception();
        }
      });
    }
    ExperimentResult result = serve_experiment(config, listener, hash);
    for (auto& t : threads) t.join();
    if (result.runs.empty()) result.runs.push_back(fresh_run(config.seeds.front()));
    merge_worker_errors(result, result.runs.back(), worker_errors);
    return result;
  }

  ExperimentResult result;
  result.provenance = base_provenance(config);
  for (std::uint64_t seed : config.seeds) {
    result.runs.push_back(fresh_run(seed));
    SeedRun& run = result.runs.back();
    try {
      const SeedData data = prepare_seed(config, seed);
      result.provenance["seeds"].push_back(seed_provenance(config, data, seed));
      if (config.transport.mode == TransportMode::kDirect) {
        std::vector<Worker> workers;
        for (std::size_t i = 0; i < config.workers; ++i) {
          workers.push_back(make_worker(config, data, i));
        }
        LocalWorkerGroup group(std::move(workers));
        drive_seed(config, data, group, run);
        continue;
      }
      std::vector<std::unique_ptr<Channel>> server_side;
      std::vector<std::unique_ptr<Channel>> worker_side;
      std::vector<Channel*> endpoints;
      for (std::size_t i = 0; i < config.workers; ++i) {
        auto [server_end, worker_end] = make_memory_channel_pair();
        endpoints.push_back(server_end.get());
        server_side.push_back(std::move(server_end));
        worker_side.push_back(std::move(worker_end));
      }
      std::vector<std::exception_ptr> worker_errors(config.workers);
      std::vector<std::thread> threads;
      for (std::size_t i = 0; i < config.workers; ++i) {
        threads.emplace_back([&, i, worker = make_worker(config, data, i)]() mutable {
          try {
            run_worker_session(*worker_side[i], worker);
          } catch (...) {
            worker_errors[i] = std::current_exception();
            worker_side[i]->close();
          }
        });
      }
      try {
        RemoteWorkerGroup group(endpoints, {static_cast<std::uint32_t>(data.context.units),
                                            static_cast<std::uint32_t>(data.context.dim),
                                            std::nullopt});
        drive_seed(config, data, group, run);
      } catch (...) {
        record_failure(result, run, std::current_exception());
        for (auto& c : server_side) c->close();
      }
      for (auto& t : threads) t.join();
      merge_worker_errors(result, run, worker_errors);
      if (run.error) break;
    } catch (...) {
      record_failure(result, run, std::current_exception());
      break;
    }
  }
  return result;
}

ExperimentResult serve_experiment(const ExperimentConfig& config, TcpListener& listener,
                                  std::optional<std::uint64_t> hash) {
  ExperimentResult result;
  result.provenance = base_provenance(config);
  std::vector<std::unique_ptr<Channel>> channels;
  std::vector<Channel*> endpoints;
  try {
    for (std::size_t i = 0; i < config.workers; ++i) {
      channels.push_back(listener.accept());
      endpoints.push_back(channels.back().get());
    }
    spdlog::info("{} workers connected", config.workers);
  } catch (...) {
    result.runs.push_back(fresh_run(config.seeds.front()));
    record_failure(result, result.runs.back(), std::current_exception());
    return result;
  }
  for (std::uint64_t seed : config.seeds) {
    result.runs.push_back(fresh_run(seed));
    SeedRun& run = result.runs.back();
    try {
      const SeedData data = prepare_seed(config, seed);
      result.provenance["seeds"].push_back(seed_provenance(config, data, seed));
      RemoteWorkerGroup group(endpoints, {static_cast<std::uint32_t>(data.context.units),
                                          static_cast<std::uint32_t>(data.context.dim), hash});
      drive_seed(config, data, group, run);
    } catch (...) {
      record_failure(result, run, std::current_exception());
      for (auto& c : channels) c->close();
      break;
    }
  }
  return result;
}

void run_remote_worker(const ExperimentConfig& config, std::size_t worker_id,
                       const TcpAddress& address, std::optional<std::uint64_t> hash,
                       const RetryPolicy& retry) {
  if (worker_id >= config.workers) {
    throw ConfigError(fmt::format("worker id {} out of range for run.m = {}", worker_id,
                                  config.workers));
  }
  auto channel = connect_with_retry(address, retry);
  for (std::uint64_t seed : config.seeds) {
    const SeedData data = prepare_seed(config, seed);
    Worker worker = make_worker(config, data, worker_id);
    run_worker_session(*channel, worker, hash);
  }
}

// ---------------------------------------------------------------------------
// Outputs

std::string metrics_csv(const ExperimentConfig& config, const SeedRun& run) {
  std::string out = kMetricsHeader;
  out += '\n';
  for (const auto& m : run.epochs) {
    out += fmt::format("{},{},{},{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", m.seed, m.epoch,
                       policy_name(config.policy.kind), config.workers, m.loss, m.grad_norm_sq,
                       m.herding_bound, m.delta_t, m.wall_ms);
  }
  if (run.error) {
    out += fmt::format("# ERROR seed={} after_epoch={}: {}\n", run.seed, run.epochs.size(),
                       *run.error);
  }
  return out;
}

std::string aggregate_csv(const ExperimentConfig& config, std::span<const SeedRun> runs) {
  std::string out =
      "epoch,policy,m,seeds,loss_mean,loss_std,grad_norm_sq_mean,grad_norm_sq_std,"
      "herding_bound_mean,herding_bound_std,delta_t_mean,delta_t_std,wall_ms_mean,wall_ms_std\n";
  if (runs.empty()) return out;
  std::size_t epochs = runs.front().epochs.size();
  for (const auto& r : runs) epochs = std::min(epochs, r.epochs.size());
  const double count = static_cast<double>(runs.size());
  auto stats = [&](std::size_t t, double EpochMetrics::*field) {
    double mean = 0.0;
    for (const auto& r : runs) mean += r.epochs[t].*field;
    mean /= count;
    double var = 0.0;
    for (const auto& r : runs) {
      const double dev = r.epochs[t].*field - mean;
      var += dev * dev;
    }
    return fmt::format("{:.17g},{:.17g}", mean, std::sqrt(var / count));
  };
  for (std::size_t t = 0; t < epochs; ++t) {
    out += fmt::format("{},{},{},{},{},{},{},{},{}\n", t + 1, policy_name(config.policy.kind),
                       config.workers, runs.size(), stats(t, &EpochMetrics::loss),
                       stats(t, &EpochMetrics::grad_norm_sq),
                       stats(t, &EpochMetrics::herding_bound), stats(t, &EpochMetrics::delta_t),
                       stats(t, &EpochMetrics::wall_ms));
  }
  return out;
}

namespace {

void write_text(const fs::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out << text;
  if (!out) throw std::runtime_error(fmt::format("write to {} failed", path.string()));
}

}  // namespace

void write_outputs(const ExperimentConfig& config, const ExperimentResult& result) {
  fs::create_directories(config.out);
  for (const auto& run : result.runs) {
    write_text(config.out / fmt::format("metrics_seed{}.csv", run.seed), metrics_csv(config, run));
    std::string weights = "k,w\n";
    for (std::size_t k = 0; k < run.final_weights.size(); ++k) {
      weights += fmt::format("{},{:.17g}\n", k, run.final_weights[k]);
    }
    write_text(config.out / fmt::format("weights_seed{}.csv", run.seed), weights);
    if (config.per_step_loss) {
      std::string steps = "seed,epoch,step,loss\n";
      for (const auto& s : run.step_losses) {
        steps += fmt::format("{},{},{},{:.17g}\n", run.seed, s.epoch, s.step, s.loss);
      }
      write_text(config.out / fmt::format("steps_seed{}.csv", run.seed), steps);
    }
  }
  std::string aggregate = aggregate_csv(config, result.runs);
  for (const auto& run : result.runs) {
    if (run.error) aggregate += fmt::format("# ERROR seed={}: {}\n", run.seed, *run.error);
  }
  write_text(config.out / "metrics_aggregate.csv", aggregate);

  nlohmann::json manifest = result.provenance;
  if (manifest.is_null()) manifest = base_provenance(config);
  nlohmann::json errors = nlohmann::json::array();
  for (const auto& run : result.runs) {
    if (run.error) errors.push_back({{"seed", run.seed}, {"error", *run.error}});
  }
  manifest["errors"] = errors;
  write_text(config.out / "manifest.json", manifest.dump(2) + "\n");
}

std::vector<double> read_weights_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot read {}", path.string()));
  std::string line;
  std::getline(in, line);
  if (line != "k,w") throw std::runtime_error(fmt::format("{}: unexpected header", path.string()));
  std::vector<double> weights;
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw std::runtime_error(fmt::format("{}: malformed row '{}'", path.string(), line));
    }
    double v = 0.0;
    const char* first = line.data() + comma + 1;
    const char* last = line.data() + line.size();
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last) {
      throw std::runtime_error(fmt::format("{}: malformed value '{}'", path.string(), line));
    }
    weights.push_back(v);
  }
  return weights;
}

// ---------------------------------------------------------------------------
// Herding-bound experiment

void VectorExperimentConfig::validate() const {
  if (count < 2) throw ConfigError("vectors.count must be at least 2");
  if (dim == 0) throw ConfigError("vectors.dim must be at least 1");
  if (workers.empty()) throw ConfigError("vectors.m must list at least one worker count");
  if (epochs == 0) throw ConfigError("vectors.epochs must be at least 1");
  if (policies.empty()) throw ConfigError("vectors.policies must list at least one policy");
  if (seeds.empty()) throw ConfigError("vectors.seeds must list at least one seed");
  for (std::size_t m : workers) {
    if (m == 0 || count / m < 2) {
      throw ConfigError(fmt::format(
          "vectors.m = {} leaves fewer than 2 vectors per worker (vectors.count = {})", m, count));
    }
    for (auto p : policies) {
      if (OrderPolicy{p, engine}.centralized() && m != 1) {
        throw ConfigError(fmt::format(
            "vectors.policies includes {}, which requires vectors.m = 1, but vectors.m has {}",
            policy_name(p), m));
      }
    }
  }
}

std::vector<HerdingRow> herding_trajectory(const VectorSet& set, const OrderPolicy& policy,
                                           std::uint64_t seed, std::uint32_t epochs) {
  const OrderingContext ctx{seed, set.workers(), set.per_worker(), set.dim()};
  auto orderer = make_orderer(policy, ctx);
  auto perms = initial_permutations(ctx);
  std::vector<HerdingRow> rows;
  std::vector<DenseVector> grads(ctx.workers, DenseVector(ctx.dim));
  for (std::uint32_t t = 1; t <= epochs; ++t) {
    orderer->begin_epoch(t, perms);
    for (std::uint32_t j = 1; j <= ctx.units; ++j) {
      for (std::size_t i = 0; i < ctx.workers; ++i) {
        const auto z = set.at(i, perms[i][j - 1]);
        grads[i] = DenseVector(std::vector<double>(z.begin(), z.end()));
      }
      orderer->observe(j, grads);
    }
    perms = orderer->next_epoch();
    rows.push_back({seed, t, policy.kind, ctx.workers, ctx.units,
                    parallel_herding_bound(set, perms)});
  }
  return rows;
}

std::vector<HerdingRow> herding_bound_experiment(const VectorExperimentConfig& config) {
  config.validate();
  std::map<std::uint64_t, VectorSet> vectors;
  for (std::uint64_t seed : config.seeds) {
    vectors.emplace(seed, generate_vectors(config.count, config.dim, seed));
  }
  std::vector<HerdingRow> rows;
  for (PolicyKind kind : config.policies) {
    for (std::size_t m : config.workers) {
      for (std::uint64_t seed : config.seeds) {
        const VectorSet set = vectors.at(seed).partition(m, true);
        auto cell = herding_trajectory(set, OrderPolicy{kind, config.engine}, seed, config.epochs);
        spdlog::info("{} m={} seed={}: epoch {} bound {:.6g}", policy_name(kind), m, seed,
                     config.epochs, cell.back().herding_bound);
        rows.insert(rows.end(), cell.begin(), cell.end());
      }
    }
  }
  return rows;
}

std::string herding_csv(std::span<const HerdingRow> rows) {
  std::string out = kHerdingHeader;
  out += '\n';
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{},{:.17g}\n", r.seed, r.epoch, policy_name(r.policy), r.m,
                       r.n, r.herding_bound);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Diagnostics

double rate_fit(std::span<const double> t, std::span<const double> gap) {
  if (t.size() != gap.size()) throw DomainError("rate_fit needs one gap per T");
  std::vector<double> xs;
  std::vector<double> ys;
  for (std::size_t k = 0; k < t.size(); ++k) {
    if (!(gap[k] > 0.0) || !(t[k] > 0.0) || !std::isfinite(gap[k])) {
      spdlog::warn("rate_fit: dropping point T={} gap={}", t[k], gap[k]);
      continue;
    }
    xs.push_back(std::log(t[k]));
    ys.push_back(std::log(gap[k]));
  }
  if (xs.size() < 5) {
    throw DomainError(fmt::format("rate_fit needs at least 5 positive points, got {}", xs.size()));
  }
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    sxy += (xs[k] - mx) * (ys[k] - my);
    sxx += (xs[k] - mx) * (xs[k] - mx);
  }
  if (sxx == 0.0) throw DomainError("rate_fit needs at least two distinct T values");
  return sxy / sxx;
}

double lambert_w0(double x) {
  if (!(x >= 0.0) || !std::isfinite(x)) {
    throw DomainError(fmt::format("lambert_w0 is defined here for finite x >= 0, got {}", x));
  }
  if (x == 0.0) return 0.0;
  constexpr double kTol = 1e-12;
  constexpr int kMaxIter = 200;
  if (x < 1.0) {
    // f(w) = w e^w - x
    double w = std::log1p(x) * 0.6;
    for (int it = 0; it < kMaxIter; ++it) {
      const double ew = std::exp(w);
      const double step = (w * ew - x) / (ew * (w + 1.0));
      w -= step;
      if (std::abs(step) <= kTol * std::max(1.0, std::abs(w))) return w;
    }
    return w;
  }
  // f(w) = w + ln w - ln x, well conditioned for large x.
  const double lx = std::log(x);
  double w = lx > 1.0 ? lx - std::log(lx) : 0.6;
  if (w <= 0.0) w = 0.6;
  for (int it = 0; it < kMaxIter; ++it) {
    const double step = (w + std::log(w) - lx) / (1.0 + 1.0 / w);
    w -= step;
    if (std::abs(step) <= kTol * std::max(1.0, std::abs(w))) return w;
  }
  return w;
}

TheoryLearningRate theoretical_lr(const TheoryConstants& k) {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw DomainError(fmt::format("{} must be positive and finite, got {}", name, v));
    }
  };
  positive(k.smoothness, "L_{2,inf}");
  positive(k.sigma, "sigma");
  positive(k.varsigma, "varsigma");
  positive(k.initial_gap, "F_1");
  if (k.mu) positive(*k.mu, "mu");
  if (k.dim == 0 || k.m == 0 || k.n == 0 || k.epochs == 0) {
    throw DomainError("d, m, n and T must be at least 1");
  }
  if (!(k.delta > 0.0 && k.delta < 1.0)) throw DomainError("delta must lie in (0, 1)");

  TheoryLearningRate out;
  const double L = k.smoothness;
  const double m = static_cast<double>(k.m);
  const double n = static_cast<double>(k.n);
  const double T = static_cast<double>(k.epochs);
  const double spread = k.varsigma + k.sigma;
  out.a_tilde = theoretical_bound_A(k.dim, k.m * k.n, k.delta);
  const double A = out.a_tilde;

  const double first = 1.0 / (16.0 * L * (2.0 * n + A / m));
  const double second =
      std::cbrt(4.0 * k.initial_gap * m * m /
                (42.0 * L * L * spread * spread * A * A * n * T +
                 18.0 * L * L * m * m * n * n * n * k.sigma * k.sigma));
  out.smooth_first_branch = first <= second;
  out.smooth_rate = std::min(first, second);

  if (k.mu) {
    const double mu = *k.mu;
    out.pl_c3 = (k.initial_gap + k.sigma * k.sigma / L) * mu * mu /
                (224.0 * L * L * spread * spread * A * A);
    out.pl_w = lambert_w0(T * T * m * m * n * n * out.pl_c3);
    out.pl_rate = 2.0 * out.pl_w / (T * n * mu);
    out.pl_degenerate = *out.pl_rate == 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bound checks

namespace {

// max_k || N * sum_{j<=k} (z_{p[j]} - mean) ||_inf in exact integer
// arithmetic, optionally signed. Vectors are integer valued.
std::int64_t scaled_herding(const std::vector<std::int64_t>& z, std::size_t n, std::size_t d,
                            const Permutation& p, std::span<const Sign> signs) {
  std::vector<std::int64_t> total(d, 0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < d; ++k) total[k] += z[j * d + k];
  }
  std::vector<std::int64_t> prefix(d, 0);
  std::int64_t best = 0;
  const auto N = static_cast<std::int64_t>(n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::int64_t s = signs.empty() ? 1 : to_int(signs[j]);
    for (std::size_t k = 0; k < d; ++k) {
      prefix[k] += s * (N * z[p[j] * d + k] - total[k]);
      best = std::max(best, prefix[k] < 0 ? -prefix[k] : prefix[k]);
    }
  }
  return best;
}

}  // namespace

BoundCheckSummary check_reorder_inequality(std::size_t trials, std::uint64_t seed) {
  BoundCheckSummary summary;
  summary.trials = trials;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    RngStream rng(seed, trial, 0, "reorder-check");
    const std::size_t n = 1 + rng.next_below(64);
    const std::size_t d = 1 + rng.next_below(8);
    std::vector<std::int64_t> z(n * d);
    for (auto& v : z) v = static_cast<std::int64_t>(rng.next_below(2001)) - 1000;
    const Permutation p = random_permutation(n, rng);
    std::vector<Sign> signs(n);
    for (auto& s : signs) s = rng.next_below(2) == 0 ? Sign::kMinus : Sign::kPlus;
    const Permutation q = reorder(p, signs);
    const std::int64_t lhs = 2 * scaled_herding(z, n, d, q, {});
    const std::int64_t rhs = scaled_herding(z, n, d, p, signs) + scaled_herding(z, n, d, p, {});
    if (lhs <= rhs) ++summary.passed;
    if (rhs > 0) {
      summary.worst_ratio = std::max(summary.worst_ratio,
                                     static_cast<double>(lhs) / static_cast<double>(rhs));
    }
  }
  return summary;
}

BoundCheckSummary check_balance_bound(std::size_t trials, std::size_t count, std::size_t d,
                                      double delta, std::uint64_t seed) {
  const double bound = theoretical_bound_A(d, count, delta);
  BoundCheckSummary summary;
  summary.trials = trials;
  std::vector<double> v(d);
  for (std::size_t trial = 0; trial < trials; ++trial) {
    RngStream vectors(seed, trial, 0, "balance-check-vectors");
    RngStream signs(seed, trial, 0, "balance-check-signs");
    BalanceState state(d);
    double worst = 0.0;
    for (std::size_t j = 0; j < count; ++j) {
      double norm = 0.0;
      do {
        for (auto& x : v) x = vectors.next_normal();
        norm = l2_norm(v);
      } while (norm == 0.0);
      for (auto& x : v) x /= norm;
      randomized_balance(state, v, signs);
      worst = std::max(worst, inf_norm(state.sum()));
    }
    if (worst <= bound) ++summary.passed;
    summary.worst_ratio = std::max(summary.worst_ratio, worst / bound);
  }
  return summary;
}

BoundCheckSummary check_pair_balance_step(std::size_t trials, double delta, std::uint64_t seed) {
  BoundCheckSummary summary;
  summary.trials = trials;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    RngStream rng(seed, trial, 0, "pair-step-check");
    const std::size_t m = 1 + rng.next_below(8);
    const std::size_t n = 2 * (1 + rng.next_below(32));
    const std::size_t d = 1 + rng.next_below(8);
    VectorSet set(m, n, d);
    std::vector<double> g(d);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double norm = 0.0;
        do {
          for (auto& x : g) x = rng.next_normal();
          norm = l2_norm(g);
        } while (norm == 0.0);
        const double radius = 0.5 * rng.next_unit();
        auto z = set.mutable_at(i, j);
        for (std::size_t k = 0; k < d; ++k) z[k] = radius * g[k] / norm;
      }
    }
    std::vector<Permutation> perms;
    for (std::size_t i = 0; i < m; ++i) perms.push_back(random_permutation(n, rng));

    const DenseVector mean = set.mean();
    DenseVector total(d);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) total += set.at(i, j);
    }
    const double c1 = inf_norm(total);
    double c2 = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const auto z = set.at(i, j);
        for (std::size_t k = 0; k < d; ++k) c2 = std::max(c2, std::abs(z[k] - mean[k]));
      }
    }
    const double a = theoretical_bound_A(d, m * n / 2, delta);
    const double pre = parallel_prefix_bound(set, perms);
    SignEngine engine = SignEngine::randomized(RngStream(seed, trial, 0, "pair-step-signs"));
    const auto next = one_step_pair_balance_order(set, perms, engine);
    const double post = parallel_prefix_bound(set, next);
    const double rhs = 0.5 * pre + c1 + a * c2;
    if (post <= rhs) ++summary.passed;
    summary.worst_ratio = std::max(summary.worst_ratio, post / rhs);
  }
  return summary;
}

}  // namespace ordbal
