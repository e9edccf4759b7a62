// SPDX-License-Identifier: Apache-2.0
//
// Experiment harness: binds a task, an ordering policy, the coordinator and
// a transport; records per-epoch metrics and writes them as CSV.

#pragma once

#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ordbal/balance.hpp"
#include "ordbal/coordinator.hpp"
#include "ordbal/core.hpp"
#include "ordbal/herding.hpp"
#include "ordbal/tasks.hpp"
#include "ordbal/transport.hpp"

namespace ordbal {

enum class DataSource { kSynthetic, kCsv };

struct TaskSpec {
  TaskKind kind = TaskKind::kLeastSquares;
  DataSource source = DataSource::kSynthetic;
  // synthetic
  std::size_t examples = 1024;
  std::size_t dim = 8;
  double noise = 0.0;
  std::uint64_t data_seed = 0;
  // csv
  std::filesystem::path csv_path;
  bool standardize = false;
  std::string label_map;
  // objective
  double lambda = 0.0;
};

enum class TransportMode { kDirect, kMemory, kTcp };

struct TransportSpec {
  TransportMode mode = TransportMode::kDirect;
  TcpAddress address;

  /// "direct", "memory" or "tcp:host:port".
  static TransportSpec parse(std::string_view text);
  std::string to_string() const;
};

struct ExperimentConfig {
  TaskSpec task;
  OrderPolicy policy;
  std::size_t workers = 1;
  std::size_t block = 1;
  std::uint32_t epochs = 1;
  double alpha = 0.01;
  std::vector<std::uint64_t> seeds{0};
  TransportSpec transport;
  bool wall_clock = false;
  bool per_step_loss = false;
  std::filesystem::path out = "ordbal-out";

  /// Throws ConfigError naming the offending keys.
  void validate() const;
};

struct EpochMetrics {
  std::uint64_t seed = 0;
  std::uint32_t epoch = 0;
  double loss = 0.0;
  double grad_norm_sq = 0.0;
  /// Parallel herding bound of the epoch's gradients under the next
  /// epoch's permutations.
  double herding_bound = 0.0;
  double delta_t = 0.0;
  double wall_ms = 0.0;
};

struct StepLoss {
  std::uint32_t epoch = 0;
  std::uint32_t step = 0;
  double loss = 0.0;
};

struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<EpochMetrics> epochs;
  /// permutations[t - 1] are the permutations used in epoch t; one extra
  /// entry holds the permutations produced by the last epoch.
  std::vector<std::vector<Permutation>> permutations;
  std::vector<double> final_weights;
  std::vector<StepLoss> step_losses;
  std::optional<std::string> error;
};

struct ExperimentResult {
  std::vector<SeedRun> runs;
  nlohmann::json provenance;
  std::exception_ptr failure;

  bool ok() const noexcept { return failure == nullptr; }
};

/// Everything one seed needs: data, objective, and the sharding.
struct SeedData {
  std::unique_ptr<Dataset> dataset;
  std::unique_ptr<Objective> objective;
  ShardPlan plan;
  OrderingContext context;
  /// Union of the shards, in worker then local order.
  std::vector<std::size_t> training_examples;
};

SeedData prepare_seed(const ExperimentConfig& config, std::uint64_t seed);
Worker make_worker(const ExperimentConfig& config, const SeedData& data, std::size_t id);

/// Server side of one seed. Fills `run` as epochs complete, so a thrown
/// error leaves the finished epochs in place.
void drive_seed(const ExperimentConfig& config, const SeedData& data, WorkerGroup& group,
                SeedRun& run);

/// Runs every seed over the configured transport. Errors are recorded in
/// the result instead of thrown.
ExperimentResult run_experiment(const ExperimentConfig& config);

/// Server half of a TCP run: accepts m workers on `listener`, then drives
/// one session per seed over the same connections.
ExperimentResult serve_experiment(const ExperimentConfig& config, TcpListener& listener,
                                  std::optional<std::uint64_t> config_hash);

/// Worker half of a TCP run: one session per seed.
void run_remote_worker(const ExperimentConfig& config, std::size_t worker_id,
                       const TcpAddress& address, std::optional<std::uint64_t> config_hash,
                       const RetryPolicy& retry = {});

inline constexpr const char* kMetricsHeader =
    "seed,epoch,policy,m,loss,grad_norm_sq,herding_bound,delta_t,wall_ms";

/// Per-seed metrics CSV text, including a trailing "# ERROR" line for an
/// aborted run.
std::string metrics_csv(const ExperimentConfig& config, const SeedRun& run);
/// Mean and population std across seeds for every epoch all seeds reached.
std::string aggregate_csv(const ExperimentConfig& config, std::span<const SeedRun> runs);

/// Writes metrics_seed<s>.csv, metrics_aggregate.csv, weights_seed<s>.csv,
/// optional steps_seed<s>.csv, and manifest.json under config.out.
void write_outputs(const ExperimentConfig& config, const ExperimentResult& result);

/// Reads back weights_seed<s>.csv.
std::vector<double> read_weights_csv(const std::filesystem::path& path);

/// Source revision the library was built from.
std::string_view git_revision() noexcept;

/// Full training loss of `weights` over the seed's training examples.
double full_train_loss(const SeedData& data, std::span<const double> weights);

// ---------------------------------------------------------------------------
// Herding-bound experiment on static vector sets.

struct VectorExperimentConfig {
  std::size_t count = 100000;
  std::size_t dim = 16;
  std::vector<std::size_t> workers{5, 10, 20, 50, 100};
  std::uint32_t epochs = 5;
  std::vector<PolicyKind> policies{PolicyKind::kCdGrab, PolicyKind::kIdGrabPairBal,
                                   PolicyKind::kIdGrabBal, PolicyKind::kDrr};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  EngineSpec engine;
  std::filesystem::path out = "ordbal-out";

  void validate() const;
};

struct HerdingRow {
  std::uint64_t seed = 0;
  std::uint32_t epoch = 0;
  PolicyKind policy = PolicyKind::kCdGrab;
  std::size_t m = 0;
  std::size_t n = 0;
  double herding_bound = 0.0;
};

/// Runs `epochs` epochs of `policy` on a static m-worker set, the vectors
/// standing in for gradients. Row t is the bound after epoch t's reordering.
std::vector<HerdingRow> herding_trajectory(const VectorSet& set, const OrderPolicy& policy,
                                           std::uint64_t seed, std::uint32_t epochs);

std::vector<HerdingRow> herding_bound_experiment(const VectorExperimentConfig& config);

inline constexpr const char* kHerdingHeader = "seed,epoch,policy,m,n,herding_bound";
std::string herding_csv(std::span<const HerdingRow> rows);

// ---------------------------------------------------------------------------
// Diagnostics.

/// Least-squares slope of log(gap) against log(t). Nonpositive gaps are
/// dropped with a warning; fewer than 5 remaining points is a DomainError.
double rate_fit(std::span<const double> t, std::span<const double> gap);

/// Principal branch of Lambert W on [0, inf), by Newton iteration to 1e-12.
double lambert_w0(double x);

struct TheoryConstants {
  double smoothness = 0.0;  // L_{2,inf}
  double sigma = 0.0;
  double varsigma = 0.0;
  std::optional<double> mu;
  double initial_gap = 0.0;  // F_1
  std::size_t dim = 1;  // enters A
  std::size_t m = 1;
  std::size_t n = 1;
  std::size_t epochs = 1;
  double delta = 0.01;
};

struct TheoryLearningRate {
  double a_tilde = 0.0;
  double smooth_rate = 0.0;
  /// True when the 1/(16 L (2n + A/m)) branch attains the minimum.
  bool smooth_first_branch = false;
  std::optional<double> pl_rate;
  double pl_c3 = 0.0;
  double pl_w = 0.0;
  /// The P.L. rate came out as zero.
  bool pl_degenerate = false;
};

/// Step sizes prescribed by the non-convex and P.L. convergence results.
/// For reporting only. A uses N = m * n.
TheoryLearningRate theoretical_lr(const TheoryConstants& constants);

struct BoundCheckSummary {
  std::size_t trials = 0;
  std::size_t passed = 0;
  double worst_ratio = 0.0;  // max observed lhs / rhs

  double pass_rate() const noexcept {
    return trials == 0 ? 0.0 : static_cast<double>(passed) / static_cast<double>(trials);
  }
};

/// herding(reorder(p, s)) <= (signed + herding) / 2 on random instances
/// (N <= 64, d <= 8, random signs).
BoundCheckSummary check_reorder_inequality(std::size_t trials, std::uint64_t seed);

/// Randomized balancing of `count` unit vectors in dimension d: fraction of
/// trials whose max signed prefix inf-norm stays within A(d, count, delta).
BoundCheckSummary check_balance_bound(std::size_t trials, std::size_t count, std::size_t d,
                                      double delta, std::uint64_t seed);

/// One server-side pair-balancing pass on random sets (m <= 8, n <= 64,
/// d <= 8, ||z||_2 <= 1/2): post <= pre / 2 + c1 + A c2, with c1 the inf-norm
/// of the total sum and c2 the largest centered inf-norm.
BoundCheckSummary check_pair_balance_step(std::size_t trials, double delta, std::uint64_t seed);

}  // namespace ordbal
