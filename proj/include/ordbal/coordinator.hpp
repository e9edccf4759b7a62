// SPDX-License-Identifier: Apache-2.0
//
// Worker and order-server state machines plus every example-ordering policy,
// independent of how gradients travel between them.
//
// Epochs and steps are 1-based on this surface (they appear on the wire);
// permutation positions and example indices are 0-based. Step j of an epoch
// visits local unit perms[i][j - 1] on worker i.

#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ordbal/balance.hpp"
#include "ordbal/core.hpp"
#include "ordbal/herding.hpp"
#include "ordbal/tasks.hpp"

namespace ordbal {

/// Steps or epochs arriving out of order, or an incomplete epoch.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PolicyKind {
  kCdGrab,
  kDrr,
  kIdGrabBal,
  kIdGrabPairBal,
  kCentralizedGrab,
  kCentralizedPairBalance,
  kShuffleOnce,
};

std::string_view policy_name(PolicyKind kind) noexcept;
std::span<const PolicyKind> all_policies() noexcept;
/// Throws ConfigError listing the valid names.
PolicyKind parse_policy(std::string_view text);

struct OrderPolicy {
  PolicyKind kind = PolicyKind::kCdGrab;
  EngineSpec engine;

  bool centralized() const noexcept {
    return kind == PolicyKind::kCentralizedGrab || kind == PolicyKind::kCentralizedPairBalance;
  }
  /// Centralized variants require exactly one worker.
  void validate(std::size_t workers) const;
};

struct OrderingContext {
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t units = 0;  // permutation units per worker
  std::size_t dim = 0;
};

/// Epoch-1 permutations: worker i draws from stream (seed, 1, i, "init").
std::vector<Permutation> initial_permutations(const OrderingContext& ctx);

/// Mean of the gradients seen in the previous epoch, used to center the
/// current epoch's gradients. Starts at zero.
class StaleMeanState {
 public:
  explicit StaleMeanState(std::size_t dim) : prev_mean_(dim), accumulator_(dim) {}

  const DenseVector& prev_epoch_mean() const noexcept { return prev_mean_; }
  std::size_t count() const noexcept { return count_; }

  void accumulate(std::span<const double> g);
  /// g - prev_epoch_mean
  DenseVector center(std::span<const double> g) const;
  /// Closes the epoch: prev_epoch_mean <- accumulator / count.
  void roll();

 private:
  DenseVector prev_mean_;
  DenseVector accumulator_;
  std::size_t count_ = 0;
};

/// Per-policy ordering state machine. Sees every step's per-worker gradients
/// in order and emits the next epoch's permutations.
class Orderer {
 public:
  virtual ~Orderer() = default;
  virtual void begin_epoch(std::uint32_t epoch, std::span<const Permutation> perms) = 0;
  virtual void observe(std::uint32_t step, std::span<const DenseVector> grads) = 0;
  virtual std::vector<Permutation> next_epoch() = 0;
};

/// Coordinated pair balancing (CD-GraB): one running sum h shared by all
/// workers. On even steps, worker i's pair (g_{j-1}, g_j) is balanced in
/// worker order and (s, -s) is appended to worker i's sign buffer.
class PairBalanceOrderer final : public Orderer {
 public:
  PairBalanceOrderer(const OrderingContext& ctx, EngineSpec engine);

  void begin_epoch(std::uint32_t epoch, std::span<const Permutation> perms) override;
  void observe(std::uint32_t step, std::span<const DenseVector> grads) override;
  std::vector<Permutation> next_epoch() override;

  const DenseVector& running_sum() const noexcept { return running_.sum(); }
  std::span<const Sign> signs(std::size_t worker) const { return signs_.at(worker); }

 private:
  OrderingContext ctx_;
  EngineSpec engine_spec_;
  std::optional<SignEngine> engine_;
  BalanceState running_;
  std::vector<Permutation> perms_;
  std::vector<std::vector<Sign>> signs_;
  std::vector<DenseVector> pending_;
};

/// ID-GraB (PairBal): each worker pair-balances its own gradients against a
/// private running sum.
class LocalPairBalanceOrderer final : public Orderer {
 public:
  LocalPairBalanceOrderer(const OrderingContext& ctx, EngineSpec engine);

  void begin_epoch(std::uint32_t epoch, std::span<const Permutation> perms) override;
  void observe(std::uint32_t step, std::span<const DenseVector> grads) override;
  std::vector<Permutation> next_epoch() override;

 private:
  OrderingContext ctx_;
  EngineSpec engine_spec_;
  std::vector<SignEngine> engines_;
  std::vector<BalanceState> running_;
  std::vector<Permutation> perms_;
  std::vector<std::vector<Sign>> signs_;
  std::vector<DenseVector> pending_;
};

/// GraB with stale-mean centering, run independently per worker
/// (ID-GraB (Bal); the m = 1 case is centralized GraB).
class StaleMeanBalanceOrderer final : public Orderer {
 public:
  StaleMeanBalanceOrderer(const OrderingContext& ctx, EngineSpec engine);

  void begin_epoch(std::uint32_t epoch, std::span<const Permutation> perms) override;
  void observe(std::uint32_t step, std::span<const DenseVector> grads) override;
  std::vector<Permutation> next_epoch() override;

  const StaleMeanState& stale_mean(std::size_t worker) const { return stale_.at(worker); }

 private:
  OrderingContext ctx_;
  EngineSpec engine_spec_;
  std::vector<SignEngine> engines_;
  std::vector<BalanceState> running_;
  std::vector<StaleMeanState> stale_;
  std::vector<Permutation> perms_;
  std::vector<std::vector<Sign>> signs_;
};

/// D-RR: fresh uniform permutations each epoch from (seed, epoch, i, "drr").
class RandomReshuffleOrderer final : public Orderer {
 public:
  explicit RandomReshuffleOrderer(const OrderingContext& ctx) : ctx_(ctx) {}

  void begin_epoch(std::uint32_t epoch, std::span<const Permutation> perms) override;
  void observe(std::uint32_t, std::span<const DenseVector>) override {}
  std::vector<Permutation> next_epoch() override;

 private:
  OrderingContext ctx_;
  std::uint32_t epoch_ = 0;
};

/// Shuffle once: the epoch-1 permutations are kept forever.
class ShuffleOnceOrderer final : public Orderer {
 public:
  void begin_epoch(std::uint32_t, std::span<const Permutation> perms) override;
  void observe(std::uint32_t, std::span<const DenseVector>) override {}
  std::vector<Permutation> next_epoch() override { return perms_; }

 private:
  std::vector<Permutation> perms_;
};

std::unique_ptr<Orderer> make_orderer(const OrderPolicy& policy, const OrderingContext& ctx);

/// Parameter server: averages each step's gradients, feeds them to the
/// policy's orderer, and hands out the next epoch's permutations.
class ParameterServer {
 public:
  ParameterServer(const OrderPolicy& policy, const OrderingContext& ctx);

  std::uint32_t epoch() const noexcept { return epoch_; }
  std::span<const Permutation> permutations() const noexcept { return perms_; }
  const Orderer& orderer() const noexcept { return *orderer_; }
  const OrderingContext& context() const noexcept { return ctx_; }

  /// Returns (1/m) sum_i grads[i]. Steps must arrive as 1..n within the
  /// current epoch.
  DenseVector consume_step(std::uint32_t epoch, std::uint32_t step,
                           std::span<const DenseVector> grads);

  /// Requires all n steps consumed. Returns and installs the next epoch's
  /// permutations.
  std::vector<Permutation> finalize_epoch();

 private:
  OrderingContext ctx_;
  std::unique_ptr<Orderer> orderer_;
  std::vector<Permutation> perms_;
  std::uint32_t epoch_ = 1;
  std::uint32_t next_step_ = 1;
};

/// w <- w - alpha * avg
void apply_update(DenseVector& weights, double alpha, const DenseVector& avg);

/// A worker holding one shard and a replica of the model.
class Worker {
 public:
  Worker(std::size_t id, const Objective& objective, Shard shard, std::size_t block,
         DenseVector initial_weights, double alpha);

  std::size_t id() const noexcept { return id_; }
  std::size_t units() const noexcept { return shard_.examples.size() / block_; }
  const DenseVector& weights() const noexcept { return weights_; }
  const Permutation& permutation() const noexcept { return perm_; }

  void set_permutation(Permutation perm);
  /// Gradient of the unit visited at 1-based `step` (block mean when b > 1).
  DenseVector compute_gradient(std::uint32_t step) const;
  void apply(const DenseVector& avg) { apply_update(weights_, alpha_, avg); }

 private:
  std::size_t id_;
  const Objective* objective_;
  Shard shard_;
  std::size_t block_;
  DenseVector weights_;
  double alpha_;
  Permutation perm_;
};

/// max_k || trajectory[k] - start ||_inf. Throws on an empty trajectory.
double delta_t(const DenseVector& start, std::span<const DenseVector> trajectory);

/// Streaming form of delta_t.
class DriftTracker {
 public:
  void start(const DenseVector& weights);
  void observe(std::span<const double> weights);
  double value() const noexcept { return value_; }

 private:
  std::vector<double> start_;
  double value_ = 0.0;
};

/// The m workers as seen from the server, whatever connects them.
class WorkerGroup {
 public:
  virtual ~WorkerGroup() = default;
  virtual std::size_t size() const = 0;
  virtual void assign_permutations(std::uint32_t epoch, std::span<const Permutation> perms) = 0;
  /// Blocks until every worker's gradient for `step` is available.
  virtual std::vector<DenseVector> collect_gradients(std::uint32_t epoch, std::uint32_t step) = 0;
  virtual void broadcast_average(std::uint32_t epoch, std::uint32_t step,
                                 const DenseVector& avg) = 0;
  virtual void finish() = 0;
};

/// Workers driven in-process, in worker order.
class LocalWorkerGroup final : public WorkerGroup {
 public:
  explicit LocalWorkerGroup(std::vector<Worker> workers) : workers_(std::move(workers)) {}

  std::size_t size() const override { return workers_.size(); }
  void assign_permutations(std::uint32_t epoch, std::span<const Permutation> perms) override;
  std::vector<DenseVector> collect_gradients(std::uint32_t epoch, std::uint32_t step) override;
  void broadcast_average(std::uint32_t epoch, std::uint32_t step,
                         const DenseVector& avg) override;
  void finish() override {}

  const std::vector<Worker>& workers() const noexcept { return workers_; }

 private:
  std::vector<Worker> workers_;
};

/// Hook for per-step instrumentation on the server side.
class StepObserver {
 public:
  virtual ~StepObserver() = default;
  virtual void on_step(std::uint32_t step, std::span<const DenseVector> grads,
                       const DenseVector& avg) = 0;
};

/// Runs one epoch: per step, gather the m gradients (barrier), average,
/// broadcast, then finalize. Returns the next epoch's permutations.
std::vector<Permutation> run_epoch(ParameterServer& server, WorkerGroup& group,
                                   StepObserver* observer = nullptr);

}  // namespace ordbal
