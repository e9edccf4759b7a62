// SPDX-License-Identifier: Apache-2.0

#include "ordbal/coordinator.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include <fmt/format.h>

namespace ordbal {

namespace {

constexpr std::array kPolicies = {
    PolicyKind::kCdGrab,          PolicyKind::kDrr,
    PolicyKind::kIdGrabBal,       PolicyKind::kIdGrabPairBal,
    PolicyKind::kCentralizedGrab, PolicyKind::kCentralizedPairBalance,
    PolicyKind::kShuffleOnce,
};

void require_grads(std::span<const DenseVector> grads, const OrderingContext& ctx) {
  if (grads.size() != ctx.workers) {
    throw ProtocolError(fmt::format("{} gradients for {} workers", grads.size(), ctx.workers));
  }
  for (const auto& g : grads) {
    if (g.dim() != ctx.dim) {
      throw DomainError(fmt::format("gradient dimension {} != model dimension {}", g.dim(),
                                    ctx.dim));
    }
  }
}

void require_even_units(const OrderingContext& ctx) {
  if (ctx.units % 2 != 0) {
    throw DomainError(fmt::format("pair balancing needs an even unit count, got {}", ctx.units));
  }
}

std::vector<Permutation> reorder_all(std::span<const Permutation> perms,
                                     const std::vector<std::vector<Sign>>& signs) {
  std::vector<Permutation> out;
  out.reserve(perms.size());
  for (std::size_t i = 0; i < perms.size(); ++i) out.push_back(reorder(perms[i], signs[i]));
  return out;
}

void reset_signs(std::vector<std::vector<Sign>>& signs, std::size_t workers, std::size_t units) {
  signs.assign(workers, {});
  for (auto& s : signs) s.reserve(units);
}

[[noreturn]] void fail_balance(std::uint32_t step, std::size_t worker) {
  throw BalanceFailure(fmt::format("sign engine failed at step {} on worker {}", step, worker));
}

}  // namespace

std::string_view policy_name(PolicyKind kind) noexcept {
  switch (kind) {
    case PolicyKind::kCdGrab:
      return "cdgrab";
    case PolicyKind::kDrr:
      return "drr";
    case PolicyKind::kIdGrabBal:
      return "idgrab_bal";
    case PolicyKind::kIdGrabPairBal:
      return "idgrab_pairbal";
    case PolicyKind::kCentralizedGrab:
      return "centralized_grab";
    case PolicyKind::kCentralizedPairBalance:
      return "centralized_pairbal";
    case PolicyKind::kShuffleOnce:
      return "shuffle_once";
  }
  return "unknown";
}

std::span<const PolicyKind> all_policies() noexcept { return kPolicies; }

PolicyKind parse_policy(std::string_view text) {
  for (auto kind : kPolicies) {
    if (policy_name(kind) == text) return kind;
  }
  std::string valid;
  for (auto kind : kPolicies) {
    if (!valid.empty()) valid += ", ";
    valid += policy_name(kind);
  }
  throw ConfigError(fmt::format("unknown policy '{}' (valid policies: {})", text, valid));
}

void OrderPolicy::validate(std::size_t workers) const {
  if (workers == 0) throw ConfigError("m must be at least 1");
  if (centralized() && workers != 1) {
    throw ConfigError(fmt::format("policy = {} is centralized and requires m = 1, but m = {}",
                                  policy_name(kind), workers));
  }
}

std::vector<Permutation> initial_permutations(const OrderingContext& ctx) {
  std::vector<Permutation> perms;
  perms.reserve(ctx.workers);
  for (std::size_t i = 0; i < ctx.workers; ++i) {
    RngStream stream(ctx.seed, 1, i, "init");
    perms.push_back(random_permutation(ctx.units, stream));
  }
  return perms;
}

// ---------------------------------------------------------------------------

void StaleMeanState::accumulate(std::span<const double> g) {
  accumulator_ += g;
  ++count_;
}

DenseVector StaleMeanState::center(std::span<const double> g) const {
  DenseVector out(std::vector<double>(g.begin(), g.end()));
  out -= prev_mean_;
  return out;
}

void StaleMeanState::roll() {
  if (count_ == 0) throw ProtocolError("stale mean rolled over an empty epoch");
  std::vector<double> mean(accumulator_.values().begin(), accumulator_.values().end());
  const double count = static_cast<double>(count_);
  for (double& x : mean) x /= count;
  prev_mean_ = DenseVector(std::move(mean));
  accumulator_.fill_zero();
  count_ = 0;
}

// ---------------------------------------------------------------------------

PairBalanceOrderer::PairBalanceOrderer(const OrderingContext& ctx, EngineSpec engine)
    : ctx_(ctx), engine_spec_(engine), running_(ctx.dim) {
  require_even_units(ctx);
}

void PairBalanceOrderer::begin_epoch(std::uint32_t epoch, std::span<const Permutation> perms) {
  perms_.assign(perms.begin(), perms.end());
  engine_.emplace(SignEngine::make(engine_spec_, RngStream(ctx_.seed, epoch, 0, "pairbalance")));
  running_.reset();
  reset_signs(signs_, ctx_.workers, ctx_.units);
  pending_.clear();
}

void PairBalanceOrderer::observe(std::uint32_t step, std::span<const DenseVector> grads) {
  require_grads(grads, ctx_);
  if (step % 2 == 1) {
    pending_.assign(grads.begin(), grads.end());
    return;
  }
  for (std::size_t i = 0; i < ctx_.workers; ++i) {
    const auto s = pair_balance(running_, pending_[i], grads[i], *engine_);
    if (!s) fail_balance(step, i);
    signs_[i].push_back(s->first);
    signs_[i].push_back(s->second);
  }
}

std::vector<Permutation> PairBalanceOrderer::next_epoch() { return reorder_all(perms_, signs_); }

// ---------------------------------------------------------------------------

LocalPairBalanceOrderer::LocalPairBalanceOrderer(const OrderingContext& ctx, EngineSpec engine)
    : ctx_(ctx), engine_spec_(engine), running_(ctx.workers, BalanceState(ctx.dim)) {
  require_even_units(ctx);
}

void LocalPairBalanceOrderer::begin_epoch(std::uint32_t epoch,
                                          std::span<const Permutation> perms) {
  perms_.assign(perms.begin(), perms.end());
  engines_.clear();
  for (std::size_t i = 0; i < ctx_.workers; ++i) {
    engines_.push_back(SignEngine::make(engine_spec_, RngStream(ctx_.seed, epoch, i, "pairbalance")));
    running_[i].reset();
  }
  reset_signs(signs_, ctx_.workers, ctx_.units);
  pending_.clear();
}

void LocalPairBalanceOrderer::observe(std::uint32_t step, std::span<const DenseVector> grads) {
  require_grads(grads, ctx_);
  if (step % 2 == 1) {
    pending_.assign(grads.begin(), grads.end());
    return;
  }
  for (std::size_t i = 0; i < ctx_.workers; ++i) {
    const auto s = pair_balance(running_[i], pending_[i], grads[i], engines_[i]);
    if (!s) fail_balance(step, i);
    signs_[i].push_back(s->first);
    signs_[i].push_back(s->second);
  }
}

std::vector<Permutation> LocalPairBalanceOrderer::next_epoch() {
  return reorder_all(perms_, signs_);
}

// ---------------------------------------------------------------------------

StaleMeanBalanceOrderer::StaleMeanBalanceOrderer(const OrderingContext& ctx, EngineSpec engine)
    : ctx_(ctx),
      engine_spec_(engine),
      running_(ctx.workers, BalanceState(ctx.dim)),
      stale_(ctx.workers, StaleMeanState(ctx.dim)) {}

void StaleMeanBalanceOrderer::begin_epoch(std::uint32_t epoch,
                                          std::span<const Permutation> perms) {
  perms_.assign(perms.begin(), perms.end());
  engines_.clear();
  for (std::size_t i = 0; i < ctx_.workers; ++i) {
    engines_.push_back(SignEngine::make(engine_spec_, RngStream(ctx_.seed, epoch, i, "balance")));
    running_[i].reset();
  }
  reset_signs(signs_, ctx_.workers, ctx_.units);
}

void StaleMeanBalanceOrderer::observe(std::uint32_t step, std::span<const DenseVector> grads) {
  require_grads(grads, ctx_);
  for (std::size_t i = 0; i < ctx_.workers; ++i) {
    const DenseVector centered = stale_[i].center(grads[i]);
    const auto s = engines_[i].balance(running_[i], centered);
    if (!s) fail_balance(step, i);
    signs_[i].push_back(*s);
    stale_[i].accumulate(grads[i]);
  }
}

std::vector<Permutation> StaleMeanBalanceOrderer::next_epoch() {
  for (auto& s : stale_) s.roll();
  return reorder_all(perms_, signs_);
}

// ---------------------------------------------------------------------------

void RandomReshuffleOrderer::begin_epoch(std::uint32_t epoch, std::span<const Permutation>) {
  epoch_ = epoch;
}

std::vector<Permutation> RandomReshuffleOrderer::next_epoch() {
  std::vector<Permutation> perms;
  perms.reserve(ctx_.workers);
  for (std::size_t i = 0; i < ctx_.workers; ++i) {
    RngStream stream(ctx_.seed, epoch_ + 1, i, "drr");
    perms.push_back(random_permutation(ctx_.units, stream));
  }
  return perms;
}

void ShuffleOnceOrderer::begin_epoch(std::uint32_t, std::span<const Permutation> perms) {
  perms_.assign(perms.begin(), perms.end());
}

std::unique_ptr<Orderer> make_orderer(const OrderPolicy& policy, const OrderingContext& ctx) {
  policy.validate(ctx.workers);
  switch (policy.kind) {
    case PolicyKind::kCdGrab:
    case PolicyKind::kCentralizedPairBalance:
      return std::make_unique<PairBalanceOrderer>(ctx, policy.engine);
    case PolicyKind::kIdGrabPairBal:
      return std::make_unique<LocalPairBalanceOrderer>(ctx, policy.engine);
    case PolicyKind::kIdGrabBal:
    case PolicyKind::kCentralizedGrab:
      return std::make_unique<StaleMeanBalanceOrderer>(ctx, policy.engine);
    case PolicyKind::kDrr:
      return std::make_unique<RandomReshuffleOrderer>(ctx);
    case PolicyKind::kShuffleOnce:
      return std::make_unique<ShuffleOnceOrderer>();
  }
  throw ConfigError("unknown policy");
}

// ---------------------------------------------------------------------------

ParameterServer::ParameterServer(const OrderPolicy& policy, const OrderingContext& ctx)
    : ctx_(ctx), orderer_(make_orderer(policy, ctx)), perms_(initial_permutations(ctx)) {
  orderer_->begin_epoch(epoch_, perms_);
}

DenseVector ParameterServer::consume_step(std::uint32_t epoch, std::uint32_t step,
                                          std::span<const DenseVector> grads) {
  if (epoch != epoch_ || step != next_step_ || step > ctx_.units) {
    throw ProtocolError(fmt::format("expected epoch {} step {}, got epoch {} step {}", epoch_,
                                    next_step_, epoch, step));
  }
  require_grads(grads, ctx_);
  std::vector<double> sum(ctx_.dim, 0.0);
  for (const auto& g : grads) {
    for (std::size_t k = 0; k < ctx_.dim; ++k) sum[k] += g[k];
  }
  const double m = static_cast<double>(ctx_.workers);
  for (double& x : sum) x /= m;
  DenseVector avg(std::move(sum));
  orderer_->observe(step, grads);
  ++next_step_;
  return avg;
}

std::vector<Permutation> ParameterServer::finalize_epoch() {
  if (next_step_ != ctx_.units + 1) {
    throw ProtocolError(fmt::format("epoch {} finalized after {} of {} steps", epoch_,
                                    next_step_ - 1, ctx_.units));
  }
  perms_ = orderer_->next_epoch();
  for (const auto& p : perms_) {
    if (p.size() != ctx_.units) throw ProtocolError("orderer produced a wrong-sized permutation");
  }
  ++epoch_;
  next_step_ = 1;
  orderer_->begin_epoch(epoch_, perms_);
  return perms_;
}

// ---------------------------------------------------------------------------

void apply_update(DenseVector& weights, double alpha, const DenseVector& avg) {
  weights.axpy(-alpha, avg);
}

Worker::Worker(std::size_t id, const Objective& objective, Shard shard, std::size_t block,
               DenseVector initial_weights, double alpha)
    : id_(id),
      objective_(&objective),
      shard_(std::move(shard)),
      block_(block),
      weights_(std::move(initial_weights)),
      alpha_(alpha),
      perm_(Permutation::identity(block == 0 ? 0 : shard_.examples.size() / block)) {
  if (block_ == 0 || shard_.examples.size() % block_ != 0) {
    throw DomainError("worker shard size must be a multiple of the block size");
  }
  if (weights_.dim() != objective.dim()) throw DomainError("weights/objective dimension mismatch");
}

void Worker::set_permutation(Permutation perm) {
  if (perm.size() != units()) {
    throw ProtocolError(fmt::format("worker {} got a permutation of size {}, holds {} units", id_,
                                    perm.size(), units()));
  }
  perm_ = std::move(perm);
}

DenseVector Worker::compute_gradient(std::uint32_t step) const {
  if (step == 0 || step > units()) {
    throw ProtocolError(fmt::format("worker {} asked for step {} of {}", id_, step, units()));
  }
  const std::size_t unit = perm_[step - 1];
  if (block_ == 1) return objective_->gradient(weights_, shard_.examples[unit]);
  const auto block = std::span(shard_.examples).subspan(unit * block_, block_);
  return objective_->mean_gradient(weights_, block);
}

double delta_t(const DenseVector& start, std::span<const DenseVector> trajectory) {
  if (trajectory.empty()) throw DomainError("delta_t of an empty trajectory");
  DriftTracker tracker;
  tracker.start(start);
  for (const auto& w : trajectory) tracker.observe(w);
  return tracker.value();
}

void DriftTracker::start(const DenseVector& weights) {
  start_.assign(weights.values().begin(), weights.values().end());
  value_ = 0.0;
}

void DriftTracker::observe(std::span<const double> weights) {
  if (weights.size() != start_.size()) throw DomainError("drift dimension mismatch");
  for (std::size_t k = 0; k < start_.size(); ++k) {
    value_ = std::max(value_, std::abs(weights[k] - start_[k]));
  }
}

// ---------------------------------------------------------------------------

void LocalWorkerGroup::assign_permutations(std::uint32_t, std::span<const Permutation> perms) {
  if (perms.size() != workers_.size()) throw ProtocolError("permutation count != worker count");
  for (std::size_t i = 0; i < workers_.size(); ++i) workers_[i].set_permutation(perms[i]);
}

std::vector<DenseVector> LocalWorkerGroup::collect_gradients(std::uint32_t,
                                                             std::uint32_t step) {
  std::vector<DenseVector> grads;
  grads.reserve(workers_.size());
  for (const auto& w : workers_) grads.push_back(w.compute_gradient(step));
  return grads;
}

void LocalWorkerGroup::broadcast_average(std::uint32_t, std::uint32_t, const DenseVector& avg) {
  for (auto& w : workers_) w.apply(avg);
}

std::vector<Permutation> run_epoch(ParameterServer& server, WorkerGroup& group,
                                   StepObserver* observer) {
  const std::uint32_t epoch = server.epoch();
  const auto units = static_cast<std::uint32_t>(server.context().units);
  for (std::uint32_t step = 1; step <= units; ++step) {
    const auto grads = group.collect_gradients(epoch, step);
    const DenseVector avg = server.consume_step(epoch, step, grads);
    group.broadcast_average(epoch, step, avg);
    if (observer != nullptr) observer->on_step(step, grads, avg);
  }
  return server.finalize_epoch();
}

}  // namespace ordbal
