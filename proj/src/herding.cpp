// SPDX-License-Identifier: Apache-2.0

#include "ordbal/herding.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace ordbal {

VectorSet::VectorSet(std::size_t workers, std::size_t per_worker, std::size_t dim)
    : VectorSet(workers, per_worker, dim, std::vector<double>(workers * per_worker * dim, 0.0)) {}

VectorSet::VectorSet(std::size_t workers, std::size_t per_worker, std::size_t dim,
                     std::vector<double> data)
    : workers_(workers), per_worker_(per_worker), dim_(dim), data_(std::move(data)) {
  if (workers == 0 || dim == 0) throw DomainError("VectorSet needs m >= 1 and d >= 1");
  if (data_.size() != workers * per_worker * dim) {
    throw DomainError(fmt::format("VectorSet buffer holds {} values, expected {}x{}x{}",
                                  data_.size(), workers, per_worker, dim));
  }
}

VectorSet VectorSet::from_vectors(std::span<const DenseVector> vectors) {
  if (vectors.empty()) throw DomainError("VectorSet::from_vectors needs at least one vector");
  const std::size_t d = vectors.front().dim();
  std::vector<double> data;
  data.reserve(vectors.size() * d);
  for (const auto& v : vectors) {
    if (v.dim() != d) throw DomainError("VectorSet::from_vectors: ragged dimensions");
    data.insert(data.end(), v.values().begin(), v.values().end());
  }
  return VectorSet(1, vectors.size(), d, std::move(data));
}

std::span<const double> VectorSet::at(std::size_t worker, std::size_t j) const {
  return std::span<const double>(data_).subspan((worker * per_worker_ + j) * dim_, dim_);
}

std::span<double> VectorSet::mutable_at(std::size_t worker, std::size_t j) {
  return std::span<double>(data_).subspan((worker * per_worker_ + j) * dim_, dim_);
}

DenseVector VectorSet::mean() const {
  if (size() == 0) throw DomainError("mean of an empty VectorSet");
  std::vector<double> sum(dim_, 0.0);
  for (std::size_t row = 0; row < size(); ++row) {
    for (std::size_t k = 0; k < dim_; ++k) sum[k] += data_[row * dim_ + k];
  }
  const double count = static_cast<double>(size());
  for (double& x : sum) x /= count;
  return DenseVector(std::move(sum));
}

VectorSet VectorSet::partition(std::size_t workers, bool even) const {
  if (workers == 0) throw DomainError("partition needs at least one worker");
  std::size_t n = size() / workers;
  if (even) n -= n % 2;
  if (n == 0) throw DomainError(fmt::format("{} vectors cannot fill {} workers", size(), workers));
  std::vector<double> data(data_.begin(),
                           data_.begin() + static_cast<std::ptrdiff_t>(workers * n * dim_));
  return VectorSet(workers, n, dim_, std::move(data));
}

namespace {

void require_perms(const VectorSet& set, std::span<const Permutation> perms) {
  if (set.per_worker() == 0) throw DomainError("herding objective of an empty set");
  if (perms.size() != set.workers()) {
    throw DomainError(
        fmt::format("{} permutations for {} workers", perms.size(), set.workers()));
  }
  for (const auto& p : perms) {
    if (p.size() != set.per_worker()) {
      throw DomainError(fmt::format("permutation of size {} for {} vectors per worker", p.size(),
                                    set.per_worker()));
    }
  }
}

void require_centralized(const VectorSet& set) {
  if (set.workers() != 1) {
    throw DomainError("centralized herding objective called on a multi-worker set");
  }
}

// Shared prefix scan: prefix += sum_i weight(i, j) * (z_{i,perms[i][j]} - center).
template <typename Weight>
double prefix_scan(const VectorSet& set, std::span<const Permutation> perms,
                   std::span<const double> center, Weight weight) {
  const std::size_t d = set.dim();
  std::vector<double> prefix(d, 0.0);
  double best = 0.0;
  for (std::size_t j = 0; j < set.per_worker(); ++j) {
    for (std::size_t i = 0; i < set.workers(); ++i) {
      const double w = weight(i, j);
      const auto z = set.at(i, perms[i][j]);
      for (std::size_t k = 0; k < d; ++k) prefix[k] += w * (z[k] - center[k]);
    }
    best = std::max(best, inf_norm(prefix));
  }
  return best;
}

}  // namespace

double herding_objective(const VectorSet& set, const Permutation& p) {
  require_centralized(set);
  require_perms(set, std::span(&p, 1));
  const DenseVector mean = set.mean();
  return prefix_scan(set, std::span(&p, 1), mean, [](std::size_t, std::size_t) { return 1.0; });
}

double signed_herding_objective(const VectorSet& set, const Permutation& p,
                                std::span<const Sign> signs) {
  require_centralized(set);
  require_perms(set, std::span(&p, 1));
  if (signs.size() != p.size()) {
    throw DomainError(fmt::format("{} signs for {} vectors", signs.size(), p.size()));
  }
  const DenseVector mean = set.mean();
  return prefix_scan(set, std::span(&p, 1), mean,
                     [&](std::size_t, std::size_t j) { return to_double(signs[j]); });
}

Permutation reorder(const Permutation& p, std::span<const Sign> signs) {
  if (signs.size() != p.size()) {
    throw DomainError(fmt::format("{} signs for a permutation of size {}", signs.size(), p.size()));
  }
  std::vector<Permutation::Index> out;
  out.reserve(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (signs[j] == Sign::kPlus) out.push_back(p[j]);
  }
  for (std::size_t j = p.size(); j-- > 0;) {
    if (signs[j] == Sign::kMinus) out.push_back(p[j]);
  }
  return Permutation(std::move(out));
}

double parallel_herding_bound(const VectorSet& set, std::span<const Permutation> perms) {
  require_perms(set, perms);
  const DenseVector mean = set.mean();
  return prefix_scan(set, perms, mean, [](std::size_t, std::size_t) { return 1.0; });
}

double parallel_prefix_bound(const VectorSet& set, std::span<const Permutation> perms) {
  require_perms(set, perms);
  const std::vector<double> zero(set.dim(), 0.0);
  return prefix_scan(set, perms, zero, [](std::size_t, std::size_t) { return 1.0; });
}

std::vector<Permutation> one_step_pair_balance_order(const VectorSet& set,
                                                     std::span<const Permutation> perms,
                                                     SignEngine& engine) {
  require_perms(set, perms);
  const std::size_t m = set.workers();
  const std::size_t n = set.per_worker();
  if (n % 2 != 0) throw DomainError(fmt::format("pair balancing needs even n, got {}", n));

  BalanceState running(set.dim());
  std::vector<std::vector<Permutation::Index>> next(m, std::vector<Permutation::Index>(n));
  std::vector<std::size_t> front(m, 0);
  std::vector<std::size_t> back(m, n - 1);

  for (std::size_t k = 0; k < n / 2; ++k) {
    for (std::size_t i = 0; i < m; ++i) {
      const auto first = perms[i][2 * k];
      const auto second = perms[i][2 * k + 1];
      const auto signs = pair_balance(running, set.at(i, first), set.at(i, second), engine);
      if (!signs) {
        throw BalanceFailure(
            fmt::format("balancing failed at pair {} of worker {}", k, i));
      }
      const bool first_positive = signs->first == Sign::kPlus;
      next[i][front[i]++] = first_positive ? first : second;
      next[i][back[i]--] = first_positive ? second : first;
    }
  }

  std::vector<Permutation> out;
  out.reserve(m);
  for (auto& map : next) out.emplace_back(std::move(map));
  return out;
}

}  // namespace ordbal
