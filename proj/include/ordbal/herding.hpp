// SPDX-License-Identifier: Apache-2.0
//
// Herding objectives (centralized, signed, parallel), the sign-driven reorder
// primitive, and one-step server-side pair balancing over a static vector set.
//
// Indexing is 0-based throughout. For a permutation p, position j visits
// element p[j]. Sign sequences are indexed by position: signs[j] belongs to
// the element visited at position j.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ordbal/balance.hpp"
#include "ordbal/core.hpp"

namespace ordbal {

/// m workers x n vectors x d dimensions, stored worker-major in one buffer.
/// A centralized set is the m = 1 case.
class VectorSet {
 public:
  VectorSet(std::size_t workers, std::size_t per_worker, std::size_t dim);
  VectorSet(std::size_t workers, std::size_t per_worker, std::size_t dim,
            std::vector<double> data);

  /// Centralized set from a list of equal-dimension vectors.
  static VectorSet from_vectors(std::span<const DenseVector> vectors);

  std::size_t workers() const noexcept { return workers_; }
  std::size_t per_worker() const noexcept { return per_worker_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return workers_ * per_worker_; }

  std::span<const double> at(std::size_t worker, std::size_t j) const;
  std::span<double> mutable_at(std::size_t worker, std::size_t j);
  std::span<const double> data() const noexcept { return data_; }

  /// Arithmetic mean of all m*n vectors, summed sequentially.
  DenseVector mean() const;

  /// Reinterprets the first workers*floor(size/workers) vectors as an
  /// m-worker set; the rest are dropped. When `even` is set the per-worker
  /// count is also rounded down to an even number.
  VectorSet partition(std::size_t workers, bool even) const;

 private:
  std::size_t workers_;
  std::size_t per_worker_;
  std::size_t dim_;
  std::vector<double> data_;
};

/// max_k || sum_{j<=k} (z_{p[j]} - mean) ||_inf over a centralized set.
double herding_objective(const VectorSet& set, const Permutation& p);

/// max_k || sum_{j<=k} signs[j] (z_{p[j]} - mean) ||_inf.
double signed_herding_objective(const VectorSet& set, const Permutation& p,
                                std::span<const Sign> signs);

/// Elements at +1 positions in visiting order, followed by the elements at
/// -1 positions in reverse visiting order.
Permutation reorder(const Permutation& p, std::span<const Sign> signs);

/// max_k || sum_{j<=k} sum_i (z_{i, perms[i][j]} - mean) ||_inf, where mean
/// is taken over all m*n vectors.
double parallel_herding_bound(const VectorSet& set, std::span<const Permutation> perms);

/// Same prefix quantity without subtracting the mean.
double parallel_prefix_bound(const VectorSet& set, std::span<const Permutation> perms);

/// One pass of coordinated pair balancing. Pairs are the consecutive
/// positions (2k, 2k+1) of each worker's permutation; for k ascending and,
/// within k, worker ascending, the pair difference is balanced against one
/// shared running sum. The +1 member of each pair is written at the worker's
/// front pointer and the -1 member at its back pointer.
///
/// Throws DomainError for odd n and BalanceFailure on an engine Fail.
std::vector<Permutation> one_step_pair_balance_order(const VectorSet& set,
                                                     std::span<const Permutation> perms,
                                                     SignEngine& engine);

}  // namespace ordbal
