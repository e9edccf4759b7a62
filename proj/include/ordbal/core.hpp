// SPDX-License-Identifier: Apache-2.0
//
// Foundational types shared by every ordbal module: dense 64-bit vectors,
// permutations over [0, n), and provenance-keyed deterministic random streams.

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ordbal {

/// Raised when an argument violates an operation's precondition.
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a run configuration is inconsistent or unsatisfiable.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Fixed-dimension vector of finite doubles.
///
/// The dimension is set at construction and never changes. Every mutating
/// operation re-checks finiteness and throws DomainError if an entry became
/// NaN or infinite, so a diverging run fails loudly instead of propagating
/// garbage into permutations.
class DenseVector {
 public:
  /// Zero vector of dimension `dim` (must be >= 1).
  explicit DenseVector(std::size_t dim);
  explicit DenseVector(std::vector<double> values);
  DenseVector(std::initializer_list<double> values);

  std::size_t dim() const noexcept { return data_.size(); }
  double operator[](std::size_t k) const { return data_[k]; }
  std::span<const double> values() const noexcept { return data_; }
  operator std::span<const double>() const noexcept { return data_; }

  DenseVector& operator+=(std::span<const double> other);
  DenseVector& operator-=(std::span<const double> other);
  DenseVector& operator*=(double scale);
  /// this += scale * x
  DenseVector& axpy(double scale, std::span<const double> x);
  void fill_zero() noexcept;

  friend bool operator==(const DenseVector&, const DenseVector&) = default;

 private:
  void check_finite() const;
  std::vector<double> data_;
};

DenseVector operator+(const DenseVector& a, const DenseVector& b);
DenseVector operator-(const DenseVector& a, const DenseVector& b);
DenseVector operator*(double scale, const DenseVector& v);

/// Sequential left-to-right inner product.
double dot(std::span<const double> a, std::span<const double> b);
double inf_norm(std::span<const double> v) noexcept;
double l2_norm(std::span<const double> v) noexcept;
bool all_finite(std::span<const double> v) noexcept;

/// A bijection on [0, n). Position j maps to element `p[j]`.
class Permutation {
 public:
  using Index = std::uint32_t;

  Permutation() = default;
  /// Throws DomainError unless `map` is a bijection on [0, map.size()).
  explicit Permutation(std::vector<Index> map);

  static Permutation identity(std::size_t n);

  std::size_t size() const noexcept { return map_.size(); }
  Index operator[](std::size_t position) const { return map_[position]; }
  std::span<const Index> indices() const noexcept { return map_; }

  Permutation inverse() const;

  friend bool operator==(const Permutation&, const Permutation&) = default;

 private:
  std::vector<Index> map_;
};

bool is_bijection(std::span<const Permutation::Index> map);

/// q with q[p[j]] = j.
Permutation inverse_permutation(const Permutation& p);

/// (outer o inner)[j] = outer[inner[j]].
Permutation compose(const Permutation& outer, const Permutation& inner);

/// Identifies a random stream: which run, epoch, worker, and purpose it serves.
struct Provenance {
  std::uint64_t global_seed = 0;
  std::uint64_t epoch = 0;
  std::uint64_t worker_id = 0;
  std::string purpose;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// SplitMix64 output finalizer (Stafford variant 13):
///   z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
///   z ^= z >> 27; z *= 0x94D049BB133111EB;
///   z ^= z >> 31;
std::uint64_t mix64(std::uint64_t z) noexcept;

/// 64-bit FNV-1a (offset 0xCBF29CE484222325, prime 0x100000001B3).
std::uint64_t fnv1a64(std::string_view text) noexcept;

/// Seed derived from a provenance tuple. Starting from h = 0, each field v
/// of (global_seed, epoch, worker_id, fnv1a64(purpose)) is folded in as
///   h = mix64((h ^ v) + 0x9E3779B97F4A7C15)
/// The recipe uses only 64-bit unsigned arithmetic, so any port reproduces it.
std::uint64_t derive_seed(const Provenance& provenance) noexcept;

/// Deterministic SplitMix64 stream keyed by a Provenance.
///
/// The generator state advances by the golden gamma 0x9E3779B97F4A7C15 and
/// each output is mix64(state). Derived draws (unit doubles, bounded ints,
/// normals) are defined here rather than through <random> distributions so
/// their values do not depend on the standard library implementation.
class RngStream {
 public:
  using result_type = std::uint64_t;

  RngStream(std::uint64_t global_seed, std::uint64_t epoch, std::uint64_t worker_id,
            std::string_view purpose);
  explicit RngStream(Provenance provenance);

  const Provenance& provenance() const noexcept { return provenance_; }

  std::uint64_t next_u64() noexcept;
  /// Uniform on [0, 1) with 53 random bits.
  double next_unit() noexcept;
  /// Uniform integer on [0, bound); Lemire's multiply-and-reject. bound >= 1.
  std::uint64_t next_below(std::uint64_t bound);
  /// Standard normal via Box-Muller (cosine branch, no caching).
  double next_normal() noexcept;

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return ~result_type{0}; }
  result_type operator()() noexcept { return next_u64(); }

 private:
  Provenance provenance_;
  std::uint64_t state_;
};

/// Uniform permutation of [0, n) by Fisher-Yates (i from n-1 down to 1,
/// swap i with next_below(i + 1)). Throws DomainError for n == 0.
Permutation random_permutation(std::size_t n, RngStream& stream);

}  // namespace ordbal
