// SPDX-License-Identifier: Apache-2.0
//
// Online sign-generation engines. Each engine consumes one vector at a time,
// picks a sign for it, and folds the signed vector into a running sum.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ordbal/core.hpp"

namespace ordbal {

enum class Sign : std::int8_t { kMinus = -1, kPlus = 1 };

constexpr int to_int(Sign s) noexcept { return static_cast<int>(s); }
constexpr double to_double(Sign s) noexcept { return static_cast<double>(s); }
constexpr Sign operator-(Sign s) noexcept { return s == Sign::kPlus ? Sign::kMinus : Sign::kPlus; }

/// Running signed sum r. After k updates r = sum_k s_k * c_k.
class BalanceState {
 public:
  explicit BalanceState(std::size_t dim) : sum_(dim) {}

  std::size_t dim() const noexcept { return sum_.dim(); }
  const DenseVector& sum() const noexcept { return sum_; }

  void add(Sign s, std::span<const double> c) { sum_.axpy(to_double(s), c); }
  void reset() noexcept { sum_.fill_zero(); }

 private:
  DenseVector sum_;
};

/// Thrown where a thresholded engine's Fail outcome cannot be returned as a
/// value (multi-step operations that must abort as a whole).
class BalanceFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class EngineKind { kGreedy, kRandomized, kThresholded };

/// Engine selection as written in configs: "greedy", "randomized" or
/// "thresholded:<w>".
struct EngineSpec {
  EngineKind kind = EngineKind::kGreedy;
  double threshold = 1.0;  // only meaningful for kThresholded

  static EngineSpec parse(std::string_view text);
  std::string to_string() const;

  friend bool operator==(const EngineSpec&, const EngineSpec&) = default;
};

/// p = (1 - <r, c>) / 2, clamped to [0, 1]; s = +1 with probability p.
Sign randomized_balance(BalanceState& state, std::span<const double> c, RngStream& stream);

/// Returns nullopt (Fail) without touching `state` when |<r, c>| > w or
/// ||r||_inf > w; otherwise p = 1/2 - <r, c> / (2w).
std::optional<Sign> randomized_balance_thresholded(BalanceState& state,
                                                   std::span<const double> c, double w,
                                                   RngStream& stream);

/// s = +1 iff ||r + c||_2 < ||r - c||_2. Equal norms give -1.
Sign greedy_balance(BalanceState& state, std::span<const double> c);

/// A sign engine bound to its random stream (randomized variants only).
class SignEngine {
 public:
  static SignEngine greedy();
  static SignEngine randomized(RngStream stream);
  static SignEngine thresholded(double w, RngStream stream);
  /// Builds the engine named by `spec`; `stream` is ignored for greedy.
  static SignEngine make(const EngineSpec& spec, RngStream stream);

  const EngineSpec& spec() const noexcept { return spec_; }

  /// One balancing step; nullopt only for the thresholded variant's Fail.
  std::optional<Sign> balance(BalanceState& state, std::span<const double> c);

 private:
  SignEngine(EngineSpec spec, std::optional<RngStream> stream)
      : spec_(spec), stream_(std::move(stream)) {}

  EngineSpec spec_;
  std::optional<RngStream> stream_;
  std::vector<double> scratch_;

  friend std::optional<std::pair<Sign, Sign>> pair_balance(BalanceState&,
                                                            std::span<const double>,
                                                            std::span<const double>,
                                                            SignEngine&);
};

/// Balances the difference z1 - z2 and returns (s, -s): the first sign
/// belongs to z1, the second to z2. nullopt propagates an engine Fail.
std::optional<std::pair<Sign, Sign>> pair_balance(BalanceState& state,
                                                  std::span<const double> z1,
                                                  std::span<const double> z2,
                                                  SignEngine& engine);

/// sqrt(2 ln(4d/delta) ln(4N/delta)): the high-probability bound on the
/// signed prefix inf-norm of randomized balancing over N vectors in R^d with
/// L2 norm at most 1.
double theoretical_bound_A(std::size_t d, std::size_t n, double delta);

}  // namespace ordbal
