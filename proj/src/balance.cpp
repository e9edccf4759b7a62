// SPDX-License-Identifier: Apache-2.0

#include "ordbal/balance.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include <fmt/format.h>

namespace ordbal {

namespace {

void require_dim(const BalanceState& state, std::span<const double> c) {
  if (state.dim() != c.size()) {
    throw DomainError(fmt::format("balance input has dimension {}, running sum has {}", c.size(),
                                  state.dim()));
  }
}

Sign draw_sign(double p_plus, RngStream& stream) {
  return stream.next_unit() < p_plus ? Sign::kPlus : Sign::kMinus;
}

}  // namespace

EngineSpec EngineSpec::parse(std::string_view text) {
  if (text == "greedy") return {EngineKind::kGreedy, 1.0};
  if (text == "randomized") return {EngineKind::kRandomized, 1.0};
  constexpr std::string_view kPrefix = "thresholded:";
  if (text.starts_with(kPrefix)) {
    const auto number = text.substr(kPrefix.size());
    double w = 0.0;
    const auto [ptr, ec] = std::from_chars(number.data(), number.data() + number.size(), w);
    if (ec != std::errc{} || ptr != number.data() + number.size() || !(w > 0.0) ||
        !std::isfinite(w)) {
      throw DomainError(fmt::format("invalid threshold in engine '{}'", text));
    }
    return {EngineKind::kThresholded, w};
  }
  throw DomainError(
      fmt::format("unknown engine '{}' (expected greedy, randomized, thresholded:<w>)", text));
}

std::string EngineSpec::to_string() const {
  switch (kind) {
    case EngineKind::kGreedy:
      return "greedy";
    case EngineKind::kRandomized:
      return "randomized";
    case EngineKind::kThresholded:
      return fmt::format("thresholded:{}", threshold);
  }
  return "unknown";
}

Sign randomized_balance(BalanceState& state, std::span<const double> c, RngStream& stream) {
  require_dim(state, c);
  const double p = std::clamp((1.0 - dot(state.sum(), c)) / 2.0, 0.0, 1.0);
  const Sign s = draw_sign(p, stream);
  state.add(s, c);
  return s;
}

std::optional<Sign> randomized_balance_thresholded(BalanceState& state,
                                                   std::span<const double> c, double w,
                                                   RngStream& stream) {
  require_dim(state, c);
  if (!(w > 0.0)) throw DomainError("threshold w must be positive");
  const double inner = dot(state.sum(), c);
  if (std::abs(inner) > w || inf_norm(state.sum()) > w) return std::nullopt;
  const double p = 0.5 - inner / (2.0 * w);
  const Sign s = draw_sign(p, stream);
  state.add(s, c);
  return s;
}

Sign greedy_balance(BalanceState& state, std::span<const double> c) {
  require_dim(state, c);
  const auto r = state.sum().values();
  // Squared norms keep the comparison exact up to one rounding per term.
  double plus = 0.0;
  double minus = 0.0;
  for (std::size_t k = 0; k < c.size(); ++k) {
    const double a = r[k] + c[k];
    const double b = r[k] - c[k];
    plus += a * a;
    minus += b * b;
  }
  const Sign s = plus < minus ? Sign::kPlus : Sign::kMinus;
  state.add(s, c);
  return s;
}

SignEngine SignEngine::greedy() { return SignEngine({EngineKind::kGreedy, 1.0}, std::nullopt); }

SignEngine SignEngine::randomized(RngStream stream) {
  return SignEngine({EngineKind::kRandomized, 1.0}, std::move(stream));
}

SignEngine SignEngine::thresholded(double w, RngStream stream) {
  if (!(w > 0.0)) throw DomainError("threshold w must be positive");
  return SignEngine({EngineKind::kThresholded, w}, std::move(stream));
}

SignEngine SignEngine::make(const EngineSpec& spec, RngStream stream) {
  switch (spec.kind) {
    case EngineKind::kGreedy:
      return greedy();
    case EngineKind::kRandomized:
      return randomized(std::move(stream));
    case EngineKind::kThresholded:
      return thresholded(spec.threshold, std::move(stream));
  }
  throw DomainError("unknown engine kind");
}

std::optional<Sign> SignEngine::balance(BalanceState& state, std::span<const double> c) {
  switch (spec_.kind) {
    case EngineKind::kGreedy:
      return greedy_balance(state, c);
    case EngineKind::kRandomized:
      return randomized_balance(state, c, *stream_);
    case EngineKind::kThresholded:
      return randomized_balance_thresholded(state, c, spec_.threshold, *stream_);
  }
  return std::nullopt;
}

std::optional<std::pair<Sign, Sign>> pair_balance(BalanceState& state,
                                                  std::span<const double> z1,
                                                  std::span<const double> z2,
                                                  SignEngine& engine) {
  if (z1.size() != z2.size()) {
    throw DomainError(fmt::format("pair dimensions differ: {} vs {}", z1.size(), z2.size()));
  }
  auto& diff = engine.scratch_;
  diff.resize(z1.size());
  for (std::size_t k = 0; k < z1.size(); ++k) diff[k] = z1[k] - z2[k];
  const auto s = engine.balance(state, diff);
  if (!s) return std::nullopt;
  return std::pair{*s, -*s};
}

double theoretical_bound_A(std::size_t d, std::size_t n, double delta) {
  if (d == 0 || n == 0) throw DomainError("theoretical_bound_A requires d, N >= 1");
  if (!(delta > 0.0 && delta < 1.0)) throw DomainError("delta must lie in (0, 1)");
  const double dd = static_cast<double>(d);
  const double nn = static_cast<double>(n);
  return std::sqrt(2.0 * std::log(4.0 * dd / delta) * std::log(4.0 * nn / delta));
}

}  // namespace ordbal
