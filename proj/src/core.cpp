// SPDX-License-Identifier: Apache-2.0

#include "ordbal/core.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>

namespace ordbal {

namespace {

constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ULL;

__extension__ using Uint128 = unsigned __int128;

void require_same_dim(std::size_t a, std::size_t b) {
  if (a != b) {
    throw DomainError("dimension mismatch: " + std::to_string(a) + " vs " + std::to_string(b));
  }
}

}  // namespace

DenseVector::DenseVector(std::size_t dim) : data_(dim, 0.0) {
  if (dim == 0) throw DomainError("DenseVector dimension must be positive");
}

DenseVector::DenseVector(std::vector<double> values) : data_(std::move(values)) {
  if (data_.empty()) throw DomainError("DenseVector dimension must be positive");
  check_finite();
}

DenseVector::DenseVector(std::initializer_list<double> values)
    : DenseVector(std::vector<double>(values)) {}

void DenseVector::check_finite() const {
  if (!all_finite(data_)) throw DomainError("DenseVector entry is not finite");
}

DenseVector& DenseVector::operator+=(std::span<const double> other) {
  require_same_dim(dim(), other.size());
  for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += other[k];
  check_finite();
  return *this;
}

DenseVector& DenseVector::operator-=(std::span<const double> other) {
  require_same_dim(dim(), other.size());
  for (std::size_t k = 0; k < data_.size(); ++k) data_[k] -= other[k];
  check_finite();
  return *this;
}

DenseVector& DenseVector::operator*=(double scale) {
  for (double& x : data_) x *= scale;
  check_finite();
  return *this;
}

DenseVector& DenseVector::axpy(double scale, std::span<const double> x) {
  require_same_dim(dim(), x.size());
  for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += scale * x[k];
  check_finite();
  return *this;
}

void DenseVector::fill_zero() noexcept { std::fill(data_.begin(), data_.end(), 0.0); }

DenseVector operator+(const DenseVector& a, const DenseVector& b) {
  DenseVector out = a;
  out += b;
  return out;
}

DenseVector operator-(const DenseVector& a, const DenseVector& b) {
  DenseVector out = a;
  out -= b;
  return out;
}

DenseVector operator*(double scale, const DenseVector& v) {
  DenseVector out = v;
  out *= scale;
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  require_same_dim(a.size(), b.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) sum += a[k] * b[k];
  return sum;
}

double inf_norm(std::span<const double> v) noexcept {
  double best = 0.0;
  for (double x : v) best = std::max(best, std::abs(x));
  return best;
}

double l2_norm(std::span<const double> v) noexcept {
  double sum = 0.0;
  for (double x : v) sum += x * x;
  return std::sqrt(sum);
}

bool all_finite(std::span<const double> v) noexcept {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------

bool is_bijection(std::span<const Permutation::Index> map) {
  std::vector<bool> seen(map.size(), false);
  for (auto idx : map) {
    if (idx >= map.size() || seen[idx]) return false;
    seen[idx] = true;
  }
  return true;
}

Permutation::Permutation(std::vector<Index> map) : map_(std::move(map)) {
  if (!is_bijection(map_)) throw DomainError("permutation is not a bijection");
}

Permutation Permutation::identity(std::size_t n) {
  std::vector<Index> map(n);
  for (std::size_t j = 0; j < n; ++j) map[j] = static_cast<Index>(j);
  return Permutation(std::move(map));
}

Permutation Permutation::inverse() const {
  std::vector<Index> inv(map_.size());
  for (std::size_t j = 0; j < map_.size(); ++j) inv[map_[j]] = static_cast<Index>(j);
  return Permutation(std::move(inv));
}

Permutation inverse_permutation(const Permutation& p) { return p.inverse(); }

Permutation compose(const Permutation& outer, const Permutation& inner) {
  require_same_dim(outer.size(), inner.size());
  std::vector<Permutation::Index> map(inner.size());
  for (std::size_t j = 0; j < inner.size(); ++j) map[j] = outer[inner[j]];
  return Permutation(std::move(map));
}

// ---------------------------------------------------------------------------

std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::uint64_t derive_seed(const Provenance& provenance) noexcept {
  const std::uint64_t fields[] = {provenance.global_seed, provenance.epoch,
                                  provenance.worker_id, fnv1a64(provenance.purpose)};
  std::uint64_t h = 0;
  for (std::uint64_t v : fields) h = mix64((h ^ v) + kGoldenGamma);
  return h;
}

RngStream::RngStream(std::uint64_t global_seed, std::uint64_t epoch, std::uint64_t worker_id,
                     std::string_view purpose)
    : RngStream(Provenance{global_seed, epoch, worker_id, std::string(purpose)}) {}

RngStream::RngStream(Provenance provenance)
    : provenance_(std::move(provenance)), state_(derive_seed(provenance_)) {}

std::uint64_t RngStream::next_u64() noexcept {
  state_ += kGoldenGamma;
  return mix64(state_);
}

double RngStream::next_unit() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t RngStream::next_below(std::uint64_t bound) {
  if (bound == 0) throw DomainError("next_below bound must be positive");
  Uint128 product = static_cast<Uint128>(next_u64()) * bound;
  auto low = static_cast<std::uint64_t>(product);
  if (low < bound) {
    const std::uint64_t threshold = (0 - bound) % bound;
    while (low < threshold) {
      product = static_cast<Uint128>(next_u64()) * bound;
      low = static_cast<std::uint64_t>(product);
    }
  }
  return static_cast<std::uint64_t>(product >> 64);
}

double RngStream::next_normal() noexcept {
  const double u1 = 1.0 - next_unit();  // (0, 1]
  const double u2 = next_unit();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Permutation random_permutation(std::size_t n, RngStream& stream) {
  if (n == 0) throw DomainError("random_permutation requires n >= 1");
  std::vector<Permutation::Index> map(n);
  for (std::size_t j = 0; j < n; ++j) map[j] = static_cast<Permutation::Index>(j);
  for (std::size_t i = n - 1; i > 0; --i) {
    std::swap(map[i], map[stream.next_below(i + 1)]);
  }
  return Permutation(std::move(map));
}

}  // namespace ordbal
