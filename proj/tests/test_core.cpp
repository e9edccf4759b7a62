#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "ordbal/core.hpp"

namespace {

using namespace ordbal;

// Reference SplitMix64 written out from the published algorithm.
std::uint64_t ref_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t ref_fnv(const std::string& s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::uint64_t ref_derive(std::uint64_t seed, std::uint64_t epoch, std::uint64_t worker,
                         const std::string& purpose) {
  std::uint64_t h = 0;
  for (std::uint64_t v : {seed, epoch, worker, ref_fnv(purpose)}) {
    h = ref_mix((h ^ v) + 0x9E3779B97F4A7C15ULL);
  }
  return h;
}

TEST(DenseVector, RejectsEmptyAndNonFinite) {
  EXPECT_THROW(DenseVector(std::size_t{0}), DomainError);
  EXPECT_THROW(DenseVector({1.0, std::nan("")}), DomainError);
  EXPECT_THROW(DenseVector({std::numeric_limits<double>::infinity()}), DomainError);
  DenseVector v{1e308};
  EXPECT_THROW(v *= 10.0, DomainError);
  DenseVector w{1.0, 2.0};
  EXPECT_THROW(w += std::vector<double>{1.0}, DomainError);
}

TEST(DenseVector, Arithmetic) {
  DenseVector a{1.0, 2.0};
  DenseVector b{0.5, -1.0};
  EXPECT_EQ(a + b, (DenseVector{1.5, 1.0}));
  EXPECT_EQ(a - b, (DenseVector{0.5, 3.0}));
  EXPECT_EQ(2.0 * b, (DenseVector{1.0, -2.0}));
  a.axpy(-2.0, b);
  EXPECT_EQ(a, (DenseVector{0.0, 4.0}));
  EXPECT_DOUBLE_EQ(dot(DenseVector{1, 2, 3}, DenseVector{4, 5, 6}), 32.0);
}

TEST(Norms, HandValues) {
  DenseVector zero(3);
  EXPECT_EQ(inf_norm(zero), 0.0);
  EXPECT_EQ(l2_norm(zero), 0.0);
  DenseVector v{3.0, -4.0};
  EXPECT_EQ(inf_norm(v), 4.0);
  EXPECT_EQ(l2_norm(v), 5.0);
}

TEST(Norms, EquivalenceOnFuzzedVectors) {
  RngStream rng(7, 0, 0, "test-norms");
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t d = 1 + rng.next_below(32);
    std::vector<double> x(d);
    for (auto& e : x) e = (rng.next_unit() - 0.5) * std::pow(10.0, rng.next_below(7) - 3.0);
    const double inf = inf_norm(x);
    const double l2 = l2_norm(x);
    EXPECT_LE(inf, l2 * (1 + 1e-15));
    EXPECT_LE(l2, std::sqrt(static_cast<double>(d)) * inf * (1 + 1e-15));
  }
}

TEST(Permutation, InverseHandExamples) {
  EXPECT_EQ(inverse_permutation(Permutation({0, 1, 2})), Permutation({0, 1, 2}));
  EXPECT_EQ(inverse_permutation(Permutation({2, 0, 1})), Permutation({1, 2, 0}));
}

TEST(Permutation, RejectsNonBijections) {
  EXPECT_THROW(Permutation({0, 0}), DomainError);
  EXPECT_THROW(Permutation({1, 2}), DomainError);
  EXPECT_TRUE(is_bijection(std::vector<Permutation::Index>{2, 0, 1}));
  EXPECT_FALSE(is_bijection(std::vector<Permutation::Index>{2, 2, 1}));
}

TEST(Permutation, ComposeWithInverseIsIdentity) {
  RngStream rng(3, 0, 0, "test-compose");
  for (std::size_t n = 1; n < 50; ++n) {
    const auto p = random_permutation(n, rng);
    EXPECT_EQ(compose(p, inverse_permutation(p)), Permutation::identity(n));
    EXPECT_EQ(compose(inverse_permutation(p), p), Permutation::identity(n));
    for (std::size_t j = 0; j < n; ++j) EXPECT_EQ(p.inverse()[p[j]], j);
  }
}

TEST(RandomPermutation, SmallCases) {
  RngStream rng(0, 0, 0, "x");
  EXPECT_EQ(random_permutation(1, rng), Permutation({0}));
  EXPECT_THROW(random_permutation(0, rng), DomainError);

  RngStream a(5, 2, 1, "drr");
  RngStream b(5, 2, 1, "drr");
  EXPECT_EQ(random_permutation(4, a), random_permutation(4, b));
}

TEST(RandomPermutation, AlwaysBijective) {
  RngStream rng(11, 0, 0, "bij");
  for (int trial = 0; trial < 500; ++trial) {
    const auto p = random_permutation(1 + rng.next_below(200), rng);
    std::vector<Permutation::Index> sorted(p.indices().begin(), p.indices().end());
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t k = 0; k < sorted.size(); ++k) ASSERT_EQ(sorted[k], k);
  }
}

// 60000 draws over the 720 permutations of 6 elements.
TEST(RandomPermutation, UniformOverS6) {
  constexpr int kDraws = 60000;
  constexpr double kCells = 720.0;
  RngStream rng(2024, 0, 0, "chi-square");
  std::map<std::vector<Permutation::Index>, int> counts;
  for (int k = 0; k < kDraws; ++k) {
    const auto p = random_permutation(6, rng);
    ++counts[std::vector<Permutation::Index>(p.indices().begin(), p.indices().end())];
  }
  ASSERT_EQ(counts.size(), 720U);

  const double expected = kDraws / kCells;
  const double p = 1.0 / kCells;
  const double stderr_freq = std::sqrt(p * (1 - p) / kDraws);
  double chi2 = 0.0;
  for (const auto& [perm, c] : counts) {
    const double freq = c / static_cast<double>(kDraws);
    EXPECT_LE(std::abs(freq - p), 5 * stderr_freq);
    chi2 += (c - expected) * (c - expected) / expected;
  }
  // df = 719: mean 719, sd sqrt(1438) ~ 37.9.
  EXPECT_LT(chi2, 719 + 5 * std::sqrt(1438.0));
  EXPECT_GT(chi2, 719 - 5 * std::sqrt(1438.0));
}

TEST(Rng, Mix64MatchesPublishedSplitMixOutputs) {
  constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;
  // First outputs of SplitMix64 seeded with 0 and with 1234567.
  EXPECT_EQ(mix64(0 + kGamma), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(mix64(0 + 2 * kGamma), 0x6E789E6AA1B965F4ULL);
  EXPECT_EQ(mix64(1234567 + kGamma), 6457827717110365317ULL);
  EXPECT_EQ(mix64(1234567 + 2 * kGamma), 3203168211198807973ULL);
}

TEST(Rng, Fnv1aKnownValues) {
  EXPECT_EQ(fnv1a64(""), 0xCBF29CE484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xAF63DC4C8601EC8CULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171F73967E8ULL);
}

TEST(Rng, DeriveSeedMatchesReference) {
  RngStream rng(99, 0, 0, "keys");
  const char* purposes[] = {"init", "drr", "pairbalance", "balance", "shard", ""};
  for (int k = 0; k < 200; ++k) {
    const std::uint64_t s = rng.next_u64();
    const std::uint64_t e = rng.next_below(100);
    const std::uint64_t w = rng.next_below(64);
    const std::string p = purposes[k % 6];
    EXPECT_EQ(derive_seed({s, e, w, p}), ref_derive(s, e, w, p));
  }
}

TEST(Rng, StreamIsSplitMixFromDerivedSeed) {
  RngStream stream(17, 3, 2, "drr");
  std::uint64_t state = ref_derive(17, 3, 2, "drr");
  for (int k = 0; k < 1000; ++k) {
    state += 0x9E3779B97F4A7C15ULL;
    ASSERT_EQ(stream.next_u64(), ref_mix(state));
  }
}

TEST(Rng, EqualProvenanceReproducesOneMillionDraws) {
  RngStream a(123, 4, 5, "repro");
  RngStream b(Provenance{123, 4, 5, "repro"});
  for (int k = 0; k < 1000000; ++k) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, DistinctProvenanceGivesDistinctStreams) {
  const std::uint64_t base = RngStream(1, 1, 1, "a").next_u64();
  EXPECT_NE(base, RngStream(2, 1, 1, "a").next_u64());
  EXPECT_NE(base, RngStream(1, 2, 1, "a").next_u64());
  EXPECT_NE(base, RngStream(1, 1, 2, "a").next_u64());
  EXPECT_NE(base, RngStream(1, 1, 1, "b").next_u64());
}

TEST(Rng, DerivedDrawsStayInRange) {
  RngStream rng(8, 0, 0, "range");
  EXPECT_THROW(rng.next_below(0), DomainError);
  double sum = 0.0;
  double sum_sq = 0.0;
  constexpr int kDraws = 200000;
  for (int k = 0; k < kDraws; ++k) {
    const double u = rng.next_unit();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(rng.next_below(7), 7U);
    const double z = rng.next_normal();
    ASSERT_TRUE(std::isfinite(z));
    sum += z;
    sum_sq += z * z;
  }
  EXPECT_NEAR(sum / kDraws, 0.0, 5.0 / std::sqrt(kDraws));
  EXPECT_NEAR(sum_sq / kDraws, 1.0, 5.0 * std::sqrt(2.0 / kDraws));
}

}  // namespace
