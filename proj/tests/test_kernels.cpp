#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "tvae/kernels.hpp"
#include "tvae/rng.hpp"

namespace {

using tvae::kernels::Isa;

template <typename T>
std::vector<T> random_vector(std::size_t n, tvae::Rng& rng) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.normal());
  return v;
}

std::vector<Isa> simd_isas() {
  std::vector<Isa> out;
  for (Isa isa : {Isa::avx2, Isa::neon}) {
    if (tvae::kernels::isa_supported(isa)) out.push_back(isa);
  }
  return out;
}

TEST(Kernels, ScalarAlwaysSupported) {
  EXPECT_TRUE(tvae::kernels::isa_supported(Isa::scalar));
  EXPECT_EQ(tvae::kernels::parse_isa("scalar"), Isa::scalar);
  EXPECT_THROW(tvae::kernels::parse_isa("sse9"), std::exception);
}

TEST(Kernels, DotMatchesScalarReference) {
  tvae::Rng rng(7);
  for (Isa isa : simd_isas()) {
    for (std::size_t n : {0u, 1u, 3u, 7u, 8u, 9u, 15u, 16u, 17u, 33u, 64u, 257u}) {
      const auto a = random_vector<float>(n, rng);
      const auto b = random_vector<float>(n, rng);
      const auto ad = random_vector<double>(n, rng);
      const auto bd = random_vector<double>(n, rng);
      float ref32;
      double ref64, abs32 = 0, abs64 = 0;
      {
        tvae::kernels::ScopedIsa pin(Isa::scalar);
        ref32 = tvae::kernels::dot(a.data(), b.data(), n);
        ref64 = tvae::kernels::dot(ad.data(), bd.data(), n);
      }
      for (std::size_t i = 0; i < n; ++i) {
        abs32 += std::abs(a[i] * b[i]);
        abs64 += std::abs(ad[i] * bd[i]);
      }
      tvae::kernels::ScopedIsa pin(isa);
      EXPECT_NEAR(tvae::kernels::dot(a.data(), b.data(), n), ref32, 1e-6 * (abs32 + 1)) << n;
      EXPECT_NEAR(tvae::kernels::dot(ad.data(), bd.data(), n), ref64, 1e-14 * (abs64 + 1)) << n;
    }
  }
}

TEST(Kernels, AxpyMatchesScalarReference) {
  tvae::Rng rng(11);
  for (Isa isa : simd_isas()) {
    for (std::size_t n : {1u, 4u, 5u, 8u, 13u, 100u}) {
      const auto x = random_vector<float>(n, rng);
      const auto y0 = random_vector<float>(n, rng);
      auto ref = y0, got = y0;
      {
        tvae::kernels::ScopedIsa pin(Isa::scalar);
        tvae::kernels::axpy(0.37f, x.data(), ref.data(), n);
      }
      {
        tvae::kernels::ScopedIsa pin(isa);
        tvae::kernels::axpy(0.37f, x.data(), got.data(), n);
      }
      for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(got[i], ref[i], 1e-6f);
    }
  }
}

// Naive triple loop as the independent oracle for every transpose case.
template <typename T>
std::vector<T> naive_gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
                          const std::vector<T>& a, const std::vector<T>& b) {
  std::vector<T> c(m * n, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = ta ? a[p * m + i] : a[i * k + p];
        const T bv = tb ? b[j * k + p] : b[p * n + j];
        s += static_cast<double>(av) * bv;
      }
      c[i * n + j] = static_cast<T>(s);
    }
  return c;
}

TEST(Kernels, GemmAllTransposesAllIsas) {
  tvae::Rng rng(3);
  std::vector<Isa> isas = simd_isas();
  isas.push_back(Isa::scalar);
  const std::size_t m = 5, n = 19, k = 11;
  for (Isa isa : isas) {
    tvae::kernels::ScopedIsa pin(isa);
    for (bool ta : {false, true}) {
      for (bool tb : {false, true}) {
        const auto a = random_vector<double>(m * k, rng);
        const auto b = random_vector<double>(k * n, rng);
        const auto want = naive_gemm(ta, tb, m, n, k, a, b);
        std::vector<double> c(m * n, 1.0);
        tvae::kernels::gemm<double>(ta, tb, m, n, k, a.data(), b.data(), c.data(), false);
        for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], want[i], 1e-12);
        tvae::kernels::gemm<double>(ta, tb, m, n, k, a.data(), b.data(), c.data(), true);
        for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], 2 * want[i], 1e-12);

        std::vector<float> af(a.begin(), a.end()), bf(b.begin(), b.end()), cf(m * n);
        tvae::kernels::gemm<float>(ta, tb, m, n, k, af.data(), bf.data(), cf.data(), false);
        for (std::size_t i = 0; i < cf.size(); ++i) EXPECT_NEAR(cf[i], want[i], 1e-4);
      }
    }
  }
}

TEST(Kernels, DeterministicWithinIsa) {
  tvae::Rng rng(5);
  const auto a = random_vector<float>(1001, rng);
  const auto b = random_vector<float>(1001, rng);
  const float first = tvae::kernels::dot(a.data(), b.data(), a.size());
  for (int i = 0; i < 5; ++i) EXPECT_EQ(tvae::kernels::dot(a.data(), b.data(), a.size()), first);
}

TEST(Rng, ReproducibleStreams) {
  tvae::Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    EXPECT_NE(x, c.next_u64());
  }
  tvae::Rng d(42);
  d.next_u64();
  const auto saved = d.state();
  const double u = d.uniform();
  d.set_state(saved);
  EXPECT_EQ(d.uniform(), u);
}

TEST(Rng, KnownFirstOutput) {
  // Pins the documented algorithm: splitmix64-seeded xoshiro256**.
  tvae::Rng rng(0);
  const auto s = rng.state();
  EXPECT_EQ(s[0], 0xe220a8397b1dcdafULL);
  EXPECT_EQ(s[1], 0x6e789e6aa1b965f4ULL);
}

TEST(Rng, NormalMoments) {
  tvae::Rng rng(9);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(Rng, BelowIsInRange) {
  tvae::Rng rng(1);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) ++hits[rng.below(7)];
  for (int h : hits) EXPECT_GT(h, 800);
}

}  // namespace
