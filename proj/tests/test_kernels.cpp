#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "slora/flops.h"
#include "slora/kernels.h"

using namespace slora;

namespace {

template <typename S>
std::vector<S> random_vec(size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<S> v(n);
  for (auto& x : v) x = S(dist(rng));
  return v;
}

}  // namespace

TEST_CASE("gemm matches hand-computed 2x3 * 3x2") {
  // [1 2 3; 4 5 6] * [7 8; 9 10; 11 12] = [58 64; 139 154]
  std::vector<float> a = {1, 2, 3, 4, 5, 6};
  std::vector<float> b = {7, 8, 9, 10, 11, 12};
  std::vector<float> c(4, -99.0f);
  kernels::gemm(a.data(), b.data(), c.data(), 2, 3, 2, false);
  CHECK(c[0] == doctest::Approx(58));
  CHECK(c[1] == doctest::Approx(64));
  CHECK(c[2] == doctest::Approx(139));
  CHECK(c[3] == doctest::Approx(154));
}

TEST_CASE("gemm accumulate adds on top of existing values") {
  std::vector<double> a = {1, 0, 0, 1};  // identity
  std::vector<double> b = {2, 3, 4, 5};
  std::vector<double> c = {10, 10, 10, 10};
  kernels::gemm(a.data(), b.data(), c.data(), 2, 2, 2, true);
  CHECK(c[0] == 12);
  CHECK(c[1] == 13);
  CHECK(c[2] == 14);
  CHECK(c[3] == 15);
}

TEST_CASE("gemm agrees with serial reference over random odd shapes") {
  std::mt19937_64 rng(42);
  const int64_t shapes[][3] = {{1, 1, 1},   {3, 5, 7},    {17, 31, 13},
                               {64, 64, 64}, {100, 3, 99}, {33, 257, 65}};
  for (auto& s : shapes) {
    const int64_t m = s[0], k = s[1], n = s[2];
    auto a = random_vec<float>((size_t)(m * k), rng);
    auto b = random_vec<float>((size_t)(k * n), rng);
    std::vector<float> c1((size_t)(m * n)), c2((size_t)(m * n));
    kernels::gemm(a.data(), b.data(), c1.data(), m, k, n, false);
    kernels::gemm_ref(a.data(), b.data(), c2.data(), m, k, n, false);
    double worst = 0;
    for (size_t i = 0; i < c1.size(); ++i)
      worst = std::max(worst, (double)std::fabs(c1[i] - c2[i]));
    CHECK(worst < 1e-4 * std::sqrt((double)k));
  }
}

TEST_CASE("gemm is bitwise reproducible across repeated calls") {
  std::mt19937_64 rng(7);
  auto a = random_vec<float>(37 * 53, rng);
  auto b = random_vec<float>(53 * 29, rng);
  std::vector<float> c1(37 * 29), c2(37 * 29);
  kernels::gemm(a.data(), b.data(), c1.data(), 37, 53, 29, false);
  kernels::gemm(a.data(), b.data(), c2.data(), 37, 53, 29, false);
  CHECK(std::memcmp(c1.data(), c2.data(), c1.size() * sizeof(float)) == 0);
}

TEST_CASE("transpose round-trips and places elements correctly") {
  std::mt19937_64 rng(3);
  auto src = random_vec<double>(11 * 17, rng);
  std::vector<double> t(17 * 11), back(11 * 17);
  kernels::transpose(src.data(), t.data(), 11, 17);
  for (int64_t i = 0; i < 11; ++i)
    for (int64_t j = 0; j < 17; ++j) CHECK(t[j * 11 + i] == src[i * 17 + j]);
  kernels::transpose(t.data(), back.data(), 17, 11);
  CHECK(back == src);
}

TEST_CASE("gemm records 2*m*k*n flops into the active scope") {
  flops::Ledger ledger(2);
  std::vector<float> a(6), b(12), c(8);
  {
    flops::Scope sc(&ledger, 1, flops::Path::main_fwd);
    kernels::gemm(a.data(), b.data(), c.data(), 2, 3, 4, false);
  }
  CHECK(ledger.at(1, flops::Path::main_fwd) == 2 * 2 * 3 * 4);
  CHECK(ledger.total() == 48);
  // outside any scope: nothing is recorded anywhere
  kernels::gemm(a.data(), b.data(), c.data(), 2, 3, 4, false);
  CHECK(ledger.total() == 48);
}

TEST_CASE("ledger nests scopes and restores the previous attribution") {
  flops::Ledger ledger(1);
  std::vector<float> a(1), b(1), c(1);
  {
    flops::Scope outer(&ledger, 0, flops::Path::main_fwd);
    {
      flops::Scope inner(&ledger, 0, flops::Path::estimator);
      kernels::gemm(a.data(), b.data(), c.data(), 1, 1, 1, false);
    }
    kernels::gemm(a.data(), b.data(), c.data(), 1, 1, 1, false);
  }
  CHECK(ledger.at(0, flops::Path::estimator) == 2);
  CHECK(ledger.at(0, flops::Path::main_fwd) == 2);
}
