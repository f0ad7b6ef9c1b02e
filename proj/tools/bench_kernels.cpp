// Compares the parallel GEMM against the serial reference: throughput and
// worst elementwise deviation over a few representative shapes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <vector>

#include "slora/kernels.h"

namespace {

double now_s() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

struct Case {
  int64_t m, k, n;
  const char* what;
};

}  // namespace

int main() {
  const Case cases[] = {
      {256, 256, 256, "attn projection"},
      {256, 256, 1024, "ffn gate/up"},
      {256, 1024, 256, "ffn down"},
      {1024, 256, 512, "lm head"},
      {64, 64, 32, "attention scores"},
  };
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::printf("%-18s %10s %10s %12s %12s %10s\n", "shape", "par GF/s",
              "ref GF/s", "speedup", "max |diff|", "status");
  for (const Case& c : cases) {
    std::vector<float> a((size_t)(c.m * c.k)), b((size_t)(c.k * c.n)),
        out((size_t)(c.m * c.n)), ref((size_t)(c.m * c.n));
    for (auto& v : a) v = dist(rng);
    for (auto& v : b) v = dist(rng);
    const double flop = 2.0 * c.m * c.k * c.n;
    // warm up + measure best of 5
    double best_par = 0, best_ref = 0;
    for (int rep = 0; rep < 5; ++rep) {
      double t0 = now_s();
      slora::kernels::gemm(a.data(), b.data(), out.data(), c.m, c.k, c.n,
                           false);
      best_par = std::max(best_par, flop / (now_s() - t0) / 1e9);
      t0 = now_s();
      slora::kernels::gemm_ref(a.data(), b.data(), ref.data(), c.m, c.k, c.n,
                               false);
      best_ref = std::max(best_ref, flop / (now_s() - t0) / 1e9);
    }
    double max_diff = 0;
    for (size_t i = 0; i < out.size(); ++i)
      max_diff = std::max(max_diff, (double)std::fabs(out[i] - ref[i]));
    const double tol = 1e-4 * std::sqrt((double)c.k);
    std::printf("%5ldx%4ldx%4ld %10.2f %10.2f %11.2fx %12.3e %10s\n",
                (long)c.m, (long)c.k, (long)c.n, best_par, best_ref,
                best_par / best_ref, max_diff,
                max_diff <= tol ? "ok" : "MISMATCH");
  }
  return 0;
}
