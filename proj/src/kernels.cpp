#include "slora/kernels.h"

#include <algorithm>
#include <cstring>

#include "slora/flops.h"

namespace slora::kernels {

template <typename S>
void gemm(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n,
          bool accumulate) {
  if (m == 0 || n == 0) return;  // empty output: no work, no flops
  flops::add(2 * m * k * n);
  if (!accumulate) std::memset(c, 0, sizeof(S) * (size_t)(m * n));
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    const S* __restrict ai = a + i * k;
    S* __restrict ci = c + i * n;
    for (int64_t t = 0; t < k; ++t) {
      const S av = ai[t];
      const S* __restrict bt = b + t * n;
#pragma omp simd
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
}

template <typename S>
void transpose(const S* src, S* dst, int64_t m, int64_t n) {
  constexpr int64_t kBlock = 32;
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t ib = 0; ib < m; ib += kBlock) {
    for (int64_t jb = 0; jb < n; jb += kBlock) {
      const int64_t ie = std::min(ib + kBlock, m);
      const int64_t je = std::min(jb + kBlock, n);
      for (int64_t i = ib; i < ie; ++i)
        for (int64_t j = jb; j < je; ++j) dst[j * m + i] = src[i * n + j];
    }
  }
}

template <typename S>
void gemm_ref(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n,
              bool accumulate) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      S acc = accumulate ? c[i * n + j] : S(0);
      for (int64_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * n + j];
      c[i * n + j] = acc;
    }
  }
}

template void gemm<float>(const float*, const float*, float*, int64_t, int64_t,
                          int64_t, bool);
template void gemm<double>(const double*, const double*, double*, int64_t,
                           int64_t, int64_t, bool);
template void transpose<float>(const float*, float*, int64_t, int64_t);
template void transpose<double>(const double*, double*, int64_t, int64_t);
template void gemm_ref<float>(const float*, const float*, float*, int64_t,
                              int64_t, int64_t, bool);
template void gemm_ref<double>(const double*, const double*, double*, int64_t,
                               int64_t, int64_t, bool);

}  // namespace slora::kernels
