#pragma once

#include <cstdint>

namespace slora::kernels {

// C = A*B (or C += A*B), row-major, A: m x k, B: k x n, C: m x n.
// Each C element accumulates over k in strictly increasing order, so results
// are bitwise identical for any OpenMP thread count. Records 2*m*k*n FLOPs
// into the active flops attribution scope.
template <typename S>
void gemm(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n,
          bool accumulate);

// dst = src^T; src: m x n, dst: n x m. Not FLOP-counted.
template <typename S>
void transpose(const S* src, S* dst, int64_t m, int64_t n);

// Serial three-loop reference GEMM (same sequential-over-k accumulation
// order as gemm). Kept for correctness tests and the kernel benchmark; does
// not record FLOPs.
template <typename S>
void gemm_ref(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n,
              bool accumulate);

}  // namespace slora::kernels
