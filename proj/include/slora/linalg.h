#pragma once

#include <string>

#include "slora/tensor.h"

namespace slora {

// Frozen low-rank predictor factors for one projection weight: W (D1 x D2)
// is approximated by w_a * w_b with the singular values split as sqrt(S)
// into each factor.
template <typename S>
struct SvdFactors {
  Tensor<S> w_a;  // D1 x k
  Tensor<S> w_b;  // k x D2
  int64_t rank_k = 0;
  std::string source_id;
  std::vector<double> singular_values;  // the k retained values, descending
};

// Rank-k truncated SVD of a dense matrix via one-sided Jacobi in double
// precision (off-diagonal threshold 1e-10, at most 100 sweeps). The sign of
// each right singular vector is fixed so its first nonzero entry is positive.
SvdFactors<double> svd_topk(const Tensor<double>& w, int64_t k,
                            const std::string& source_id = "");

SvdFactors<float> to_float(const SvdFactors<double>& f);

// Full SVD pieces, mainly for verification: w = u * diag(s) * v^T.
struct SvdFull {
  Tensor<double> u;               // m x r
  std::vector<double> s;          // r, descending
  Tensor<double> v;               // n x r (columns are right vectors)
};
SvdFull svd_full(const Tensor<double>& w);

// Low-rank predictor forward: (x * w_a) * w_b. Runs without grad tracking;
// matmul FLOPs land in the caller's active attribution scope.
template <typename S>
Tensor<S> estimator_apply(const Tensor<S>& x, const SvdFactors<S>& f);

// Per-column L2 norms of a 2-d tensor, accumulated in double.
template <typename S>
std::vector<double> col_l2_norms(const Tensor<S>& x);

// Indices of the k largest scores, returned in ascending index order.
// Ties break toward the smaller index (stable under permutations of equals).
std::vector<int64_t> topk_indices(const std::vector<double>& scores,
                                  int64_t k);

}  // namespace slora
