#pragma once

#include <functional>

#include "slora/tape.h"
#include "slora/tensor.h"

namespace slora::ops {

// All ops accept tape == nullptr for inference-only evaluation (no closures
// recorded, outputs do not require grad). Outputs are fresh tensors.

template <typename S>
Tensor<S> matmul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b);

template <typename S>
Tensor<S> add(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b);

template <typename S>
Tensor<S> mul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b);

template <typename S>
Tensor<S> scale(Tape<S>* tape, const Tensor<S>& a, S alpha);

template <typename S>
Tensor<S> silu(Tape<S>* tape, const Tensor<S>& x);

// Scalar sum of all elements (sequential accumulation in double).
template <typename S>
Tensor<S> sum_all(Tape<S>* tape, const Tensor<S>& x);

// x: T x d, gain: d. y[t,j] = x[t,j] * gain[j] / sqrt(mean_j(x[t,:]^2) + eps)
template <typename S>
Tensor<S> rmsnorm(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& gain,
                  S eps);

// Row softmax with optional additive mask (same shape as x; -inf entries
// exclude positions). A row whose entries are all -inf yields zeros and bumps
// the degenerate-row counter instead of producing NaN.
template <typename S>
Tensor<S> softmax_rows(Tape<S>* tape, const Tensor<S>& x,
                       const Tensor<S>* additive_mask = nullptr);

int64_t softmax_degenerate_rows();
void reset_softmax_degenerate_rows();

// Mean token-level cross entropy over positions where mask is nonzero.
// logits: T x V. Positions with mask == 0 contribute exactly zero gradient.
template <typename S>
Tensor<S> cross_entropy_masked(Tape<S>* tape, const Tensor<S>& logits,
                               const std::vector<int32_t>& targets,
                               const std::vector<uint8_t>& mask);

template <typename S>
Tensor<S> embedding_lookup(Tape<S>* tape, const Tensor<S>& table,
                           const std::vector<int32_t>& ids);

// Rotary position encoding applied per head: within each head, dims (2i,2i+1)
// rotate by angle pos * theta^(-2i/d_head). x: T x d_model.
template <typename S>
Tensor<S> rope(Tape<S>* tape, const Tensor<S>& x,
               const std::vector<int32_t>& positions, int64_t n_heads,
               double theta);

// Multi-head scaled dot-product attention over flattened (batch*seq) rows.
// q,k,v: (batch*seq_len) x d_model. Causal masking within each sequence.
// If probs_out != nullptr it receives the batch*heads*seq*seq probabilities.
template <typename S>
Tensor<S> attention(Tape<S>* tape, const Tensor<S>& q, const Tensor<S>& k,
                    const Tensor<S>& v, int64_t batch, int64_t seq_len,
                    int64_t n_heads, bool causal = true,
                    std::vector<S>* probs_out = nullptr);

template <typename S>
Tensor<S> gather_rows(Tape<S>* tape, const Tensor<S>& x,
                      const std::vector<int64_t>& rows);

// out: total_rows x d, out[rows[i], :] = x[i, :], zeros elsewhere.
template <typename S>
Tensor<S> scatter_rows(Tape<S>* tape, const Tensor<S>& x,
                       const std::vector<int64_t>& rows, int64_t total_rows);

template <typename S>
Tensor<S> gather_cols(Tape<S>* tape, const Tensor<S>& x,
                      const std::vector<int64_t>& cols);

// out: T x total_cols, out[:, cols[j]] = x[:, j], zeros elsewhere.
template <typename S>
Tensor<S> scatter_cols(Tape<S>* tape, const Tensor<S>& x,
                       const std::vector<int64_t>& cols, int64_t total_cols);

// Central finite-difference check of tape gradients, in double precision.
// fn builds a scalar loss from `inputs` on the given tape. Returns the worst
// relative error over all elements of inputs that require grad.
struct GradCheckResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
};

GradCheckResult grad_check(
    const std::function<Tensor<double>(Tape<double>*,
                                       std::vector<Tensor<double>>&)>& fn,
    std::vector<Tensor<double>> inputs, double eps = 1e-5);

}  // namespace slora::ops
