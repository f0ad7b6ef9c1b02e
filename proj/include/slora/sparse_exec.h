#pragma once

#include <functional>

#include "slora/lora.h"
#include "slora/sparsity.h"

namespace slora {

// Disjoint split of flattened (batch*seq) rows into context tokens (sparse
// compute is allowed) and output tokens (always dense).
struct TokenPartition {
  std::vector<int64_t> context_rows;  // ascending
  std::vector<int64_t> output_rows;   // ascending
  int64_t total = 0;

  void validate() const;  // both lists sorted/unique, disjoint, covering
  static TokenPartition all_context(int64_t n);
  // output_mask[i] != 0 marks row i as an output token.
  static TokenPartition from_output_mask(const std::vector<uint8_t>& mask);
};

// Contiguous copy of the kept rows/cols of a frozen weight, with provenance.
// The copy cost is tracked as gather bytes, separate from matmul FLOPs.
template <typename S>
struct SlicedWeightView {
  Tensor<S> w;
  const void* source = nullptr;
  std::vector<int64_t> rows_kept;  // empty = all rows
  std::vector<int64_t> cols_kept;  // empty = all cols
};

template <typename S>
SlicedWeightView<S> slice_gather(const Tensor<S>& w,
                                 const ChannelMask* row_mask,
                                 const ChannelMask* col_mask);

// Feed-forward block with the intermediate pruned to mask.kept channels.
// Gate/up lose output columns, down loses input rows. Adapters (may be null)
// stay full-width; when any is attached the merged intermediate is
// materialized at full width so their contributions compose exactly as in
// the dense block.
template <typename S>
Tensor<S> sparse_ffn(Tape<S>* tape, const Tensor<S>& xn,
                     const LayerWeights<S>& w, const ChannelMask& mask,
                     LoraAdapter<S>* lora_gate, LoraAdapter<S>* lora_up,
                     LoraAdapter<S>* lora_down);

// Q/K/V projections with output channels pruned (qk mask for q and k, vo
// mask for v), scattered back to full width for rope/attention. A qk mask
// that splits a rotary pair is an error. Null masks mean dense.
template <typename S>
struct AttnProjections {
  Tensor<S> q, k, v;
};

template <typename S>
AttnProjections<S> sparse_attention_projs(Tape<S>* tape, const Tensor<S>& xn,
                                          const LayerWeights<S>& w,
                                          const ChannelMask* qk_mask,
                                          const ChannelMask* vo_mask,
                                          const ModelConfig& cfg);

// Output projection consuming only the kept attention channels (rows of wo).
template <typename S>
Tensor<S> sparse_o_proj(Tape<S>* tape, const Tensor<S>& attn_out,
                        const LayerWeights<S>& w, const ChannelMask& vo_mask);

// Runs context rows through context_fn and output rows through output_fn,
// recombining into the original row order. Both fns must be row-local.
// An empty side degenerates to calling the other fn on the whole input.
template <typename S>
using RowFn = std::function<Tensor<S>(Tape<S>*, const Tensor<S>&)>;

template <typename S>
Tensor<S> split_tokens_compute(Tape<S>* tape, const Tensor<S>& x,
                               const TokenPartition& part,
                               const RowFn<S>& context_fn,
                               const RowFn<S>& output_fn);

}  // namespace slora
