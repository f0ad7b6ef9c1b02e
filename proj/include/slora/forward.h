#pragma once

#include <array>

#include "slora/flops.h"
#include "slora/lora.h"
#include "slora/sparse_exec.h"
#include "slora/sparsity.h"

namespace slora {

// How tokens are routed when a layer computes sparsely.
enum class TokenSplitMode : int {
  output_dense = 0,  // context rows sparse, loss-bearing output rows dense
  none,              // every row goes through the sparse path
  random_dense,      // a random row subset (matched to output count) is dense
};
const char* split_mode_name(TokenSplitMode m);
TokenSplitMode split_mode_from_name(const std::string&);

// Per-layer target sparsity per projection group (fractions in [0, 1]).
struct LayerSparsity {
  double ffn = 0.0, qk = 0.0, vo = 0.0;
  bool any() const { return ffn > 0.0 || qk > 0.0 || vo > 0.0; }
};

// Full contextual-sparsity recipe for a run.
struct SparsityPlan {
  std::vector<LayerSparsity> layers;  // one entry per decoder layer
  ScoreSource source = ScoreSource::svd;
  Metric ffn_metric = Metric::l2;
  Metric qk_metric = Metric::qknorm;
  Metric vo_metric = Metric::l2;
  Granularity qk_granularity = Granularity::rope_pair;
  Granularity vo_granularity = Granularity::channel;
  TokenSplitMode split_mode = TokenSplitMode::output_dense;
  double dense_warmup_fraction = 0.05;  // leading fraction of steps kept dense
  int64_t estimator_rank = 8;

  bool any() const {
    for (const auto& l : layers)
      if (l.any()) return true;
    return false;
  }
  void validate(const ModelConfig& cfg) const;
};

// Number of kept units for a sparsity fraction; shared by mask selection and
// the analytic FLOP model so both sides round identically.
int64_t units_kept(double sparsity, int64_t units);

template <typename S>
struct ForwardCtx {
  Tape<S>* tape = nullptr;
  flops::Ledger* ledger = nullptr;
  const SparsityPlan* plan = nullptr;        // null = dense forward
  const TokenPartition* partition = nullptr;  // required when plan splits
  const EstimatorBank<S>* bank = nullptr;     // required when plan uses svd
  LoraBank<S>* lora = nullptr;
  ActivationTap<S>* tap = nullptr;
  uint64_t mask_seed = 0;     // stream for random-metric masks
  bool grad_root = false;     // fine-tuning: treat embedding output as a
                              // gradient root so every layer backprops input
                              // grads uniformly (frozen tables get none)
  bool record_masks = false;
  std::vector<std::array<ChannelMask, 3>> masks_used;  // [layer][group]
  // When set, masks come from here instead of being scored (layout matches
  // masks_used; entries for groups the plan leaves dense are ignored). Used
  // for finite-difference checks, where re-scoring under perturbed inputs
  // could flip a near-tied selection.
  const std::vector<std::array<ChannelMask, 3>>* fixed_masks = nullptr;
};

// Full decoder forward over flattened (batch*seq_len) tokens: embedding,
// n_layers of attention+ffn with optional contextual sparsity, final norm,
// lm head. Returns logits (batch*seq_len) x vocab.
template <typename S>
Tensor<S> forward(Model<S>& model, const std::vector<int32_t>& tokens,
                  int64_t batch, int64_t seq_len, ForwardCtx<S>& ctx);

}  // namespace slora
