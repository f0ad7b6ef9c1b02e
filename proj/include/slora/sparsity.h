#pragma once

#include <optional>

#include "slora/linalg.h"
#include "slora/model.h"

namespace slora {

enum class Granularity : int { channel = 0, rope_pair, head };
enum class MaskGroup : int { ffn = 0, qk, vo };
enum class Metric : int { l2 = 0, qknorm, wanda, random };
enum class ScoreSource : int { oracle = 0, svd };

const char* granularity_name(Granularity g);
const char* group_name(MaskGroup g);
const char* metric_name(Metric m);
const char* source_name(ScoreSource s);
Granularity granularity_from_name(const std::string&);
Metric metric_from_name(const std::string&);
ScoreSource source_from_name(const std::string&);

// Per-unit importance scores. A unit is a channel, a rotary pair (2 adjacent
// channels within a head) or a whole head; units expand to channel index
// ranges of size channels_per_unit.
struct ScoreVec {
  std::vector<double> value;
  Granularity granularity = Granularity::channel;
  int64_t channels_per_unit = 1;
  int64_t total_channels = 0;
  int64_t units() const { return (int64_t)value.size(); }
};

// Kept channel set for one (layer, group). Indices are ascending and unique.
struct ChannelMask {
  std::vector<int64_t> kept;
  int64_t total = 0;
  Granularity granularity = Granularity::channel;
  int64_t channels_per_unit = 1;

  int64_t n_kept() const { return (int64_t)kept.size(); }
  bool full() const { return n_kept() == total; }
  bool empty() const { return kept.empty(); }
  void validate() const;  // ascending, unique, in range
};

// Keeps the highest-scoring ceil((1-sparsity)*units) units (ties toward the
// lower index), expanded to channels. sparsity must lie in [0, 1].
ChannelMask select_mask(const ScoreVec& scores, double sparsity);

// |a  b| / |a| for equal-size masks over the same channel space.
double mask_overlap(const ChannelMask& a, const ChannelMask& b);

// Frozen low-rank predictors for one layer's score-relevant projections.
template <typename S>
struct LayerEstimators {
  std::optional<SvdFactors<S>> gate, up, q, k, v;
};

template <typename S>
struct EstimatorBank {
  int64_t rank = 0;
  std::vector<LayerEstimators<S>> layers;
  bool has_layer(int layer) const {
    return layer >= 0 && layer < (int)layers.size();
  }
};

// Decomposes the scoring projections at the given rank. SVD runs in double
// regardless of S. A layer set restricts decomposition to those layers
// (entries elsewhere stay empty); null means every layer. Out-of-range layer
// indices are an error.
template <typename S>
EstimatorBank<S> build_estimator_bank(const Model<S>& model, int64_t rank,
                                      const std::vector<int64_t>* layer_set =
                                          nullptr);

// The same bank at a lower rank: factors keep their leading columns/rows and
// singular values. Because each factor is the top-k slice of one converged
// basis, this equals decomposing directly at the lower rank.
template <typename S>
EstimatorBank<S> truncate_bank(const EstimatorBank<S>& bank, int64_t rank);

// --- scoring -------------------------------------------------------------
// All scoring runs without grad; matmul FLOPs land in the caller's active
// attribution scope (the training loop wraps these in the estimator bucket).

// Feed-forward intermediate-channel scores from already-computed gate/up
// activations: l2 column norms of silu(g) * u.
template <typename S>
ScoreVec ffn_activation_scores(const Tensor<S>& gate_act,
                               const Tensor<S>& up_act);

// Same formula, but the activations are produced here: dense oracle uses the
// layer weights, svd uses the estimator bank.
template <typename S>
ScoreVec ffn_scores(const Tensor<S>& xn, const LayerWeights<S>& w,
                    const LayerEstimators<S>* est, ScoreSource source);

// Weight-aware variant: column l2 norm of the intermediate scaled by the l2
// norm of the matching down-projection row.
template <typename S>
ScoreVec ffn_wanda_scores(const Tensor<S>& xn, const LayerWeights<S>& w,
                          const LayerEstimators<S>* est, ScoreSource source);

// Query/key scores at the requested granularity: per unit,
// ||Q_unit|| * ||K_unit|| (qknorm) or ||Q_unit|| + ||K_unit|| (l2).
template <typename S>
ScoreVec qk_scores(const Tensor<S>& xn, const LayerWeights<S>& w,
                   const LayerEstimators<S>* est, ScoreSource source,
                   Granularity gran, const ModelConfig& cfg, Metric metric);

// Value-channel scores: column norms of the value projection.
template <typename S>
ScoreVec vo_scores(const Tensor<S>& xn, const LayerWeights<S>& w,
                   const LayerEstimators<S>* est, ScoreSource source,
                   Granularity gran, const ModelConfig& cfg);

// Column norms of an externally computed attention mix output; the costly
// ablation reference for the vo criterion.
template <typename S>
ScoreVec vo_attn_out_scores(const Tensor<S>& attn_out, Granularity gran,
                            const ModelConfig& cfg);

// Seeded uniform scores (random selection baseline).
ScoreVec random_scores(int64_t units, Granularity gran,
                       int64_t channels_per_unit, uint64_t seed);

// Dispatch used by the training loop: one layer, one group.
template <typename S>
ScoreVec group_scores(MaskGroup group, const Tensor<S>& xn,
                      const LayerWeights<S>& w, const LayerEstimators<S>* est,
                      ScoreSource source, Metric metric, Granularity gran,
                      const ModelConfig& cfg, uint64_t random_seed);

// Mean per-head Frobenius error between two attention probability buffers
// (layout batch x heads x L x L), averaged over the batch: result[h].
template <typename S>
std::vector<double> attention_map_error(const std::vector<S>& probs_ref,
                                        const std::vector<S>& probs_test,
                                        int64_t batch, int64_t n_heads,
                                        int64_t seq_len);

}  // namespace slora
