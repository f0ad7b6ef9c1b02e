#pragma once

#include <string>
#include <vector>

#include "slora/train.h"

namespace slora {

// --- layer sensitivity ------------------------------------------------------

// Eval-loss response of one layer to sparsifying one group ("ffn" or
// "qkvo", the latter raising qk and vo together) while every other layer
// stays dense.
struct SensitivityCurve {
  int64_t layer = 0;
  std::string group;
  std::vector<double> ratios;     // ascending, shared across layers
  std::vector<double> eval_loss;  // same length as ratios
};

// Sweeps every layer of `group` over `ratios` (strictly ascending, within
// [0, 1]) with oracle criteria and all other layers dense, evaluating on
// `batches` each time. `base` supplies metrics and granularities; its layer
// sparsities and score source are ignored (a ratio of 0 reproduces the
// dense evaluation bitwise). Curves come back in layer order.
template <typename S>
std::vector<SensitivityCurve> sweep_layer_sensitivity(
    Model<S>& model, LoraBank<S>* lora, const std::vector<Batch>& batches,
    const std::vector<double>& ratios, const std::string& group,
    const SparsityPlan& base);

// "group,layer,ratio,eval_loss" rows; doubles print with enough digits to
// round-trip bitwise through parse_sensitivity_csv.
std::string sensitivity_csv(const std::vector<SensitivityCurve>& curves);
std::vector<SensitivityCurve> parse_sensitivity_csv(const std::string& text);

// --- sparsity allocation ------------------------------------------------------

// The step geometry a FLOP budget is measured against.
struct FlopGeometry {
  ModelConfig cfg;
  AdapterLayout adapters;
  int64_t batch = 0;
  int64_t seq_len = 0;
  int64_t out_rows = 0;  // dense rows under token splitting, 0 = no split
};

// Greedy budgeted allocation: starting all-dense, repeatedly raise the
// (layer, group, ratio) move with the smallest eval-loss degradation per
// FLOP saved — ties break toward the lower layer, then the group name —
// until the plan's analytic step FLOPs fall to `budget` x dense. Curves
// must share the conventions of sweep_layer_sensitivity and start at ratio
// 0. Moves that save no FLOPs are never taken. A budget no grid point
// combination can reach fails, reporting the reachable floor fraction. The
// returned plan copies `base`'s metadata (source, metrics, granularities,
// splitting, warmup, rank) and carries only the allocated layer ratios.
SparsityPlan allocate_sparsity(const std::vector<SensitivityCurve>& curves,
                               double budget, const FlopGeometry& geom,
                               const SparsityPlan& base);

// --- estimator-vs-oracle mask agreement ---------------------------------------

struct MaskAgreementReport {
  std::vector<int64_t> ranks;
  int64_t n_layers = 0;
  // [rank][batch][layer][group] overlap in [0, 1]; NaN where the plan
  // leaves the group dense. Group indices follow MaskGroup.
  std::vector<std::vector<std::vector<std::array<double, 3>>>> overlap;
  // Analytic estimator-path share of total step FLOPs, per rank.
  std::vector<double> estimator_fraction;

  double mean(size_t rank_idx, int64_t layer, MaskGroup g) const;
  double median(size_t rank_idx, int64_t layer, MaskGroup g) const;
};

// For each requested rank (each <= bank.rank; the bank is truncated, which
// is exactly a direct decomposition at that rank), runs the plan's groups
// over every batch twice — once scored by the oracle, once by the
// estimator — and records the mask overlap per (layer, group).
template <typename S>
MaskAgreementReport compare_masks(Model<S>& model, LoraBank<S>* lora,
                                  const EstimatorBank<S>& bank,
                                  const SparsityPlan& plan,
                                  const std::vector<Batch>& batches,
                                  const std::vector<int64_t>& ranks);

// "rank,layer,group,mean_overlap,median_overlap" rows plus one
// "rank,,estimator_fraction,..." row per rank.
std::string agreement_csv(const MaskAgreementReport& rep);

// --- attention-map fidelity ---------------------------------------------------

// Median Frobenius error between dense and qk-sparse attention probability
// maps over every (layer, head) pair, for each selection metric.
struct AttnFidelityReport {
  int64_t pairs = 0;
  double qknorm = 0;
  double l2 = 0;
  double random = 0;
};

// Runs each batch dense and then qk-sparse at `qk_sparsity` (oracle
// criteria, all other groups dense) once per metric, comparing attention
// probabilities. `seed` drives the random-selection baseline.
template <typename S>
AttnFidelityReport attn_fidelity(Model<S>& model, LoraBank<S>* lora,
                                 const std::vector<Batch>& batches,
                                 double qk_sparsity, Granularity qk_gran,
                                 uint64_t seed);

}  // namespace slora
