#pragma once

#include <array>
#include <limits>
#include <optional>
#include <string>

#include "slora/data.h"
#include "slora/forward.h"

namespace slora {

// --- schedule --------------------------------------------------------------

// Linear warmup over ceil(warmup_ratio * total) steps — the ramp excludes
// zero, so step 0 already uses base_lr / warmup_steps — then cosine decay
// that would reach 0 exactly at step `total`.
double lr_at(int64_t step, int64_t total, double base_lr, double warmup_ratio);

// True for the leading ceil(fraction * total) steps, which run fully dense.
// The fraction is capped at 0.1.
bool is_dense_step(int64_t step, int64_t total_steps, double fraction);

// --- optimizer ---------------------------------------------------------------

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double warmup_ratio = 0.04;
};

// Decoupled-weight-decay Adam with bias-corrected moments. Parameters are
// registered by name (the name appears in gradient-validity errors). A
// parameter with no gradient buffer updates as if its gradient were zero.
template <typename S>
class AdamW {
 public:
  explicit AdamW(const OptimConfig& cfg) : cfg_(cfg) {}

  void add_param(const std::string& name, const Tensor<S>& t);
  void attach(LoraBank<S>& bank);  // every adapter's a and b factors

  // One update at the given learning rate; consumes and clears gradients.
  void step(double lr);

  int64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    std::string name;
    Tensor<S> param;
    std::vector<S> m, v;
  };
  OptimConfig cfg_;
  std::vector<Slot> slots_;
  int64_t t_ = 0;
};

// --- analytic FLOP model -----------------------------------------------------

// Which projections carry adapters, per layer.
struct AdapterLayout {
  int64_t rank = 0;
  std::vector<std::array<bool, kNumProj>> on;

  template <typename S>
  static AdapterLayout of(const LoraBank<S>& bank, int64_t n_layers) {
    AdapterLayout l;
    l.rank = bank.rank;
    l.on.assign((size_t)n_layers, {});
    for (int64_t i = 0; i < n_layers; ++i)
      for (int p = 0; p < kNumProj; ++p)
        l.on[(size_t)i][(size_t)p] =
            const_cast<LoraBank<S>&>(bank).find((int)i, (Proj)p) != nullptr;
    return l;
  }
};

// Exact per-(layer, path) matmul FLOPs of one optimization step
// (forward + backward), mirroring the execution engine's routing:
//   - `plan` null or inactive -> dense step; otherwise masks sized by
//     units_kept and groups with sparsity 0 stay dense,
//   - `out_rows` > 0 -> that many rows take the dense route (token
//     splitting); estimator scoring then reads only the context rows,
//   - random-metric groups score without matmuls,
//   - `train_base` adds weight-gradient work for the frozen-path weights
//     (pre-training; mutually exclusive with plan/adapters).
// The instrumented ledger of the executed step must equal this exactly.
flops::Ledger analytic_step_ledger(const ModelConfig& cfg,
                                   const SparsityPlan* plan,
                                   const AdapterLayout& adapters,
                                   int64_t batch, int64_t seq_len,
                                   int64_t out_rows, bool train_base);

// Total over all layers and paths.
int64_t analytic_step_flops(const ModelConfig& cfg, const SparsityPlan* plan,
                            const AdapterLayout& adapters, int64_t batch,
                            int64_t seq_len, int64_t out_rows,
                            bool train_base);

// --- run configuration and report -------------------------------------------

struct RunConfig {
  int64_t steps = 100;
  int64_t batch = 4;
  int64_t seq_len = 64;
  OptimConfig optim;
  SparsityPlan plan;  // empty/zero layers = dense run
  uint64_t mask_seed = 3;
  std::optional<int64_t> flop_budget;  // stop once cumulative analytic
                                       // FLOPs reach this
  int64_t eval_every = 0;              // 0 = evaluate only at the end
  int64_t mask_agreement_every = 0;    // 0 = skip the estimator-vs-oracle
                                       // mask diagnostic
  bool train_base = false;             // pre-training: optimize base weights
};

struct StepRecord {
  int64_t step = 0;
  double loss = 0;
  double lr = 0;
  bool dense = false;
  int64_t flops = 0;
  double wall_ms = 0;
};

struct RunReport {
  std::vector<StepRecord> steps;
  std::array<int64_t, (size_t)flops::kNumPaths> path_totals{};
  int64_t total_flops = 0;
  int64_t steps_run = 0;
  bool stopped_by_budget = false;
  double final_eval_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::pair<int64_t, double>> eval_history;  // (step, loss)
  // median over per-step wall times, excluding the first 3 steps when more
  // than 3 ran (allocation/cache warm-up)
  double wall_ms_median = 0;
  double mask_agreement_mean = std::numeric_limits<double>::quiet_NaN();

  // One JSON record per step (step, loss, lr, dense, flops, wall_ms) plus a
  // final summary record.
  std::string metrics_jsonl() const;
};

// The metrics log with every wall-clock field removed: the reproducibility
// comparison surface (wall time is hardware time, everything else is exact).
std::string metrics_without_wall(const std::string& jsonl);

// --- loops -------------------------------------------------------------------

// Mean output-masked cross-entropy over the batches (weighted by loss token
// count), forward only. A plan sparsifies every row (no token splitting at
// evaluation); null plan = dense.
template <typename S>
double evaluate(Model<S>& model, LoraBank<S>* lora,
                const std::vector<Batch>& batches,
                const SparsityPlan* plan = nullptr,
                const EstimatorBank<S>* bank = nullptr, uint64_t mask_seed = 0);

// The training loop. Fine-tuning (rc.train_base == false): `lora` adapters
// are optimized against the frozen base; the plan's sparsity applies after
// the dense warmup fraction. Pre-training (rc.train_base == true): `lora`
// must be null, the plan must be inactive, and all base weights train.
// Every step asserts instrumented FLOPs == analytic FLOPs and aborts on a
// non-finite loss naming the step and the last finite loss.
template <typename S>
RunReport train_loop(Model<S>& model, LoraBank<S>* lora, const RunConfig& rc,
                     BatchSource& data, const std::vector<Batch>* eval_batches,
                     const EstimatorBank<S>* bank);

}  // namespace slora
