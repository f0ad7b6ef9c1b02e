#include "slora/train.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include <json.hpp>

namespace slora {

// --- schedule --------------------------------------------------------------

double lr_at(int64_t step, int64_t total, double base_lr,
             double warmup_ratio) {
  SLORA_CHECK(step >= 0 && step < total, "lr_at: step ", step,
              " outside [0, ", total, ")");
  SLORA_CHECK(warmup_ratio >= 0.0 && warmup_ratio < 1.0,
              "lr_at: warmup ratio ", warmup_ratio, " outside [0, 1)");
  const int64_t warmup =
      (int64_t)std::ceil(warmup_ratio * (double)total - 1e-9);
  if (step < warmup) return base_lr * (double)(step + 1) / (double)warmup;
  const double progress = (double)(step - warmup) / (double)(total - warmup);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

bool is_dense_step(int64_t step, int64_t total_steps, double fraction) {
  SLORA_CHECK(step >= 0 && step < total_steps, "is_dense_step: step ", step,
              " outside [0, ", total_steps, ")");
  SLORA_CHECK(fraction >= 0.0 && fraction <= 0.1,
              "dense warmup fraction ", fraction, " exceeds the 0.1 cap");
  const int64_t dense =
      (int64_t)std::ceil(fraction * (double)total_steps - 1e-9);
  return step < dense;
}

// --- optimizer ---------------------------------------------------------------

template <typename S>
void AdamW<S>::add_param(const std::string& name, const Tensor<S>& t) {
  SLORA_CHECK(t.requires_grad(), "adamw: parameter '", name,
              "' does not require gradients");
  Slot s;
  s.name = name;
  s.param = t;
  s.m.assign((size_t)t.numel(), S(0));
  s.v.assign((size_t)t.numel(), S(0));
  slots_.push_back(std::move(s));
}

template <typename S>
void AdamW<S>::attach(LoraBank<S>& bank) {
  for (LoraAdapter<S>* ad : bank.all()) {
    add_param(ad->name() + ".a", ad->a);
    add_param(ad->name() + ".b", ad->b);
  }
}

template <typename S>
void AdamW<S>::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, (double)t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, (double)t_);
  for (Slot& s : slots_) {
    const int64_t n = s.param.numel();
    const S* g = s.param.has_grad() ? s.param.grad() : nullptr;
    if (g)
      for (int64_t i = 0; i < n; ++i)
        SLORA_CHECK(std::isfinite((double)g[i]),
                    "non-finite gradient in ", s.name);
    S* p = s.param.data();
    for (int64_t i = 0; i < n; ++i) {
      const double gi = g ? (double)g[i] : 0.0;
      const double m = cfg_.beta1 * (double)s.m[(size_t)i] +
                       (1.0 - cfg_.beta1) * gi;
      const double v = cfg_.beta2 * (double)s.v[(size_t)i] +
                       (1.0 - cfg_.beta2) * gi * gi;
      s.m[(size_t)i] = S(m);
      s.v[(size_t)i] = S(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      p[i] = S((double)p[i] -
               lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                     cfg_.weight_decay * (double)p[i]));
    }
    s.param.drop_grad();
  }
}

template class AdamW<float>;
template class AdamW<double>;

// --- analytic FLOP model -----------------------------------------------------

namespace {

// Kept channel count for one group at its granularity.
int64_t kept_channels(double sparsity, Granularity gran,
                      const ModelConfig& cfg) {
  switch (gran) {
    case Granularity::channel: return units_kept(sparsity, cfg.d_model);
    case Granularity::rope_pair:
      return 2 * units_kept(sparsity, cfg.d_model / 2);
    case Granularity::head:
      return cfg.d_head() * units_kept(sparsity, cfg.n_heads);
  }
  fail("kept_channels: bad granularity");
}

}  // namespace

flops::Ledger analytic_step_ledger(const ModelConfig& cfg,
                                   const SparsityPlan* plan,
                                   const AdapterLayout& adapters,
                                   int64_t batch, int64_t seq_len,
                                   int64_t out_rows, bool train_base) {
  const int64_t T = batch * seq_len;
  SLORA_CHECK(out_rows >= 0 && out_rows <= T, "analytic step: ", out_rows,
              " dense-routed rows for ", T, " tokens");
  const bool active = plan && plan->any();
  SLORA_CHECK(!train_base || (!active && adapters.rank == 0),
              "analytic step: base training excludes sparsity and adapters");
  const int64_t d = cfg.d_model, f = cfg.d_ffn, V = cfg.vocab_size;
  const int64_t To = active ? out_rows : 0;
  const int64_t Tc = T - To;
  const int64_t attn =
      4 * batch * cfg.n_heads * seq_len * seq_len * cfg.d_head();

  flops::Ledger led((int)cfg.n_layers);
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const LayerSparsity ls =
        active ? plan->layers[(size_t)l] : LayerSparsity{};
    const bool use_ffn = ls.ffn > 0.0, use_qk = ls.qk > 0.0,
               use_vo = ls.vo > 0.0;
    const int64_t nqk =
        use_qk ? kept_channels(ls.qk, plan->qk_granularity, cfg) : d;
    const int64_t nvo =
        use_vo ? kept_channels(ls.vo, plan->vo_granularity, cfg) : d;
    const int64_t nffn = use_ffn ? units_kept(ls.ffn, f) : f;

    // frozen-branch forward: sliced widths on context rows, full on the
    // dense-routed rows; groups at sparsity 0 collapse to the dense count
    const int64_t fwd = 2 * (2 * Tc * d * nqk + 2 * To * d * d)  // q, k
                        + (2 * Tc * d * nvo + 2 * To * d * d)    // v
                        + (2 * Tc * nvo * d + 2 * To * d * d)    // o
                        + attn                                   // scores+mix
                        + 2 * (2 * Tc * d * nffn + 2 * To * d * f)  // gate, up
                        + (2 * Tc * nffn * d + 2 * To * f * d);     // down
    led.add((int)l, flops::Path::main_fwd, fwd);
    // every frozen matmul's input gradient costs its forward again; the two
    // attention products cost twice (both operands carry gradients)
    led.add((int)l, flops::Path::main_bwd_input, fwd + attn);
    if (train_base)
      led.add((int)l, flops::Path::base_bwd_weight, fwd - attn);

    if (active) {
      // scoring reads only context rows; random metrics draw, not compute
      const int64_t Ts = Tc;
      const int64_t k = plan->estimator_rank;
      int64_t est = 0;
      auto add_weight = [&](int64_t d_out) {
        est += plan->source == ScoreSource::oracle
                   ? 2 * Ts * d * d_out
                   : 2 * Ts * d * k + 2 * Ts * k * d_out;
      };
      if (use_qk && plan->qk_metric != Metric::random) {
        add_weight(d);  // q
        add_weight(d);  // k
      }
      if (use_vo && plan->vo_metric != Metric::random) add_weight(d);  // v
      if (use_ffn && plan->ffn_metric != Metric::random) {
        add_weight(f);  // gate
        add_weight(f);  // up
      }
      if (est) led.add((int)l, flops::Path::estimator, est);
    }

    if ((size_t)l < adapters.on.size()) {
      int64_t lf = 0;
      for (int p = 0; p < kNumProj; ++p) {
        if (!adapters.on[(size_t)l][(size_t)p]) continue;
        const Proj proj = (Proj)p;
        const int64_t d_in =
            proj == Proj::down ? f : d;
        const int64_t d_out =
            (proj == Proj::gate || proj == Proj::up) ? f : d;
        lf += 2 * T * adapters.rank * (d_in + d_out);
      }
      if (lf) {
        led.add((int)l, flops::Path::lora_fwd, lf);
        led.add((int)l, flops::Path::lora_bwd, 2 * lf);
      }
    }
  }
  led.add(flops::Ledger::kNonLayer, flops::Path::head, 4 * T * d * V);
  if (train_base)
    led.add(flops::Ledger::kNonLayer, flops::Path::base_bwd_weight,
            2 * T * d * V);
  return led;
}

int64_t analytic_step_flops(const ModelConfig& cfg, const SparsityPlan* plan,
                            const AdapterLayout& adapters, int64_t batch,
                            int64_t seq_len, int64_t out_rows,
                            bool train_base) {
  return analytic_step_ledger(cfg, plan, adapters, batch, seq_len, out_rows,
                              train_base)
      .total();
}

// --- report ------------------------------------------------------------------

std::string RunReport::metrics_jsonl() const {
  std::string out;
  for (const StepRecord& r : steps) {
    nlohmann::json j{{"step", r.step},   {"loss", r.loss},
                     {"lr", r.lr},       {"dense", r.dense},
                     {"flops", r.flops}, {"wall_ms", r.wall_ms}};
    out += j.dump();
    out += "\n";
  }
  nlohmann::json s{{"summary", true},
                   {"steps_run", steps_run},
                   {"total_flops", total_flops},
                   {"stopped_by_budget", stopped_by_budget},
                   {"wall_ms_median", wall_ms_median}};
  if (std::isfinite(final_eval_loss)) s["final_eval_loss"] = final_eval_loss;
  if (std::isfinite(mask_agreement_mean))
    s["mask_agreement_mean"] = mask_agreement_mean;
  nlohmann::json paths;
  for (int p = 0; p < flops::kNumPaths; ++p)
    paths[flops::path_name((flops::Path)p)] = path_totals[(size_t)p];
  s["path_flops"] = paths;
  if (!eval_history.empty()) {
    nlohmann::json evals = nlohmann::json::array();
    for (const auto& [step, loss] : eval_history)
      evals.push_back({{"step", step}, {"loss", loss}});
    s["evals"] = evals;
  }
  out += s.dump();
  out += "\n";
  return out;
}

std::string metrics_without_wall(const std::string& jsonl) {
  std::string out;
  std::istringstream in(jsonl);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    j.erase("wall_ms");
    j.erase("wall_ms_median");
    out += j.dump();
    out += "\n";
  }
  return out;
}

// --- loops -------------------------------------------------------------------

template <typename S>
double evaluate(Model<S>& model, LoraBank<S>* lora,
                const std::vector<Batch>& batches, const SparsityPlan* plan,
                const EstimatorBank<S>* bank, uint64_t mask_seed) {
  SLORA_CHECK(!batches.empty(), "evaluate: no batches");
  double weighted = 0;
  int64_t count = 0;
  for (size_t i = 0; i < batches.size(); ++i) {
    const Batch& b = batches[i];
    Tape<S> tape;
    ForwardCtx<S> ctx;
    ctx.tape = &tape;
    ctx.plan = plan;
    ctx.bank = bank;
    ctx.lora = lora;
    ctx.mask_seed = mix_seed(mask_seed, (uint64_t)i);
    Tensor<S> logits = forward(model, b.tokens, b.batch, b.seq_len, ctx);
    Tensor<S> loss =
        ops::cross_entropy_masked(&tape, logits, b.targets, b.loss_mask);
    weighted += double(loss.data()[0]) * (double)b.loss_count();
    count += b.loss_count();
  }
  return weighted / (double)count;
}

namespace {

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Random row subset of the same size as the output set, for the
// random-dense splitting ablation.
TokenPartition random_partition(int64_t rows, int64_t n_dense,
                                uint64_t seed) {
  std::vector<int64_t> idx((size_t)rows);
  for (int64_t i = 0; i < rows; ++i) idx[(size_t)i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<uint8_t> mask((size_t)rows, 0);
  for (int64_t i = 0; i < n_dense; ++i) mask[(size_t)idx[(size_t)i]] = 1;
  return TokenPartition::from_output_mask(mask);
}

// Mean overlap between the masks a sparse forward picked and the masks the
// dense oracle would pick on the same batch; instrumentation stays silent.
template <typename S>
double mask_agreement(Model<S>& model, LoraBank<S>* lora,
                      const SparsityPlan& plan, const TokenPartition* part,
                      const Batch& b, uint64_t mask_seed,
                      const std::vector<std::array<ChannelMask, 3>>& used) {
  flops::Scope quiet(nullptr, flops::Ledger::kNonLayer,
                     flops::Path::main_fwd);
  SparsityPlan oracle_plan = plan;
  oracle_plan.source = ScoreSource::oracle;
  ForwardCtx<S> ctx;
  ctx.plan = &oracle_plan;
  ctx.partition = part;
  ctx.lora = lora;
  ctx.mask_seed = mask_seed;
  ctx.record_masks = true;
  (void)forward(model, b.tokens, b.batch, b.seq_len, ctx);
  double sum = 0;
  int64_t n = 0;
  for (size_t l = 0; l < used.size(); ++l) {
    const LayerSparsity& ls = plan.layers[l];
    const double s[3] = {ls.ffn, ls.qk, ls.vo};
    for (int g = 0; g < 3; ++g) {
      if (s[g] <= 0.0) continue;
      sum += mask_overlap(used[l][(size_t)g],
                          ctx.masks_used[l][(size_t)g]);
      ++n;
    }
  }
  return n ? sum / (double)n : 1.0;
}

}  // namespace

template <typename S>
RunReport train_loop(Model<S>& model, LoraBank<S>* lora, const RunConfig& rc,
                     BatchSource& data, const std::vector<Batch>* eval_batches,
                     const EstimatorBank<S>* bank) {
  const ModelConfig& cfg = model.cfg;
  SLORA_CHECK(rc.steps > 0, "train: steps must be positive");
  SparsityPlan plan = rc.plan;
  if (plan.layers.empty())
    plan.layers.assign((size_t)cfg.n_layers, LayerSparsity{});
  const bool plan_active = plan.any();
  if (plan_active) plan.validate(cfg);

  if (rc.train_base) {
    SLORA_CHECK(lora == nullptr, "pre-training takes no adapters");
    SLORA_CHECK(!plan_active, "pre-training runs dense");
    model.set_trainable(true);
  } else {
    SLORA_CHECK(lora != nullptr, "fine-tuning needs an adapter bank");
    model.set_trainable(false);
  }

  AdamW<S> opt(rc.optim);
  if (rc.train_base) {
    for (auto& [name, t] : model.named_params()) opt.add_param(name, *t);
  } else {
    opt.attach(*lora);
  }

  AdapterLayout layout;
  if (lora) {
    layout = AdapterLayout::of(*lora, cfg.n_layers);
  } else {
    layout.on.assign((size_t)cfg.n_layers, {});
  }

  RunReport rep;
  flops::Ledger ledger((int)cfg.n_layers);
  double last_finite_loss = std::numeric_limits<double>::quiet_NaN();
  int64_t cumulative_flops = 0;
  std::vector<double> agreements;
  const bool want_diag = rc.mask_agreement_every > 0 &&
                         plan_active && plan.source == ScoreSource::svd;

  for (int64_t step = 0; step < rc.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    Batch b = data.next();
    SLORA_CHECK(b.batch == rc.batch && b.seq_len == rc.seq_len,
                "train: batch source produced ", b.batch, "x", b.seq_len,
                ", config says ", rc.batch, "x", rc.seq_len);

    const bool dense =
        !plan_active ||
        is_dense_step(step, rc.steps, plan.dense_warmup_fraction);
    const bool sparse = !dense;

    TokenPartition part;
    const TokenPartition* part_ptr = nullptr;
    if (sparse && plan.split_mode != TokenSplitMode::none) {
      part = plan.split_mode == TokenSplitMode::output_dense
                 ? TokenPartition::from_output_mask(b.loss_mask)
                 : random_partition(
                       b.rows(), b.loss_count(),
                       mix_seed(mix_seed(rc.mask_seed, 0x5eed), (uint64_t)step));
      part_ptr = &part;
    }

    ledger.reset();
    ledger.gather_bytes = 0;
    Tape<S> tape;
    ForwardCtx<S> ctx;
    ctx.tape = &tape;
    ctx.ledger = &ledger;
    ctx.plan = sparse ? &plan : nullptr;
    ctx.partition = part_ptr;
    ctx.bank = bank;
    ctx.lora = lora;
    ctx.mask_seed = mix_seed(rc.mask_seed, (uint64_t)step);
    ctx.grad_root = !rc.train_base;
    ctx.record_masks = want_diag && sparse;

    Tensor<S> logits = forward(model, b.tokens, rc.batch, rc.seq_len, ctx);
    Tensor<S> loss =
        ops::cross_entropy_masked(&tape, logits, b.targets, b.loss_mask);
    const double loss_val = (double)loss.data()[0];
    if (!std::isfinite(loss_val))
      fail("training diverged at step ", step, "; last finite loss ",
           last_finite_loss);
    last_finite_loss = loss_val;
    tape.backward(loss);

    flops::Ledger expect = analytic_step_ledger(
        cfg, sparse ? &plan : nullptr, layout, rc.batch, rc.seq_len,
        part_ptr ? (int64_t)part.output_rows.size() : 0, rc.train_base);
    SLORA_CHECK(ledger == expect,
                "flops ledger mismatch at step ", step, ": instrumented ",
                ledger.total(), ", analytic ", expect.total());

    // Diagnostic before the update so both scorings see the same weights.
    if (ctx.record_masks && step % rc.mask_agreement_every == 0)
      agreements.push_back(mask_agreement<S>(model, lora, plan, part_ptr, b,
                                             ctx.mask_seed, ctx.masks_used));

    const double lr = lr_at(step, rc.steps, rc.optim.lr,
                            rc.optim.warmup_ratio);
    opt.step(lr);

    const int64_t step_flops = ledger.total();
    cumulative_flops += step_flops;
    for (int p = 0; p < flops::kNumPaths; ++p)
      rep.path_totals[(size_t)p] += ledger.path_total((flops::Path)p);

    const auto t1 = std::chrono::steady_clock::now();
    const double wall_ms =
        std::chrono::duration<double, std::milli>(t1 - t0).count();
    rep.steps.push_back(
        StepRecord{step, loss_val, lr, dense, step_flops, wall_ms});

    if (eval_batches && rc.eval_every > 0 && (step + 1) % rc.eval_every == 0)
      rep.eval_history.emplace_back(
          step, evaluate(model, lora, *eval_batches));

    if (rc.flop_budget && cumulative_flops >= *rc.flop_budget) {
      rep.stopped_by_budget = true;
      break;
    }
  }

  rep.steps_run = (int64_t)rep.steps.size();
  rep.total_flops = cumulative_flops;
  std::vector<double> walls;
  for (size_t i = rep.steps.size() > 3 ? 3 : 0; i < rep.steps.size(); ++i)
    walls.push_back(rep.steps[i].wall_ms);
  rep.wall_ms_median = median_of(std::move(walls));
  if (!agreements.empty()) {
    double sum = 0;
    for (double a : agreements) sum += a;
    rep.mask_agreement_mean = sum / (double)agreements.size();
  }
  if (eval_batches)
    rep.final_eval_loss = evaluate(model, lora, *eval_batches);
  return rep;
}

#define SLORA_INSTANTIATE_TRAIN(S)                                           \
  template double evaluate<S>(Model<S>&, LoraBank<S>*,                       \
                              const std::vector<Batch>&,                     \
                              const SparsityPlan*, const EstimatorBank<S>*,  \
                              uint64_t);                                     \
  template RunReport train_loop<S>(Model<S>&, LoraBank<S>*,                  \
                                   const RunConfig&, BatchSource&,           \
                                   const std::vector<Batch>*,                \
                                   const EstimatorBank<S>*);

SLORA_INSTANTIATE_TRAIN(float)
SLORA_INSTANTIATE_TRAIN(double)

}  // namespace slora
