#include "slora/sensitivity.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <sstream>

namespace slora {

namespace {

constexpr const char* kCsvHeader = "group,layer,ratio,eval_loss";

void check_group_name(const std::string& group) {
  SLORA_CHECK(group == "ffn" || group == "qkvo", "unknown sweep group '",
              group, "' (expected ffn or qkvo)");
}

void check_ratios(const std::vector<double>& ratios) {
  SLORA_CHECK(!ratios.empty(), "sweep: no ratios given");
  for (size_t i = 0; i < ratios.size(); ++i) {
    SLORA_CHECK(ratios[i] >= 0.0 && ratios[i] <= 1.0, "sweep: ratio ",
                ratios[i], " outside [0, 1]");
    SLORA_CHECK(i == 0 || ratios[i] > ratios[i - 1],
                "sweep: ratios must be strictly ascending");
  }
}

// Sets one (layer, group) sparsity in an otherwise untouched plan.
void apply_ratio(SparsityPlan& plan, int64_t layer, const std::string& group,
                 double ratio) {
  LayerSparsity& l = plan.layers[(size_t)layer];
  if (group == "ffn") {
    l.ffn = ratio;
  } else {
    l.qk = ratio;
    l.vo = ratio;
  }
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

template <typename S>
std::vector<SensitivityCurve> sweep_layer_sensitivity(
    Model<S>& model, LoraBank<S>* lora, const std::vector<Batch>& batches,
    const std::vector<double>& ratios, const std::string& group,
    const SparsityPlan& base) {
  check_group_name(group);
  check_ratios(ratios);
  SLORA_CHECK(!batches.empty(), "sweep: no evaluation batches");

  const int64_t n_layers = model.cfg.n_layers;
  std::vector<SensitivityCurve> curves;
  curves.reserve((size_t)n_layers);
  for (int64_t l = 0; l < n_layers; ++l) {
    SensitivityCurve c;
    c.layer = l;
    c.group = group;
    c.ratios = ratios;
    for (double r : ratios) {
      SparsityPlan plan = base;
      plan.source = ScoreSource::oracle;  // the sweep defines the reference
      plan.layers.assign((size_t)n_layers, LayerSparsity{});
      apply_ratio(plan, l, group, r);
      c.eval_loss.push_back(evaluate<S>(model, lora, batches, &plan));
    }
    curves.push_back(std::move(c));
  }
  return curves;
}

// ---------------------------------------------------------------------------
// curve CSV
// ---------------------------------------------------------------------------

std::string sensitivity_csv(const std::vector<SensitivityCurve>& curves) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const SensitivityCurve& c : curves) {
    SLORA_CHECK(c.ratios.size() == c.eval_loss.size(), "curve for layer ",
                c.layer, " (", c.group, ") has ", c.ratios.size(),
                " ratios but ", c.eval_loss.size(), " losses");
    for (size_t i = 0; i < c.ratios.size(); ++i)
      out += c.group + "," + std::to_string(c.layer) + "," +
             fmt_double(c.ratios[i]) + "," + fmt_double(c.eval_loss[i]) +
             "\n";
  }
  return out;
}

std::vector<SensitivityCurve> parse_sensitivity_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  SLORA_CHECK(std::getline(in, line) && line == kCsvHeader,
              "sensitivity csv: expected header '", kCsvHeader, "', got '",
              line, "'");
  std::vector<SensitivityCurve> curves;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string item;
    std::istringstream row(line);
    while (std::getline(row, item, ',')) f.push_back(item);
    SLORA_CHECK(f.size() == 4, "sensitivity csv line ", line_no,
                ": expected 4 fields, got ", f.size());
    char* end = nullptr;
    const int64_t layer = std::strtoll(f[1].c_str(), &end, 10);
    SLORA_CHECK(end == f[1].c_str() + f[1].size(), "sensitivity csv line ",
                line_no, ": bad layer '", f[1], "'");
    const double ratio = std::strtod(f[2].c_str(), &end);
    SLORA_CHECK(end == f[2].c_str() + f[2].size(), "sensitivity csv line ",
                line_no, ": bad ratio '", f[2], "'");
    const double loss = std::strtod(f[3].c_str(), &end);
    SLORA_CHECK(end == f[3].c_str() + f[3].size(), "sensitivity csv line ",
                line_no, ": bad eval_loss '", f[3], "'");

    if (curves.empty() || curves.back().group != f[0] ||
        curves.back().layer != layer) {
      SensitivityCurve c;
      c.group = f[0];
      c.layer = layer;
      curves.push_back(std::move(c));
    }
    curves.back().ratios.push_back(ratio);
    curves.back().eval_loss.push_back(loss);
  }
  return curves;
}

// ---------------------------------------------------------------------------
// allocation
// ---------------------------------------------------------------------------

SparsityPlan allocate_sparsity(const std::vector<SensitivityCurve>& curves,
                               double budget, const FlopGeometry& geom,
                               const SparsityPlan& base) {
  SLORA_CHECK(budget > 0.0 && budget <= 1.0, "allocate: budget ", budget,
              " outside (0, 1]");
  SLORA_CHECK(!curves.empty(), "allocate: no sensitivity curves");
  std::set<std::pair<std::string, int64_t>> seen;
  for (const SensitivityCurve& c : curves) {
    check_group_name(c.group);
    SLORA_CHECK(c.layer >= 0 && c.layer < geom.cfg.n_layers,
                "allocate: layer ", c.layer, " outside [0, ",
                geom.cfg.n_layers, ")");
    SLORA_CHECK(c.ratios.size() == c.eval_loss.size(), "allocate: curve for "
                "layer ", c.layer, " (", c.group, ") has ", c.ratios.size(),
                " ratios but ", c.eval_loss.size(), " losses");
    check_ratios(c.ratios);
    SLORA_CHECK(c.ratios.front() == 0.0, "allocate: curve for layer ",
                c.layer, " (", c.group, ") must start at ratio 0");
    SLORA_CHECK(seen.insert({c.group, c.layer}).second,
                "allocate: (", c.group, ", layer ", c.layer,
                ") listed twice");
  }

  auto step_flops = [&](const SparsityPlan& p) {
    return analytic_step_flops(geom.cfg, &p, geom.adapters, geom.batch,
                               geom.seq_len, geom.out_rows, false);
  };

  SparsityPlan plan = base;
  plan.layers.assign((size_t)geom.cfg.n_layers, LayerSparsity{});
  const int64_t dense = step_flops(plan);
  const double target = budget * (double)dense;

  std::vector<size_t> idx(curves.size(), 0);  // current grid point per curve
  int64_t current = dense;
  while ((double)current > target) {
    // Cheapest degradation per FLOP saved over every remaining grid point;
    // jumping several points at once covers moves whose first step saves
    // nothing (e.g. where estimator onset offsets small savings).
    double best_cost = std::numeric_limits<double>::infinity();
    size_t best_c = 0, best_j = 0;
    int64_t best_flops = 0;
    bool found = false;
    for (size_t ci = 0; ci < curves.size(); ++ci) {
      const SensitivityCurve& c = curves[ci];
      for (size_t j = idx[ci] + 1; j < c.ratios.size(); ++j) {
        SparsityPlan cand = plan;
        apply_ratio(cand, c.layer, c.group, c.ratios[j]);
        const int64_t flops = step_flops(cand);
        const int64_t saved = current - flops;
        if (saved <= 0) continue;
        const double cost =
            (c.eval_loss[j] - c.eval_loss[idx[ci]]) / (double)saved;
        const bool better =
            !found || cost < best_cost ||
            (cost == best_cost &&
             (c.layer < curves[best_c].layer ||
              (c.layer == curves[best_c].layer &&
               (c.group < curves[best_c].group ||
                (c.group == curves[best_c].group && j < best_j)))));
        if (better) {
          found = true;
          best_cost = cost;
          best_c = ci;
          best_j = j;
          best_flops = flops;
        }
      }
    }
    if (!found)
      fail("allocate: budget ", budget, " is below the reachable floor ",
           (double)current / (double)dense);
    apply_ratio(plan, curves[best_c].layer, curves[best_c].group,
                curves[best_c].ratios[best_j]);
    idx[best_c] = best_j;
    current = best_flops;
  }
  return plan;
}

// ---------------------------------------------------------------------------
// mask agreement
// ---------------------------------------------------------------------------

double MaskAgreementReport::mean(size_t rank_idx, int64_t layer,
                                 MaskGroup g) const {
  double acc = 0;
  int64_t n = 0;
  for (const auto& batch : overlap.at(rank_idx)) {
    const double v = batch.at((size_t)layer)[(size_t)g];
    if (std::isnan(v)) return v;
    acc += v;
    ++n;
  }
  return n ? acc / (double)n : std::numeric_limits<double>::quiet_NaN();
}

double MaskAgreementReport::median(size_t rank_idx, int64_t layer,
                                   MaskGroup g) const {
  std::vector<double> vals;
  for (const auto& batch : overlap.at(rank_idx)) {
    const double v = batch.at((size_t)layer)[(size_t)g];
    if (std::isnan(v)) return v;
    vals.push_back(v);
  }
  return median_of(std::move(vals));
}

template <typename S>
MaskAgreementReport compare_masks(Model<S>& model, LoraBank<S>* lora,
                                  const EstimatorBank<S>& bank,
                                  const SparsityPlan& plan,
                                  const std::vector<Batch>& batches,
                                  const std::vector<int64_t>& ranks) {
  SLORA_CHECK(!ranks.empty(), "compare masks: no ranks given");
  for (int64_t k : ranks)
    SLORA_CHECK(k >= 1 && k <= bank.rank, "compare masks: rank ", k,
                " outside the bank's [1, ", bank.rank, "]");
  SLORA_CHECK(!batches.empty(), "compare masks: no batches");
  SLORA_CHECK((int64_t)plan.layers.size() == model.cfg.n_layers,
              "compare masks: plan covers ", plan.layers.size(),
              " layers, model has ", model.cfg.n_layers);
  SLORA_CHECK(plan.any(), "compare masks: the plan is all-dense");

  const int64_t n_layers = model.cfg.n_layers;
  constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

  // One recorded forward per (plan flavor, batch); null partition = every
  // row contributes to scoring, so both flavors see identical inputs.
  auto record = [&](const SparsityPlan& p, const EstimatorBank<S>* b,
                    const Batch& batch, uint64_t seed) {
    Tape<S> tape;
    ForwardCtx<S> ctx;
    ctx.tape = &tape;
    ctx.plan = &p;
    ctx.bank = b;
    ctx.lora = lora;
    ctx.mask_seed = seed;
    ctx.record_masks = true;
    (void)forward(model, batch.tokens, batch.batch, batch.seq_len, ctx);
    return std::move(ctx.masks_used);
  };

  SparsityPlan oracle_plan = plan;
  oracle_plan.source = ScoreSource::oracle;

  MaskAgreementReport rep;
  rep.ranks = ranks;
  rep.n_layers = n_layers;
  rep.overlap.resize(ranks.size());

  std::vector<std::vector<std::array<ChannelMask, 3>>> oracle_masks;
  for (size_t bi = 0; bi < batches.size(); ++bi)
    oracle_masks.push_back(
        record(oracle_plan, nullptr, batches[bi], mix_seed(7, bi)));

  AdapterLayout layout;
  if (lora) {
    layout = AdapterLayout::of(*lora, n_layers);
  } else {
    layout.on.assign((size_t)n_layers, std::array<bool, kNumProj>{});
  }

  for (size_t ri = 0; ri < ranks.size(); ++ri) {
    SparsityPlan svd_plan = plan;
    svd_plan.source = ScoreSource::svd;
    svd_plan.estimator_rank = ranks[ri];
    const EstimatorBank<S> bank_k = truncate_bank(bank, ranks[ri]);

    auto& per_batch = rep.overlap[ri];
    per_batch.resize(batches.size());
    for (size_t bi = 0; bi < batches.size(); ++bi) {
      auto got = record(svd_plan, &bank_k, batches[bi], mix_seed(7, bi));
      auto& row = per_batch[bi];
      row.assign((size_t)n_layers, {kNaN, kNaN, kNaN});
      for (int64_t l = 0; l < n_layers; ++l) {
        const LayerSparsity& ls = plan.layers[(size_t)l];
        const double s[3] = {ls.ffn, ls.qk, ls.vo};
        for (int g = 0; g < 3; ++g)
          if (s[g] > 0.0)
            row[(size_t)l][(size_t)g] =
                mask_overlap(got[(size_t)l][(size_t)g],
                             oracle_masks[bi][(size_t)l][(size_t)g]);
      }
    }

    const flops::Ledger led = analytic_step_ledger(
        model.cfg, &svd_plan, layout, batches[0].batch, batches[0].seq_len,
        0, false);
    rep.estimator_fraction.push_back(
        (double)led.path_total(flops::Path::estimator) /
        (double)led.total());
  }
  return rep;
}

std::string agreement_csv(const MaskAgreementReport& rep) {
  std::string out = "rank,layer,group,mean_overlap,median_overlap\n";
  for (size_t ri = 0; ri < rep.ranks.size(); ++ri) {
    for (int64_t l = 0; l < rep.n_layers; ++l)
      for (int g = 0; g < 3; ++g) {
        const double m = rep.mean(ri, l, (MaskGroup)g);
        if (std::isnan(m)) continue;
        out += std::to_string(rep.ranks[ri]) + "," + std::to_string(l) +
               "," + group_name((MaskGroup)g) + "," + fmt_double(m) + "," +
               fmt_double(rep.median(ri, l, (MaskGroup)g)) + "\n";
      }
    out += std::to_string(rep.ranks[ri]) + ",,estimator_fraction," +
           fmt_double(rep.estimator_fraction[ri]) + ",\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// attention-map fidelity
// ---------------------------------------------------------------------------

template <typename S>
AttnFidelityReport attn_fidelity(Model<S>& model, LoraBank<S>* lora,
                                 const std::vector<Batch>& batches,
                                 double qk_sparsity, Granularity qk_gran,
                                 uint64_t seed) {
  SLORA_CHECK(qk_sparsity >= 0.0 && qk_sparsity <= 1.0,
              "attention fidelity: sparsity ", qk_sparsity,
              " outside [0, 1]");
  SLORA_CHECK(!batches.empty(), "attention fidelity: no batches");

  const ModelConfig& cfg = model.cfg;
  const int64_t H = cfg.n_heads;

  auto probs_of = [&](const SparsityPlan* plan, const Batch& b,
                      uint64_t mask_seed) {
    Tape<S> tape;
    ActivationTap<S> tap;
    tap.capture_attn_probs = true;
    ForwardCtx<S> ctx;
    ctx.tape = &tape;
    ctx.plan = plan;
    ctx.lora = lora;
    ctx.tap = &tap;
    ctx.mask_seed = mask_seed;
    (void)forward(model, b.tokens, b.batch, b.seq_len, ctx);
    return std::move(tap.attn_probs);
  };

  auto plan_for = [&](Metric metric) {
    SparsityPlan p;
    p.layers.assign((size_t)cfg.n_layers, LayerSparsity{});
    for (auto& l : p.layers) l.qk = qk_sparsity;
    p.source = ScoreSource::oracle;
    p.qk_metric = metric;
    p.qk_granularity = qk_gran;
    return p;
  };

  const Metric metrics[3] = {Metric::qknorm, Metric::l2, Metric::random};
  // err[metric][layer * H + head], accumulated over batches
  std::vector<std::vector<double>> err(
      3, std::vector<double>((size_t)(cfg.n_layers * H), 0.0));
  for (size_t bi = 0; bi < batches.size(); ++bi) {
    const Batch& b = batches[bi];
    auto ref = probs_of(nullptr, b, 0);
    for (int m = 0; m < 3; ++m) {
      SparsityPlan plan = plan_for(metrics[m]);
      auto got = probs_of(&plan, b, mix_seed(seed, bi));
      for (int64_t l = 0; l < cfg.n_layers; ++l) {
        auto per_head = attention_map_error(ref[(size_t)l], got[(size_t)l],
                                            b.batch, H, b.seq_len);
        for (int64_t h = 0; h < H; ++h)
          err[(size_t)m][(size_t)(l * H + h)] += per_head[(size_t)h];
      }
    }
  }

  AttnFidelityReport rep;
  rep.pairs = cfg.n_layers * H;
  const double scale = 1.0 / (double)batches.size();
  for (auto& v : err[0]) v *= scale;
  for (auto& v : err[1]) v *= scale;
  for (auto& v : err[2]) v *= scale;
  rep.qknorm = median_of(err[0]);
  rep.l2 = median_of(err[1]);
  rep.random = median_of(err[2]);
  return rep;
}

#define SLORA_INSTANTIATE_SENSITIVITY(S)                                      \
  template std::vector<SensitivityCurve> sweep_layer_sensitivity<S>(          \
      Model<S>&, LoraBank<S>*, const std::vector<Batch>&,                    \
      const std::vector<double>&, const std::string&, const SparsityPlan&);  \
  template MaskAgreementReport compare_masks<S>(                              \
      Model<S>&, LoraBank<S>*, const EstimatorBank<S>&, const SparsityPlan&, \
      const std::vector<Batch>&, const std::vector<int64_t>&);               \
  template AttnFidelityReport attn_fidelity<S>(                              \
      Model<S>&, LoraBank<S>*, const std::vector<Batch>&, double,            \
      Granularity, uint64_t);

SLORA_INSTANTIATE_SENSITIVITY(float)
SLORA_INSTANTIATE_SENSITIVITY(double)

#undef SLORA_INSTANTIATE_SENSITIVITY

}  // namespace slora
