// Command-line surface for the sparse LoRA fine-tuning engine.
//
// Subcommands: gen-data, pretrain, decompose, train, eval,
// sweep-sensitivity, allocate, compare-masks, attn-fidelity, flops.
// Exit codes: 0 success, 1 runtime error (message on stderr), 2 usage.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "slora/config.h"
#include "slora/container.h"
#include "slora/sensitivity.h"
#include "slora/train.h"

using namespace slora;

namespace {

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

std::vector<double> parse_double_list(const std::string& s,
                                      const char* what) {
  std::vector<double> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    char* end = nullptr;
    const double v = std::strtod(item.c_str(), &end);
    SLORA_CHECK(!item.empty() && end == item.c_str() + item.size(), what,
                ": '", item, "' is not a number");
    out.push_back(v);
  }
  SLORA_CHECK(!out.empty(), what, ": empty list");
  return out;
}

std::vector<int64_t> parse_int_list(const std::string& s, const char* what) {
  std::vector<int64_t> out;
  for (double v : parse_double_list(s, what)) {
    SLORA_CHECK(v == (double)(int64_t)v, what, ": ", v,
                " is not an integer");
    out.push_back((int64_t)v);
  }
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  SLORA_CHECK(out.good(), "cannot open '", path, "' for writing");
  out << text;
  SLORA_CHECK(out.good(), "write to '", path, "' failed");
}

// Detects the element type of a container file from its first tensor whose
// name ends in `suffix` ("embed" for checkpoints, ".lora.a" for adapters,
// ".svd.a" for estimator banks).
bool file_is_f64(const std::string& path, const std::string& suffix) {
  Container c = Container::load(path);
  for (const std::string& n : c.names())
    if (n.size() >= suffix.size() &&
        n.compare(n.size() - suffix.size(), suffix.size(), suffix) == 0)
      return c.at(n).dtype == "f64";
  fail("'", path, "' holds no tensor ending in '", suffix,
       "'; is it the right kind of file?");
}

// ---------------------------------------------------------------------------
// geometry and plan flags (shared by several subcommands)
// ---------------------------------------------------------------------------

struct GeomFlags {
  int64_t layers = -1, d_model = -1, heads = -1, ffn = -1, vocab = -1,
          max_seq = -1;
  void add(CLI::App* sub) {
    sub->add_option("--layers", layers, "decoder layers");
    sub->add_option("--d-model", d_model, "model width");
    sub->add_option("--heads", heads, "attention heads");
    sub->add_option("--ffn", ffn, "feed-forward width");
    sub->add_option("--vocab", vocab, "vocabulary size");
    sub->add_option("--max-seq", max_seq, "maximum sequence length");
  }
  ModelConfig apply(ModelConfig cfg) const {
    if (layers >= 0) cfg.n_layers = layers;
    if (d_model >= 0) cfg.d_model = d_model;
    if (heads >= 0) cfg.n_heads = heads;
    if (ffn >= 0) cfg.d_ffn = ffn;
    if (vocab >= 0) cfg.vocab_size = vocab;
    if (max_seq >= 0) cfg.max_seq_len = max_seq;
    cfg.check();
    return cfg;
  }
};

struct PlanFlags {
  std::string plan_path, criteria, metric, granularity, token_split;
  int64_t rank = -1;
  double dense_warmup = -1;

  void add(CLI::App* sub) {
    sub->add_option("--plan", plan_path, "sparsity plan file");
    sub->add_option("--criteria", criteria,
                    "score source override: oracle|svd");
    sub->add_option("--rank", rank, "estimator rank override");
    sub->add_option("--dense-warmup", dense_warmup,
                    "dense warmup fraction override (e.g. 0.05)");
    sub->add_option("--token-split", token_split,
                    "token splitting override: on|off|random");
    sub->add_option(
        "--metric", metric,
        "selection metric override (l2|qknorm|wanda|random), applied to "
        "every group it is valid for: l2 -> ffn+qk+vo, qknorm -> qk, "
        "wanda -> ffn, random -> all");
    sub->add_option(
        "--granularity", granularity,
        "mask granularity override: pair -> qk, head -> qk+vo, "
        "channel -> vo");
  }

  // File (or all-dense default) with flag overrides applied.
  SparsityPlan resolve(int64_t n_layers, std::string path_from_config) const {
    const std::string& path =
        !plan_path.empty() ? plan_path : path_from_config;
    SparsityPlan plan;
    if (!path.empty()) {
      plan = load_plan(path, n_layers);
    } else {
      plan.layers.assign((size_t)n_layers, LayerSparsity{});
    }
    if (!criteria.empty()) plan.source = source_from_name(criteria);
    if (rank >= 0) plan.estimator_rank = rank;
    if (dense_warmup >= 0) plan.dense_warmup_fraction = dense_warmup;
    if (!token_split.empty()) {
      if (token_split == "on")
        plan.split_mode = TokenSplitMode::output_dense;
      else if (token_split == "off")
        plan.split_mode = TokenSplitMode::none;
      else if (token_split == "random")
        plan.split_mode = TokenSplitMode::random_dense;
      else
        fail("--token-split: unknown value '", token_split, "'");
    }
    if (!metric.empty()) {
      const Metric m = metric_from_name(metric);
      if (m == Metric::l2 || m == Metric::wanda || m == Metric::random)
        plan.ffn_metric = m;
      if (m == Metric::l2 || m == Metric::qknorm || m == Metric::random)
        plan.qk_metric = m;
      if (m == Metric::l2 || m == Metric::random) plan.vo_metric = m;
    }
    if (!granularity.empty()) {
      const Granularity g = granularity_from_name(granularity);
      if (g == Granularity::rope_pair || g == Granularity::head)
        plan.qk_granularity = g;
      if (g == Granularity::channel || g == Granularity::head)
        plan.vo_granularity = g;
    }
    return plan;
  }
};

AdapterLayout layout_from_targets(int64_t n_layers, int64_t rank,
                                  const std::string& targets) {
  AdapterLayout layout;
  layout.on.assign((size_t)n_layers, std::array<bool, kNumProj>{});
  if (rank <= 0 || targets.empty()) return layout;
  layout.rank = rank;
  for (Proj p : parse_proj_targets(targets))
    for (auto& row : layout.on) row[(size_t)p] = true;
  return layout;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string task = "kv", out;
  int64_t n = 256;
  uint64_t seed = 1;
  int64_t pairs = 3, key_len = 2, value_len = 2, alphabet = 8;
};

int run_gen_data(const GenDataArgs& a) {
  KvTaskConfig kv;
  kv.n_pairs = a.pairs;
  kv.key_len = a.key_len;
  kv.value_len = a.value_len;
  kv.alphabet = a.alphabet;
  if (a.task == "kv") {
    save_dataset(gen_kv_records(kv, a.n, a.seed), a.out);
  } else if (a.task == "pretrain") {
    write_text(a.out, gen_pretrain_corpus(kv, a.n, a.seed));
  } else {
    fail("gen-data: unknown task '", a.task, "' (expected kv or pretrain)");
  }
  std::cout << "wrote " << a.n << " " << a.task << " records to " << a.out
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

struct PretrainArgs {
  GeomFlags geom;
  std::string data, out, metrics_out, eval_data;
  int64_t steps = 200, batch = 8, seq_len = 64, eval_every = 0;
  double lr = 3e-3, warmup = 0.04, weight_decay = 0.0;
  uint64_t seed = 1;
  bool f64 = false;
};

template <typename S>
int run_pretrain(const PretrainArgs& a) {
  const ModelConfig cfg = a.geom.apply(ModelConfig{});
  Model<S> model = build_model<S>(cfg, a.seed);

  std::ifstream in(a.data, std::ios::binary);
  SLORA_CHECK(in.good(), "cannot open corpus '", a.data, "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string corpus = buf.str();

  LmWindowSource data(corpus, a.batch, a.seq_len, mix_seed(a.seed, 1));
  std::vector<Batch> eval;
  if (!a.eval_data.empty()) {
    std::ifstream ein(a.eval_data, std::ios::binary);
    SLORA_CHECK(ein.good(), "cannot open corpus '", a.eval_data, "'");
    std::ostringstream ebuf;
    ebuf << ein.rdbuf();
    eval = lm_window_batches(ebuf.str(), a.batch, a.seq_len, 4,
                             mix_seed(a.seed, 4));
  }

  RunConfig rc;
  rc.steps = a.steps;
  rc.batch = a.batch;
  rc.seq_len = a.seq_len;
  rc.optim.lr = a.lr;
  rc.optim.warmup_ratio = a.warmup;
  rc.optim.weight_decay = a.weight_decay;
  rc.mask_seed = mix_seed(a.seed, 2);
  rc.eval_every = a.eval_every;
  rc.train_base = true;
  rc.plan.layers.assign((size_t)cfg.n_layers, LayerSparsity{});

  if (a.steps > 0) {
    RunReport rep = train_loop<S>(model, nullptr, rc, data,
                                  eval.empty() ? nullptr : &eval, nullptr);
    if (!a.metrics_out.empty()) write_text(a.metrics_out, rep.metrics_jsonl());
    std::printf("pretrain: %lld steps, last loss %.6f\n",
                (long long)rep.steps_run, rep.steps.back().loss);
  } else {
    std::printf("pretrain: 0 steps, saving the freshly initialized model\n");
  }
  save_model(model, a.out);
  std::cout << "checkpoint written to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// decompose
// ---------------------------------------------------------------------------

struct DecomposeArgs {
  std::string ckpt, out, layers;
  int64_t rank = 8;
};

template <typename S>
int run_decompose(const DecomposeArgs& a) {
  Model<S> model = load_model<S>(a.ckpt);
  std::vector<int64_t> layer_set;
  const std::vector<int64_t>* set_ptr = nullptr;
  if (!a.layers.empty()) {
    layer_set = parse_layer_list(a.layers, model.cfg.n_layers);
    set_ptr = &layer_set;
  }
  EstimatorBank<S> bank = build_estimator_bank<S>(model, a.rank, set_ptr);

  // Per-weight relative reconstruction error ||W - A B||_F / ||W||_F.
  auto rel_err = [&](const Tensor<S>& w, const SvdFactors<S>& f) {
    const int64_t d1 = w.shape()[0], d2 = w.shape()[1], k = f.rank_k;
    double num = 0, den = 0;
    for (int64_t i = 0; i < d1; ++i)
      for (int64_t j = 0; j < d2; ++j) {
        double approx = 0;
        for (int64_t r = 0; r < k; ++r)
          approx += (double)f.w_a.data()[i * k + r] *
                    (double)f.w_b.data()[r * d2 + j];
        const double exact = (double)w.data()[i * d2 + j];
        num += (exact - approx) * (exact - approx);
        den += exact * exact;
      }
    return std::sqrt(num / den);
  };

  for (int64_t l = 0; l < model.cfg.n_layers; ++l) {
    const LayerEstimators<S>& e = bank.layers[(size_t)l];
    if (!e.gate.has_value()) continue;
    const LayerWeights<S>& w = model.layers[(size_t)l];
    std::printf(
        "layer %lld rank %lld rel_err gate %.4f up %.4f q %.4f k %.4f "
        "v %.4f\n",
        (long long)l, (long long)a.rank, rel_err(w.w_gate, *e.gate),
        rel_err(w.w_up, *e.up), rel_err(w.wq, *e.q), rel_err(w.wk, *e.k),
        rel_err(w.wv, *e.v));
  }
  save_estimator_bank(bank, a.out);
  std::cout << "estimator bank written to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train / eval
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, ckpt, data, eval_data, bank, out, metrics_out;
  PlanFlags plan;
  int64_t steps = -1, batch = -1, seq_len = -1, eval_every = -1;
  int64_t lora_rank = -1;
  double lr = -1, warmup = -1, weight_decay = -1, lora_alpha = -1;
  int64_t seed = -1;
  int64_t flop_budget = -1;
  std::string targets;
};

template <typename S>
int run_train(const TrainArgs& a) {
  KvConfig file = a.config.empty() ? KvConfig::parse("")
                                   : KvConfig::load(a.config);
  static const std::set<std::string> known = {
      "model",     "data",        "eval_data",   "adapters_out",
      "metrics_out", "bank",      "plan",        "steps",
      "batch",     "seq_len",     "lr",          "warmup_ratio",
      "weight_decay", "eval_every", "seed",      "lora.rank",
      "lora.alpha", "lora.targets", "flop_budget",
      "mask_agreement_every"};
  for (const std::string& k : file.keys())
    SLORA_CHECK(known.count(k), "run config: unknown key '", k, "'");

  // default <- config file <- flag
  auto pick_str = [&](const std::string& flag, const char* key,
                      const std::string& dflt) {
    return !flag.empty() ? flag : file.get_or(key, dflt);
  };
  auto pick_int = [&](int64_t flag, const char* key, int64_t dflt) {
    return flag >= 0 ? flag : file.get_int_or(key, dflt);
  };
  auto pick_dbl = [&](double flag, const char* key, double dflt) {
    return flag >= 0 ? flag : file.get_double_or(key, dflt);
  };

  const std::string ckpt = pick_str(a.ckpt, "model", "");
  const std::string data_path = pick_str(a.data, "data", "");
  SLORA_CHECK(!ckpt.empty(), "train: no checkpoint (--ckpt or config key "
              "'model')");
  SLORA_CHECK(!data_path.empty(), "train: no dataset (--data or config key "
              "'data')");
  const std::string eval_path = pick_str(a.eval_data, "eval_data", "");
  const std::string bank_path = pick_str(a.bank, "bank", "");
  const std::string out_path = pick_str(a.out, "adapters_out", "");
  const std::string metrics_path =
      pick_str(a.metrics_out, "metrics_out", "");
  const int64_t steps = pick_int(a.steps, "steps", 200);
  const int64_t batch = pick_int(a.batch, "batch", 8);
  const int64_t seq_len = pick_int(a.seq_len, "seq_len", 64);
  const int64_t eval_every = pick_int(a.eval_every, "eval_every", 0);
  const int64_t lora_rank = pick_int(a.lora_rank, "lora.rank", 8);
  const uint64_t seed = (uint64_t)pick_int(a.seed, "seed", 1);
  const double lr = pick_dbl(a.lr, "lr", 3e-4);
  const double warmup = pick_dbl(a.warmup, "warmup_ratio", 0.04);
  const double weight_decay = pick_dbl(a.weight_decay, "weight_decay", 0.0);
  const double lora_alpha =
      pick_dbl(a.lora_alpha, "lora.alpha", 2.0 * (double)lora_rank);
  const std::string targets =
      pick_str(a.targets, "lora.targets", "q,k,v,o,g,u,d");

  Model<S> model = load_model<S>(ckpt);
  LoraBank<S> lora = attach_lora(model, parse_proj_targets(targets),
                                 lora_rank, (S)lora_alpha, mix_seed(seed, 3));

  auto records = load_dataset(data_path);
  Batcher data(records, batch, seq_len, mix_seed(seed, 1));
  std::vector<Batch> eval;
  if (!eval_path.empty())
    eval = build_eval_batches(load_dataset(eval_path), batch, seq_len);

  RunConfig rc;
  rc.steps = steps;
  rc.batch = batch;
  rc.seq_len = seq_len;
  rc.optim.lr = lr;
  rc.optim.warmup_ratio = warmup;
  rc.optim.weight_decay = weight_decay;
  rc.mask_seed = mix_seed(seed, 2);
  rc.eval_every = eval_every;
  rc.plan = a.plan.resolve(model.cfg.n_layers, file.get_or("plan", ""));
  if (a.flop_budget >= 0)
    rc.flop_budget = a.flop_budget;
  else if (file.has("flop_budget"))
    rc.flop_budget = file.get_int("flop_budget");
  if (file.has("mask_agreement_every"))
    rc.mask_agreement_every = file.get_int("mask_agreement_every");

  // svd criteria need an estimator bank: load it or decompose on the fly
  EstimatorBank<S> bank;
  const EstimatorBank<S>* bank_ptr = nullptr;
  if (rc.plan.any() && rc.plan.source == ScoreSource::svd) {
    if (!bank_path.empty()) {
      bank = load_estimator_bank<S>(bank_path);
      if (bank.rank != rc.plan.estimator_rank)
        bank = truncate_bank(bank, rc.plan.estimator_rank);
    } else {
      bank = build_estimator_bank<S>(model, rc.plan.estimator_rank);
    }
    bank_ptr = &bank;
  }

  RunReport rep = train_loop<S>(model, &lora, rc, data,
                                eval.empty() ? nullptr : &eval, bank_ptr);

  if (!metrics_path.empty()) write_text(metrics_path, rep.metrics_jsonl());
  if (!out_path.empty()) {
    save_adapters(lora, out_path);
    std::cout << "adapters written to " << out_path << "\n";
  }

  const AdapterLayout layout = AdapterLayout::of(lora, model.cfg.n_layers);
  const int64_t dense_step = analytic_step_flops(
      model.cfg, nullptr, layout, batch, seq_len, 0, false);
  const double frac =
      (double)rep.total_flops / ((double)dense_step * (double)rep.steps_run);
  std::printf("train: %lld steps, total %lld FLOPs (%.1f%% of dense)\n",
              (long long)rep.steps_run, (long long)rep.total_flops,
              100.0 * frac);
  if (!std::isnan(rep.final_eval_loss))
    std::printf("final eval loss %.6f\n", rep.final_eval_loss);
  if (!std::isnan(rep.mask_agreement_mean))
    std::printf("mask agreement mean %.4f\n", rep.mask_agreement_mean);
  return 0;
}

struct EvalArgs {
  std::string ckpt, adapters, data, bank;
  PlanFlags plan;
  int64_t batch = 8, seq_len = 64;
  uint64_t seed = 0;
};

template <typename S>
int run_eval(const EvalArgs& a) {
  Model<S> model = load_model<S>(a.ckpt);
  LoraBank<S> lora;
  LoraBank<S>* lora_ptr = nullptr;
  if (!a.adapters.empty()) {
    lora = load_adapters<S>(a.adapters);
    lora_ptr = &lora;
  }
  auto eval = build_eval_batches(load_dataset(a.data), a.batch, a.seq_len);
  SLORA_CHECK(!eval.empty(), "eval: dataset yields no full batch of ",
              a.batch);
  SparsityPlan plan = a.plan.resolve(model.cfg.n_layers, "");

  EstimatorBank<S> bank;
  const EstimatorBank<S>* bank_ptr = nullptr;
  if (plan.any() && plan.source == ScoreSource::svd) {
    if (!a.bank.empty()) {
      bank = load_estimator_bank<S>(a.bank);
      if (bank.rank != plan.estimator_rank)
        bank = truncate_bank(bank, plan.estimator_rank);
    } else {
      bank = build_estimator_bank<S>(model, plan.estimator_rank);
    }
    bank_ptr = &bank;
  }
  const double loss = evaluate<S>(model, lora_ptr, eval,
                                  plan.any() ? &plan : nullptr, bank_ptr,
                                  a.seed);
  std::printf("eval_loss %.17g\n", loss);
  return 0;
}

// ---------------------------------------------------------------------------
// sweep-sensitivity / allocate
// ---------------------------------------------------------------------------

struct SweepArgs {
  std::string ckpt, adapters, data, out, group = "ffn", ratios = "0,0.25,0.5,0.75,0.9";
  PlanFlags plan;
  int64_t batch = 8, seq_len = 64;
};

template <typename S>
int run_sweep(const SweepArgs& a) {
  Model<S> model = load_model<S>(a.ckpt);
  LoraBank<S> lora;
  LoraBank<S>* lora_ptr = nullptr;
  if (!a.adapters.empty()) {
    lora = load_adapters<S>(a.adapters);
    lora_ptr = &lora;
  }
  auto eval = build_eval_batches(load_dataset(a.data), a.batch, a.seq_len);
  SLORA_CHECK(!eval.empty(), "sweep: dataset yields no full batch");
  const SparsityPlan base = a.plan.resolve(model.cfg.n_layers, "");
  auto curves = sweep_layer_sensitivity<S>(
      model, lora_ptr, eval, parse_double_list(a.ratios, "--ratios"),
      a.group, base);
  write_text(a.out, sensitivity_csv(curves));
  if (!a.out.empty() && a.out != "-")
    std::cout << "sensitivity curves written to " << a.out << "\n";
  return 0;
}

struct AllocateArgs {
  std::string curves, ckpt, out;
  GeomFlags geom;
  PlanFlags plan;
  double budget = -1;
  int64_t batch = 8, seq_len = 64, out_rows = 0;
  int64_t lora_rank = 0;
  std::string targets;
};

int run_allocate(const AllocateArgs& a) {
  SLORA_CHECK(a.budget > 0, "allocate: --flop-budget is required");
  std::ifstream in(a.curves, std::ios::binary);
  SLORA_CHECK(in.good(), "cannot open curves file '", a.curves, "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  auto curves = parse_sensitivity_csv(buf.str());

  FlopGeometry geom;
  if (!a.ckpt.empty()) {
    // dtype does not matter for geometry; probe it to load correctly
    geom.cfg = file_is_f64(a.ckpt, "embed")
                   ? load_model<double>(a.ckpt).cfg
                   : load_model<float>(a.ckpt).cfg;
  } else {
    geom.cfg = a.geom.apply(ModelConfig{});
  }
  geom.adapters =
      layout_from_targets(geom.cfg.n_layers, a.lora_rank, a.targets);
  geom.batch = a.batch;
  geom.seq_len = a.seq_len;
  geom.out_rows = a.out_rows;

  const SparsityPlan base = a.plan.resolve(geom.cfg.n_layers, "");
  SparsityPlan plan = allocate_sparsity(curves, a.budget, geom, base);
  write_text(a.out, format_plan(plan));

  const int64_t dense = analytic_step_flops(geom.cfg, nullptr, geom.adapters,
                                            geom.batch, geom.seq_len,
                                            geom.out_rows, false);
  const int64_t got = analytic_step_flops(geom.cfg, &plan, geom.adapters,
                                          geom.batch, geom.seq_len,
                                          geom.out_rows, false);
  std::fprintf(stderr, "allocated plan: %.2f%% of dense (budget %.2f%%)\n",
               100.0 * (double)got / (double)dense, 100.0 * a.budget);
  return 0;
}

// ---------------------------------------------------------------------------
// compare-masks / attn-fidelity
// ---------------------------------------------------------------------------

struct CompareMasksArgs {
  std::string ckpt, bank, data, out, ranks = "1,2,4,8";
  PlanFlags plan;
  int64_t batch = 8, seq_len = 64;
};

template <typename S>
int run_compare_masks(const CompareMasksArgs& a) {
  Model<S> model = load_model<S>(a.ckpt);
  EstimatorBank<S> bank = load_estimator_bank<S>(a.bank);
  auto eval = build_eval_batches(load_dataset(a.data), a.batch, a.seq_len);
  SLORA_CHECK(!eval.empty(), "compare-masks: dataset yields no full batch");
  SparsityPlan plan = a.plan.resolve(model.cfg.n_layers, "");
  if (!plan.any())
    for (auto& l : plan.layers) l = LayerSparsity{0.5, 0.5, 0.5};
  auto rep = compare_masks<S>(model, nullptr, bank, plan, eval,
                              parse_int_list(a.ranks, "--ranks"));
  write_text(a.out, agreement_csv(rep));
  return 0;
}

struct AttnFidelityArgs {
  std::string ckpt, adapters, data, granularity = "pair";
  double sparsity = 0.5;
  int64_t batch = 8, seq_len = 64;
  uint64_t seed = 1;
};

template <typename S>
int run_attn_fidelity(const AttnFidelityArgs& a) {
  Model<S> model = load_model<S>(a.ckpt);
  LoraBank<S> lora;
  LoraBank<S>* lora_ptr = nullptr;
  if (!a.adapters.empty()) {
    lora = load_adapters<S>(a.adapters);
    lora_ptr = &lora;
  }
  auto eval = build_eval_batches(load_dataset(a.data), a.batch, a.seq_len);
  SLORA_CHECK(!eval.empty(), "attn-fidelity: dataset yields no full batch");
  auto rep = attn_fidelity<S>(model, lora_ptr, eval, a.sparsity,
                              granularity_from_name(a.granularity), a.seed);
  std::printf("pairs %lld\n", (long long)rep.pairs);
  std::printf("median_frobenius qknorm %.17g\n", rep.qknorm);
  std::printf("median_frobenius l2 %.17g\n", rep.l2);
  std::printf("median_frobenius random %.17g\n", rep.random);
  return 0;
}

// ---------------------------------------------------------------------------
// flops
// ---------------------------------------------------------------------------

struct FlopsArgs {
  std::string ckpt;
  GeomFlags geom;
  PlanFlags plan;
  int64_t batch = 8, seq_len = 64, out_rows = 0;
  int64_t lora_rank = 0;
  std::string targets;
  bool pretrain = false;
};

int run_flops(const FlopsArgs& a) {
  ModelConfig cfg;
  if (!a.ckpt.empty()) {
    cfg = file_is_f64(a.ckpt, "embed") ? load_model<double>(a.ckpt).cfg
                                       : load_model<float>(a.ckpt).cfg;
  } else {
    cfg = a.geom.apply(ModelConfig{});
  }
  const AdapterLayout layout =
      layout_from_targets(cfg.n_layers, a.lora_rank, a.targets);
  SparsityPlan plan = a.plan.resolve(cfg.n_layers, "");

  const flops::Ledger led = analytic_step_ledger(
      cfg, plan.any() ? &plan : nullptr, layout, a.batch, a.seq_len,
      a.out_rows, a.pretrain);
  const int64_t dense = analytic_step_flops(cfg, nullptr, layout, a.batch,
                                            a.seq_len, 0, a.pretrain);

  std::printf("%-18s %20s\n", "path", "flops");
  for (int p = 0; p < flops::kNumPaths; ++p)
    std::printf("%-18s %20lld\n", flops::path_name((flops::Path)p),
                (long long)led.path_total((flops::Path)p));
  std::printf("%-18s %20lld\n", "total", (long long)led.total());
  std::printf("%-18s %20lld\n", "dense_total", (long long)dense);
  std::printf("fraction_of_dense  %19.1f%%\n",
              100.0 * (double)led.total() / (double)dense);
  std::printf("estimator_fraction %19.4f%%\n",
              100.0 * (double)led.path_total(flops::Path::estimator) /
                  (double)led.total());
  std::printf("estimator_reference_large_scale      0.0500%%\n");
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
  CLI::App app{"contextual channel sparsity for LoRA fine-tuning"};
  app.require_subcommand(1);

  GenDataArgs gd;
  CLI::App* c_gd = app.add_subcommand("gen-data",
                                      "generate a synthetic dataset");
  c_gd->add_option("--task", gd.task, "kv (supervised recall) or pretrain "
                   "(plain-text corpus)");
  c_gd->add_option("--out", gd.out, "output path")->required();
  c_gd->add_option("--n", gd.n, "number of records / corpus lines");
  c_gd->add_option("--seed", gd.seed, "generation seed");
  c_gd->add_option("--pairs", gd.pairs, "key-value pairs per record");
  c_gd->add_option("--key-len", gd.key_len, "key length");
  c_gd->add_option("--value-len", gd.value_len, "value length");
  c_gd->add_option("--alphabet", gd.alphabet, "alphabet size");

  PretrainArgs pa;
  CLI::App* c_pre = app.add_subcommand("pretrain",
                                       "train a base model from scratch");
  pa.geom.add(c_pre);
  c_pre->add_option("--data", pa.data, "plain-text corpus")->required();
  c_pre->add_option("--eval-data", pa.eval_data, "held-out corpus");
  c_pre->add_option("--out", pa.out, "checkpoint path")->required();
  c_pre->add_option("--metrics-out", pa.metrics_out, "metrics log path");
  c_pre->add_option("--steps", pa.steps, "optimization steps (0 saves the "
                    "fresh initialization)");
  c_pre->add_option("--batch", pa.batch, "batch size");
  c_pre->add_option("--seq-len", pa.seq_len, "sequence length");
  c_pre->add_option("--eval-every", pa.eval_every, "evaluation period");
  c_pre->add_option("--lr", pa.lr, "peak learning rate");
  c_pre->add_option("--warmup", pa.warmup, "LR warmup ratio");
  c_pre->add_option("--weight-decay", pa.weight_decay, "decoupled decay");
  c_pre->add_option("--seed", pa.seed, "master seed");
  c_pre->add_flag("--f64", pa.f64, "train in double precision");

  DecomposeArgs da;
  CLI::App* c_dec = app.add_subcommand(
      "decompose", "build the low-rank estimator bank for a checkpoint");
  c_dec->add_option("--ckpt", da.ckpt, "model checkpoint")->required();
  c_dec->add_option("--rank", da.rank, "decomposition rank");
  c_dec->add_option("--layers", da.layers,
                    "layer list (e.g. L0-L5,L7); default all");
  c_dec->add_option("--out", da.out, "estimator bank path")->required();

  TrainArgs ta;
  CLI::App* c_tr = app.add_subcommand("train",
                                      "LoRA fine-tune a frozen checkpoint");
  c_tr->add_option("--config", ta.config, "run-config file (flags override "
                   "its keys)");
  c_tr->add_option("--ckpt", ta.ckpt, "model checkpoint");
  c_tr->add_option("--data", ta.data, "training dataset (jsonl)");
  c_tr->add_option("--eval-data", ta.eval_data, "evaluation dataset");
  c_tr->add_option("--bank", ta.bank, "estimator bank (svd criteria)");
  c_tr->add_option("--out", ta.out, "adapters output path");
  c_tr->add_option("--metrics-out", ta.metrics_out, "metrics log path");
  c_tr->add_option("--steps", ta.steps, "optimization steps");
  c_tr->add_option("--batch", ta.batch, "batch size");
  c_tr->add_option("--seq-len", ta.seq_len, "sequence length");
  c_tr->add_option("--eval-every", ta.eval_every, "evaluation period");
  c_tr->add_option("--lr", ta.lr, "peak learning rate");
  c_tr->add_option("--warmup", ta.warmup, "LR warmup ratio");
  c_tr->add_option("--weight-decay", ta.weight_decay, "decoupled decay");
  c_tr->add_option("--lora-rank", ta.lora_rank, "adapter rank");
  c_tr->add_option("--lora-alpha", ta.lora_alpha, "adapter scale");
  c_tr->add_option("--targets", ta.targets,
                   "adapter projections, e.g. q,k,v,o,g,u,d");
  c_tr->add_option("--seed", ta.seed, "master seed");
  c_tr->add_option("--flop-budget", ta.flop_budget,
                   "stop after this many cumulative FLOPs");
  ta.plan.add(c_tr);

  EvalArgs ea;
  CLI::App* c_ev = app.add_subcommand("eval", "evaluate a checkpoint");
  c_ev->add_option("--ckpt", ea.ckpt, "model checkpoint")->required();
  c_ev->add_option("--adapters", ea.adapters, "adapter container");
  c_ev->add_option("--data", ea.data, "evaluation dataset")->required();
  c_ev->add_option("--bank", ea.bank, "estimator bank");
  c_ev->add_option("--batch", ea.batch, "batch size");
  c_ev->add_option("--seq-len", ea.seq_len, "sequence length");
  c_ev->add_option("--seed", ea.seed, "mask seed for random metrics");
  ea.plan.add(c_ev);

  SweepArgs sa;
  CLI::App* c_sw = app.add_subcommand(
      "sweep-sensitivity", "per-layer sparsity sensitivity curves");
  c_sw->add_option("--ckpt", sa.ckpt, "model checkpoint")->required();
  c_sw->add_option("--adapters", sa.adapters, "adapter container");
  c_sw->add_option("--data", sa.data, "evaluation dataset")->required();
  c_sw->add_option("--group", sa.group, "ffn or qkvo");
  c_sw->add_option("--ratios", sa.ratios, "comma-separated sparsity ratios");
  c_sw->add_option("--out", sa.out, "CSV output path (default stdout)");
  c_sw->add_option("--batch", sa.batch, "batch size");
  c_sw->add_option("--seq-len", sa.seq_len, "sequence length");
  sa.plan.add(c_sw);

  AllocateArgs aa;
  CLI::App* c_al = app.add_subcommand(
      "allocate", "budget-constrained sparsity allocation from curves");
  c_al->add_option("--curves", aa.curves, "sensitivity CSV")->required();
  c_al->add_option("--flop-budget", aa.budget,
                   "target fraction of dense step FLOPs, in (0, 1]")
      ->required();
  c_al->add_option("--ckpt", aa.ckpt, "checkpoint supplying the geometry");
  aa.geom.add(c_al);
  c_al->add_option("--batch", aa.batch, "batch size");
  c_al->add_option("--seq-len", aa.seq_len, "sequence length");
  c_al->add_option("--out-rows", aa.out_rows,
                   "dense rows per step under token splitting");
  c_al->add_option("--lora-rank", aa.lora_rank, "adapter rank (FLOPs only)");
  c_al->add_option("--targets", aa.targets, "adapter projections");
  c_al->add_option("--out", aa.out, "plan output path (default stdout)");
  aa.plan.add(c_al);

  CompareMasksArgs ca;
  CLI::App* c_cm = app.add_subcommand(
      "compare-masks", "estimator-vs-oracle mask agreement per rank");
  c_cm->add_option("--ckpt", ca.ckpt, "model checkpoint")->required();
  c_cm->add_option("--bank", ca.bank, "estimator bank")->required();
  c_cm->add_option("--data", ca.data, "evaluation dataset")->required();
  c_cm->add_option("--ranks", ca.ranks, "comma-separated ranks");
  c_cm->add_option("--out", ca.out, "CSV output path (default stdout)");
  c_cm->add_option("--batch", ca.batch, "batch size");
  c_cm->add_option("--seq-len", ca.seq_len, "sequence length");
  ca.plan.add(c_cm);

  AttnFidelityArgs fa;
  CLI::App* c_af = app.add_subcommand(
      "attn-fidelity", "attention-map error per qk selection metric");
  c_af->add_option("--ckpt", fa.ckpt, "model checkpoint")->required();
  c_af->add_option("--adapters", fa.adapters, "adapter container");
  c_af->add_option("--data", fa.data, "evaluation dataset")->required();
  c_af->add_option("--sparsity", fa.sparsity, "qk sparsity to test");
  c_af->add_option("--granularity", fa.granularity, "pair or head");
  c_af->add_option("--batch", fa.batch, "batch size");
  c_af->add_option("--seq-len", fa.seq_len, "sequence length");
  c_af->add_option("--seed", fa.seed, "random-baseline seed");

  FlopsArgs fl;
  CLI::App* c_fl = app.add_subcommand(
      "flops", "analytic per-path FLOP table for a plan, no training");
  c_fl->add_option("--ckpt", fl.ckpt, "checkpoint supplying the geometry");
  fl.geom.add(c_fl);
  c_fl->add_option("--batch", fl.batch, "batch size");
  c_fl->add_option("--seq-len", fl.seq_len, "sequence length");
  c_fl->add_option("--out-rows", fl.out_rows,
                   "dense rows per step under token splitting");
  c_fl->add_option("--lora-rank", fl.lora_rank, "adapter rank");
  c_fl->add_option("--targets", fl.targets, "adapter projections");
  c_fl->add_flag("--pretrain", fl.pretrain, "count base weight gradients");
  fl.plan.add(c_fl);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << "\n";
    return 2;
  }

  try {
    if (c_gd->parsed()) return run_gen_data(gd);
    if (c_pre->parsed())
      return pa.f64 ? run_pretrain<double>(pa) : run_pretrain<float>(pa);
    if (c_dec->parsed())
      return file_is_f64(da.ckpt, "embed") ? run_decompose<double>(da)
                                           : run_decompose<float>(da);
    if (c_tr->parsed()) {
      KvConfig file = ta.config.empty() ? KvConfig::parse("")
                                        : KvConfig::load(ta.config);
      const std::string ckpt =
          !ta.ckpt.empty() ? ta.ckpt : file.get_or("model", "");
      SLORA_CHECK(!ckpt.empty(), "train: no checkpoint (--ckpt or config "
                  "key 'model')");
      return file_is_f64(ckpt, "embed") ? run_train<double>(ta)
                                        : run_train<float>(ta);
    }
    if (c_ev->parsed())
      return file_is_f64(ea.ckpt, "embed") ? run_eval<double>(ea)
                                           : run_eval<float>(ea);
    if (c_sw->parsed())
      return file_is_f64(sa.ckpt, "embed") ? run_sweep<double>(sa)
                                           : run_sweep<float>(sa);
    if (c_al->parsed()) return run_allocate(aa);
    if (c_cm->parsed())
      return file_is_f64(ca.ckpt, "embed") ? run_compare_masks<double>(ca)
                                           : run_compare_masks<float>(ca);
    if (c_af->parsed())
      return file_is_f64(fa.ckpt, "embed") ? run_attn_fidelity<double>(fa)
                                           : run_attn_fidelity<float>(fa);
    if (c_fl->parsed()) return run_flops(fl);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
