#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include <json.hpp>

#include "slora/train.h"

using namespace slora;

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

TEST_CASE("lr schedule: ramp excludes zero, peaks at base, cosine to zero") {
  // total 100, warmup_ratio 0.04 -> 4 warmup steps
  CHECK(lr_at(0, 100, 0.1, 0.04) == doctest::Approx(0.025).epsilon(1e-15));
  CHECK(lr_at(1, 100, 0.1, 0.04) == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(lr_at(3, 100, 0.1, 0.04) == doctest::Approx(0.1).epsilon(1e-15));

  // closed-form cosine tail at the last step
  const double expect99 = 0.1 * 0.5 * (1.0 + std::cos(M_PI * 95.0 / 96.0));
  CHECK(std::abs(lr_at(99, 100, 0.1, 0.04) - expect99) < 1e-12);
  CHECK(lr_at(99, 100, 0.1, 0.04) > 0.0);
  CHECK(lr_at(99, 100, 0.1, 0.04) < 1e-4);

  // no warmup: starts at base_lr immediately
  CHECK(lr_at(0, 10, 1.0, 0.0) == doctest::Approx(1.0).epsilon(1e-15));

  // monotone non-increasing after the ramp
  double prev = lr_at(4, 100, 0.1, 0.04);
  for (int64_t s = 5; s < 100; ++s) {
    double cur = lr_at(s, 100, 0.1, 0.04);
    CHECK(cur <= prev + 1e-18);
    prev = cur;
  }
  CHECK_THROWS((void)lr_at(100, 100, 0.1, 0.04));  // step < total required
}

TEST_CASE("dense warmup step predicate") {
  // fraction 0.05 of 1000 -> steps 0..49
  CHECK(is_dense_step(0, 1000, 0.05));
  CHECK(is_dense_step(49, 1000, 0.05));
  CHECK(!is_dense_step(50, 1000, 0.05));
  // fraction 0 -> never dense
  CHECK(!is_dense_step(0, 1000, 0.0));
  // ceiling: 0.1 of 10 -> step 0 only
  CHECK(is_dense_step(0, 10, 0.1));
  CHECK(!is_dense_step(1, 10, 0.1));
  // cap at 10%
  CHECK_THROWS_WITH_AS((void)is_dense_step(0, 10, 0.2),
                       doctest::Contains("0.1"), Error);
  CHECK_THROWS((void)is_dense_step(10, 10, 0.05));
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

namespace {

// Independent scalar reference: textbook decoupled-weight-decay Adam.
struct ScalarAdamW {
  double m = 0, v = 0;
  int64_t t = 0;
  double step(double p, double g, const OptimConfig& c, double lr) {
    ++t;
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g * g;
    const double mhat = m / (1.0 - std::pow(c.beta1, (double)t));
    const double vhat = v / (1.0 - std::pow(c.beta2, (double)t));
    return p - lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * p);
  }
};

}  // namespace

TEST_CASE("adamw: zero gradient changes params only by weight decay") {
  OptimConfig c;
  c.weight_decay = 0.1;
  Tensor<double> p = Tensor<double>::from_data({1}, {2.0}, true);
  AdamW<double> opt(c);
  opt.add_param("p", p);
  p.ensure_grad();  // zero gradient buffer
  opt.step(0.5);
  CHECK(p.data()[0] == doctest::Approx(2.0 - 0.5 * 0.1 * 2.0).epsilon(1e-15));
}

TEST_CASE("adamw: first step moves by lr * g/(|g|+eps)") {
  OptimConfig c;  // defaults: betas 0.9/0.999, eps 1e-8, wd 0
  Tensor<double> p = Tensor<double>::from_data({1}, {1.0}, true);
  AdamW<double> opt(c);
  opt.add_param("p", p);
  p.ensure_grad();
  p.grad()[0] = 3.0;
  opt.step(0.01);
  // bias correction makes step 1 exactly lr * g/(sqrt(g^2)+eps)
  const double expect = 1.0 - 0.01 * (3.0 / (3.0 + 1e-8));
  CHECK(std::abs(p.data()[0] - expect) < 1e-12);
}

TEST_CASE("adamw matches the scalar reference over several steps") {
  OptimConfig c;
  c.weight_decay = 0.02;
  Tensor<double> p =
      Tensor<double>::from_data({3}, {0.5, -1.25, 2.0}, true);
  AdamW<double> opt(c);
  opt.add_param("p", p);

  std::vector<double> ref = {0.5, -1.25, 2.0};
  std::vector<ScalarAdamW> refstate(3);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (int step = 0; step < 5; ++step) {
    const double lr = 0.01 * (step + 1);
    std::vector<double> grads(3);
    for (auto& g : grads) g = dist(rng);
    p.ensure_grad();
    for (int i = 0; i < 3; ++i) p.grad()[i] = grads[i];
    opt.step(lr);
    for (int i = 0; i < 3; ++i)
      ref[(size_t)i] = refstate[(size_t)i].step(ref[(size_t)i],
                                                grads[(size_t)i], c, lr);
    for (int i = 0; i < 3; ++i)
      CHECK(std::abs(p.data()[i] - ref[(size_t)i]) < 1e-12);
  }
  // gradients were consumed
  CHECK(!p.has_grad());
}

TEST_CASE("adamw rejects non-finite gradients naming the parameter") {
  OptimConfig c;
  Tensor<double> p = Tensor<double>::from_data({2}, {1.0, 1.0}, true);
  AdamW<double> opt(c);
  opt.add_param("L0.q.a", p);
  p.ensure_grad();
  p.grad()[1] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_WITH_AS(opt.step(0.1), doctest::Contains("L0.q.a"), Error);
}

// ---------------------------------------------------------------------------
// analytic FLOP model
// ---------------------------------------------------------------------------

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ffn = 12;
  cfg.vocab_size = 16;
  cfg.max_seq_len = 8;
  return cfg;
}

std::vector<int32_t> random_tokens(int64_t n, int64_t vocab, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<int32_t> t((size_t)n);
  for (auto& v : t) v = int32_t(rng() % (uint64_t)vocab);
  return t;
}

AdapterLayout full_layout(const ModelConfig& cfg, int64_t rank) {
  AdapterLayout l;
  l.rank = rank;
  l.on.assign((size_t)cfg.n_layers, {});
  for (auto& row : l.on) row.fill(true);
  return l;
}

// Runs one instrumented forward+loss+backward and returns the ledger.
template <typename S>
flops::Ledger instrumented_step(Model<S>& model, LoraBank<S>* lora,
                                const SparsityPlan* plan,
                                const EstimatorBank<S>* bank,
                                const std::vector<int32_t>& tokens,
                                const std::vector<int32_t>& targets,
                                const std::vector<uint8_t>& mask,
                                int64_t batch, int64_t seq_len,
                                const TokenPartition* part, bool train_base) {
  flops::Ledger ledger((int)model.cfg.n_layers);
  Tape<S> tape;
  ForwardCtx<S> ctx;
  ctx.tape = &tape;
  ctx.ledger = &ledger;
  ctx.plan = plan;
  ctx.partition = part;
  ctx.bank = bank;
  ctx.lora = lora;
  ctx.grad_root = !train_base;
  Tensor<S> logits = forward(model, tokens, batch, seq_len, ctx);
  Tensor<S> loss = ops::cross_entropy_masked(&tape, logits, targets, mask);
  tape.backward(loss);
  return ledger;
}

}  // namespace

TEST_CASE("analytic dense fine-tuning step matches hand arithmetic") {
  // d 8, ffn 12, heads 2 (d_head 4), vocab 16, 2 layers; batch 2 x seq 4,
  // adapters rank 2 on all seven projections.
  //   attention = 4BHL^2dh = 4*2*2*(4*4)*4 = 1024
  //   main_fwd/layer = 8Td^2 + 6Td*f + attention
  //                  = 8*8*64 + 6*8*8*12 + 1024 = 9728
  //   main_bwd_input/layer = main_fwd + attention again = 10752
  //   lora_fwd/layer = 4*2Tr(d+d) + 2*2Tr(d+f) + 2Tr(f+d)
  //                  = 4*512 + 2*640 + 640 = 3968, lora_bwd = 7936
  //   head = 4TdV = 4*8*8*16 = 4096
  //   total = 2*(9728+10752+3968+7936) + 4096 = 68864
  ModelConfig cfg = tiny_cfg();
  AdapterLayout lay = full_layout(cfg, 2);
  CHECK(analytic_step_flops(cfg, nullptr, lay, 2, 4, 0, false) == 68864);

  flops::Ledger led = analytic_step_ledger(cfg, nullptr, lay, 2, 4, 0, false);
  CHECK(led.at(0, flops::Path::main_fwd) == 9728);
  CHECK(led.at(0, flops::Path::main_bwd_input) == 10752);
  CHECK(led.at(1, flops::Path::lora_fwd) == 3968);
  CHECK(led.at(1, flops::Path::lora_bwd) == 7936);
  CHECK(led.at(flops::Ledger::kNonLayer, flops::Path::head) == 4096);
  CHECK(led.path_total(flops::Path::estimator) == 0);
  CHECK(led.path_total(flops::Path::base_bwd_weight) == 0);
}

TEST_CASE("analytic sparse oracle step matches hand arithmetic") {
  // Same geometry, every layer at ffn 0.5 / qk 0.5 / vo 0.25, oracle
  // criteria, no token splitting.
  //   kept: ffn 6 of 12; qk pairs 2 of 4 -> 4 channels; vo 6 of 8
  //   main_fwd/layer = q,k: 2*(2*8*8*4) + v: 2*8*8*6 + o: 2*8*6*8
  //                  + attn 1024 + gate,up: 2*(2*8*8*6) + down: 2*8*6*8
  //                  = 1024 + 768 + 768 + 1024 + 1536 + 768 = 5888
  //   estimator/layer (oracle) = qk 4Td^2 + vo 2Td^2 + ffn 4Tdf
  //                            = 2048 + 1024 + 3072 = 6144
  //   total = 2*(5888 + 6912 + 6144 + 3968 + 7936) + 4096 = 65792
  ModelConfig cfg = tiny_cfg();
  AdapterLayout lay = full_layout(cfg, 2);
  SparsityPlan plan;
  plan.layers.assign(2, LayerSparsity{0.5, 0.5, 0.25});
  plan.source = ScoreSource::oracle;
  CHECK(analytic_step_flops(cfg, &plan, lay, 2, 4, 0, false) == 65792);

  flops::Ledger led = analytic_step_ledger(cfg, &plan, lay, 2, 4, 0, false);
  CHECK(led.at(0, flops::Path::main_fwd) == 5888);
  CHECK(led.at(0, flops::Path::main_bwd_input) == 6912);
  CHECK(led.at(0, flops::Path::estimator) == 6144);
}

TEST_CASE("instrumented dense step equals the analytic ledger exactly") {
  ModelConfig cfg = tiny_cfg();
  auto model = build_model<float>(cfg, 3);
  auto lora = attach_lora(model, parse_proj_targets("q,k,v,o,g,u,d"), 2, 4.0f,
                          17);
  auto tokens = random_tokens(8, cfg.vocab_size, 5);
  auto targets = random_tokens(8, cfg.vocab_size, 6);
  std::vector<uint8_t> mask(8, 1);

  flops::Ledger got = instrumented_step<float>(
      model, &lora, nullptr, nullptr, tokens, targets, mask, 2, 4, nullptr,
      false);
  flops::Ledger want = analytic_step_ledger(
      cfg, nullptr, AdapterLayout::of(lora, cfg.n_layers), 2, 4, 0, false);
  CHECK(got == want);
  CHECK(got.total() == 68864);
}

TEST_CASE("instrumented sparse steps equal the analytic ledger exactly") {
  ModelConfig cfg = tiny_cfg();
  auto model = build_model<float>(cfg, 3);
  auto lora = attach_lora(model, parse_proj_targets("q,k,v,o,g,u,d"), 2, 4.0f,
                          17);
  auto tokens = random_tokens(8, cfg.vocab_size, 5);
  auto targets = random_tokens(8, cfg.vocab_size, 6);
  std::vector<uint8_t> mask = {0, 1, 1, 0, 0, 0, 1, 1};
  AdapterLayout lay = AdapterLayout::of(lora, cfg.n_layers);

  SparsityPlan plan;
  plan.layers.assign(2, LayerSparsity{0.5, 0.5, 0.25});

  SUBCASE("oracle criteria, no splitting") {
    plan.source = ScoreSource::oracle;
    flops::Ledger got = instrumented_step<float>(
        model, &lora, &plan, nullptr, tokens, targets, mask, 2, 4, nullptr,
        false);
    CHECK(got == analytic_step_ledger(cfg, &plan, lay, 2, 4, 0, false));
    CHECK(got.total() == 65792);
  }
  SUBCASE("svd criteria with token splitting") {
    plan.source = ScoreSource::svd;
    plan.estimator_rank = 2;
    auto bank = build_estimator_bank(model, 2);
    TokenPartition part = TokenPartition::from_output_mask(mask);
    flops::Ledger got = instrumented_step<float>(
        model, &lora, &plan, &bank, tokens, targets, mask, 2, 4, &part,
        false);
    CHECK(got == analytic_step_ledger(cfg, &plan, lay, 2, 4,
                                      (int64_t)part.output_rows.size(),
                                      false));
    CHECK(got.path_total(flops::Path::estimator) > 0);
  }
  SUBCASE("random metrics score without matmuls") {
    plan.source = ScoreSource::oracle;
    plan.ffn_metric = plan.qk_metric = plan.vo_metric = Metric::random;
    flops::Ledger got = instrumented_step<float>(
        model, &lora, &plan, nullptr, tokens, targets, mask, 2, 4, nullptr,
        false);
    CHECK(got == analytic_step_ledger(cfg, &plan, lay, 2, 4, 0, false));
    CHECK(got.path_total(flops::Path::estimator) == 0);
  }
  SUBCASE("mixed-granularity head masks") {
    plan.source = ScoreSource::oracle;
    plan.qk_granularity = Granularity::head;
    plan.vo_granularity = Granularity::head;
    flops::Ledger got = instrumented_step<float>(
        model, &lora, &plan, nullptr, tokens, targets, mask, 2, 4, nullptr,
        false);
    CHECK(got == analytic_step_ledger(cfg, &plan, lay, 2, 4, 0, false));
  }
}

TEST_CASE("instrumented pre-training step equals the analytic ledger") {
  ModelConfig cfg = tiny_cfg();
  auto model = build_model<float>(cfg, 9);
  model.set_trainable(true);
  auto tokens = random_tokens(8, cfg.vocab_size, 5);
  auto targets = random_tokens(8, cfg.vocab_size, 6);
  std::vector<uint8_t> mask(8, 1);

  AdapterLayout none;
  none.on.assign((size_t)cfg.n_layers, {});
  flops::Ledger got = instrumented_step<float>(
      model, nullptr, nullptr, nullptr, tokens, targets, mask, 2, 4, nullptr,
      true);
  flops::Ledger want =
      analytic_step_ledger(cfg, nullptr, none, 2, 4, 0, true);
  CHECK(got == want);
  // weight gradients: 8Td^2 + 6Tdf per layer, 2TdV for the head
  CHECK(want.at(0, flops::Path::base_bwd_weight) == 8704);
  CHECK(want.at(flops::Ledger::kNonLayer, flops::Path::base_bwd_weight) ==
        2048);
  CHECK(want.path_total(flops::Path::lora_fwd) == 0);
}

TEST_CASE("raising any sparsity never raises analytic step FLOPs") {
  ModelConfig cfg = tiny_cfg();
  AdapterLayout lay = full_layout(cfg, 2);
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    SparsityPlan plan;
    plan.layers.assign(2, LayerSparsity{});
    for (auto& l : plan.layers) {
      l.ffn = uni(rng);
      l.qk = uni(rng);
      l.vo = uni(rng);
    }
    plan.source = trial % 2 ? ScoreSource::oracle : ScoreSource::svd;
    plan.estimator_rank = 2;
    const int64_t base = analytic_step_flops(cfg, &plan, lay, 2, 4, 3, false);
    SparsityPlan bumped = plan;
    auto& e = bumped.layers[(size_t)(trial % 2)];
    double* field = trial % 3 == 0 ? &e.ffn : trial % 3 == 1 ? &e.qk : &e.vo;
    *field = std::min(1.0, *field + uni(rng) * (1.0 - *field));
    const int64_t after =
        analytic_step_flops(cfg, &bumped, lay, 2, 4, 3, false);
    CHECK(after <= base);
  }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

namespace {

ModelConfig loop_cfg() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ffn = 32;
  cfg.vocab_size = kByteVocab;
  cfg.max_seq_len = 32;
  return cfg;
}

struct LoopSetup {
  Model<float> model;
  LoraBank<float> lora;
  std::vector<DatasetRecord> records;
  std::vector<Batch> eval;
};

LoopSetup make_setup() {
  LoopSetup s{build_model<float>(loop_cfg(), 42), {}, {}, {}};
  s.lora = attach_lora(s.model, parse_proj_targets("q,k,v,o,g,u,d"), 2, 4.0f,
                       7);
  KvTaskConfig kv;
  s.records = gen_kv_records(kv, 24, 11);
  s.eval = build_eval_batches(gen_kv_records(kv, 8, 99), 4, 28);
  return s;
}

RunConfig base_rc(int64_t steps) {
  RunConfig rc;
  rc.steps = steps;
  rc.batch = 4;
  rc.seq_len = 28;
  rc.optim.lr = 1e-3;
  rc.plan.layers.assign(2, LayerSparsity{});
  rc.plan.dense_warmup_fraction = 0.0;
  return rc;
}

std::vector<uint8_t> adapter_bytes(const LoraBank<float>& bank) {
  std::vector<uint8_t> bytes;
  for (const auto* ad : const_cast<LoraBank<float>&>(bank).all()) {
    for (const Tensor<float>* t : {&ad->a, &ad->b}) {
      const auto* p = reinterpret_cast<const uint8_t*>(t->data());
      bytes.insert(bytes.end(), p, p + t->numel() * sizeof(float));
    }
  }
  return bytes;
}

}  // namespace

TEST_CASE("training runs are bitwise deterministic") {
  auto run = [&] {
    LoopSetup s = make_setup();
    Batcher data(s.records, 4, 28, 5);
    RunConfig rc = base_rc(6);
    RunReport rep =
        train_loop<float>(s.model, &s.lora, rc, data, &s.eval, nullptr);
    return std::make_pair(rep, adapter_bytes(s.lora));
  };
  auto [r1, a1] = run();
  auto [r2, a2] = run();
  REQUIRE(r1.steps.size() == r2.steps.size());
  for (size_t i = 0; i < r1.steps.size(); ++i) {
    CHECK(r1.steps[i].loss == r2.steps[i].loss);
    CHECK(r1.steps[i].lr == r2.steps[i].lr);
    CHECK(r1.steps[i].flops == r2.steps[i].flops);
    CHECK(r1.steps[i].dense == r2.steps[i].dense);
  }
  CHECK(a1 == a2);
  CHECK(r1.final_eval_loss == r2.final_eval_loss);
  CHECK(metrics_without_wall(r1.metrics_jsonl()) ==
        metrics_without_wall(r2.metrics_jsonl()));
}

TEST_CASE("all-zero sparsity is bitwise identical to the dense engine") {
  auto run = [&](bool zero_sparsity_plan) {
    LoopSetup s = make_setup();
    Batcher data(s.records, 4, 28, 5);
    RunConfig rc = base_rc(6);
    if (zero_sparsity_plan) {
      // fully wired sparse run configuration, all ratios zero
      rc.plan.source = ScoreSource::svd;
      rc.plan.estimator_rank = 4;
      rc.plan.split_mode = TokenSplitMode::output_dense;
      rc.plan.dense_warmup_fraction = 0.05;
      rc.plan.layers.assign(2, LayerSparsity{0.0, 0.0, 0.0});
    }
    RunReport rep =
        train_loop<float>(s.model, &s.lora, rc, data, &s.eval, nullptr);
    return std::make_pair(rep, adapter_bytes(s.lora));
  };
  auto [dense, adense] = run(false);
  auto [zero, azero] = run(true);
  REQUIRE(dense.steps.size() == zero.steps.size());
  for (size_t i = 0; i < dense.steps.size(); ++i) {
    CHECK(dense.steps[i].loss == zero.steps[i].loss);
    CHECK(dense.steps[i].flops == zero.steps[i].flops);
  }
  CHECK(adense == azero);
  CHECK(dense.final_eval_loss == zero.final_eval_loss);
}

TEST_CASE("sparse run: dense warmup flag and per-step flops match analytic") {
  LoopSetup s = make_setup();
  Batcher data(s.records, 4, 28, 5);
  RunConfig rc = base_rc(10);
  rc.plan.layers.assign(2, LayerSparsity{0.5, 0.5, 0.5});
  rc.plan.source = ScoreSource::oracle;
  rc.plan.split_mode = TokenSplitMode::output_dense;
  rc.plan.dense_warmup_fraction = 0.1;  // step 0 dense
  RunReport rep =
      train_loop<float>(s.model, &s.lora, rc, data, &s.eval, nullptr);
  REQUIRE(rep.steps.size() == 10);
  CHECK(rep.steps[0].dense);
  for (size_t i = 1; i < 10; ++i) CHECK(!rep.steps[i].dense);

  AdapterLayout lay = AdapterLayout::of(s.lora, 2);
  const int64_t dense_flops =
      analytic_step_flops(loop_cfg(), nullptr, lay, 4, 28, 0, false);
  // every kv record carries value_len = 2 output tokens -> 8 dense rows
  const int64_t sparse_flops =
      analytic_step_flops(loop_cfg(), &rc.plan, lay, 4, 28, 8, false);
  CHECK(rep.steps[0].flops == dense_flops);
  for (size_t i = 1; i < 10; ++i) CHECK(rep.steps[i].flops == sparse_flops);
  CHECK(sparse_flops < dense_flops);
  CHECK(rep.total_flops == dense_flops + 9 * sparse_flops);
  // sparse-step records carry estimator work in the path totals
  CHECK(rep.path_totals[(size_t)flops::Path::estimator] > 0);
}

TEST_CASE("divergence aborts with the step number") {
  LoopSetup s = make_setup();
  Batcher data(s.records, 4, 28, 5);
  RunConfig rc = base_rc(6);
  rc.optim.lr = 1e9;
  CHECK_THROWS_WITH_AS(
      (void)train_loop<float>(s.model, &s.lora, rc, data, &s.eval, nullptr),
      doctest::Contains("diverged at step"), Error);
}

TEST_CASE("iso-FLOP budget stops the run when cumulative work reaches it") {
  LoopSetup s = make_setup();
  Batcher data(s.records, 4, 28, 5);
  RunConfig rc = base_rc(100);
  AdapterLayout lay = AdapterLayout::of(s.lora, 2);
  const int64_t F =
      analytic_step_flops(loop_cfg(), nullptr, lay, 4, 28, 0, false);
  rc.flop_budget = (int64_t)(2.5 * (double)F);
  RunReport rep =
      train_loop<float>(s.model, &s.lora, rc, data, &s.eval, nullptr);
  CHECK(rep.steps_run == 3);  // 2F < budget <= 3F
  CHECK(rep.stopped_by_budget);
  CHECK(rep.total_flops == 3 * F);
}

TEST_CASE("metrics log has one record per step plus a summary") {
  LoopSetup s = make_setup();
  Batcher data(s.records, 4, 28, 5);
  RunConfig rc = base_rc(4);
  RunReport rep =
      train_loop<float>(s.model, &s.lora, rc, data, &s.eval, nullptr);
  const std::string jsonl = rep.metrics_jsonl();
  std::vector<nlohmann::json> lines;
  std::istringstream in(jsonl);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(nlohmann::json::parse(line));
  REQUIRE(lines.size() == 5);
  for (int i = 0; i < 4; ++i) {
    CHECK(lines[(size_t)i]["step"] == i);
    CHECK(lines[(size_t)i].contains("loss"));
    CHECK(lines[(size_t)i].contains("lr"));
    CHECK(lines[(size_t)i].contains("dense"));
    CHECK(lines[(size_t)i].contains("flops"));
    CHECK(lines[(size_t)i].contains("wall_ms"));
  }
  CHECK(lines[4]["summary"] == true);
  CHECK(lines[4]["total_flops"] == rep.total_flops);
  CHECK(lines[4]["steps_run"] == 4);
  // the canonical form drops every wall field but keeps the rest
  const std::string canon = metrics_without_wall(jsonl);
  CHECK(canon.find("wall") == std::string::npos);
  CHECK(canon.find("loss") != std::string::npos);
}

TEST_CASE("evaluation is the loss-count-weighted mean over batches") {
  LoopSetup s = make_setup();
  double weighted = 0;
  int64_t count = 0;
  for (const auto& b : s.eval) {
    Tape<float> tape;
    ForwardCtx<float> ctx;
    ctx.tape = &tape;
    ctx.lora = &s.lora;
    Tensor<float> logits =
        forward(s.model, b.tokens, b.batch, b.seq_len, ctx);
    Tensor<float> loss =
        ops::cross_entropy_masked(&tape, logits, b.targets, b.loss_mask);
    weighted += double(loss.data()[0]) * (double)b.loss_count();
    count += b.loss_count();
  }
  const double direct = weighted / (double)count;
  const double got = evaluate<float>(s.model, &s.lora, s.eval);
  CHECK(got == doctest::Approx(direct).epsilon(1e-12));

  // an all-zero plan evaluates bit-identically to the dense path
  SparsityPlan zero;
  zero.layers.assign(2, LayerSparsity{});
  CHECK(evaluate<float>(s.model, &s.lora, s.eval, &zero) == got);
}

TEST_CASE("full-rank estimator agreement diagnostic reports exactly 1") {
  // double precision + full rank -> reconstruction error ~1e-14 cannot flip
  // any score ordering, so estimator masks equal oracle masks exactly.
  ModelConfig cfg = loop_cfg();
  auto model = build_model<double>(cfg, 42);
  auto lora =
      attach_lora(model, parse_proj_targets("q,k,v,o,g,u,d"), 2, 4.0, 7);
  KvTaskConfig kv;
  auto records = gen_kv_records(kv, 24, 11);
  Batcher data(records, 4, 28, 5);
  RunConfig rc = base_rc(4);
  rc.plan.layers.assign(2, LayerSparsity{0.5, 0.5, 0.5});
  rc.plan.source = ScoreSource::svd;
  rc.plan.estimator_rank = 16;  // == d_model: exact reconstruction
  rc.mask_agreement_every = 1;
  auto bank = build_estimator_bank(model, 16);
  RunReport rep = train_loop<double>(model, &lora, rc, data, nullptr, &bank);
  CHECK(rep.mask_agreement_mean == 1.0);
}

TEST_CASE("pre-training optimizes base weights and shrinks the loss") {
  ModelConfig cfg = loop_cfg();
  auto model = build_model<float>(cfg, 21);
  KvTaskConfig kv;
  const std::string corpus = gen_pretrain_corpus(kv, 200, 13);
  LmWindowSource data(corpus, 4, 28, 3);
  RunConfig rc;
  rc.steps = 30;
  rc.batch = 4;
  rc.seq_len = 28;
  rc.train_base = true;
  rc.optim.lr = 3e-3;
  rc.plan.layers.assign(2, LayerSparsity{});
  RunReport rep = train_loop<float>(model, nullptr, rc, data, nullptr, nullptr);
  REQUIRE(rep.steps.size() == 30);
  // char-level loss should fall well below its ln(vocab) start
  CHECK(rep.steps[0].loss > 4.0);
  double tail = 0;
  for (int i = 25; i < 30; ++i) tail += rep.steps[(size_t)i].loss;
  CHECK(tail / 5.0 < rep.steps[0].loss * 0.8);
  // weights actually moved (PAD's row legitimately may not: it never occurs
  // inside an LM window, so its gradient is exactly zero)
  auto fresh = build_model<float>(cfg, 21);
  double moved = 0;
  for (int64_t i = 0; i < model.embed.numel(); ++i)
    moved += std::abs((double)model.embed.data()[i] -
                      (double)fresh.embed.data()[i]);
  CHECK(moved > 0.0);
}
