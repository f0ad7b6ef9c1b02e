#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "slora/config.h"
#include "slora/sensitivity.h"

using namespace slora;
using slora::Error;

namespace {

// 2 layers, d 8, heads 2, ffn 12, vocab 16: the geometry whose analytic
// step FLOPs are derived by hand below.
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

ModelConfig small_cfg() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ffn = 32;
  cfg.vocab_size = kByteVocab;
  cfg.max_seq_len = 32;
  return cfg;
}

FlopGeometry tiny_geom() {
  FlopGeometry g;
  g.cfg = tiny_cfg();
  g.adapters.on.assign(2, std::array<bool, kNumProj>{});
  g.batch = 2;
  g.seq_len = 4;
  g.out_rows = 0;
  return g;
}

// Metadata carrier for allocation tests: random metrics score without
// matmuls, so savings come purely from the skipped main-branch work.
SparsityPlan random_metric_base() {
  SparsityPlan base;
  base.ffn_metric = Metric::l2;  // overwritten below
  base.ffn_metric = base.qk_metric = base.vo_metric = Metric::random;
  base.source = ScoreSource::oracle;
  base.split_mode = TokenSplitMode::none;
  return base;
}

SensitivityCurve curve(int64_t layer, const std::string& group,
                       std::vector<double> ratios,
                       std::vector<double> loss) {
  SensitivityCurve c;
  c.layer = layer;
  c.group = group;
  c.ratios = std::move(ratios);
  c.eval_loss = std::move(loss);
  return c;
}

std::vector<Batch> small_eval_batches(uint64_t seed) {
  KvTaskConfig kv;
  return build_eval_batches(gen_kv_records(kv, 8, seed), 4, 28);
}

}  // namespace

// ---------------------------------------------------------------------------
// greedy allocation against hand-derived FLOP arithmetic
//
// tiny geometry, batch 2 x seq 4 (T = 8), no adapters, random metrics:
//   dense step      = 2*(9728 + 10752) + 4096 (head)          = 45056
//   ffn 0 -> 50%   saves 6*T*d*(12-6)  forward and backward  = 4608/layer
//   ffn 50 -> 75%  saves 6*T*d*(6-3)   forward and backward  = 2304/layer
//   qkvo 0 -> 50%  saves (2 + 1 + 1)*2*T*d*(8-4) fwd+bwd     = 4096/layer
// ---------------------------------------------------------------------------

TEST_CASE("dense step FLOPs of the allocation geometry") {
  FlopGeometry g = tiny_geom();
  CHECK(analytic_step_flops(g.cfg, nullptr, g.adapters, g.batch, g.seq_len,
                            g.out_rows, false) == 45056);
}

TEST_CASE("allocation: budget 1.0 returns the all-dense plan") {
  auto curves = std::vector<SensitivityCurve>{
      curve(0, "ffn", {0.0, 0.5}, {1.0, 1.1}),
      curve(1, "ffn", {0.0, 0.5}, {1.0, 2.0}),
  };
  SparsityPlan p =
      allocate_sparsity(curves, 1.0, tiny_geom(), random_metric_base());
  CHECK(!p.any());
  CHECK(p.layers.size() == 2);
  CHECK(p.source == ScoreSource::oracle);
  CHECK(p.split_mode == TokenSplitMode::none);
}

TEST_CASE("allocation raises the cheapest degradation-per-FLOP first") {
  // layer 1 degrades 10x faster: the greedy exhausts layer 0 before
  // touching it.  Cost order (degradation / saved):
  //   L0 0->.5   0.1/4608    -> 40448 (0.8977 of dense)
  //   L0 .5->.75 0.2/2304    -> 38144 (0.8466)
  //   L1 0->.5   1.0/4608    -> 33536 (0.7443)
  //   L1 .5->.75 2.0/2304    -> 31232 (0.6932)
  auto curves = std::vector<SensitivityCurve>{
      curve(0, "ffn", {0.0, 0.5, 0.75}, {1.0, 1.1, 1.3}),
      curve(1, "ffn", {0.0, 0.5, 0.75}, {1.0, 2.0, 4.0}),
  };
  FlopGeometry g = tiny_geom();
  SparsityPlan base = random_metric_base();

  SUBCASE("one bump") {
    SparsityPlan p = allocate_sparsity(curves, 0.90, g, base);
    CHECK(p.layers[0].ffn == 0.5);
    CHECK(p.layers[1].ffn == 0.0);
    CHECK(analytic_step_flops(g.cfg, &p, g.adapters, g.batch, g.seq_len,
                              g.out_rows, false) == 40448);
  }
  SUBCASE("three bumps") {
    SparsityPlan p = allocate_sparsity(curves, 0.75, g, base);
    CHECK(p.layers[0].ffn == 0.75);
    CHECK(p.layers[1].ffn == 0.5);
    CHECK(analytic_step_flops(g.cfg, &p, g.adapters, g.batch, g.seq_len,
                              g.out_rows, false) == 33536);
  }
  SUBCASE("all four bumps") {
    SparsityPlan p = allocate_sparsity(curves, 0.70, g, base);
    CHECK(p.layers[0].ffn == 0.75);
    CHECK(p.layers[1].ffn == 0.75);
    CHECK(analytic_step_flops(g.cfg, &p, g.adapters, g.batch, g.seq_len,
                              g.out_rows, false) == 31232);
  }
  SUBCASE("infeasible budgets report the reachable floor") {
    CHECK_THROWS_WITH_AS(allocate_sparsity(curves, 0.50, g, base),
                         doctest::Contains("0.69"), Error);
  }
}

TEST_CASE("allocation: equal costs break toward the lower layer") {
  auto curves = std::vector<SensitivityCurve>{
      curve(1, "ffn", {0.0, 0.5}, {1.0, 1.1}),
      curve(0, "ffn", {0.0, 0.5}, {1.0, 1.1}),
  };
  SparsityPlan p =
      allocate_sparsity(curves, 0.90, tiny_geom(), random_metric_base());
  CHECK(p.layers[0].ffn == 0.5);
  CHECK(p.layers[1].ffn == 0.0);
}

TEST_CASE("allocation: qkvo curves raise qk and vo together") {
  auto curves = std::vector<SensitivityCurve>{
      curve(0, "qkvo", {0.0, 0.5}, {1.0, 1.1}),
      curve(1, "qkvo", {0.0, 0.5}, {1.0, 2.0}),
  };
  // one qkvo bump: 45056 - 4096 = 40960 = 0.9091 of dense
  SparsityPlan p =
      allocate_sparsity(curves, 0.92, tiny_geom(), random_metric_base());
  CHECK(p.layers[0].qk == 0.5);
  CHECK(p.layers[0].vo == 0.5);
  CHECK(p.layers[0].ffn == 0.0);
  CHECK(p.layers[1].qk == 0.0);
  CHECK(p.layers[1].vo == 0.0);
}

TEST_CASE("allocation weighs ffn and qkvo curves against each other") {
  // same layer, qkvo move is cheaper per FLOP: 0.05/4096 < 0.1/4608
  auto curves = std::vector<SensitivityCurve>{
      curve(0, "ffn", {0.0, 0.5}, {1.0, 1.1}),
      curve(0, "qkvo", {0.0, 0.5}, {1.0, 1.05}),
  };
  SparsityPlan p =
      allocate_sparsity(curves, 0.91, tiny_geom(), random_metric_base());
  CHECK(p.layers[0].qk == 0.5);
  CHECK(p.layers[0].vo == 0.5);
  CHECK(p.layers[0].ffn == 0.0);
}

TEST_CASE("allocation validates its inputs") {
  auto good = std::vector<SensitivityCurve>{
      curve(0, "ffn", {0.0, 0.5}, {1.0, 1.1})};
  FlopGeometry g = tiny_geom();
  SparsityPlan base = random_metric_base();

  CHECK_THROWS_WITH_AS(allocate_sparsity(good, 0.0, g, base),
                       doctest::Contains("budget"), Error);
  CHECK_THROWS_WITH_AS(allocate_sparsity(good, 1.5, g, base),
                       doctest::Contains("budget"), Error);
  CHECK_THROWS_WITH_AS(allocate_sparsity({}, 0.9, g, base),
                       doctest::Contains("curve"), Error);

  auto descending = std::vector<SensitivityCurve>{
      curve(0, "ffn", {0.5, 0.0}, {1.0, 1.1})};
  CHECK_THROWS_WITH_AS(allocate_sparsity(descending, 0.9, g, base),
                       doctest::Contains("ascending"), Error);

  auto no_anchor = std::vector<SensitivityCurve>{
      curve(0, "ffn", {0.25, 0.5}, {1.0, 1.1})};
  CHECK_THROWS_WITH_AS(allocate_sparsity(no_anchor, 0.9, g, base),
                       doctest::Contains("0"), Error);

  auto bad_group = std::vector<SensitivityCurve>{
      curve(0, "fen", {0.0, 0.5}, {1.0, 1.1})};
  CHECK_THROWS_WITH_AS(allocate_sparsity(bad_group, 0.9, g, base),
                       doctest::Contains("fen"), Error);

  auto mismatched = std::vector<SensitivityCurve>{
      curve(0, "ffn", {0.0, 0.5}, {1.0})};
  CHECK_THROWS_WITH_AS(allocate_sparsity(mismatched, 0.9, g, base),
                       doctest::Contains("curve"), Error);

  auto dup = std::vector<SensitivityCurve>{
      curve(0, "ffn", {0.0, 0.5}, {1.0, 1.1}),
      curve(0, "ffn", {0.0, 0.5}, {1.0, 1.1})};
  CHECK_THROWS_WITH_AS(allocate_sparsity(dup, 0.9, g, base),
                       doctest::Contains("twice"), Error);

  auto out_of_range = std::vector<SensitivityCurve>{
      curve(7, "ffn", {0.0, 0.5}, {1.0, 1.1})};
  CHECK_THROWS_WITH_AS(allocate_sparsity(out_of_range, 0.9, g, base),
                       doctest::Contains("7"), Error);
}

// ---------------------------------------------------------------------------
// layer sensitivity sweep
// ---------------------------------------------------------------------------

TEST_CASE("sensitivity sweep anchors at the dense evaluation") {
  auto model = build_model<float>(small_cfg(), 42);
  auto lora = attach_lora(model, parse_proj_targets("q,v"), 2, 4.0f, 7);
  auto eval = small_eval_batches(99);
  REQUIRE(!eval.empty());

  SparsityPlan base;  // defaults; layer entries ignored by the sweep
  auto curves = sweep_layer_sensitivity(model, &lora, eval, {0.0, 0.5},
                                        "ffn", base);
  REQUIRE(curves.size() == 2);
  const double dense = evaluate<float>(model, &lora, eval);
  for (size_t l = 0; l < curves.size(); ++l) {
    CHECK(curves[l].layer == (int64_t)l);
    CHECK(curves[l].group == "ffn");
    REQUIRE(curves[l].ratios == std::vector<double>{0.0, 0.5});
    REQUIRE(curves[l].eval_loss.size() == 2);
    // ratio 0 leaves the plan inactive: bitwise the dense evaluation
    CHECK(curves[l].eval_loss[0] == dense);
    CHECK(std::isfinite(curves[l].eval_loss[1]));
  }

  // deterministic: a second sweep reproduces every number bitwise
  auto again = sweep_layer_sensitivity(model, &lora, eval, {0.0, 0.5},
                                       "ffn", base);
  for (size_t l = 0; l < curves.size(); ++l)
    CHECK(again[l].eval_loss == curves[l].eval_loss);
}

TEST_CASE("sensitivity sweep: qkvo group and input validation") {
  auto model = build_model<float>(small_cfg(), 42);
  auto eval = small_eval_batches(99);

  SparsityPlan base;
  auto curves = sweep_layer_sensitivity<float>(model, nullptr, eval,
                                               {0.0, 0.9}, "qkvo", base);
  REQUIRE(curves.size() == 2);
  CHECK(curves[0].group == "qkvo");
  // 90% qkvo on one layer should actually change the evaluation
  CHECK(curves[0].eval_loss[1] != curves[0].eval_loss[0]);

  CHECK_THROWS_WITH_AS(sweep_layer_sensitivity<float>(
                           model, nullptr, eval, {0.5, 0.2}, "ffn", base),
                       doctest::Contains("ascending"), Error);
  CHECK_THROWS_WITH_AS(sweep_layer_sensitivity<float>(
                           model, nullptr, eval, {0.0, 1.5}, "ffn", base),
                       doctest::Contains("1.5"), Error);
  CHECK_THROWS_WITH_AS(sweep_layer_sensitivity<float>(
                           model, nullptr, eval, {}, "ffn", base),
                       doctest::Contains("ratio"), Error);
  CHECK_THROWS_WITH_AS(sweep_layer_sensitivity<float>(
                           model, nullptr, eval, {0.0, 0.5}, "attn", base),
                       doctest::Contains("attn"), Error);
}

TEST_CASE("sensitivity sweep ignores the base plan's score source") {
  // svd source in the metadata carrier must not require a bank: the sweep
  // always scores with oracle criteria
  auto model = build_model<float>(small_cfg(), 42);
  auto eval = small_eval_batches(99);
  SparsityPlan base;
  base.source = ScoreSource::svd;
  base.estimator_rank = 999;
  auto curves = sweep_layer_sensitivity<float>(model, nullptr, eval,
                                               {0.0, 0.5}, "ffn", base);
  CHECK(curves.size() == 2);
  CHECK(std::isfinite(curves[0].eval_loss[1]));
}

// ---------------------------------------------------------------------------
// curve CSV round-trip
// ---------------------------------------------------------------------------

TEST_CASE("sensitivity CSV round-trips bitwise") {
  auto curves = std::vector<SensitivityCurve>{
      curve(0, "ffn", {0.0, 0.5}, {1.25, 0.1 + 0.2}),
      curve(1, "qkvo", {0.0, 0.25, 0.5}, {1.0, 4.0 / 3.0, 2.0}),
  };
  const std::string csv = sensitivity_csv(curves);
  CHECK(csv.substr(0, 32) == "group,layer,ratio,eval_loss\nffn,");
  // header + one row per (curve, ratio)
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 + 3);

  auto back = parse_sensitivity_csv(csv);
  REQUIRE(back.size() == curves.size());
  for (size_t i = 0; i < curves.size(); ++i) {
    CHECK(back[i].layer == curves[i].layer);
    CHECK(back[i].group == curves[i].group);
    CHECK(back[i].ratios == curves[i].ratios);
    CHECK(back[i].eval_loss == curves[i].eval_loss);
  }

  CHECK_THROWS_WITH_AS(parse_sensitivity_csv("bogus header\n1,2,3,4\n"),
                       doctest::Contains("header"), Error);
  CHECK_THROWS_WITH_AS(
      parse_sensitivity_csv("group,layer,ratio,eval_loss\nffn,0,0.0\n"),
      doctest::Contains("line 2"), Error);
}

// ---------------------------------------------------------------------------
// estimator-vs-oracle mask agreement
// ---------------------------------------------------------------------------

TEST_CASE("mask agreement: full rank matches oracle exactly, fractions grow "
          "with rank") {
  ModelConfig cfg = small_cfg();
  auto model = build_model<double>(cfg, 31);
  auto eval = small_eval_batches(55);
  REQUIRE(eval.size() >= 2);

  SparsityPlan plan;
  plan.layers.assign(2, LayerSparsity{0.5, 0.5, 0.5});
  auto bank = build_estimator_bank<double>(model, cfg.d_model);

  auto rep = compare_masks<double>(model, nullptr, bank, plan, eval,
                                   {2, cfg.d_model});
  REQUIRE(rep.ranks == std::vector<int64_t>{2, cfg.d_model});
  REQUIRE(rep.n_layers == 2);

  for (int64_t l = 0; l < 2; ++l)
    for (int g = 0; g < 3; ++g) {
      // full rank reproduces the oracle masks exactly on every batch
      CHECK(rep.mean(1, l, (MaskGroup)g) == 1.0);
      CHECK(rep.median(1, l, (MaskGroup)g) == 1.0);
      const double low = rep.mean(0, l, (MaskGroup)g);
      CHECK(low >= 0.0);
      CHECK(low <= 1.0);
    }

  REQUIRE(rep.estimator_fraction.size() == 2);
  CHECK(rep.estimator_fraction[0] > 0.0);
  CHECK(rep.estimator_fraction[0] < rep.estimator_fraction[1]);
  CHECK(rep.estimator_fraction[1] < 1.0);

  // deterministic
  auto again = compare_masks<double>(model, nullptr, bank, plan, eval,
                                     {2, cfg.d_model});
  CHECK(again.overlap == rep.overlap);
}

TEST_CASE("mask agreement: groups the plan leaves dense have no entries") {
  ModelConfig cfg = small_cfg();
  auto model = build_model<double>(cfg, 31);
  auto eval = small_eval_batches(55);

  SparsityPlan plan;
  plan.layers.assign(2, LayerSparsity{});
  plan.layers[0].ffn = 0.5;
  plan.layers[1].ffn = 0.5;
  auto bank = build_estimator_bank<double>(model, 4);

  auto rep = compare_masks<double>(model, nullptr, bank, plan, eval, {4});
  CHECK(std::isfinite(rep.mean(0, 0, MaskGroup::ffn)));
  CHECK(std::isnan(rep.mean(0, 0, MaskGroup::qk)));
  CHECK(std::isnan(rep.median(0, 1, MaskGroup::vo)));

  // requested rank above the bank's is an error naming the rank
  CHECK_THROWS_WITH_AS(
      compare_masks<double>(model, nullptr, bank, plan, eval, {8}),
      doctest::Contains("8"), Error);
  CHECK_THROWS_WITH_AS(
      compare_masks<double>(model, nullptr, bank, plan, eval, {}),
      doctest::Contains("rank"), Error);
}

// ---------------------------------------------------------------------------
// attention-map fidelity
// ---------------------------------------------------------------------------

TEST_CASE("attention fidelity reports one median per selection metric") {
  ModelConfig cfg = small_cfg();
  auto model = build_model<float>(cfg, 42);
  auto eval = small_eval_batches(99);

  auto rep = attn_fidelity<float>(model, nullptr, eval, 0.5,
                                  Granularity::rope_pair, 123);
  CHECK(rep.pairs == cfg.n_layers * cfg.n_heads);
  CHECK(rep.qknorm >= 0.0);
  CHECK(rep.l2 >= 0.0);
  CHECK(rep.random > 0.0);
  CHECK(std::isfinite(rep.qknorm + rep.l2 + rep.random));

  // deterministic across calls (same random-mask seed)
  auto again = attn_fidelity<float>(model, nullptr, eval, 0.5,
                                    Granularity::rope_pair, 123);
  CHECK(again.qknorm == rep.qknorm);
  CHECK(again.l2 == rep.l2);
  CHECK(again.random == rep.random);

  // zero sparsity: the sparse pass is the dense pass, all errors vanish
  auto zero = attn_fidelity<float>(model, nullptr, eval, 0.0,
                                   Granularity::rope_pair, 123);
  CHECK(zero.qknorm == 0.0);
  CHECK(zero.l2 == 0.0);
  CHECK(zero.random == 0.0);

  CHECK_THROWS_WITH_AS(attn_fidelity<float>(model, nullptr, eval, 1.5,
                                            Granularity::rope_pair, 1),
                       doctest::Contains("1.5"), Error);
}
