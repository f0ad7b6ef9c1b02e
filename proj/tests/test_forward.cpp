#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "slora/forward.h"

using namespace slora;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ffn = 32;
  cfg.vocab_size = 40;
  cfg.max_seq_len = 12;
  return cfg;
}

std::vector<int32_t> random_tokens(int64_t n, int64_t vocab, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<int32_t> t((size_t)n);
  for (auto& v : t) v = int32_t(rng() % (uint64_t)vocab);
  return t;
}

SparsityPlan uniform_plan(const ModelConfig& cfg, double ffn, double qk,
                          double vo, ScoreSource src) {
  SparsityPlan plan;
  plan.layers.assign((size_t)cfg.n_layers, LayerSparsity{ffn, qk, vo});
  plan.source = src;
  return plan;
}

template <typename S>
bool bitwise_equal(const Tensor<S>& a, const Tensor<S>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), sizeof(S) * (size_t)a.numel()) == 0;
}

template <typename S>
bool value_equal(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("dense forward: shape, finiteness, determinism") {
  ModelConfig cfg = tiny_cfg();
  auto model = build_model<float>(cfg, 3);
  auto tokens = random_tokens(12, cfg.vocab_size, 5);

  ForwardCtx<float> ctx;
  Tensor<float> a = forward(model, tokens, 2, 6, ctx);
  REQUIRE(a.dim(0) == 12);
  REQUIRE(a.dim(1) == cfg.vocab_size);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(std::isfinite(a.data()[i]));

  ForwardCtx<float> ctx2;
  Tensor<float> b = forward(model, tokens, 2, 6, ctx2);
  CHECK(bitwise_equal(a, b));

  CHECK_THROWS(forward(model, tokens, 2, 5, ctx));   // token count mismatch
  auto long_tokens = random_tokens(2 * 13, cfg.vocab_size, 5);
  CHECK_THROWS(forward(model, long_tokens, 2, 13, ctx));  // seq > max
}

TEST_CASE("an all-zero sparsity plan is the dense forward, bit for bit") {
  ModelConfig cfg = tiny_cfg();
  auto model = build_model<float>(cfg, 3);
  auto tokens = random_tokens(12, cfg.vocab_size, 6);

  ForwardCtx<float> dense_ctx;
  Tensor<float> dense = forward(model, tokens, 2, 6, dense_ctx);

  SparsityPlan plan = uniform_plan(cfg, 0.0, 0.0, 0.0, ScoreSource::svd);
  ForwardCtx<float> ctx;
  ctx.plan = &plan;  // svd source, but no bank needed: nothing is sparse
  Tensor<float> sparse = forward(model, tokens, 2, 6, ctx);
  CHECK(bitwise_equal(dense, sparse));
}

TEST_CASE("vanishing sparsity produces full masks and the dense values") {
  ModelConfig cfg = tiny_cfg();
  auto model = build_model<float>(cfg, 3);
  auto tokens = random_tokens(12, cfg.vocab_size, 7);

  ForwardCtx<float> dense_ctx;
  Tensor<float> dense = forward(model, tokens, 2, 6, dense_ctx);

  SparsityPlan plan = uniform_plan(cfg, 1e-12, 1e-12, 1e-12,
                                   ScoreSource::oracle);
  flops::Ledger led(cfg.n_layers);
  ForwardCtx<float> ctx;
  ctx.plan = &plan;
  ctx.ledger = &led;
  ctx.record_masks = true;
  Tensor<float> sparse = forward(model, tokens, 2, 6, ctx);

  CHECK(value_equal(dense, sparse));
  REQUIRE(ctx.masks_used.size() == 2);
  CHECK(ctx.masks_used[0][0].full());
  CHECK(ctx.masks_used[0][1].full());
  CHECK(ctx.masks_used[0][2].full());
  // scoring ran even though nothing was pruned
  CHECK(led.path_total(flops::Path::estimator) > 0);
}

TEST_CASE("plan validation catches bad configurations") {
  ModelConfig cfg = tiny_cfg();
  auto model = build_model<float>(cfg, 3);
  auto tokens = random_tokens(12, cfg.vocab_size, 8);

  SparsityPlan plan = uniform_plan(cfg, 0.5, 0.0, 0.0, ScoreSource::svd);
  ForwardCtx<float> ctx;
  ctx.plan = &plan;
  CHECK_THROWS_WITH_AS((void)forward(model, tokens, 2, 6, ctx),
                       doctest::Contains("estimator bank"), Error);

  auto bank = build_estimator_bank<float>(model, 4);
  plan.estimator_rank = 8;  // bank was built at rank 4
  ctx.bank = &bank;
  CHECK_THROWS_WITH_AS((void)forward(model, tokens, 2, 6, ctx),
                       doctest::Contains("rank"), Error);

  plan.estimator_rank = 4;
  CHECK_NOTHROW((void)forward(model, tokens, 2, 6, ctx));

  SparsityPlan short_plan;
  short_plan.layers.assign(1, LayerSparsity{0.5, 0, 0});
  ctx.plan = &short_plan;
  CHECK_THROWS((void)forward(model, tokens, 2, 6, ctx));

  SparsityPlan bad_gran = uniform_plan(cfg, 0, 0.5, 0, ScoreSource::oracle);
  bad_gran.qk_granularity = Granularity::channel;
  ctx.plan = &bad_gran;
  CHECK_THROWS_WITH_AS((void)forward(model, tokens, 2, 6, ctx),
                       doctest::Contains("granularity"), Error);
}

TEST_CASE("fresh adapters leave the forward unchanged") {
  ModelConfig cfg = tiny_cfg();
  auto model = build_model<float>(cfg, 3);
  auto tokens = random_tokens(12, cfg.vocab_size, 9);

  ForwardCtx<float> dense_ctx;
  Tensor<float> dense = forward(model, tokens, 2, 6, dense_ctx);

  auto bank = attach_lora<float>(model, parse_proj_targets("qkvogud"), 2,
                                 4.0f, 17);
  ForwardCtx<float> ctx;
  ctx.lora = &bank;
  Tensor<float> with_lora = forward(model, tokens, 2, 6, ctx);
  CHECK(value_equal(dense, with_lora));
}

TEST_CASE("recorded masks reflect the per-layer plan") {
  ModelConfig cfg = tiny_cfg();
  auto model = build_model<float>(cfg, 3);
  auto tokens = random_tokens(12, cfg.vocab_size, 10);

  SparsityPlan plan;
  plan.layers.assign(2, LayerSparsity{});
  plan.layers[1] = LayerSparsity{0.5, 0.5, 0.25};
  plan.source = ScoreSource::oracle;
  flops::Ledger led(cfg.n_layers);
  ForwardCtx<float> ctx;
  ctx.plan = &plan;
  ctx.ledger = &led;
  ctx.record_masks = true;
  (void)forward(model, tokens, 2, 6, ctx);

  REQUIRE(ctx.masks_used.size() == 2);
  CHECK(ctx.masks_used[0][0].total == 0);  // layer 0 untouched
  CHECK(ctx.masks_used[1][0].n_kept() == 16);  // half of d_ffn
  CHECK(ctx.masks_used[1][1].n_kept() == 8);   // half of d_model, in pairs
  CHECK(ctx.masks_used[1][1].channels_per_unit == 2);
  CHECK(ctx.masks_used[1][2].n_kept() == 12);  // ceil(0.75 * 16)
  // rope pairs stay together
  const auto& qk = ctx.masks_used[1][1].kept;
  for (size_t i = 0; i < qk.size(); i += 2) CHECK(qk[i] + 1 == qk[i + 1]);
}

TEST_CASE("an all-context partition matches the unpartitioned sparse forward") {
  ModelConfig cfg = tiny_cfg();
  auto model = build_model<float>(cfg, 3);
  auto tokens = random_tokens(12, cfg.vocab_size, 11);
  SparsityPlan plan = uniform_plan(cfg, 0.5, 0.5, 0.5, ScoreSource::oracle);

  ForwardCtx<float> a_ctx;
  a_ctx.plan = &plan;
  Tensor<float> a = forward(model, tokens, 2, 6, a_ctx);

  TokenPartition part = TokenPartition::all_context(12);
  ForwardCtx<float> b_ctx;
  b_ctx.plan = &plan;
  b_ctx.partition = &part;
  Tensor<float> b = forward(model, tokens, 2, 6, b_ctx);
  CHECK(bitwise_equal(a, b));
}

TEST_CASE("an all-output partition routes every token densely") {
  ModelConfig cfg = tiny_cfg();
  auto model = build_model<float>(cfg, 3);
  auto tokens = random_tokens(12, cfg.vocab_size, 12);
  SparsityPlan plan = uniform_plan(cfg, 0.9, 0.5, 0.5, ScoreSource::oracle);

  ForwardCtx<float> dense_ctx;
  Tensor<float> dense = forward(model, tokens, 2, 6, dense_ctx);

  TokenPartition part = TokenPartition::from_output_mask(
      std::vector<uint8_t>(12, 1));
  ForwardCtx<float> ctx;
  ctx.plan = &plan;
  ctx.partition = &part;
  Tensor<float> sparse = forward(model, tokens, 2, 6, ctx);
  CHECK(value_equal(dense, sparse));
}

TEST_CASE("a mixed partition really sparsifies the context side") {
  ModelConfig cfg = tiny_cfg();
  auto model = build_model<float>(cfg, 3);
  auto tokens = random_tokens(12, cfg.vocab_size, 13);
  SparsityPlan plan = uniform_plan(cfg, 0.9, 0.5, 0.5, ScoreSource::oracle);

  ForwardCtx<float> dense_ctx;
  Tensor<float> dense = forward(model, tokens, 2, 6, dense_ctx);

  // last two positions of each row are outputs
  std::vector<uint8_t> out_mask(12, 0);
  for (int64_t r = 0; r < 12; ++r)
    if (r % 6 >= 4) out_mask[(size_t)r] = 1;
  TokenPartition part = TokenPartition::from_output_mask(out_mask);
  ForwardCtx<float> ctx;
  ctx.plan = &plan;
  ctx.partition = &part;
  Tensor<float> sparse = forward(model, tokens, 2, 6, ctx);
  REQUIRE(sparse.shape() == dense.shape());
  CHECK(!value_equal(dense, sparse));
  for (int64_t i = 0; i < sparse.numel(); ++i)
    CHECK(std::isfinite(sparse.data()[i]));

  // deterministic under identical contexts
  ForwardCtx<float> ctx2;
  ctx2.plan = &plan;
  ctx2.partition = &part;
  Tensor<float> again = forward(model, tokens, 2, 6, ctx2);
  CHECK(bitwise_equal(sparse, again));
}

TEST_CASE("backward reaches adapters but never frozen weights") {
  ModelConfig cfg = tiny_cfg();
  auto model = build_model<float>(cfg, 3);
  auto tokens = random_tokens(12, cfg.vocab_size, 14);
  auto bank = attach_lora<float>(model, parse_proj_targets("qkvogud"), 2,
                                 4.0f, 17);
  std::mt19937_64 rng(99);
  for (auto* ad : bank.all())  // nonzero b so gradients reach a as well
    for (int64_t i = 0; i < ad->b.numel(); ++i)
      ad->b.data()[i] = 0.05f * float(std::normal_distribution<double>()(rng));

  SparsityPlan plan = uniform_plan(cfg, 0.5, 0.5, 0.5, ScoreSource::oracle);
  std::vector<uint8_t> out_mask(12, 0);
  for (int64_t r = 0; r < 12; ++r)
    if (r % 6 >= 4) out_mask[(size_t)r] = 1;
  TokenPartition part = TokenPartition::from_output_mask(out_mask);

  Tape<float> tape;
  ForwardCtx<float> ctx;
  ctx.tape = &tape;
  ctx.plan = &plan;
  ctx.partition = &part;
  ctx.lora = &bank;
  ctx.grad_root = true;
  Tensor<float> logits = forward(model, tokens, 2, 6, ctx);

  auto targets = random_tokens(12, cfg.vocab_size, 15);
  Tensor<float> loss =
      ops::cross_entropy_masked(&tape, logits, targets, out_mask);
  CHECK(std::isfinite(loss.data()[0]));
  tape.backward(loss);

  for (auto* ad : bank.all()) {
    REQUIRE(ad->a.has_grad());
    REQUIRE(ad->b.has_grad());
    double ga = 0, gb = 0;
    for (float v : ad->a.grad_vec()) {
      CHECK(std::isfinite(v));
      ga += std::abs((double)v);
    }
    for (float v : ad->b.grad_vec()) gb += std::abs((double)v);
    CHECK(ga > 0.0);
    CHECK(gb > 0.0);
  }
  CHECK(!model.embed.requires_grad());
  CHECK(!model.embed.has_grad());
  CHECK(!model.layers[0].wq.has_grad());
  CHECK(!model.layers[0].w_down.has_grad());
}

TEST_CASE("end-to-end adapter gradients match finite differences") {
  // Double precision, fixed masks (so perturbations cannot flip a top-k
  // selection), token splitting active: the full sparse training path.
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ffn = 12;
  cfg.vocab_size = 16;
  cfg.max_seq_len = 6;
  auto model = build_model<double>(cfg, 31);
  auto tokens = random_tokens(8, cfg.vocab_size, 33);
  auto targets = random_tokens(8, cfg.vocab_size, 34);
  std::vector<uint8_t> out_mask = {0, 0, 1, 1, 0, 0, 1, 1};
  TokenPartition part = TokenPartition::from_output_mask(out_mask);

  SparsityPlan plan = uniform_plan(cfg, 0.5, 0.5, 0.5, ScoreSource::oracle);

  // score once to obtain plausible masks, then freeze them
  std::vector<std::array<ChannelMask, 3>> masks;
  {
    ForwardCtx<double> score_ctx;
    score_ctx.plan = &plan;
    score_ctx.partition = &part;
    score_ctx.record_masks = true;
    (void)forward(model, tokens, 2, 4, score_ctx);
    masks = score_ctx.masks_used;
  }

  std::mt19937_64 rng(71);
  const int64_t r = 2;
  auto run = [&](Tape<double>* tape, std::vector<Tensor<double>>& in,
                 bool split) {
    LoraBank<double> bank;
    bank.rank = r;
    bank.alpha = 4.0;
    bank.by_layer.resize(2);
    auto set = [&](int layer, Proj p, const Tensor<double>& a,
                   const Tensor<double>& b) {
      LoraAdapter<double> ad;
      ad.rank = r;
      ad.alpha = 4.0;
      ad.layer = layer;
      ad.proj = p;
      ad.a = a;
      ad.b = b;
      bank.by_layer[(size_t)layer][(size_t)(int)p] = std::move(ad);
    };
    set(1, Proj::q, in[0], in[1]);
    set(0, Proj::gate, in[2], in[3]);
    set(1, Proj::down, in[4], in[5]);

    ForwardCtx<double> ctx;
    ctx.tape = tape;
    ctx.plan = &plan;
    ctx.partition = split ? &part : nullptr;
    ctx.lora = &bank;
    ctx.fixed_masks = &masks;
    ctx.grad_root = true;
    Tensor<double> logits = forward(model, tokens, 2, 4, ctx);
    return ops::cross_entropy_masked(tape, logits, targets, out_mask);
  };

  std::vector<Tensor<double>> inputs = {
      Tensor<double>::randn({8, r}, rng, 0.3, true),
      Tensor<double>::randn({r, 8}, rng, 0.3, true),
      Tensor<double>::randn({8, r}, rng, 0.3, true),
      Tensor<double>::randn({r, 12}, rng, 0.3, true),
      Tensor<double>::randn({12, r}, rng, 0.3, true),
      Tensor<double>::randn({r, 8}, rng, 0.3, true),
  };

  auto split_fn = [&](Tape<double>* tape, std::vector<Tensor<double>>& in) {
    return run(tape, in, true);
  };
  auto res = ops::grad_check(split_fn, inputs);
  CHECK(res.max_rel_err < 1e-4);

  auto nosplit_fn = [&](Tape<double>* tape, std::vector<Tensor<double>>& in) {
    return run(tape, in, false);
  };
  auto res2 = ops::grad_check(nosplit_fn, inputs);
  CHECK(res2.max_rel_err < 1e-4);
}

TEST_CASE("the ledger accounts for every matmul in a dense training pass") {
  ModelConfig cfg = tiny_cfg();
  auto model = build_model<float>(cfg, 3);
  auto bank = attach_lora<float>(model, parse_proj_targets("qkvo"), 2, 4.0f,
                                 17);
  auto tokens = random_tokens(12, cfg.vocab_size, 16);
  const int64_t B = 2, L = 6, T = B * L;
  const int64_t d = cfg.d_model, dffn = cfg.d_ffn, V = cfg.vocab_size;
  const int64_t H = cfg.n_heads, dh = cfg.d_head();

  flops::Ledger led(cfg.n_layers);
  Tape<float> tape;
  ForwardCtx<float> ctx;
  ctx.tape = &tape;
  ctx.ledger = &led;
  ctx.lora = &bank;
  ctx.grad_root = true;
  Tensor<float> logits = forward(model, tokens, B, L, ctx);

  const int64_t proj_fwd = 4 * 2 * T * d * d;          // q k v o
  const int64_t ffn_fwd = 3 * 2 * T * d * dffn;        // gate up down
  const int64_t attn_fwd = 4 * B * H * L * L * dh;     // logits + mix
  const int64_t layer_fwd = proj_fwd + ffn_fwd + attn_fwd;
  CHECK(led.path_total(flops::Path::main_fwd) == cfg.n_layers * layer_fwd);
  CHECK(led.path_total(flops::Path::head) == 2 * T * d * V);
  const int64_t lora_fwd_per_adapter = 2 * T * d * 2 + 2 * T * 2 * d;
  CHECK(led.path_total(flops::Path::lora_fwd) ==
        cfg.n_layers * 4 * lora_fwd_per_adapter);
  CHECK(led.path_total(flops::Path::estimator) == 0);

  std::vector<uint8_t> mask(12, 1);
  auto targets = random_tokens(12, cfg.vocab_size, 17);
  Tensor<float> loss = ops::cross_entropy_masked(&tape, logits, targets, mask);
  tape.backward(loss);

  // every projection matmul reappears as one input-gradient matmul of the
  // same cost; attention backward costs twice its forward
  CHECK(led.path_total(flops::Path::main_bwd_input) ==
        cfg.n_layers * (layer_fwd + attn_fwd));
  CHECK(led.path_total(flops::Path::head) == 4 * T * d * V);
  CHECK(led.path_total(flops::Path::lora_bwd) ==
        2 * cfg.n_layers * 4 * lora_fwd_per_adapter);
  // frozen main weights accrue no weight-gradient work in fine-tuning
  CHECK(led.path_total(flops::Path::base_bwd_weight) == 0);
}

TEST_CASE("the ledger accounts for sparse projections and oracle scoring") {
  ModelConfig cfg = tiny_cfg();
  auto model = build_model<float>(cfg, 3);
  auto tokens = random_tokens(12, cfg.vocab_size, 18);
  const int64_t B = 2, L = 6, T = B * L;
  const int64_t d = cfg.d_model, dffn = cfg.d_ffn;
  const int64_t H = cfg.n_heads, dh = cfg.d_head();

  SparsityPlan plan = uniform_plan(cfg, 0.5, 0.5, 0.5, ScoreSource::oracle);
  flops::Ledger led(cfg.n_layers);
  ForwardCtx<float> ctx;
  ctx.plan = &plan;
  ctx.ledger = &led;
  Tensor<float> logits = forward(model, tokens, 2, 6, ctx);
  (void)logits;

  const int64_t nffn = units_kept(0.5, dffn);
  const int64_t nqk = 2 * units_kept(0.5, d / 2);
  const int64_t nvo = units_kept(0.5, d);
  const int64_t proj_sparse = 2 * 2 * T * d * nqk   // q, k sliced
                              + 2 * T * d * nvo     // v sliced
                              + 2 * T * nvo * d;    // o over kept rows
  const int64_t ffn_sparse = 2 * 2 * T * d * nffn + 2 * T * nffn * d;
  const int64_t attn_fwd = 4 * B * H * L * L * dh;
  CHECK(led.path_total(flops::Path::main_fwd) ==
        cfg.n_layers * (proj_sparse + ffn_sparse + attn_fwd));

  // oracle scoring recomputes dense gate/up, q/k, and v once per layer
  const int64_t est = 2 * 2 * T * d * dffn   // gate, up
                      + 2 * 2 * T * d * d    // q, k
                      + 2 * T * d * d;       // v
  CHECK(led.path_total(flops::Path::estimator) == cfg.n_layers * est);
}
