#include "slora/forward.h"

#include <cmath>

namespace slora {

const char* split_mode_name(TokenSplitMode m) {
  switch (m) {
    case TokenSplitMode::output_dense: return "output_dense";
    case TokenSplitMode::none: return "none";
    case TokenSplitMode::random_dense: return "random_dense";
    default: return "?";
  }
}

TokenSplitMode split_mode_from_name(const std::string& s) {
  if (s == "output_dense" || s == "on") return TokenSplitMode::output_dense;
  if (s == "none" || s == "off") return TokenSplitMode::none;
  if (s == "random_dense") return TokenSplitMode::random_dense;
  fail("unknown token split mode '", s, "'");
}

int64_t units_kept(double sparsity, int64_t units) {
  int64_t keep = (int64_t)std::ceil((1.0 - sparsity) * (double)units - 1e-9);
  if (keep < 0) keep = 0;
  if (keep > units) keep = units;
  return keep;
}

void SparsityPlan::validate(const ModelConfig& cfg) const {
  SLORA_CHECK((int64_t)layers.size() == cfg.n_layers, "plan: ", layers.size(),
              " layer entries for ", cfg.n_layers, " layers");
  for (size_t l = 0; l < layers.size(); ++l) {
    const auto& e = layers[l];
    for (double s : {e.ffn, e.qk, e.vo})
      SLORA_CHECK(s >= 0.0 && s <= 1.0, "plan: layer ", l, " sparsity ", s,
                  " outside [0, 1]");
  }
  SLORA_CHECK(dense_warmup_fraction >= 0.0 && dense_warmup_fraction <= 0.1,
              "plan: dense warmup fraction ", dense_warmup_fraction,
              " outside [0, 0.1]");
  if (source == ScoreSource::svd && any())
    SLORA_CHECK(estimator_rank >= 1 &&
                    estimator_rank <= std::min(cfg.d_model, cfg.d_ffn),
                "plan: estimator rank ", estimator_rank, " outside [1, ",
                std::min(cfg.d_model, cfg.d_ffn), "]");
  SLORA_CHECK(qk_granularity != Granularity::channel,
              "plan: qk granularity must be rope_pair or head (channel "
              "masks split rotary pairs)");
  SLORA_CHECK(vo_granularity != Granularity::rope_pair,
              "plan: vo granularity must be channel or head");
}

namespace {

// Dense feed-forward with optional adapters; identical op sequence to the
// full-width sparse route so zero-sparsity dispatch stays bit-identical.
template <typename S>
Tensor<S> dense_merged_ffn(Tape<S>* tape, const Tensor<S>& xn,
                           const LayerWeights<S>& w, LoraAdapter<S>* lg,
                           LoraAdapter<S>* lu, LoraAdapter<S>* ld) {
  Tensor<S> g = ops::matmul(tape, xn, w.w_gate);
  if (lg) g = ops::add(tape, g, lora_delta(tape, xn, *lg));
  Tensor<S> u = ops::matmul(tape, xn, w.w_up);
  if (lu) u = ops::add(tape, u, lora_delta(tape, xn, *lu));
  Tensor<S> inter = ops::mul(tape, ops::silu(tape, g), u);
  Tensor<S> out = ops::matmul(tape, inter, w.w_down);
  if (ld) out = ops::add(tape, out, lora_delta(tape, inter, *ld));
  return out;
}

// Rows used for mask scoring: context rows when the partition splits,
// everything otherwise. Scoring never tracks gradients.
template <typename S>
Tensor<S> score_rows(const Tensor<S>& xn, const TokenPartition& part) {
  if (part.output_rows.empty()) return xn;
  return ops::gather_rows<S>(nullptr, xn, part.context_rows);
}

}  // namespace

template <typename S>
Tensor<S> forward(Model<S>& model, const std::vector<int32_t>& tokens,
                  int64_t batch, int64_t seq_len, ForwardCtx<S>& ctx) {
  const ModelConfig& cfg = model.cfg;
  const int64_t T = batch * seq_len;
  SLORA_CHECK((int64_t)tokens.size() == T, "forward: ", tokens.size(),
              " tokens for batch ", batch, " x seq ", seq_len);
  SLORA_CHECK(seq_len <= cfg.max_seq_len, "forward: seq_len ", seq_len,
              " exceeds max_seq_len ", cfg.max_seq_len);

  const bool plan_active = ctx.plan && ctx.plan->any();
  TokenPartition all_ctx;
  const TokenPartition* part = ctx.partition;
  if (!part) {
    all_ctx = TokenPartition::all_context(T);
    part = &all_ctx;
  }
  if (plan_active) {
    ctx.plan->validate(cfg);
    SLORA_CHECK(part->total == T, "forward: partition covers ", part->total,
                " rows, batch has ", T);
    if (ctx.plan->source == ScoreSource::svd && !ctx.fixed_masks) {
      SLORA_CHECK(ctx.bank, "forward: svd criteria need an estimator bank");
      SLORA_CHECK(ctx.bank->rank == ctx.plan->estimator_rank,
                  "forward: estimator bank rank ", ctx.bank->rank,
                  " != plan rank ", ctx.plan->estimator_rank);
    }
  }
  if (ctx.record_masks)
    ctx.masks_used.assign((size_t)cfg.n_layers, std::array<ChannelMask, 3>{});
  if (ctx.tap) ctx.tap->reset(cfg.n_layers);

  std::vector<int32_t> positions((size_t)T);
  for (int64_t r = 0; r < T; ++r) positions[(size_t)r] = int32_t(r % seq_len);

  Tensor<S> x = ops::embedding_lookup(ctx.tape, model.embed, tokens);
  if (ctx.grad_root && ctx.tape && !x.requires_grad())
    x.set_requires_grad(true);

  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    LayerWeights<S>& w = model.layers[(size_t)l];
    LoraAdapter<S>* ad[kNumProj] = {};
    if (ctx.lora)
      for (int p = 0; p < kNumProj; ++p)
        ad[p] = ctx.lora->find((int)l, (Proj)p);
    const LayerSparsity ls =
        plan_active ? ctx.plan->layers[(size_t)l] : LayerSparsity{};
    const bool use_qk = ls.qk > 0.0, use_vo = ls.vo > 0.0,
               use_ffn = ls.ffn > 0.0;
    flops::Scope layer_scope(ctx.ledger, (int)l, flops::Path::main_fwd);

    if (ctx.tap && ctx.tap->capture_layer_inputs)
      ctx.tap->layer_inputs[(size_t)l] = x;

    // --- attention block ---------------------------------------------
    Tensor<S> xn = ops::rmsnorm(ctx.tape, x, w.attn_gain, S(cfg.rmsnorm_eps));

    ChannelMask qk_mask, vo_mask;
    if ((use_qk || use_vo) && ctx.fixed_masks) {
      if (use_qk) qk_mask = ctx.fixed_masks->at((size_t)l)[1];
      if (use_vo) vo_mask = ctx.fixed_masks->at((size_t)l)[2];
    } else if (use_qk || use_vo) {
      flops::Scope est_scope(ctx.ledger, (int)l, flops::Path::estimator);
      const LayerEstimators<S>* est =
          ctx.bank && ctx.bank->has_layer((int)l)
              ? &ctx.bank->layers[(size_t)l]
              : nullptr;
      Tensor<S> xs = score_rows(xn, *part);
      if (use_qk) {
        ScoreVec sv = group_scores(MaskGroup::qk, xs, w, est,
                                   ctx.plan->source, ctx.plan->qk_metric,
                                   ctx.plan->qk_granularity, cfg,
                                   mix_seed(ctx.mask_seed, (uint64_t)(l * 3 + 1)));
        qk_mask = select_mask(sv, ls.qk);
      }
      if (use_vo) {
        ScoreVec sv = group_scores(MaskGroup::vo, xs, w, est,
                                   ctx.plan->source, ctx.plan->vo_metric,
                                   ctx.plan->vo_granularity, cfg,
                                   mix_seed(ctx.mask_seed, (uint64_t)(l * 3 + 2)));
        vo_mask = select_mask(sv, ls.vo);
      }
    }
    if (ctx.record_masks) {
      if (use_qk) ctx.masks_used[(size_t)l][1] = qk_mask;
      if (use_vo) ctx.masks_used[(size_t)l][2] = vo_mask;
    }

    AttnProjections<S> pr;
    if (!use_qk && !use_vo) {
      pr = sparse_attention_projs(ctx.tape, xn, w, nullptr, nullptr, cfg);
    } else {
      const ChannelMask* qm = use_qk ? &qk_mask : nullptr;
      const ChannelMask* vm = use_vo ? &vo_mask : nullptr;
      if (part->output_rows.empty()) {
        pr = sparse_attention_projs(ctx.tape, xn, w, qm, vm, cfg);
      } else {
        Tensor<S> xc = ops::gather_rows(ctx.tape, xn, part->context_rows);
        Tensor<S> xo = ops::gather_rows(ctx.tape, xn, part->output_rows);
        AttnProjections<S> pc =
            sparse_attention_projs(ctx.tape, xc, w, qm, vm, cfg);
        AttnProjections<S> po =
            sparse_attention_projs(ctx.tape, xo, w, nullptr, nullptr, cfg);
        auto join = [&](const Tensor<S>& c, const Tensor<S>& o) {
          return ops::add(
              ctx.tape,
              ops::scatter_rows(ctx.tape, c, part->context_rows, T),
              ops::scatter_rows(ctx.tape, o, part->output_rows, T));
        };
        pr.q = join(pc.q, po.q);
        pr.k = join(pc.k, po.k);
        pr.v = join(pc.v, po.v);
      }
    }
    if (ad[(int)Proj::q])
      pr.q = ops::add(ctx.tape, pr.q, lora_delta(ctx.tape, xn, *ad[(int)Proj::q]));
    if (ad[(int)Proj::k])
      pr.k = ops::add(ctx.tape, pr.k, lora_delta(ctx.tape, xn, *ad[(int)Proj::k]));
    if (ad[(int)Proj::v])
      pr.v = ops::add(ctx.tape, pr.v, lora_delta(ctx.tape, xn, *ad[(int)Proj::v]));

    Tensor<S> qr = ops::rope(ctx.tape, pr.q, positions, cfg.n_heads,
                             cfg.rope_theta);
    Tensor<S> kr = ops::rope(ctx.tape, pr.k, positions, cfg.n_heads,
                             cfg.rope_theta);
    std::vector<S>* probs_dst = nullptr;
    if (ctx.tap && ctx.tap->capture_attn_probs)
      probs_dst = &ctx.tap->attn_probs[(size_t)l];
    Tensor<S> attn = ops::attention(ctx.tape, qr, kr, pr.v, batch, seq_len,
                                    cfg.n_heads, true, probs_dst);

    Tensor<S> om;
    if (use_vo) {
      if (part->output_rows.empty()) {
        om = sparse_o_proj(ctx.tape, attn, w, vo_mask);
      } else {
        Tensor<S> ac = ops::gather_rows(ctx.tape, attn, part->context_rows);
        Tensor<S> ao = ops::gather_rows(ctx.tape, attn, part->output_rows);
        Tensor<S> oc = sparse_o_proj(ctx.tape, ac, w, vo_mask);
        Tensor<S> oo = ops::matmul(ctx.tape, ao, w.wo);
        om = ops::add(
            ctx.tape, ops::scatter_rows(ctx.tape, oc, part->context_rows, T),
            ops::scatter_rows(ctx.tape, oo, part->output_rows, T));
      }
    } else {
      om = ops::matmul(ctx.tape, attn, w.wo);
    }
    if (ad[(int)Proj::o])
      om = ops::add(ctx.tape, om, lora_delta(ctx.tape, attn, *ad[(int)Proj::o]));
    x = ops::add(ctx.tape, x, om);

    // --- feed-forward block ------------------------------------------
    Tensor<S> xn2 = ops::rmsnorm(ctx.tape, x, w.ffn_gain, S(cfg.rmsnorm_eps));
    Tensor<S> f;
    LoraAdapter<S>* lg = ad[(int)Proj::gate];
    LoraAdapter<S>* lu = ad[(int)Proj::up];
    LoraAdapter<S>* ld = ad[(int)Proj::down];
    if (use_ffn) {
      ChannelMask ffn_mask;
      if (ctx.fixed_masks) {
        ffn_mask = ctx.fixed_masks->at((size_t)l)[0];
      } else {
        flops::Scope est_scope(ctx.ledger, (int)l, flops::Path::estimator);
        const LayerEstimators<S>* est =
            ctx.bank && ctx.bank->has_layer((int)l)
                ? &ctx.bank->layers[(size_t)l]
                : nullptr;
        Tensor<S> xs2 = score_rows(xn2, *part);
        ScoreVec sv = group_scores(MaskGroup::ffn, xs2, w, est,
                                   ctx.plan->source, ctx.plan->ffn_metric,
                                   Granularity::channel, cfg,
                                   mix_seed(ctx.mask_seed, (uint64_t)(l * 3)));
        ffn_mask = select_mask(sv, ls.ffn);
      }
      if (ctx.record_masks) ctx.masks_used[(size_t)l][0] = ffn_mask;
      if (part->output_rows.empty()) {
        f = sparse_ffn(ctx.tape, xn2, w, ffn_mask, lg, lu, ld);
      } else {
        Tensor<S> xc = ops::gather_rows(ctx.tape, xn2, part->context_rows);
        Tensor<S> xo = ops::gather_rows(ctx.tape, xn2, part->output_rows);
        Tensor<S> fc = sparse_ffn(ctx.tape, xc, w, ffn_mask, lg, lu, ld);
        Tensor<S> fo = dense_merged_ffn(ctx.tape, xo, w, lg, lu, ld);
        f = ops::add(
            ctx.tape, ops::scatter_rows(ctx.tape, fc, part->context_rows, T),
            ops::scatter_rows(ctx.tape, fo, part->output_rows, T));
      }
    } else {
      f = dense_merged_ffn(ctx.tape, xn2, w, lg, lu, ld);
    }
    x = ops::add(ctx.tape, x, f);
  }

  Tensor<S> logits;
  {
    flops::Scope s(ctx.ledger, flops::Ledger::kNonLayer,
                   flops::Path::main_fwd);
    Tensor<S> xf = ops::rmsnorm(ctx.tape, x, model.final_gain,
                                S(cfg.rmsnorm_eps));
    flops::Scope sh(ctx.ledger, flops::Ledger::kNonLayer, flops::Path::head);
    logits = ops::matmul(ctx.tape, xf, model.head);
  }
  return logits;
}

template Tensor<float> forward<float>(Model<float>&,
                                      const std::vector<int32_t>&, int64_t,
                                      int64_t, ForwardCtx<float>&);
template Tensor<double> forward<double>(Model<double>&,
                                        const std::vector<int32_t>&, int64_t,
                                        int64_t, ForwardCtx<double>&);

}  // namespace slora
