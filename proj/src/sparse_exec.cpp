#include "slora/sparse_exec.h"

#include <algorithm>

#include "slora/flops.h"

namespace slora {

void TokenPartition::validate() const {
  auto check_sorted = [](const std::vector<int64_t>& v, const char* what) {
    for (size_t i = 1; i < v.size(); ++i)
      SLORA_CHECK(v[i] > v[i - 1], "token partition: ", what,
                  " rows must be ascending/unique");
  };
  check_sorted(context_rows, "context");
  check_sorted(output_rows, "output");
  SLORA_CHECK((int64_t)(context_rows.size() + output_rows.size()) == total,
              "token partition: ", context_rows.size(), " context + ",
              output_rows.size(), " output rows do not cover ", total);
  size_t i = 0, j = 0;
  for (int64_t r = 0; r < total; ++r) {
    if (i < context_rows.size() && context_rows[i] == r) {
      ++i;
    } else if (j < output_rows.size() && output_rows[j] == r) {
      ++j;
    } else {
      fail("token partition: row ", r, " missing or duplicated");
    }
  }
}

TokenPartition TokenPartition::all_context(int64_t n) {
  TokenPartition p;
  p.total = n;
  p.context_rows.resize((size_t)n);
  for (int64_t i = 0; i < n; ++i) p.context_rows[(size_t)i] = i;
  return p;
}

TokenPartition TokenPartition::from_output_mask(
    const std::vector<uint8_t>& mask) {
  TokenPartition p;
  p.total = (int64_t)mask.size();
  for (int64_t i = 0; i < p.total; ++i)
    (mask[(size_t)i] ? p.output_rows : p.context_rows).push_back(i);
  return p;
}

template <typename S>
SlicedWeightView<S> slice_gather(const Tensor<S>& w,
                                 const ChannelMask* row_mask,
                                 const ChannelMask* col_mask) {
  SLORA_CHECK(w.defined() && w.ndim() == 2, "slice_gather: expected 2-d");
  SLORA_CHECK(!w.requires_grad(),
              "slice_gather: only frozen weights may be sliced");
  const int64_t rows = w.dim(0), cols = w.dim(1);
  if (row_mask) {
    row_mask->validate();
    SLORA_CHECK(row_mask->total == rows, "slice_gather: row mask over ",
                row_mask->total, " channels, weight has ", rows, " rows");
  }
  if (col_mask) {
    col_mask->validate();
    SLORA_CHECK(col_mask->total == cols, "slice_gather: col mask over ",
                col_mask->total, " channels, weight has ", cols, " cols");
  }
  SlicedWeightView<S> view;
  view.source = w.id();
  const int64_t out_rows = row_mask ? row_mask->n_kept() : rows;
  const int64_t out_cols = col_mask ? col_mask->n_kept() : cols;
  view.w = Tensor<S>::zeros({out_rows, out_cols});
  S* dst = view.w.data();
  const S* src = w.data();
  for (int64_t i = 0; i < out_rows; ++i) {
    const int64_t si = row_mask ? row_mask->kept[(size_t)i] : i;
    const S* srow = src + si * cols;
    S* drow = dst + i * out_cols;
    if (col_mask) {
      for (int64_t j = 0; j < out_cols; ++j)
        drow[j] = srow[col_mask->kept[(size_t)j]];
    } else {
      std::copy(srow, srow + cols, drow);
    }
  }
  if (row_mask) view.rows_kept = row_mask->kept;
  if (col_mask) view.cols_kept = col_mask->kept;
  flops::add_gather_bytes((int64_t)sizeof(S) * out_rows * out_cols);
  return view;
}

template <typename S>
Tensor<S> sparse_ffn(Tape<S>* tape, const Tensor<S>& xn,
                     const LayerWeights<S>& w, const ChannelMask& mask,
                     LoraAdapter<S>* lora_gate, LoraAdapter<S>* lora_up,
                     LoraAdapter<S>* lora_down) {
  mask.validate();
  const int64_t d_ffn = w.w_gate.dim(1);
  SLORA_CHECK(mask.total == d_ffn, "sparse_ffn: mask over ", mask.total,
              " channels, d_ffn is ", d_ffn);
  SlicedWeightView<S> gate_w = slice_gather(w.w_gate, nullptr, &mask);
  SlicedWeightView<S> up_w = slice_gather(w.w_up, nullptr, &mask);
  SlicedWeightView<S> down_w = slice_gather(w.w_down, &mask, nullptr);
  Tensor<S> g = ops::matmul(tape, xn, gate_w.w);
  Tensor<S> u = ops::matmul(tape, xn, up_w.w);
  if (!lora_gate && !lora_up && !lora_down) {
    // narrow route: the intermediate only ever exists at kept width
    Tensor<S> inter = ops::mul(tape, ops::silu(tape, g), u);
    return ops::matmul(tape, inter, down_w.w);
  }
  // full-width route: adapter deltas land on pruned channels too, and the
  // down adapter consumes the merged full-width intermediate
  Tensor<S> gate_out = ops::scatter_cols(tape, g, mask.kept, d_ffn);
  if (lora_gate)
    gate_out = ops::add(tape, gate_out, lora_delta(tape, xn, *lora_gate));
  Tensor<S> up_out = ops::scatter_cols(tape, u, mask.kept, d_ffn);
  if (lora_up)
    up_out = ops::add(tape, up_out, lora_delta(tape, xn, *lora_up));
  Tensor<S> inter = ops::mul(tape, ops::silu(tape, gate_out), up_out);
  Tensor<S> down_in = ops::gather_cols(tape, inter, mask.kept);
  Tensor<S> out = ops::matmul(tape, down_in, down_w.w);
  if (lora_down)
    out = ops::add(tape, out, lora_delta(tape, inter, *lora_down));
  return out;
}

namespace {

void check_rope_pairs(const ChannelMask& mask) {
  // every kept channel must bring its rotary partner (2i, 2i+1)
  for (size_t i = 0; i < mask.kept.size(); ++i) {
    const int64_t c = mask.kept[i];
    const int64_t partner = (c % 2 == 0) ? c + 1 : c - 1;
    const bool have =
        std::binary_search(mask.kept.begin(), mask.kept.end(), partner);
    SLORA_CHECK(have, "qk mask: channel ", c,
                " kept without its rotary pair partner ", partner,
                "; use rope_pair or head granularity");
  }
}

}  // namespace

template <typename S>
AttnProjections<S> sparse_attention_projs(Tape<S>* tape, const Tensor<S>& xn,
                                          const LayerWeights<S>& w,
                                          const ChannelMask* qk_mask,
                                          const ChannelMask* vo_mask,
                                          const ModelConfig& cfg) {
  AttnProjections<S> out;
  if (qk_mask && !qk_mask->full()) {
    qk_mask->validate();
    SLORA_CHECK(qk_mask->total == cfg.d_model, "qk mask: total ",
                qk_mask->total, " != d_model ", cfg.d_model);
    check_rope_pairs(*qk_mask);
    SlicedWeightView<S> wq = slice_gather(w.wq, nullptr, qk_mask);
    SlicedWeightView<S> wk = slice_gather(w.wk, nullptr, qk_mask);
    out.q = ops::scatter_cols(tape, ops::matmul(tape, xn, wq.w),
                              qk_mask->kept, cfg.d_model);
    out.k = ops::scatter_cols(tape, ops::matmul(tape, xn, wk.w),
                              qk_mask->kept, cfg.d_model);
  } else {
    out.q = ops::matmul(tape, xn, w.wq);
    out.k = ops::matmul(tape, xn, w.wk);
  }
  if (vo_mask && !vo_mask->full()) {
    vo_mask->validate();
    SLORA_CHECK(vo_mask->total == cfg.d_model, "vo mask: total ",
                vo_mask->total, " != d_model ", cfg.d_model);
    SlicedWeightView<S> wv = slice_gather(w.wv, nullptr, vo_mask);
    out.v = ops::scatter_cols(tape, ops::matmul(tape, xn, wv.w),
                              vo_mask->kept, cfg.d_model);
  } else {
    out.v = ops::matmul(tape, xn, w.wv);
  }
  return out;
}

template <typename S>
Tensor<S> sparse_o_proj(Tape<S>* tape, const Tensor<S>& attn_out,
                        const LayerWeights<S>& w, const ChannelMask& vo_mask) {
  vo_mask.validate();
  SLORA_CHECK(vo_mask.total == w.wo.dim(0), "sparse_o_proj: mask over ",
              vo_mask.total, " channels, wo has ", w.wo.dim(0), " rows");
  SlicedWeightView<S> wo = slice_gather(w.wo, &vo_mask, nullptr);
  Tensor<S> in = ops::gather_cols(tape, attn_out, vo_mask.kept);
  return ops::matmul(tape, in, wo.w);
}

template <typename S>
Tensor<S> split_tokens_compute(Tape<S>* tape, const Tensor<S>& x,
                               const TokenPartition& part,
                               const RowFn<S>& context_fn,
                               const RowFn<S>& output_fn) {
  SLORA_CHECK(x.defined() && x.ndim() == 2, "split_tokens_compute: 2-d input");
  SLORA_CHECK(part.total == x.dim(0), "split_tokens_compute: partition over ",
              part.total, " rows, input has ", x.dim(0));
  part.validate();
  if (part.output_rows.empty()) return context_fn(tape, x);
  if (part.context_rows.empty()) return output_fn(tape, x);
  Tensor<S> xc = ops::gather_rows(tape, x, part.context_rows);
  Tensor<S> yc = context_fn(tape, xc);
  Tensor<S> xo = ops::gather_rows(tape, x, part.output_rows);
  Tensor<S> yo = output_fn(tape, xo);
  SLORA_CHECK(yc.dim(1) == yo.dim(1),
              "split_tokens_compute: branch widths differ, ", yc.dim(1),
              " vs ", yo.dim(1));
  Tensor<S> sc = ops::scatter_rows(tape, yc, part.context_rows, part.total);
  Tensor<S> so = ops::scatter_rows(tape, yo, part.output_rows, part.total);
  return ops::add(tape, sc, so);
}

#define SLORA_INSTANTIATE_SPARSE_EXEC(S)                                     \
  template struct SlicedWeightView<S>;                                       \
  template struct AttnProjections<S>;                                        \
  template SlicedWeightView<S> slice_gather<S>(                              \
      const Tensor<S>&, const ChannelMask*, const ChannelMask*);             \
  template Tensor<S> sparse_ffn<S>(Tape<S>*, const Tensor<S>&,               \
                                   const LayerWeights<S>&,                   \
                                   const ChannelMask&, LoraAdapter<S>*,      \
                                   LoraAdapter<S>*, LoraAdapter<S>*);        \
  template AttnProjections<S> sparse_attention_projs<S>(                     \
      Tape<S>*, const Tensor<S>&, const LayerWeights<S>&,                    \
      const ChannelMask*, const ChannelMask*, const ModelConfig&);           \
  template Tensor<S> sparse_o_proj<S>(Tape<S>*, const Tensor<S>&,            \
                                      const LayerWeights<S>&,                \
                                      const ChannelMask&);                   \
  template Tensor<S> split_tokens_compute<S>(Tape<S>*, const Tensor<S>&,     \
                                             const TokenPartition&,          \
                                             const RowFn<S>&,                \
                                             const RowFn<S>&);

SLORA_INSTANTIATE_SPARSE_EXEC(float)
SLORA_INSTANTIATE_SPARSE_EXEC(double)

}  // namespace slora
