#include "slora/sparsity.h"

#include <algorithm>
#include <cmath>

#include "slora/ops.h"

namespace slora {

const char* granularity_name(Granularity g) {
  switch (g) {
    case Granularity::channel: return "channel";
    case Granularity::rope_pair: return "rope_pair";
    case Granularity::head: return "head";
    default: return "?";
  }
}

const char* group_name(MaskGroup g) {
  switch (g) {
    case MaskGroup::ffn: return "ffn";
    case MaskGroup::qk: return "qk";
    case MaskGroup::vo: return "vo";
    default: return "?";
  }
}

const char* metric_name(Metric m) {
  switch (m) {
    case Metric::l2: return "l2";
    case Metric::qknorm: return "qknorm";
    case Metric::wanda: return "wanda";
    case Metric::random: return "random";
    default: return "?";
  }
}

const char* source_name(ScoreSource s) {
  return s == ScoreSource::oracle ? "oracle" : "svd";
}

Granularity granularity_from_name(const std::string& s) {
  if (s == "channel") return Granularity::channel;
  if (s == "rope_pair" || s == "pair") return Granularity::rope_pair;
  if (s == "head") return Granularity::head;
  fail("unknown granularity '", s, "'");
}

Metric metric_from_name(const std::string& s) {
  if (s == "l2") return Metric::l2;
  if (s == "qknorm") return Metric::qknorm;
  if (s == "wanda") return Metric::wanda;
  if (s == "random") return Metric::random;
  fail("unknown metric '", s, "'");
}

ScoreSource source_from_name(const std::string& s) {
  if (s == "oracle") return ScoreSource::oracle;
  if (s == "svd") return ScoreSource::svd;
  fail("unknown score source '", s, "'");
}

void ChannelMask::validate() const {
  SLORA_CHECK(total > 0, "mask: total channels must be positive");
  for (size_t i = 0; i < kept.size(); ++i) {
    SLORA_CHECK(kept[i] >= 0 && kept[i] < total, "mask: channel ", kept[i],
                " outside [0, ", total, ")");
    if (i > 0)
      SLORA_CHECK(kept[i] > kept[i - 1],
                  "mask: channels must be ascending and unique, saw ",
                  kept[i - 1], " then ", kept[i]);
  }
}

ChannelMask select_mask(const ScoreVec& scores, double sparsity) {
  SLORA_CHECK(sparsity >= 0.0 && sparsity <= 1.0, "select_mask: sparsity ",
              sparsity, " outside [0, 1]");
  const int64_t units = scores.units();
  SLORA_CHECK(units > 0, "select_mask: empty score vector");
  SLORA_CHECK(scores.channels_per_unit * units == scores.total_channels,
              "select_mask: inconsistent score metadata");
  // ceil with a nudge so 0.9*1024 -> 103 kept units, not a float artifact
  int64_t keep = (int64_t)std::ceil((1.0 - sparsity) * (double)units - 1e-9);
  keep = std::clamp<int64_t>(keep, 0, units);
  std::vector<int64_t> top = topk_indices(scores.value, keep);
  ChannelMask m;
  m.total = scores.total_channels;
  m.granularity = scores.granularity;
  m.channels_per_unit = scores.channels_per_unit;
  m.kept.reserve((size_t)(keep * scores.channels_per_unit));
  for (int64_t u : top)
    for (int64_t c = 0; c < scores.channels_per_unit; ++c)
      m.kept.push_back(u * scores.channels_per_unit + c);
  m.validate();
  return m;
}

double mask_overlap(const ChannelMask& a, const ChannelMask& b) {
  SLORA_CHECK(a.total == b.total, "mask_overlap: channel spaces differ, ",
              a.total, " vs ", b.total);
  SLORA_CHECK(a.n_kept() == b.n_kept(), "mask_overlap: kept sizes differ, ",
              a.n_kept(), " vs ", b.n_kept());
  SLORA_CHECK(!a.empty(), "mask_overlap: empty masks");
  size_t i = 0, j = 0, inter = 0;
  while (i < a.kept.size() && j < b.kept.size()) {
    if (a.kept[i] == b.kept[j]) {
      ++inter;
      ++i;
      ++j;
    } else if (a.kept[i] < b.kept[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return (double)inter / (double)a.n_kept();
}

namespace {

// Column sums of squares, double accumulation.
template <typename S>
std::vector<double> col_sq_sums(const Tensor<S>& x) {
  const int64_t rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out((size_t)cols, 0.0);
  for (int64_t t = 0; t < rows; ++t) {
    const S* row = x.data() + t * cols;
    for (int64_t j = 0; j < cols; ++j)
      out[(size_t)j] += double(row[j]) * double(row[j]);
  }
  return out;
}

int64_t unit_width(Granularity g, const ModelConfig& cfg) {
  switch (g) {
    case Granularity::channel: return 1;
    case Granularity::rope_pair: return 2;
    case Granularity::head: return cfg.d_head();
    default: return 1;
  }
}

// Per-unit l2 norms from per-channel squared sums.
std::vector<double> unit_norms(const std::vector<double>& sq, int64_t width) {
  const int64_t units = (int64_t)sq.size() / width;
  std::vector<double> out((size_t)units, 0.0);
  for (int64_t u = 0; u < units; ++u) {
    double acc = 0;
    for (int64_t c = 0; c < width; ++c) acc += sq[(size_t)(u * width + c)];
    out[(size_t)u] = std::sqrt(acc);
  }
  return out;
}

Tensor<double> widen(const Tensor<float>& x) {
  Tensor<double> out = Tensor<double>::zeros(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i];
  return out;
}
const Tensor<double>& widen(const Tensor<double>& x) { return x; }

template <typename S>
SvdFactors<S> decompose_weight(const Tensor<S>& w, int64_t rank,
                               const std::string& id) {
  SvdFactors<double> f = svd_topk(widen(w), rank, id);
  if constexpr (std::is_same_v<S, float>)
    return to_float(f);
  else
    return f;
}

}  // namespace

template <typename S>
EstimatorBank<S> build_estimator_bank(const Model<S>& model, int64_t rank,
                                      const std::vector<int64_t>* layer_set) {
  const auto& cfg = model.cfg;
  SLORA_CHECK(rank >= 1 && rank <= std::min(cfg.d_model, cfg.d_ffn),
              "estimator bank: rank ", rank, " outside [1, ",
              std::min(cfg.d_model, cfg.d_ffn), "]");
  std::vector<int64_t> all;
  if (!layer_set) {
    all.resize((size_t)cfg.n_layers);
    for (int64_t l = 0; l < cfg.n_layers; ++l) all[(size_t)l] = l;
    layer_set = &all;
  }
  EstimatorBank<S> bank;
  bank.rank = rank;
  bank.layers.resize((size_t)cfg.n_layers);
  for (int64_t l : *layer_set) {
    SLORA_CHECK(l >= 0 && l < cfg.n_layers, "estimator bank: layer ", l,
                " outside [0, ", cfg.n_layers, ")");
    const auto& w = model.layers[(size_t)l];
    auto& e = bank.layers[(size_t)l];
    const std::string p = "layers." + std::to_string(l) + ".";
    e.gate = decompose_weight(w.w_gate, rank, p + "w_gate");
    e.up = decompose_weight(w.w_up, rank, p + "w_up");
    e.q = decompose_weight(w.wq, rank, p + "wq");
    e.k = decompose_weight(w.wk, rank, p + "wk");
    e.v = decompose_weight(w.wv, rank, p + "wv");
  }
  return bank;
}

namespace {

template <typename S>
SvdFactors<S> truncate_factors(const SvdFactors<S>& f, int64_t k) {
  const int64_t d1 = f.w_a.dim(0), d2 = f.w_b.dim(1), K = f.rank_k;
  SvdFactors<S> g;
  g.rank_k = k;
  g.source_id = f.source_id;
  g.singular_values.assign(f.singular_values.begin(),
                           f.singular_values.begin() + k);
  g.w_a = Tensor<S>::zeros({d1, k});
  g.w_b = Tensor<S>::zeros({k, d2});
  for (int64_t i = 0; i < d1; ++i)
    for (int64_t r = 0; r < k; ++r)
      g.w_a.data()[i * k + r] = f.w_a.data()[i * K + r];
  std::copy(f.w_b.data(), f.w_b.data() + k * d2, g.w_b.data());
  return g;
}

}  // namespace

template <typename S>
EstimatorBank<S> truncate_bank(const EstimatorBank<S>& bank, int64_t rank) {
  SLORA_CHECK(rank >= 1 && rank <= bank.rank, "truncate bank: rank ", rank,
              " outside [1, ", bank.rank, "]");
  EstimatorBank<S> out;
  out.rank = rank;
  out.layers.resize(bank.layers.size());
  for (size_t l = 0; l < bank.layers.size(); ++l) {
    const auto& e = bank.layers[l];
    auto& o = out.layers[l];
    if (e.gate) o.gate = truncate_factors(*e.gate, rank);
    if (e.up) o.up = truncate_factors(*e.up, rank);
    if (e.q) o.q = truncate_factors(*e.q, rank);
    if (e.k) o.k = truncate_factors(*e.k, rank);
    if (e.v) o.v = truncate_factors(*e.v, rank);
  }
  return out;
}

template <typename S>
ScoreVec ffn_activation_scores(const Tensor<S>& gate_act,
                               const Tensor<S>& up_act) {
  SLORA_CHECK(gate_act.shape() == up_act.shape(),
              "ffn scores: gate/up activation shapes differ");
  Tensor<S> inter = ops::mul<S>(nullptr, ops::silu<S>(nullptr, gate_act),
                                up_act);
  ScoreVec sv;
  sv.granularity = Granularity::channel;
  sv.channels_per_unit = 1;
  sv.total_channels = inter.dim(1);
  sv.value = unit_norms(col_sq_sums(inter), 1);
  return sv;
}

namespace {

template <typename S>
std::pair<Tensor<S>, Tensor<S>> ffn_acts(const Tensor<S>& xn,
                                         const LayerWeights<S>& w,
                                         const LayerEstimators<S>* est,
                                         ScoreSource source) {
  if (source == ScoreSource::oracle)
    return {ops::matmul<S>(nullptr, xn, w.w_gate),
            ops::matmul<S>(nullptr, xn, w.w_up)};
  SLORA_CHECK(est && est->gate && est->up,
              "ffn scores: svd source needs gate/up estimators");
  return {estimator_apply(xn, *est->gate), estimator_apply(xn, *est->up)};
}

}  // namespace

template <typename S>
ScoreVec ffn_scores(const Tensor<S>& xn, const LayerWeights<S>& w,
                    const LayerEstimators<S>* est, ScoreSource source) {
  auto [g, u] = ffn_acts(xn, w, est, source);
  return ffn_activation_scores(g, u);
}

template <typename S>
ScoreVec ffn_wanda_scores(const Tensor<S>& xn, const LayerWeights<S>& w,
                          const LayerEstimators<S>* est, ScoreSource source) {
  auto [g, u] = ffn_acts(xn, w, est, source);
  ScoreVec sv = ffn_activation_scores(g, u);
  // weight-aware: scale each channel by the matching down-row norm
  const int64_t d_ffn = w.w_down.dim(0), d_model = w.w_down.dim(1);
  for (int64_t c = 0; c < d_ffn; ++c) {
    double acc = 0;
    const S* row = w.w_down.data() + c * d_model;
    for (int64_t j = 0; j < d_model; ++j)
      acc += double(row[j]) * double(row[j]);
    sv.value[(size_t)c] *= std::sqrt(acc);
  }
  return sv;
}

template <typename S>
ScoreVec qk_scores(const Tensor<S>& xn, const LayerWeights<S>& w,
                   const LayerEstimators<S>* est, ScoreSource source,
                   Granularity gran, const ModelConfig& cfg, Metric metric) {
  SLORA_CHECK(metric == Metric::qknorm || metric == Metric::l2,
              "qk scores: metric must be qknorm or l2, got ",
              metric_name(metric));
  Tensor<S> q, k;
  if (source == ScoreSource::oracle) {
    q = ops::matmul<S>(nullptr, xn, w.wq);
    k = ops::matmul<S>(nullptr, xn, w.wk);
  } else {
    SLORA_CHECK(est && est->q && est->k,
                "qk scores: svd source needs q/k estimators");
    q = estimator_apply(xn, *est->q);
    k = estimator_apply(xn, *est->k);
  }
  const int64_t width = unit_width(gran, cfg);
  auto nq = unit_norms(col_sq_sums(q), width);
  auto nk = unit_norms(col_sq_sums(k), width);
  ScoreVec sv;
  sv.granularity = gran;
  sv.channels_per_unit = width;
  sv.total_channels = cfg.d_model;
  sv.value.resize(nq.size());
  for (size_t i = 0; i < nq.size(); ++i)
    sv.value[i] = metric == Metric::qknorm ? nq[i] * nk[i] : nq[i] + nk[i];
  return sv;
}

template <typename S>
ScoreVec vo_scores(const Tensor<S>& xn, const LayerWeights<S>& w,
                   const LayerEstimators<S>* est, ScoreSource source,
                   Granularity gran, const ModelConfig& cfg) {
  SLORA_CHECK(gran != Granularity::rope_pair,
              "vo scores: rope_pair granularity only applies to qk");
  Tensor<S> v;
  if (source == ScoreSource::oracle) {
    v = ops::matmul<S>(nullptr, xn, w.wv);
  } else {
    SLORA_CHECK(est && est->v, "vo scores: svd source needs v estimator");
    v = estimator_apply(xn, *est->v);
  }
  const int64_t width = unit_width(gran, cfg);
  ScoreVec sv;
  sv.granularity = gran;
  sv.channels_per_unit = width;
  sv.total_channels = cfg.d_model;
  sv.value = unit_norms(col_sq_sums(v), width);
  return sv;
}

template <typename S>
ScoreVec vo_attn_out_scores(const Tensor<S>& attn_out, Granularity gran,
                            const ModelConfig& cfg) {
  SLORA_CHECK(gran != Granularity::rope_pair,
              "vo scores: rope_pair granularity only applies to qk");
  const int64_t width = unit_width(gran, cfg);
  ScoreVec sv;
  sv.granularity = gran;
  sv.channels_per_unit = width;
  sv.total_channels = cfg.d_model;
  sv.value = unit_norms(col_sq_sums(attn_out), width);
  return sv;
}

ScoreVec random_scores(int64_t units, Granularity gran,
                       int64_t channels_per_unit, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  ScoreVec sv;
  sv.granularity = gran;
  sv.channels_per_unit = channels_per_unit;
  sv.total_channels = units * channels_per_unit;
  sv.value.resize((size_t)units);
  for (auto& v : sv.value) v = dist(rng);
  return sv;
}

template <typename S>
ScoreVec group_scores(MaskGroup group, const Tensor<S>& xn,
                      const LayerWeights<S>& w, const LayerEstimators<S>* est,
                      ScoreSource source, Metric metric, Granularity gran,
                      const ModelConfig& cfg, uint64_t random_seed) {
  if (metric == Metric::random) {
    int64_t width = group == MaskGroup::ffn ? 1 : unit_width(gran, cfg);
    int64_t channels = group == MaskGroup::ffn ? cfg.d_ffn : cfg.d_model;
    return random_scores(channels / width,
                         group == MaskGroup::ffn ? Granularity::channel : gran,
                         width, random_seed);
  }
  switch (group) {
    case MaskGroup::ffn:
      SLORA_CHECK(metric == Metric::l2 || metric == Metric::wanda,
                  "ffn group: metric must be l2, wanda or random, got ",
                  metric_name(metric));
      return metric == Metric::wanda
                 ? ffn_wanda_scores(xn, w, est, source)
                 : ffn_scores(xn, w, est, source);
    case MaskGroup::qk:
      return qk_scores(xn, w, est, source, gran, cfg, metric);
    case MaskGroup::vo:
      SLORA_CHECK(metric == Metric::l2,
                  "vo group: metric must be l2 or random, got ",
                  metric_name(metric));
      return vo_scores(xn, w, est, source, gran, cfg);
  }
  fail("group_scores: bad group");
}

template <typename S>
std::vector<double> attention_map_error(const std::vector<S>& probs_ref,
                                        const std::vector<S>& probs_test,
                                        int64_t batch, int64_t n_heads,
                                        int64_t seq_len) {
  const size_t want = (size_t)(batch * n_heads * seq_len * seq_len);
  SLORA_CHECK(probs_ref.size() == want && probs_test.size() == want,
              "attention_map_error: buffer sizes ", probs_ref.size(), "/",
              probs_test.size(), " do not match ", want);
  std::vector<double> out((size_t)n_heads, 0.0);
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < n_heads; ++h) {
      const size_t off = (size_t)((b * n_heads + h) * seq_len * seq_len);
      double acc = 0;
      for (int64_t i = 0; i < seq_len * seq_len; ++i) {
        const double d =
            double(probs_ref[off + (size_t)i]) - double(probs_test[off + (size_t)i]);
        acc += d * d;
      }
      out[(size_t)h] += std::sqrt(acc);
    }
  for (auto& v : out) v /= (double)batch;
  return out;
}

#define SLORA_INSTANTIATE_SPARSITY(S)                                        \
  template struct LayerEstimators<S>;                                        \
  template struct EstimatorBank<S>;                                          \
  template EstimatorBank<S> build_estimator_bank<S>(                         \
      const Model<S>&, int64_t, const std::vector<int64_t>*);                \
  template EstimatorBank<S> truncate_bank<S>(const EstimatorBank<S>&,        \
                                             int64_t);                       \
  template ScoreVec ffn_activation_scores<S>(const Tensor<S>&,               \
                                             const Tensor<S>&);              \
  template ScoreVec ffn_scores<S>(const Tensor<S>&, const LayerWeights<S>&,  \
                                  const LayerEstimators<S>*, ScoreSource);   \
  template ScoreVec ffn_wanda_scores<S>(const Tensor<S>&,                    \
                                        const LayerWeights<S>&,              \
                                        const LayerEstimators<S>*,           \
                                        ScoreSource);                        \
  template ScoreVec qk_scores<S>(const Tensor<S>&, const LayerWeights<S>&,   \
                                 const LayerEstimators<S>*, ScoreSource,     \
                                 Granularity, const ModelConfig&, Metric);   \
  template ScoreVec vo_scores<S>(const Tensor<S>&, const LayerWeights<S>&,   \
                                 const LayerEstimators<S>*, ScoreSource,     \
                                 Granularity, const ModelConfig&);           \
  template ScoreVec vo_attn_out_scores<S>(const Tensor<S>&, Granularity,     \
                                          const ModelConfig&);               \
  template ScoreVec group_scores<S>(MaskGroup, const Tensor<S>&,             \
                                    const LayerWeights<S>&,                  \
                                    const LayerEstimators<S>*, ScoreSource,  \
                                    Metric, Granularity, const ModelConfig&, \
                                    uint64_t);                               \
  template std::vector<double> attention_map_error<S>(                       \
      const std::vector<S>&, const std::vector<S>&, int64_t, int64_t,        \
      int64_t);

SLORA_INSTANTIATE_SPARSITY(float)
SLORA_INSTANTIATE_SPARSITY(double)

}  // namespace slora
