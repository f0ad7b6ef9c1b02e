#include "slora/lora.h"

#include "slora/flops.h"

namespace slora {

const char* proj_name(Proj p) {
  switch (p) {
    case Proj::q: return "q";
    case Proj::k: return "k";
    case Proj::v: return "v";
    case Proj::o: return "o";
    case Proj::gate: return "gate";
    case Proj::up: return "up";
    case Proj::down: return "down";
    default: return "?";
  }
}

Proj proj_from_name(const std::string& name) {
  for (int i = 0; i < kNumProj; ++i)
    if (name == proj_name((Proj)i)) return (Proj)i;
  if (name == "g") return Proj::gate;
  if (name == "u") return Proj::up;
  if (name == "d") return Proj::down;
  fail("lora: unknown projection '", name, "'");
}

std::vector<Proj> parse_proj_targets(const std::string& spec) {
  std::vector<Proj> out;
  auto push = [&](Proj p) {
    for (Proj q : out)
      if (q == p) fail("lora: projection '", proj_name(p),
                       "' listed twice in '", spec, "'");
    out.push_back(p);
  };
  if (spec.find(',') != std::string::npos) {
    size_t start = 0;
    while (start <= spec.size()) {
      size_t end = spec.find(',', start);
      if (end == std::string::npos) end = spec.size();
      std::string tok = spec.substr(start, end - start);
      if (!tok.empty()) push(proj_from_name(tok));
      start = end + 1;
    }
  } else {
    for (char c : spec) push(proj_from_name(std::string(1, c)));
  }
  SLORA_CHECK(!out.empty(), "lora: empty target set '", spec, "'");
  return out;
}

template <typename S>
LoraBank<S> attach_lora(const Model<S>& model, const std::vector<Proj>& targets,
                        int64_t rank, S alpha, uint64_t seed) {
  const auto& cfg = model.cfg;
  SLORA_CHECK(rank >= 1, "lora: rank must be >= 1, got ", rank);
  LoraBank<S> bank;
  bank.rank = rank;
  bank.alpha = alpha;
  bank.by_layer.resize((size_t)cfg.n_layers);
  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    for (Proj p : targets) {
      int64_t d_in = cfg.d_model, d_out = cfg.d_model;
      if (p == Proj::gate || p == Proj::up) d_out = cfg.d_ffn;
      if (p == Proj::down) d_in = cfg.d_ffn;
      SLORA_CHECK(rank <= std::min(d_in, d_out), "lora: rank ", rank,
                  " exceeds min dim of ", proj_name(p), " (", d_in, "x",
                  d_out, ")");
      LoraAdapter<S> ad;
      ad.rank = rank;
      ad.alpha = alpha;
      ad.layer = layer;
      ad.proj = p;
      std::mt19937_64 rng(mix_seed(seed, (uint64_t)(layer * kNumProj + (int)p)));
      ad.a = Tensor<S>::randn({d_in, rank}, rng, S(0.02), true);
      ad.b = Tensor<S>::zeros({rank, d_out}, true);
      bank.by_layer[(size_t)layer][(size_t)(int)p] = std::move(ad);
    }
  }
  return bank;
}

template <typename S>
Tensor<S> lora_delta(Tape<S>* tape, const Tensor<S>& x,
                     LoraAdapter<S>& adapter) {
  SLORA_CHECK(x.defined() && x.ndim() == 2 && x.dim(1) == adapter.a.dim(0),
              "lora_delta: input ", shape_str(x.shape()),
              " does not match adapter ", adapter.name(), " in-dim ",
              adapter.a.dim(0));
  flops::Attribution attr = flops::current();
  attr.path = flops::Path::lora_fwd;
  flops::Scope sc(attr);
  Tensor<S> u = ops::matmul(tape, x, adapter.a);
  return ops::scale(tape, ops::matmul(tape, u, adapter.b), adapter.scale());
}

template <typename S>
Tensor<S> merged_linear(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& w,
                        LoraAdapter<S>* adapter,
                        const std::vector<int64_t>* kept_out_channels) {
  Tensor<S> main;
  if (kept_out_channels) {
    Tensor<S> w_cols = ops::gather_cols(tape, w, *kept_out_channels);
    Tensor<S> part = ops::matmul(tape, x, w_cols);
    main = ops::scatter_cols(tape, part, *kept_out_channels, w.dim(1));
  } else {
    main = ops::matmul(tape, x, w);
  }
  if (!adapter) return main;
  return ops::add(tape, main, lora_delta(tape, x, *adapter));
}

#define SLORA_INSTANTIATE_LORA(S)                                          \
  template struct LoraAdapter<S>;                                          \
  template struct LoraBank<S>;                                             \
  template LoraBank<S> attach_lora<S>(const Model<S>&,                     \
                                      const std::vector<Proj>&, int64_t, S, \
                                      uint64_t);                           \
  template Tensor<S> lora_delta<S>(Tape<S>*, const Tensor<S>&,             \
                                   LoraAdapter<S>&);                       \
  template Tensor<S> merged_linear<S>(Tape<S>*, const Tensor<S>&,          \
                                      const Tensor<S>&, LoraAdapter<S>*,   \
                                      const std::vector<int64_t>*);

SLORA_INSTANTIATE_LORA(float)
SLORA_INSTANTIATE_LORA(double)

}  // namespace slora
