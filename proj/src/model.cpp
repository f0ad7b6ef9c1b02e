#include "slora/model.h"

namespace slora {

std::vector<std::string> ModelConfig::validate() const {
  std::vector<std::string> v;
  if (n_layers <= 0) v.push_back("n_layers must be positive");
  if (d_model <= 0) v.push_back("d_model must be positive");
  if (n_heads <= 0) v.push_back("n_heads must be positive");
  if (n_heads > 0 && d_model % n_heads != 0)
    v.push_back(format_msg("d_model ", d_model, " not divisible by n_heads ",
                           n_heads));
  if (n_heads > 0 && d_model % n_heads == 0 && (d_model / n_heads) % 2 != 0)
    v.push_back(format_msg("d_head ", d_model / n_heads,
                           " must be even for rotary pairs"));
  if (d_ffn <= 0) v.push_back("d_ffn must be positive");
  if (vocab_size <= 3) v.push_back("vocab_size must exceed the 3 specials");
  if (max_seq_len <= 1) v.push_back("max_seq_len must exceed 1");
  if (rope_theta <= 0) v.push_back("rope_theta must be positive");
  if (rmsnorm_eps <= 0) v.push_back("rmsnorm_eps must be positive");
  return v;
}

void ModelConfig::check() const {
  auto v = validate();
  if (v.empty()) return;
  std::string all = "invalid model config:";
  for (const auto& s : v) all += "\n  - " + s;
  throw Error(all);
}

template <typename S>
void Model<S>::set_trainable(bool trainable) {
  for (Tensor<S>* p : all_params()) p->set_requires_grad(trainable);
}

template <typename S>
std::vector<Tensor<S>*> Model<S>::all_params() {
  std::vector<Tensor<S>*> ps;
  for (auto& [name, p] : named_params()) ps.push_back(p);
  return ps;
}

template <typename S>
std::vector<std::pair<std::string, Tensor<S>*>> Model<S>::named_params() {
  std::vector<std::pair<std::string, Tensor<S>*>> ps;
  ps.emplace_back("embed", &embed);
  for (size_t l = 0; l < layers.size(); ++l) {
    auto& w = layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    ps.emplace_back(p + "attn_gain", &w.attn_gain);
    ps.emplace_back(p + "wq", &w.wq);
    ps.emplace_back(p + "wk", &w.wk);
    ps.emplace_back(p + "wv", &w.wv);
    ps.emplace_back(p + "wo", &w.wo);
    ps.emplace_back(p + "ffn_gain", &w.ffn_gain);
    ps.emplace_back(p + "w_gate", &w.w_gate);
    ps.emplace_back(p + "w_up", &w.w_up);
    ps.emplace_back(p + "w_down", &w.w_down);
  }
  ps.emplace_back("final_gain", &final_gain);
  ps.emplace_back("head", &head);
  return ps;
}

template <typename S>
Model<S> build_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.check();
  Model<S> m;
  m.cfg = cfg;
  std::mt19937_64 rng(seed);
  const S std0 = S(0.02);
  m.embed = Tensor<S>::randn({cfg.vocab_size, cfg.d_model}, rng, std0);
  m.layers.resize((size_t)cfg.n_layers);
  for (auto& w : m.layers) {
    w.attn_gain = Tensor<S>::from_data(
        {cfg.d_model}, std::vector<S>((size_t)cfg.d_model, S(1)));
    w.wq = Tensor<S>::randn({cfg.d_model, cfg.d_model}, rng, std0);
    w.wk = Tensor<S>::randn({cfg.d_model, cfg.d_model}, rng, std0);
    w.wv = Tensor<S>::randn({cfg.d_model, cfg.d_model}, rng, std0);
    w.wo = Tensor<S>::randn({cfg.d_model, cfg.d_model}, rng, std0);
    w.ffn_gain = Tensor<S>::from_data(
        {cfg.d_model}, std::vector<S>((size_t)cfg.d_model, S(1)));
    w.w_gate = Tensor<S>::randn({cfg.d_model, cfg.d_ffn}, rng, std0);
    w.w_up = Tensor<S>::randn({cfg.d_model, cfg.d_ffn}, rng, std0);
    w.w_down = Tensor<S>::randn({cfg.d_ffn, cfg.d_model}, rng, std0);
  }
  m.final_gain = Tensor<S>::from_data(
      {cfg.d_model}, std::vector<S>((size_t)cfg.d_model, S(1)));
  m.head = Tensor<S>::randn({cfg.d_model, cfg.vocab_size}, rng, std0);
  return m;
}

template <typename S>
Tensor<S> ffn_forward(Tape<S>* tape, const Tensor<S>& xn,
                      const LayerWeights<S>& w) {
  Tensor<S> g = ops::silu(tape, ops::matmul(tape, xn, w.w_gate));
  Tensor<S> u = ops::matmul(tape, xn, w.w_up);
  return ops::matmul(tape, ops::mul(tape, g, u), w.w_down);
}

template struct Model<float>;
template struct Model<double>;
template Model<float> build_model<float>(const ModelConfig&, uint64_t);
template Model<double> build_model<double>(const ModelConfig&, uint64_t);
template Tensor<float> ffn_forward<float>(Tape<float>*, const Tensor<float>&,
                                          const LayerWeights<float>&);
template Tensor<double> ffn_forward<double>(Tape<double>*,
                                            const Tensor<double>&,
                                            const LayerWeights<double>&);

}  // namespace slora
