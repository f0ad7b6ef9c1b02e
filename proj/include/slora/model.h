#pragma once

#include <string>
#include <vector>

#include "slora/ops.h"

namespace slora {

struct ModelConfig {
  int64_t n_layers = 8;
  int64_t d_model = 256;
  int64_t n_heads = 8;
  int64_t d_ffn = 1024;
  int64_t vocab_size = 512;
  int64_t max_seq_len = 256;
  double rope_theta = 10000.0;
  double rmsnorm_eps = 1e-5;

  int64_t d_head() const { return d_model / n_heads; }

  // Returns human-readable violations; empty means valid.
  std::vector<std::string> validate() const;
  void check() const;  // throws listing all violations
};

template <typename S>
struct LayerWeights {
  Tensor<S> attn_gain, ffn_gain;                // rmsnorm gains, [d_model]
  Tensor<S> wq, wk, wv, wo;                     // [d_model, d_model]
  Tensor<S> w_gate, w_up;                       // [d_model, d_ffn]
  Tensor<S> w_down;                             // [d_ffn, d_model]
};

template <typename S>
struct Model {
  ModelConfig cfg;
  Tensor<S> embed;       // [vocab, d_model]
  Tensor<S> head;        // [d_model, vocab]
  Tensor<S> final_gain;  // [d_model]
  std::vector<LayerWeights<S>> layers;

  void set_trainable(bool trainable);
  std::vector<Tensor<S>*> all_params();
  std::vector<std::pair<std::string, Tensor<S>*>> named_params();
};

// Seeded N(0, 0.02) init for projections/embedding, gains at 1.
template <typename S>
Model<S> build_model(const ModelConfig& cfg, uint64_t seed);

// Per-layer activations captured during a forward pass, for scoring
// diagnostics and sensitivity tooling. Empty vectors mean "not captured".
template <typename S>
struct ActivationTap {
  bool capture_layer_inputs = false;   // residual stream entering each layer
  bool capture_attn_probs = false;
  std::vector<Tensor<S>> layer_inputs;            // n_layers entries
  std::vector<std::vector<S>> attn_probs;         // n_layers x (B*H*L*L)
  void reset(int64_t n_layers) {
    layer_inputs.assign((size_t)n_layers, Tensor<S>());
    attn_probs.assign((size_t)n_layers, {});
  }
};

// Dense feed-forward block: down(silu(gate(xn)) * up(xn)). xn is the
// already-normalized input.
template <typename S>
Tensor<S> ffn_forward(Tape<S>* tape, const Tensor<S>& xn,
                      const LayerWeights<S>& w);

}  // namespace slora
