#pragma once

#include <array>
#include <optional>

#include "slora/model.h"

namespace slora {

// The seven projections an adapter can attach to.
enum class Proj : int { q = 0, k, v, o, gate, up, down, kNumProj };
constexpr int kNumProj = (int)Proj::kNumProj;

const char* proj_name(Proj p);
Proj proj_from_name(const std::string& name);

// Parses adapter target sets like "qkvo", "qkvud", "qkvogud" or comma lists
// ("q,k,v,up"). Single letters: q k v o g(ate) u(p) d(own).
std::vector<Proj> parse_proj_targets(const std::string& spec);

template <typename S>
struct LoraAdapter {
  Tensor<S> a;  // d_in x r, seeded normal
  Tensor<S> b;  // r x d_out, zeros
  int64_t rank = 0;
  S alpha = S(0);
  int layer = -1;
  Proj proj = Proj::q;

  S scale() const { return alpha / S(rank); }
  std::string name() const {
    return format_msg("layers.", layer, ".", proj_name(proj), ".lora");
  }
};

// All adapters for one model, addressable by (layer, proj).
template <typename S>
struct LoraBank {
  int64_t rank = 0;
  S alpha = S(0);
  std::vector<std::array<std::optional<LoraAdapter<S>>, kNumProj>> by_layer;

  LoraAdapter<S>* find(int layer, Proj p) {
    if (layer < 0 || layer >= (int)by_layer.size()) return nullptr;
    auto& slot = by_layer[(size_t)layer][(size_t)p];
    return slot ? &*slot : nullptr;
  }
  const LoraAdapter<S>* find(int layer, Proj p) const {
    return const_cast<LoraBank*>(this)->find(layer, p);
  }
  std::vector<LoraAdapter<S>*> all() {
    std::vector<LoraAdapter<S>*> out;
    for (auto& layer : by_layer)
      for (auto& slot : layer)
        if (slot) out.push_back(&*slot);
    return out;
  }
  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& layer : by_layer)
      for (const auto& slot : layer)
        if (slot) n += slot->a.numel() + slot->b.numel();
    return n;
  }
};

// One adapter per (layer, target projection). `a` is seeded N(0, 0.02), `b`
// starts at zero so the initial delta vanishes. Both factors require grad.
template <typename S>
LoraBank<S> attach_lora(const Model<S>& model, const std::vector<Proj>& targets,
                        int64_t rank, S alpha, uint64_t seed);

// Adapter branch: scale * (x * a) * b. Always dense: full input width, full
// output width, every token. FLOPs land under the lora paths.
template <typename S>
Tensor<S> lora_delta(Tape<S>* tape, const Tensor<S>& x,
                     LoraAdapter<S>& adapter);

// Frozen linear plus optional adapter, with optional column pruning of the
// frozen branch only: kept output channels come from the sliced weight, the
// adapter delta still covers all channels.
template <typename S>
Tensor<S> merged_linear(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& w,
                        LoraAdapter<S>* adapter,
                        const std::vector<int64_t>* kept_out_channels);

}  // namespace slora
