#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "slora/common.h"

namespace slora::flops {

// Attribution buckets for matmul work. Only matmul FLOPs (2*m*k*n per GEMM)
// are counted; elementwise ops, norms and copies are not.
enum class Path : int {
  main_fwd = 0,        // frozen-base forward matmuls (incl. attention scores/mix)
  main_bwd_input,      // input-gradient matmuls through frozen base weights
  lora_fwd,            // adapter forward matmuls
  lora_bwd,            // adapter backward matmuls (input + weight grads)
  estimator,           // channel scoring (low-rank predictor or dense oracle)
  head,                // lm head forward + its input gradient
  base_bwd_weight,     // weight-gradient matmuls when base weights train
  kNumPaths
};

constexpr int kNumPaths = (int)Path::kNumPaths;

const char* path_name(Path p);

// FLOP count of one dense linear application: tokens x d_in -> tokens x d_out.
inline int64_t linear(int64_t tokens, int64_t d_in, int64_t d_out) {
  return 2 * tokens * d_in * d_out;
}

// Per-(layer, path) matmul FLOP counts for one step. Layer index kNonLayer
// holds work outside decoder layers (embedding/head).
class Ledger {
 public:
  static constexpr int kNonLayer = -1;

  explicit Ledger(int n_layers) : n_layers_(n_layers) {
    counts_.assign((size_t)(n_layers + 1) * kNumPaths, 0);
  }

  void add(int layer, Path path, int64_t flops) {
    SLORA_CHECK(layer >= kNonLayer && layer < n_layers_,
                "flops ledger: layer ", layer, " out of range (n_layers=",
                n_layers_, ")");
    counts_[idx(layer, path)] += flops;
  }

  int64_t at(int layer, Path path) const { return counts_[idx(layer, path)]; }

  int64_t path_total(Path path) const {
    int64_t t = 0;
    for (int l = kNonLayer; l < n_layers_; ++l) t += at(l, path);
    return t;
  }

  int64_t layer_total(int layer) const {
    int64_t t = 0;
    for (int p = 0; p < kNumPaths; ++p) t += at(layer, (Path)p);
    return t;
  }

  int64_t total() const {
    int64_t t = 0;
    for (int64_t c : counts_) t += c;
    return t;
  }

  int n_layers() const { return n_layers_; }

  void reset() { std::fill(counts_.begin(), counts_.end(), 0); }

  bool operator==(const Ledger& o) const {
    return n_layers_ == o.n_layers_ && counts_ == o.counts_;
  }

  // Bytes moved by weight-slice gathers; tracked separately from FLOPs.
  int64_t gather_bytes = 0;

 private:
  size_t idx(int layer, Path path) const {
    return (size_t)(layer + 1) * kNumPaths + (size_t)path;
  }
  int n_layers_ = 0;
  std::vector<int64_t> counts_;
};

// Thread-local attribution target for instrumented kernels.
struct Attribution {
  Ledger* ledger = nullptr;
  int layer = Ledger::kNonLayer;
  Path path = Path::main_fwd;
};

Attribution& current();

// RAII scope that redirects instrumented FLOPs to (ledger, layer, path).
class Scope {
 public:
  Scope(Ledger* ledger, int layer, Path path) : saved_(current()) {
    current() = Attribution{ledger, layer, path};
  }
  explicit Scope(const Attribution& a) : saved_(current()) { current() = a; }
  ~Scope() { current() = saved_; }
  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;

 private:
  Attribution saved_;
};

inline void add(int64_t flop_count) {
  Attribution& a = current();
  if (a.ledger) a.ledger->add(a.layer, a.path, flop_count);
}

inline void add_gather_bytes(int64_t bytes) {
  Attribution& a = current();
  if (a.ledger) a.ledger->gather_bytes += bytes;
}

// Backward attribution for gradients of a matmul recorded under `fwd`.
// `input_grad` covers dX of Y = X*W (and dA/dB of activation-activation
// products); `weight_grad` covers dW when the weight itself trains.
Attribution bwd_input_attr(const Attribution& fwd);
Attribution bwd_weight_attr(const Attribution& fwd);

}  // namespace slora::flops
