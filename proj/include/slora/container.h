#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "slora/lora.h"
#include "slora/model.h"
#include "slora/sparsity.h"

namespace slora {

// One named payload in a container: scalar type, shape, raw little-endian
// bytes.
struct ContainerEntry {
  std::string dtype;  // "f32" or "f64"
  std::vector<int64_t> shape;
  std::vector<uint8_t> bytes;

  int64_t numel() const;
  int64_t scalar_size() const;  // bytes per element for dtype
};

// In-memory image of a container file: a name -> entry map plus the
// byte-level save/load. The on-disk layout is
//   "SLRA" | version u32 LE | manifest length u64 LE | manifest | payloads
// where the manifest is structured text mapping each tensor name to dtype,
// shape, absolute byte offset, and byte length, and payloads are packed in
// ascending name order. Saving is a pure function of the contents, so
// save(load(save(x))) is byte-identical to save(x).
class Container {
 public:
  void put(const std::string& name, ContainerEntry e);
  bool has(const std::string& name) const;
  const ContainerEntry& at(const std::string& name) const;
  std::vector<std::string> names() const;  // ascending

  template <typename S>
  void put_tensor(const std::string& name, const Tensor<S>& t);
  // Rebuilds a tensor; the stored dtype must match S exactly.
  template <typename S>
  Tensor<S> tensor(const std::string& name, bool requires_grad = false) const;

  // Scalars ride as single-element f64 entries.
  void put_scalar(const std::string& name, double v);
  double scalar(const std::string& name) const;

  void save(const std::string& path) const;
  static Container load(const std::string& path);

 private:
  std::map<std::string, ContainerEntry> entries_;
};

// --- checkpoint / adapter / estimator persistence ---------------------------

// Model weights under their parameter names plus the config as scalar
// entries. Loading rebuilds the exact weights with gradients disabled.
template <typename S>
void save_model(const Model<S>& model, const std::string& path);
template <typename S>
Model<S> load_model(const std::string& path);

// Adapter factors per (layer, projection), with bank rank and alpha. Loaded
// factors require gradients (adapters exist to be trained).
template <typename S>
void save_adapters(const LoraBank<S>& bank, const std::string& path);
template <typename S>
LoraBank<S> load_adapters(const std::string& path);

// Frozen low-rank estimator factors per layer and scoring weight, with the
// retained singular values. Layers without factors stay empty on load.
template <typename S>
void save_estimator_bank(const EstimatorBank<S>& bank,
                         const std::string& path);
template <typename S>
EstimatorBank<S> load_estimator_bank(const std::string& path);

}  // namespace slora
