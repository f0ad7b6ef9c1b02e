#include "slora/container.h"

#include <algorithm>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace slora {

namespace {

constexpr char kMagic[4] = {'S', 'L', 'R', 'A'};
constexpr uint32_t kVersion = 1;
constexpr int64_t kHeaderBytes = 16;  // magic + version u32 + manifest u64

template <typename S>
const char* dtype_of() {
  if constexpr (std::is_same_v<S, float>) return "f32";
  else return "f64";
}

int64_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  fail("container: unknown dtype '", dtype, "'");
}

}  // namespace

int64_t ContainerEntry::numel() const {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

int64_t ContainerEntry::scalar_size() const { return dtype_size(dtype); }

void Container::put(const std::string& name, ContainerEntry e) {
  SLORA_CHECK(!name.empty(), "container: empty entry name");
  SLORA_CHECK(!entries_.count(name), "container: duplicate entry '", name,
              "'");
  for (int64_t d : e.shape)
    SLORA_CHECK(d > 0, "container entry '", name, "': bad dimension ", d);
  SLORA_CHECK((int64_t)e.bytes.size() == e.numel() * dtype_size(e.dtype),
              "container entry '", name, "': ", e.bytes.size(),
              " payload bytes for shape x dtype of ",
              e.numel() * dtype_size(e.dtype));
  entries_.emplace(name, std::move(e));
}

bool Container::has(const std::string& name) const {
  return entries_.count(name) != 0;
}

const ContainerEntry& Container::at(const std::string& name) const {
  auto it = entries_.find(name);
  SLORA_CHECK(it != entries_.end(), "container has no entry '", name, "'");
  return it->second;
}

std::vector<std::string> Container::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, e] : entries_) out.push_back(name);
  return out;  // std::map iterates in ascending key order
}

template <typename S>
void Container::put_tensor(const std::string& name, const Tensor<S>& t) {
  SLORA_CHECK(t.defined(), "container: undefined tensor for '", name, "'");
  ContainerEntry e;
  e.dtype = dtype_of<S>();
  e.shape = t.shape();
  e.bytes.resize((size_t)t.numel() * sizeof(S));
  std::memcpy(e.bytes.data(), t.data(), e.bytes.size());
  put(name, std::move(e));
}

template <typename S>
Tensor<S> Container::tensor(const std::string& name,
                            bool requires_grad) const {
  const ContainerEntry& e = at(name);
  SLORA_CHECK(e.dtype == dtype_of<S>(), "container entry '", name,
              "' holds ", e.dtype, ", requested ", dtype_of<S>());
  Tensor<S> t = Tensor<S>::zeros(e.shape, requires_grad);
  std::memcpy(t.data(), e.bytes.data(), e.bytes.size());
  return t;
}

template void Container::put_tensor<float>(const std::string&,
                                           const Tensor<float>&);
template void Container::put_tensor<double>(const std::string&,
                                            const Tensor<double>&);
template Tensor<float> Container::tensor<float>(const std::string&,
                                                bool) const;
template Tensor<double> Container::tensor<double>(const std::string&,
                                                  bool) const;

void Container::put_scalar(const std::string& name, double v) {
  put_tensor<double>(name, Tensor<double>::from_data({1}, {v}));
}

double Container::scalar(const std::string& name) const {
  const ContainerEntry& e = at(name);
  SLORA_CHECK(e.dtype == "f64" && e.numel() == 1, "container entry '", name,
              "' is not a scalar");
  double v = 0;
  std::memcpy(&v, e.bytes.data(), 8);
  return v;
}

void Container::save(const std::string& path) const {
  // The manifest embeds absolute offsets, and the offsets depend on the
  // manifest's own length; iterate to the (monotone, hence unique) fixpoint.
  auto manifest_at = [&](int64_t payload_start) {
    nlohmann::json j = nlohmann::json::object();
    int64_t off = payload_start;
    for (const auto& [name, e] : entries_) {
      j[name] = {{"dtype", e.dtype},
                 {"shape", e.shape},
                 {"offset", off},
                 {"length", (int64_t)e.bytes.size()}};
      off += (int64_t)e.bytes.size();
    }
    return j.dump();
  };
  std::string manifest = manifest_at(kHeaderBytes);
  for (int iter = 0;; ++iter) {
    SLORA_CHECK(iter < 8, "container save: manifest size did not settle");
    std::string next = manifest_at(kHeaderBytes + (int64_t)manifest.size());
    if (next.size() == manifest.size()) {
      manifest = std::move(next);
      break;
    }
    manifest = std::move(next);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  SLORA_CHECK(out.good(), "cannot write container file ", path);
  out.write(kMagic, 4);
  const uint32_t version = kVersion;
  out.write((const char*)&version, 4);
  const uint64_t mlen = manifest.size();
  out.write((const char*)&mlen, 8);
  out.write(manifest.data(), (std::streamsize)manifest.size());
  for (const auto& [name, e] : entries_)
    out.write((const char*)e.bytes.data(), (std::streamsize)e.bytes.size());
  out.flush();
  SLORA_CHECK(out.good(), "write to container file ", path, " failed");
}

Container Container::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  SLORA_CHECK(in.good(), "cannot read container file ", path);
  std::vector<uint8_t> file((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
  SLORA_CHECK((int64_t)file.size() >= kHeaderBytes, "container file ", path,
              " too small for a header");
  SLORA_CHECK(std::memcmp(file.data(), kMagic, 4) == 0, "container file ",
              path, ": bad magic, not a container");
  uint32_t version = 0;
  std::memcpy(&version, file.data() + 4, 4);
  SLORA_CHECK(version == kVersion, "container file ", path,
              ": unsupported version ", version);
  uint64_t mlen = 0;
  std::memcpy(&mlen, file.data() + 8, 8);
  SLORA_CHECK(kHeaderBytes + (int64_t)mlen <= (int64_t)file.size(),
              "container file ", path, ": manifest (", mlen,
              " bytes) runs past the end of the file");

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(
        std::string((const char*)file.data() + kHeaderBytes, (size_t)mlen));
  } catch (const std::exception& e) {
    fail("container file ", path, ": manifest is not valid text: ",
         e.what());
  }
  SLORA_CHECK(j.is_object(), "container file ", path,
              ": manifest is not a name -> entry map");

  const int64_t payload_start = kHeaderBytes + (int64_t)mlen;
  Container c;
  std::vector<std::pair<int64_t, std::string>> spans;  // (offset, name)
  for (auto& [name, meta] : j.items()) {
    SLORA_CHECK(meta.contains("dtype") && meta.contains("shape") &&
                    meta.contains("offset") && meta.contains("length"),
                "container entry '", name, "': incomplete manifest record");
    ContainerEntry e;
    e.dtype = meta["dtype"].get<std::string>();
    e.shape = meta["shape"].get<std::vector<int64_t>>();
    const int64_t offset = meta["offset"].get<int64_t>();
    const int64_t length = meta["length"].get<int64_t>();
    SLORA_CHECK(length == e.numel() * dtype_size(e.dtype),
                "container entry '", name, "': length ", length,
                " disagrees with shape and dtype");
    SLORA_CHECK(offset >= payload_start,
                "container entry '", name, "': offset ", offset,
                " points inside the header or manifest");
    SLORA_CHECK(offset + length <= (int64_t)file.size(),
                "container entry '", name, "': bytes [", offset, ", ",
                offset + length, ") run past the end of the file");
    e.bytes.assign(file.begin() + offset, file.begin() + offset + length);
    spans.emplace_back(offset, name);
    c.put(name, std::move(e));
  }
  std::sort(spans.begin(), spans.end());
  for (size_t i = 1; i < spans.size(); ++i) {
    const auto& prev = c.at(spans[i - 1].second);
    SLORA_CHECK(spans[i - 1].first + (int64_t)prev.bytes.size() <=
                    spans[i].first,
                "container entries '", spans[i - 1].second, "' and '",
                spans[i].second, "' overlap");
  }
  return c;
}

// --- checkpoint / adapter / estimator persistence ---------------------------

namespace {

constexpr const char* kConfigFields[] = {
    "n_layers", "d_model",     "n_heads",    "d_ffn",
    "vocab_size", "max_seq_len", "rope_theta", "rmsnorm_eps"};

void put_config(Container& c, const ModelConfig& cfg) {
  c.put_scalar("config.n_layers", (double)cfg.n_layers);
  c.put_scalar("config.d_model", (double)cfg.d_model);
  c.put_scalar("config.n_heads", (double)cfg.n_heads);
  c.put_scalar("config.d_ffn", (double)cfg.d_ffn);
  c.put_scalar("config.vocab_size", (double)cfg.vocab_size);
  c.put_scalar("config.max_seq_len", (double)cfg.max_seq_len);
  c.put_scalar("config.rope_theta", cfg.rope_theta);
  c.put_scalar("config.rmsnorm_eps", cfg.rmsnorm_eps);
}

ModelConfig get_config(const Container& c) {
  for (const char* f : kConfigFields)
    SLORA_CHECK(c.has(std::string("config.") + f),
                "checkpoint is missing config.", f);
  ModelConfig cfg;
  cfg.n_layers = (int64_t)c.scalar("config.n_layers");
  cfg.d_model = (int64_t)c.scalar("config.d_model");
  cfg.n_heads = (int64_t)c.scalar("config.n_heads");
  cfg.d_ffn = (int64_t)c.scalar("config.d_ffn");
  cfg.vocab_size = (int64_t)c.scalar("config.vocab_size");
  cfg.max_seq_len = (int64_t)c.scalar("config.max_seq_len");
  cfg.rope_theta = c.scalar("config.rope_theta");
  cfg.rmsnorm_eps = c.scalar("config.rmsnorm_eps");
  cfg.check();
  return cfg;
}

}  // namespace

template <typename S>
void save_model(const Model<S>& model, const std::string& path) {
  Container c;
  put_config(c, model.cfg);
  for (auto& [name, t] : const_cast<Model<S>&>(model).named_params())
    c.put_tensor<S>(name, *t);
  c.save(path);
}

template <typename S>
Model<S> load_model(const std::string& path) {
  Container c = Container::load(path);
  Model<S> m = build_model<S>(get_config(c), 0);
  for (auto& [name, t] : m.named_params()) {
    Tensor<S> stored = c.tensor<S>(name);
    SLORA_CHECK(stored.shape() == t->shape(), "checkpoint entry '", name,
                "' has shape ", shape_str(stored.shape()), ", model expects ",
                shape_str(t->shape()));
    std::memcpy(t->data(), stored.data(), (size_t)t->numel() * sizeof(S));
  }
  m.set_trainable(false);
  return m;
}

template <typename S>
void save_adapters(const LoraBank<S>& bank, const std::string& path) {
  Container c;
  c.put_scalar("lora.rank", (double)bank.rank);
  c.put_scalar("lora.alpha", (double)bank.alpha);
  c.put_scalar("lora.n_layers", (double)bank.by_layer.size());
  for (const auto& layer : bank.by_layer)
    for (const auto& slot : layer)
      if (slot) {
        c.put_tensor<S>(slot->name() + ".a", slot->a);
        c.put_tensor<S>(slot->name() + ".b", slot->b);
      }
  c.save(path);
}

template <typename S>
LoraBank<S> load_adapters(const std::string& path) {
  Container c = Container::load(path);
  LoraBank<S> bank;
  bank.rank = (int64_t)c.scalar("lora.rank");
  bank.alpha = (S)c.scalar("lora.alpha");
  bank.by_layer.resize((size_t)c.scalar("lora.n_layers"));
  for (int l = 0; l < (int)bank.by_layer.size(); ++l)
    for (int p = 0; p < kNumProj; ++p) {
      LoraAdapter<S> ad;
      ad.layer = l;
      ad.proj = (Proj)p;
      ad.rank = bank.rank;
      ad.alpha = bank.alpha;
      const std::string base = ad.name();
      if (!c.has(base + ".a") && !c.has(base + ".b")) continue;
      ad.a = c.tensor<S>(base + ".a", /*requires_grad=*/true);
      ad.b = c.tensor<S>(base + ".b", /*requires_grad=*/true);
      SLORA_CHECK(ad.a.dim(1) == bank.rank && ad.b.dim(0) == bank.rank,
                  "adapter '", base, "' factors disagree with rank ",
                  bank.rank);
      bank.by_layer[(size_t)l][(size_t)p] = std::move(ad);
    }
  return bank;
}

namespace {

constexpr const char* kEstimatorWeights[] = {"w_gate", "w_up", "wq", "wk",
                                             "wv"};

template <typename S>
std::optional<SvdFactors<S>>* factor_slot(LayerEstimators<S>& e,
                                          const std::string& w) {
  if (w == "w_gate") return &e.gate;
  if (w == "w_up") return &e.up;
  if (w == "wq") return &e.q;
  if (w == "wk") return &e.k;
  if (w == "wv") return &e.v;
  fail("estimator container: unknown weight '", w, "'");
}

}  // namespace

template <typename S>
void save_estimator_bank(const EstimatorBank<S>& bank,
                         const std::string& path) {
  Container c;
  c.put_scalar("estimator.rank", (double)bank.rank);
  c.put_scalar("estimator.n_layers", (double)bank.layers.size());
  for (size_t l = 0; l < bank.layers.size(); ++l) {
    auto& e = const_cast<LayerEstimators<S>&>(bank.layers[l]);
    for (const char* w : kEstimatorWeights) {
      const std::optional<SvdFactors<S>>* slot = factor_slot(e, w);
      if (!*slot) continue;
      const SvdFactors<S>& f = **slot;
      const std::string base =
          "layers." + std::to_string(l) + "." + w + ".svd";
      c.put_tensor<S>(base + ".a", f.w_a);
      c.put_tensor<S>(base + ".b", f.w_b);
      c.put_tensor<double>(
          base + ".s",
          Tensor<double>::from_data({(int64_t)f.singular_values.size()},
                               f.singular_values));
    }
  }
  c.save(path);
}

template <typename S>
EstimatorBank<S> load_estimator_bank(const std::string& path) {
  Container c = Container::load(path);
  EstimatorBank<S> bank;
  bank.rank = (int64_t)c.scalar("estimator.rank");
  bank.layers.resize((size_t)c.scalar("estimator.n_layers"));
  for (size_t l = 0; l < bank.layers.size(); ++l)
    for (const char* w : kEstimatorWeights) {
      const std::string source = "layers." + std::to_string(l) + "." + w;
      const std::string base = source + ".svd";
      if (!c.has(base + ".a")) continue;
      SvdFactors<S> f;
      f.w_a = c.tensor<S>(base + ".a");
      f.w_b = c.tensor<S>(base + ".b");
      f.rank_k = f.w_a.dim(1);
      f.source_id = source;
      Tensor<double> s = c.tensor<double>(base + ".s");
      f.singular_values.assign(s.data(), s.data() + s.numel());
      SLORA_CHECK(f.rank_k == bank.rank &&
                      f.w_b.dim(0) == bank.rank &&
                      (int64_t)f.singular_values.size() == bank.rank,
                  "estimator entry '", base, "' disagrees with bank rank ",
                  bank.rank);
      *factor_slot(bank.layers[l], w) = std::move(f);
    }
  return bank;
}

#define SLORA_INSTANTIATE_CONTAINER(S)                                       \
  template void save_model<S>(const Model<S>&, const std::string&);         \
  template Model<S> load_model<S>(const std::string&);                      \
  template void save_adapters<S>(const LoraBank<S>&, const std::string&);   \
  template LoraBank<S> load_adapters<S>(const std::string&);                \
  template void save_estimator_bank<S>(const EstimatorBank<S>&,             \
                                       const std::string&);                 \
  template EstimatorBank<S> load_estimator_bank<S>(const std::string&);

SLORA_INSTANTIATE_CONTAINER(float)
SLORA_INSTANTIATE_CONTAINER(double)

}  // namespace slora
