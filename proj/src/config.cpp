#include "slora/config.h"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace slora {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  if (!s.empty() && s.back() == sep) out.push_back("");
  return out;
}

bool parse_i64(const std::string& s, int64_t* out) {
  if (s.empty()) return false;
  char* end = nullptr;
  errno = 0;
  long long v = std::strtoll(s.c_str(), &end, 10);
  if (errno != 0 || end != s.c_str() + s.size()) return false;
  *out = (int64_t)v;
  return true;
}

bool parse_f64(const std::string& s, double* out) {
  if (s.empty()) return false;
  char* end = nullptr;
  errno = 0;
  double v = std::strtod(s.c_str(), &end);
  if (errno != 0 || end != s.c_str() + s.size()) return false;
  *out = v;
  return true;
}

}  // namespace

KvConfig KvConfig::parse(const std::string& text) {
  KvConfig cfg;
  cfg.origin_ = "<string>";
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    SLORA_CHECK(eq != std::string::npos, "config line ", line_no,
                ": expected 'key = value', got '", line, "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    SLORA_CHECK(!key.empty(), "config line ", line_no, ": empty key");
    SLORA_CHECK(cfg.find(key) == nullptr, "config line ", line_no,
                ": duplicate key '", key, "'");
    cfg.pairs_.emplace_back(std::move(key), std::move(value));
  }
  return cfg;
}

KvConfig KvConfig::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  SLORA_CHECK(in.good(), "cannot open config file '", path, "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  KvConfig cfg = parse(buf.str());
  cfg.origin_ = path;
  return cfg;
}

const std::string* KvConfig::find(const std::string& key) const {
  for (const auto& [k, v] : pairs_)
    if (k == key) return &v;
  return nullptr;
}

bool KvConfig::has(const std::string& key) const {
  return find(key) != nullptr;
}

const std::string& KvConfig::get(const std::string& key) const {
  const std::string* v = find(key);
  SLORA_CHECK(v != nullptr, "config ", origin_, ": missing key '", key, "'");
  return *v;
}

std::string KvConfig::get_or(const std::string& key,
                             const std::string& dflt) const {
  const std::string* v = find(key);
  return v ? *v : dflt;
}

int64_t KvConfig::get_int(const std::string& key) const {
  const std::string& v = get(key);
  int64_t out = 0;
  SLORA_CHECK(parse_i64(v, &out), "config ", origin_, ": key '", key,
              "': '", v, "' is not an integer");
  return out;
}

int64_t KvConfig::get_int_or(const std::string& key, int64_t dflt) const {
  return has(key) ? get_int(key) : dflt;
}

double KvConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  double out = 0;
  SLORA_CHECK(parse_f64(v, &out), "config ", origin_, ": key '", key,
              "': '", v, "' is not a number");
  return out;
}

double KvConfig::get_double_or(const std::string& key, double dflt) const {
  return has(key) ? get_double(key) : dflt;
}

std::vector<std::string> KvConfig::keys() const {
  std::vector<std::string> out;
  out.reserve(pairs_.size());
  for (const auto& [k, v] : pairs_) out.push_back(k);
  return out;
}

// ---------------------------------------------------------------------------
// layer lists
// ---------------------------------------------------------------------------

std::vector<int64_t> parse_layer_list(const std::string& spec,
                                      int64_t n_layers) {
  SLORA_CHECK(!trim(spec).empty(), "layer list is empty");
  std::vector<int64_t> out;
  std::set<int64_t> seen;
  for (const std::string& item : split(spec, ',')) {
    SLORA_CHECK(!item.empty(), "layer list '", spec, "': empty item");
    int64_t lo = 0, hi = 0;
    size_t dash = item.find('-');
    if (dash == std::string::npos) {
      SLORA_CHECK(item.size() > 1 && item[0] == 'L' &&
                      parse_i64(item.substr(1), &lo),
                  "layer list: '", item, "' is not of the form Lk or Lk-Lm");
      hi = lo;
    } else {
      std::string a = trim(item.substr(0, dash));
      std::string b = trim(item.substr(dash + 1));
      SLORA_CHECK(a.size() > 1 && a[0] == 'L' && b.size() > 1 &&
                      b[0] == 'L' && parse_i64(a.substr(1), &lo) &&
                      parse_i64(b.substr(1), &hi),
                  "layer list: '", item, "' is not of the form Lk or Lk-Lm");
      SLORA_CHECK(lo <= hi, "layer list: range '", item, "' is descending");
    }
    for (int64_t l = lo; l <= hi; ++l) {
      SLORA_CHECK(l >= 0 && l < n_layers, "layer list: layer ", l,
                  " outside [0, ", n_layers, ")");
      SLORA_CHECK(seen.insert(l).second, "layer list: layer ", l,
                  " listed twice");
      out.push_back(l);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// plan files
// ---------------------------------------------------------------------------

namespace {

// Integer percentage in [0, 100] -> fraction.
double parse_percent(const std::string& s, const std::string& key) {
  int64_t p = 0;
  SLORA_CHECK(parse_i64(s, &p), "plan key '", key, "': '", s,
              "' is not an integer percentage");
  SLORA_CHECK(p >= 0 && p <= 100, "plan key '", key, "': percentage ", p,
              " outside [0, 100]");
  return (double)p / 100.0;
}

// Fraction -> integer percentage, rejecting values the format cannot carry.
int64_t to_percent(double s, const char* what) {
  int64_t p = (int64_t)std::llround(s * 100.0);
  SLORA_CHECK(p >= 0 && p <= 100 && (double)p / 100.0 == s, what, " ", s,
              " is not an integer percentage in [0, 100]");
  return p;
}

TokenSplitMode split_mode_from_config(const std::string& s) {
  if (s == "on") return TokenSplitMode::output_dense;
  if (s == "off") return TokenSplitMode::none;
  if (s == "random") return TokenSplitMode::random_dense;
  fail("plan key 'token_split': unknown value '", s,
       "' (expected on, off or random)");
}

const char* split_mode_to_config(TokenSplitMode m) {
  switch (m) {
    case TokenSplitMode::output_dense: return "on";
    case TokenSplitMode::none: return "off";
    case TokenSplitMode::random_dense: return "random";
    default: fail("unknown token split mode");
  }
}

const char* granularity_to_config(Granularity g) {
  return g == Granularity::rope_pair ? "pair" : granularity_name(g);
}

// One sparsity column: "<prefix>.layers = A/B" with "<prefix>.sparsity =
// 90/50" assigns each group's fraction through `assign`.
template <typename Assign>
void parse_group_column(const KvConfig& cfg, const std::string& prefix,
                        int64_t n_layers, Assign&& assign) {
  const std::string layers_key = prefix + ".layers";
  const std::string sparsity_key = prefix + ".sparsity";
  if (!cfg.has(layers_key) && !cfg.has(sparsity_key)) return;
  SLORA_CHECK(cfg.has(layers_key) && cfg.has(sparsity_key), "plan: '",
              prefix, "' needs both ", layers_key, " and ", sparsity_key);
  std::vector<std::string> groups = split(cfg.get(layers_key), '/');
  std::vector<std::string> percents = split(cfg.get(sparsity_key), '/');
  SLORA_CHECK(groups.size() == percents.size(), "plan: '", prefix, "' has ",
              groups.size(), " layer groups but ", percents.size(),
              " sparsities");
  for (size_t g = 0; g < groups.size(); ++g) {
    double frac = parse_percent(percents[g], sparsity_key);
    for (int64_t l : parse_layer_list(groups[g], n_layers)) assign(l, frac);
  }
}

// Emits "L1-L4,L6" style lists from ascending indices.
std::string format_layers(const std::vector<int64_t>& layers) {
  std::string out;
  size_t i = 0;
  while (i < layers.size()) {
    size_t j = i;
    while (j + 1 < layers.size() && layers[j + 1] == layers[j] + 1) ++j;
    if (!out.empty()) out += ',';
    out += "L" + std::to_string(layers[i]);
    if (j > i) out += "-L" + std::to_string(layers[j]);
    i = j + 1;
  }
  return out;
}

// Emits one sparsity column (layers + percentages) for the values of a
// field, grouping layers that share a percentage. Dense layers are omitted.
void format_group_column(std::string& out, const std::string& prefix,
                         const std::vector<LayerSparsity>& layers,
                         double LayerSparsity::*field) {
  // Distinct percentages in order of first appearance.
  std::vector<int64_t> percents;
  std::vector<std::vector<int64_t>> members;
  for (size_t l = 0; l < layers.size(); ++l) {
    double s = layers[l].*field;
    if (s <= 0.0) continue;
    int64_t p = to_percent(s, "plan sparsity");
    size_t g = 0;
    while (g < percents.size() && percents[g] != p) ++g;
    if (g == percents.size()) {
      percents.push_back(p);
      members.emplace_back();
    }
    members[g].push_back((int64_t)l);
  }
  if (percents.empty()) return;
  std::string layer_col, sparsity_col;
  for (size_t g = 0; g < percents.size(); ++g) {
    if (g > 0) {
      layer_col += '/';
      sparsity_col += '/';
    }
    layer_col += format_layers(members[g]);
    sparsity_col += std::to_string(percents[g]);
  }
  out += prefix + ".layers = " + layer_col + "\n";
  out += prefix + ".sparsity = " + sparsity_col + "\n";
}

}  // namespace

SparsityPlan parse_plan(const KvConfig& cfg, int64_t n_layers) {
  static const std::set<std::string> known = {
      "ffn.layers", "ffn.sparsity", "qkvo.layers", "qkvo.sparsity",
      "qk.layers",  "qk.sparsity",  "vo.layers",   "vo.sparsity",
      "step",       "criteria",     "rank",        "ffn.metric",
      "qk.metric",  "vo.metric",    "qk.granularity", "vo.granularity",
      "token_split"};
  for (const std::string& k : cfg.keys())
    SLORA_CHECK(known.count(k), "plan: unknown key '", k, "'");

  SparsityPlan plan;
  plan.layers.assign((size_t)n_layers, LayerSparsity{});

  // Each of qk/vo may be set once per layer, by qkvo or by its own column.
  std::vector<std::array<bool, 3>> claimed((size_t)n_layers,
                                           std::array<bool, 3>{});
  auto claim = [&](int64_t l, int field, const char* prefix) {
    SLORA_CHECK(!claimed[(size_t)l][(size_t)field], "plan: layer ", l,
                " assigned twice (", prefix, ")");
    claimed[(size_t)l][(size_t)field] = true;
  };
  parse_group_column(cfg, "ffn", n_layers, [&](int64_t l, double s) {
    claim(l, 0, "ffn");
    plan.layers[(size_t)l].ffn = s;
  });
  parse_group_column(cfg, "qkvo", n_layers, [&](int64_t l, double s) {
    claim(l, 1, "qkvo");
    claim(l, 2, "qkvo");
    plan.layers[(size_t)l].qk = s;
    plan.layers[(size_t)l].vo = s;
  });
  parse_group_column(cfg, "qk", n_layers, [&](int64_t l, double s) {
    claim(l, 1, "qk");
    plan.layers[(size_t)l].qk = s;
  });
  parse_group_column(cfg, "vo", n_layers, [&](int64_t l, double s) {
    claim(l, 2, "vo");
    plan.layers[(size_t)l].vo = s;
  });

  if (cfg.has("step")) {
    int64_t p = cfg.get_int("step");
    SLORA_CHECK(p >= 0 && p <= 100, "plan key 'step': percentage ", p,
                " outside [0, 100]");
    plan.dense_warmup_fraction = (double)p / 100.0;
  }
  if (cfg.has("criteria")) plan.source = source_from_name(cfg.get("criteria"));
  if (cfg.has("rank")) plan.estimator_rank = cfg.get_int("rank");
  if (cfg.has("ffn.metric"))
    plan.ffn_metric = metric_from_name(cfg.get("ffn.metric"));
  if (cfg.has("qk.metric"))
    plan.qk_metric = metric_from_name(cfg.get("qk.metric"));
  if (cfg.has("vo.metric"))
    plan.vo_metric = metric_from_name(cfg.get("vo.metric"));
  if (cfg.has("qk.granularity"))
    plan.qk_granularity = granularity_from_name(cfg.get("qk.granularity"));
  if (cfg.has("vo.granularity"))
    plan.vo_granularity = granularity_from_name(cfg.get("vo.granularity"));
  if (cfg.has("token_split"))
    plan.split_mode = split_mode_from_config(cfg.get("token_split"));
  return plan;
}

SparsityPlan load_plan(const std::string& path, int64_t n_layers) {
  return parse_plan(KvConfig::load(path), n_layers);
}

std::string format_plan(const SparsityPlan& plan) {
  std::string out;
  format_group_column(out, "ffn", plan.layers, &LayerSparsity::ffn);
  bool symmetric = true;
  for (const LayerSparsity& l : plan.layers)
    if (l.qk != l.vo) symmetric = false;
  if (symmetric) {
    format_group_column(out, "qkvo", plan.layers, &LayerSparsity::qk);
  } else {
    format_group_column(out, "qk", plan.layers, &LayerSparsity::qk);
    format_group_column(out, "vo", plan.layers, &LayerSparsity::vo);
  }
  out += "step = " +
         std::to_string(to_percent(plan.dense_warmup_fraction,
                                   "plan dense warmup")) +
         "\n";
  out += std::string("criteria = ") + source_name(plan.source) + "\n";
  out += "rank = " + std::to_string(plan.estimator_rank) + "\n";
  out += std::string("ffn.metric = ") + metric_name(plan.ffn_metric) + "\n";
  out += std::string("qk.metric = ") + metric_name(plan.qk_metric) + "\n";
  out += std::string("vo.metric = ") + metric_name(plan.vo_metric) + "\n";
  out += std::string("qk.granularity = ") +
         granularity_to_config(plan.qk_granularity) + "\n";
  out += std::string("vo.granularity = ") +
         granularity_to_config(plan.vo_granularity) + "\n";
  out += std::string("token_split = ") +
         split_mode_to_config(plan.split_mode) + "\n";
  return out;
}

}  // namespace slora
