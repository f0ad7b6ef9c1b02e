#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "slora/forward.h"

namespace slora {

// Flat key=value configuration text.
//
//   # comment lines and blank lines are skipped
//   key = value        # values keep interior spaces, '#' starts a comment
//
// Keys are unique; parse errors carry the 1-based line number. Accessors
// name the key (and file, when loaded from disk) in every error.
class KvConfig {
 public:
  static KvConfig parse(const std::string& text);
  static KvConfig load(const std::string& path);

  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& dflt) const;
  int64_t get_int(const std::string& key) const;
  int64_t get_int_or(const std::string& key, int64_t dflt) const;
  double get_double(const std::string& key) const;
  double get_double_or(const std::string& key, double dflt) const;

  // Keys in file order.
  std::vector<std::string> keys() const;

 private:
  std::vector<std::pair<std::string, std::string>> pairs_;
  std::string origin_;  // path or "<string>", for error messages

  const std::string* find(const std::string& key) const;
};

// Parses a layer list like "L3-L30", "L7" or "L0,L2-L5" into ascending
// indices. Indices must be unique and inside [0, n_layers).
std::vector<int64_t> parse_layer_list(const std::string& spec,
                                      int64_t n_layers);

// Builds a sparsity plan from the documented plan keys. Layer columns pair a
// slash-separated group list with matching integer percentages:
//
//   ffn.layers = L1-L4/L5      ffn.sparsity = 90/50
//   qkvo.layers = L2-L5        qkvo.sparsity = 25
//   qk.layers / vo.layers      # finer-grained alternative to qkvo
//   step = 5                   # dense warmup, percent of total steps
//   criteria = svd|oracle      rank = 8
//   ffn.metric = l2|wanda|random
//   qk.metric = qknorm|l2|random
//   vo.metric = l2|random
//   qk.granularity = pair|head|channel
//   vo.granularity = channel|head
//   token_split = on|off|random
//
// Unlisted layers stay dense; omitted keys keep the plan defaults. Unknown
// keys, group-count mismatches, overlapping groups and out-of-range
// percentages are errors.
SparsityPlan parse_plan(const KvConfig& cfg, int64_t n_layers);
SparsityPlan load_plan(const std::string& path, int64_t n_layers);

// Emits a plan in the same format so parse_plan(format_plan(p)) reproduces
// it exactly. Sparsities must be integer percentages. When qk and vo agree
// on every layer they collapse into the qkvo column.
std::string format_plan(const SparsityPlan& plan);

}  // namespace slora
