#include "slora/data.h"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

namespace slora {

std::vector<int32_t> encode_chars(const std::string& text) {
  std::vector<int32_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back((int32_t)c + kByteOffset);
  return ids;
}

std::string decode_chars(const std::vector<int32_t>& ids) {
  std::string out;
  for (int32_t id : ids)
    if (id >= kByteOffset && id < (int32_t)kByteVocab)
      out.push_back((char)(unsigned char)(id - kByteOffset));
  return out;
}

TokenizedRecord tokenize_record(const DatasetRecord& rec, int64_t seq_len) {
  SLORA_CHECK(!rec.output.empty(), "record has an empty output");
  const int64_t out_len = (int64_t)rec.output.size();
  const int64_t frame = 2;  // BOS + EOS
  SLORA_CHECK(frame + out_len <= seq_len, "record output (", out_len,
              " tokens plus BOS/EOS) does not fit in seq_len ", seq_len,
              "; output tokens are never truncated");
  const int64_t ctx_room = seq_len - frame - out_len;
  const int64_t ctx_len =
      std::min<int64_t>((int64_t)rec.context.size(), ctx_room);
  const std::string ctx_tail =
      rec.context.substr(rec.context.size() - (size_t)ctx_len);

  TokenizedRecord tr;
  tr.tokens.push_back(kBosToken);
  for (int32_t id : encode_chars(ctx_tail)) tr.tokens.push_back(id);
  for (int32_t id : encode_chars(rec.output)) tr.tokens.push_back(id);
  tr.tokens.push_back(kEosToken);
  tr.token_is_output.assign(tr.tokens.size(), 0);
  for (int64_t p = 0; p < out_len; ++p)
    tr.token_is_output[(size_t)(1 + ctx_len + p)] = 1;
  return tr;
}

int64_t Batch::loss_count() const {
  int64_t n = 0;
  for (uint8_t m : loss_mask) n += m;
  return n;
}

Batch make_batch(const std::vector<DatasetRecord>& records, int64_t batch,
                 int64_t seq_len) {
  SLORA_CHECK((int64_t)records.size() == batch, "make_batch: ",
              records.size(), " records for batch size ", batch);
  Batch b;
  b.batch = batch;
  b.seq_len = seq_len;
  b.tokens.assign((size_t)(batch * seq_len), kPadToken);
  b.targets.assign((size_t)(batch * seq_len), kPadToken);
  b.loss_mask.assign((size_t)(batch * seq_len), 0);
  for (int64_t r = 0; r < batch; ++r) {
    TokenizedRecord tr = tokenize_record(records[(size_t)r], seq_len);
    const int64_t len = (int64_t)tr.tokens.size();
    for (int64_t p = 0; p < len; ++p)
      b.tokens[(size_t)(r * seq_len + p)] = tr.tokens[(size_t)p];
    for (int64_t p = 0; p + 1 < len && p < seq_len; ++p) {
      b.targets[(size_t)(r * seq_len + p)] = tr.tokens[(size_t)(p + 1)];
      b.loss_mask[(size_t)(r * seq_len + p)] =
          tr.token_is_output[(size_t)(p + 1)];
    }
  }
  return b;
}

std::vector<DatasetRecord> parse_dataset(const std::string& text) {
  std::vector<DatasetRecord> recs;
  std::istringstream in(text);
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      fail("dataset line ", line_no, ": ", e.what());
    }
    SLORA_CHECK(j.is_object() && j.contains("context") && j.contains("output"),
                "dataset line ", line_no,
                ": record needs 'context' and 'output' fields");
    SLORA_CHECK(j["context"].is_string() && j["output"].is_string(),
                "dataset line ", line_no,
                ": 'context' and 'output' must be strings");
    DatasetRecord r{j["context"].get<std::string>(),
                    j["output"].get<std::string>()};
    SLORA_CHECK(!r.output.empty(), "dataset line ", line_no,
                ": empty output");
    recs.push_back(std::move(r));
  }
  return recs;
}

std::vector<DatasetRecord> load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  SLORA_CHECK(in.good(), "cannot open dataset file '", path, "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_dataset(ss.str());
}

void save_dataset(const std::vector<DatasetRecord>& recs,
                  const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  SLORA_CHECK(out.good(), "cannot write dataset file '", path, "'");
  for (const auto& r : recs) {
    nlohmann::json j{{"context", r.context}, {"output", r.output}};
    out << j.dump() << "\n";
  }
  SLORA_CHECK(out.good(), "write to '", path, "' failed");
}

Batcher::Batcher(std::vector<DatasetRecord> records, int64_t batch,
                 int64_t seq_len, uint64_t seed)
    : records_(std::move(records)), batch_(batch), seq_len_(seq_len),
      seed_(seed) {
  SLORA_CHECK((int64_t)records_.size() >= batch_, "batcher: ",
              records_.size(), " records cannot fill a batch of ", batch_);
  reshuffle();
}

void Batcher::reshuffle() {
  order_.resize(records_.size());
  for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  std::mt19937_64 rng(mix_seed(seed_, (uint64_t)epoch_));
  std::shuffle(order_.begin(), order_.end(), rng);
}

Batch Batcher::next() {
  const int64_t usable = batches_per_epoch() * batch_;
  if (cursor_ + batch_ > usable) {
    ++epoch_;
    cursor_ = 0;
    reshuffle();
  }
  std::vector<DatasetRecord> slice;
  slice.reserve((size_t)batch_);
  for (int64_t i = 0; i < batch_; ++i)
    slice.push_back(records_[order_[(size_t)(cursor_ + i)]]);
  cursor_ += batch_;
  return make_batch(slice, batch_, seq_len_);
}

std::vector<Batch> build_eval_batches(const std::vector<DatasetRecord>& recs,
                                      int64_t batch, int64_t seq_len) {
  std::vector<Batch> out;
  for (int64_t base = 0; base + batch <= (int64_t)recs.size(); base += batch) {
    std::vector<DatasetRecord> slice(recs.begin() + base,
                                     recs.begin() + base + batch);
    out.push_back(make_batch(slice, batch, seq_len));
  }
  SLORA_CHECK(!out.empty(), "eval set: ", recs.size(),
              " records cannot fill a batch of ", batch);
  return out;
}

namespace {

std::string random_word(std::mt19937_64& rng, int64_t len, int64_t alphabet) {
  std::string w;
  for (int64_t i = 0; i < len; ++i)
    w.push_back((char)('a' + (int64_t)(rng() % (uint64_t)alphabet)));
  return w;
}

}  // namespace

std::vector<DatasetRecord> gen_kv_records(const KvTaskConfig& cfg,
                                          int64_t n_records, uint64_t seed) {
  SLORA_CHECK(cfg.n_pairs >= 1 && cfg.key_len >= 1 && cfg.value_len >= 1 &&
                  cfg.alphabet >= 2 && cfg.alphabet <= 26,
              "kv task: invalid config");
  // enough distinct keys to bind n_pairs of them without a search stall
  double space = std::pow((double)cfg.alphabet, (double)cfg.key_len);
  SLORA_CHECK(space >= 2.0 * (double)cfg.n_pairs,
              "kv task: key space too small for ", cfg.n_pairs, " pairs");
  std::mt19937_64 rng(seed);
  std::vector<DatasetRecord> recs;
  recs.reserve((size_t)n_records);
  for (int64_t i = 0; i < n_records; ++i) {
    std::set<std::string> used;
    std::vector<std::string> keys, values;
    while ((int64_t)keys.size() < cfg.n_pairs) {
      std::string k = random_word(rng, cfg.key_len, cfg.alphabet);
      if (used.insert(k).second) {
        keys.push_back(k);
        values.push_back(random_word(rng, cfg.value_len, cfg.alphabet));
      }
    }
    const size_t q = (size_t)(rng() % (uint64_t)cfg.n_pairs);
    std::string ctx;
    for (size_t p = 0; p < keys.size(); ++p)
      ctx += keys[p] + "=" + values[p] + ";";
    ctx += "?" + keys[q];
    recs.push_back({std::move(ctx), values[q]});
  }
  return recs;
}

std::string gen_pretrain_corpus(const KvTaskConfig& cfg, int64_t n_lines,
                                uint64_t seed) {
  std::string text;
  for (const auto& r : gen_kv_records(cfg, n_lines, seed))
    text += r.context + "=" + r.output + "\n";
  return text;
}

namespace {

Batch one_lm_batch(const std::string& corpus, int64_t batch, int64_t seq_len,
                   std::mt19937_64& rng) {
  const int64_t n = (int64_t)corpus.size();
  SLORA_CHECK(n >= seq_len + 1, "lm windows: corpus of ", n,
              " bytes is shorter than seq_len+1 = ", seq_len + 1);
  Batch b;
  b.batch = batch;
  b.seq_len = seq_len;
  b.tokens.resize((size_t)(batch * seq_len));
  b.targets.resize((size_t)(batch * seq_len));
  b.loss_mask.assign((size_t)(batch * seq_len), 1);
  for (int64_t r = 0; r < batch; ++r) {
    const int64_t start = (int64_t)(rng() % (uint64_t)(n - seq_len));
    for (int64_t p = 0; p < seq_len; ++p) {
      b.tokens[(size_t)(r * seq_len + p)] =
          (int32_t)(unsigned char)corpus[(size_t)(start + p)] + kByteOffset;
      b.targets[(size_t)(r * seq_len + p)] =
          (int32_t)(unsigned char)corpus[(size_t)(start + p + 1)] +
          kByteOffset;
    }
  }
  return b;
}

}  // namespace

std::vector<Batch> lm_window_batches(const std::string& corpus, int64_t batch,
                                     int64_t seq_len, int64_t n_batches,
                                     uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Batch> out;
  for (int64_t bi = 0; bi < n_batches; ++bi)
    out.push_back(one_lm_batch(corpus, batch, seq_len, rng));
  return out;
}

LmWindowSource::LmWindowSource(std::string corpus, int64_t batch,
                               int64_t seq_len, uint64_t seed)
    : corpus_(std::move(corpus)), batch_(batch), seq_len_(seq_len),
      seed_(seed) {
  SLORA_CHECK((int64_t)corpus_.size() >= seq_len_ + 1,
              "lm windows: corpus of ", corpus_.size(),
              " bytes is shorter than seq_len+1 = ", seq_len_ + 1);
}

Batch LmWindowSource::next() {
  // one fresh rng per batch keeps the stream independent of call batching
  std::mt19937_64 rng(mix_seed(seed_, (uint64_t)cursor_++));
  return one_lm_batch(corpus_, batch_, seq_len_, rng);
}

}  // namespace slora
