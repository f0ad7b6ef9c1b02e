#pragma once

#include <string>
#include <vector>

#include "slora/common.h"

namespace slora {

// Character-level tokenizer: raw byte values shifted past the specials.
constexpr int32_t kPadToken = 0;
constexpr int32_t kBosToken = 1;
constexpr int32_t kEosToken = 2;
constexpr int32_t kByteOffset = 3;
constexpr int64_t kByteVocab = 256 + kByteOffset;

std::vector<int32_t> encode_chars(const std::string& text);
std::string decode_chars(const std::vector<int32_t>& ids);  // skips specials

// One supervised example: the model reads `context` and is trained to
// produce `output`.
struct DatasetRecord {
  std::string context;
  std::string output;
};

// A record laid out for one sequence slot:
//   [BOS, context bytes..., output bytes..., EOS]  (then right-padding)
// token_is_output marks exactly the positions holding output-text tokens
// (BOS/EOS/padding/context are false). Contexts longer than the available
// room lose their oldest characters; output tokens are never dropped.
struct TokenizedRecord {
  std::vector<int32_t> tokens;
  std::vector<uint8_t> token_is_output;
};

TokenizedRecord tokenize_record(const DatasetRecord& rec, int64_t seq_len);

// A fixed-shape training batch over flattened (batch*seq_len) rows.
// targets[p] = tokens[p+1] within the same sequence (PAD at row ends) and
// loss_mask marks the logit rows whose target is an output-text token, i.e.
// loss_mask[p] = token_is_output[p+1]. Rows with loss_mask set are exactly
// the rows kept dense when token splitting routes by output position.
struct Batch {
  int64_t batch = 0;
  int64_t seq_len = 0;
  std::vector<int32_t> tokens;
  std::vector<int32_t> targets;
  std::vector<uint8_t> loss_mask;
  int64_t rows() const { return batch * seq_len; }
  int64_t loss_count() const;
};

// Lays consecutive records out into one batch. records.size() must equal
// batch.
Batch make_batch(const std::vector<DatasetRecord>& records, int64_t batch,
                 int64_t seq_len);

// Line-delimited records: one JSON object {"context": ..., "output": ...}
// per line. Malformed lines and empty outputs report their 1-based line
// number. Blank lines are skipped.
std::vector<DatasetRecord> load_dataset(const std::string& path);
std::vector<DatasetRecord> parse_dataset(const std::string& text);
void save_dataset(const std::vector<DatasetRecord>& recs,
                  const std::string& path);

// Anything that produces an endless deterministic batch stream.
class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual Batch next() = 0;
};

// Deterministic epoch shuffling: records are reshuffled at each epoch
// boundary from (seed, epoch); partial trailing batches are dropped so every
// batch has a fixed shape.
class Batcher : public BatchSource {
 public:
  Batcher(std::vector<DatasetRecord> records, int64_t batch, int64_t seq_len,
          uint64_t seed);
  Batch next() override;
  int64_t batches_per_epoch() const { return (int64_t)records_.size() / batch_; }

 private:
  void reshuffle();
  std::vector<DatasetRecord> records_;
  std::vector<size_t> order_;
  int64_t batch_ = 0, seq_len_ = 0;
  uint64_t seed_ = 0;
  int64_t epoch_ = 0, cursor_ = 0;
};

// Fixed-order batches for evaluation (records beyond the last full batch are
// dropped, mirroring the training batcher).
std::vector<Batch> build_eval_batches(const std::vector<DatasetRecord>& recs,
                                      int64_t batch, int64_t seq_len);

// --- synthetic key-value recall task --------------------------------------
// context: "k1=v1;k2=v2;...;?kq"   output: the value bound to kq.
// Keys/values are fixed-length lowercase strings; the queried key is one of
// the listed bindings. The task needs the model to attend back into the
// context, which is what contextual sparsity must preserve.
struct KvTaskConfig {
  int64_t n_pairs = 3;
  int64_t key_len = 2;
  int64_t value_len = 2;
  int64_t alphabet = 8;  // first `alphabet` lowercase letters
};

std::vector<DatasetRecord> gen_kv_records(const KvTaskConfig& cfg,
                                          int64_t n_records, uint64_t seed);

// Pre-training corpus: the same syntax as the recall task, written out as
// plain text ("k=v;k=v;?k=v\n" lines) for character-level language modeling.
std::string gen_pretrain_corpus(const KvTaskConfig& cfg, int64_t n_lines,
                                uint64_t seed);

// Language-modeling batches over a corpus: each row is a window of
// seq_len+1 consecutive bytes (tokens = first seq_len, targets = shifted by
// one, every position carries loss). Window starts are drawn from `seed`.
std::vector<Batch> lm_window_batches(const std::string& corpus, int64_t batch,
                                     int64_t seq_len, int64_t n_batches,
                                     uint64_t seed);

// Endless stream of such batches for pre-training loops.
class LmWindowSource : public BatchSource {
 public:
  LmWindowSource(std::string corpus, int64_t batch, int64_t seq_len,
                 uint64_t seed);
  Batch next() override;

 private:
  std::string corpus_;
  int64_t batch_ = 0, seq_len_ = 0;
  uint64_t seed_ = 0;
  int64_t cursor_ = 0;
};

}  // namespace slora
