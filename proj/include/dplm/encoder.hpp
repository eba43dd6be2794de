#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dplm/checkpoint.hpp"
#include "dplm/tensor.hpp"

namespace dplm {

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_seq = 64;
  double dropout = 0.1;

  void validate() const;
  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
  // Applies the keys present in j over this config.
  EncoderConfig overridden(const nlohmann::json& j) const;
};

class Vocab {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kCls = 2;
  static constexpr std::size_t kSep = 3;
  static constexpr std::size_t kMask = 4;
  static constexpr std::size_t kNumSpecial = 5;

  Vocab();

  // Tokens ranked by frequency (ties by string), capped at max_size ids including specials.
  static Vocab build(const std::vector<std::vector<std::string>>& corpus, std::size_t max_size = 8192);
  static Vocab from_tokens(std::vector<std::string> tokens);

  std::size_t id(std::string_view token) const;
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  std::vector<std::size_t> encode(const std::vector<std::string>& tokens) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

/// "[CLS] entry [SEP] desc [SEP]" with the description truncated on the right
/// to fit max_seq. An empty description gives the entry-only form
/// "[CLS] entry [SEP]".
std::vector<std::size_t> encode_sample(std::string_view entry, std::string_view desc, const Vocab& vocab,
                                       std::size_t max_seq);

// "[CLS] text [SEP]" truncated to max_seq.
std::vector<std::size_t> encode_text(std::string_view text, const Vocab& vocab, std::size_t max_seq);

struct EncodedBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::size_t> ids;      // batch*seq, [PAD]-filled
  std::vector<std::uint8_t> mask;    // 1 for real tokens
};

// Right-pads to the longest sequence (or min_seq, if larger).
EncodedBatch pad_batch(const std::vector<std::vector<std::size_t>>& seqs, std::size_t min_seq = 0);

struct EncoderOutput {
  Tensor last_hidden;                // [batch*seq, d_model]
  std::vector<Tensor> cls_per_layer;  // n_layers x [batch, d_model]
  Tensor pooled;                     // [batch, d_model], last layer [CLS]
};

struct LayerParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;
};

/// Pre-norm transformer encoder with learned absolute positions and a tied
/// masked-token prediction head.
class EncoderModel {
 public:
  EncoderModel(EncoderConfig config, Vocab vocab, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  const Vocab& vocab() const { return vocab_; }

  // rng == nullptr runs in eval mode (no dropout).
  EncoderOutput forward(const EncodedBatch& batch, std::mt19937_64* rng = nullptr) const;

  // Token prediction logits [rows, vocab] for hidden rows [rows, d_model].
  Tensor mlm_logits(const Tensor& hidden) const;

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  void set_trainable(bool trainable);

  // CRC32 over every parameter's raw bytes, in registration order.
  std::uint32_t checksum() const;

  Checkpoint to_checkpoint() const;
  static EncoderModel from_checkpoint(const Checkpoint& ckpt);
  void save(const std::filesystem::path& path) const;
  static EncoderModel load(const std::filesystem::path& path);

  Tensor& token_embedding() { return tok_emb_; }

 private:
  EncoderConfig config_;
  Vocab vocab_;
  Tensor tok_emb_, pos_emb_;
  std::vector<LayerParams> layers_;
  Tensor lnf_g_, lnf_b_, mlm_bias_;
};

std::uint32_t crc32_bytes(const void* data, std::size_t size, std::uint32_t crc = 0);

}  // namespace dplm
