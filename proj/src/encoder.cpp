#include "dplm/encoder.hpp"

#include <zlib.h>

#include <algorithm>
#include <map>
#include <stdexcept>

#include "dplm/text.hpp"

namespace dplm {

namespace {

const std::vector<std::string> kSpecialTokens = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

Tensor maybe_dropout(const Tensor& x, double p, std::mt19937_64* rng) {
  return rng ? dropout(x, p, *rng) : x;
}

}  // namespace

std::uint32_t crc32_bytes(const void* data, std::size_t size, std::uint32_t crc) {
  return static_cast<std::uint32_t>(
      ::crc32(crc, static_cast<const Bytef*>(data), static_cast<uInt>(size)));
}

// ---- config -----------------------------------------------------------------

void EncoderConfig::validate() const {
  if (vocab_size <= Vocab::kNumSpecial) throw std::invalid_argument("vocab_size must exceed special tokens");
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_seq < 3) {
    throw std::invalid_argument("encoder dimensions must be positive (max_seq >= 3)");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                std::to_string(n_heads));
  }
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must lie in [0, 1)");
}

nlohmann::json EncoderConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"d_model", d_model}, {"n_layers", n_layers}, {"n_heads", n_heads},
          {"d_ff", d_ff},             {"max_seq", max_seq}, {"dropout", dropout}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) { return EncoderConfig{}.overridden(j); }

EncoderConfig EncoderConfig::overridden(const nlohmann::json& j) const {
  if (!j.is_object()) throw std::invalid_argument("encoder config override must be a JSON object");
  EncoderConfig c = *this;
  static const std::vector<std::string> known = {"vocab_size", "d_model", "n_layers", "n_heads",
                                                 "d_ff",       "max_seq", "dropout"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      throw std::invalid_argument("unknown encoder config key '" + it.key() + "'");
    }
  }
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.max_seq = j.value("max_seq", c.max_seq);
    c.dropout = j.value("dropout", c.dropout);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("encoder config override: ") + e.what());
  }
  return c;
}

// ---- vocab ---------------------------------------------------------------------

Vocab::Vocab() : tokens_(kSpecialTokens.begin(), kSpecialTokens.end()) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], i);
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  Vocab v;
  for (auto& t : tokens) {
    if (std::find(kSpecialTokens.begin(), kSpecialTokens.end(), t) != kSpecialTokens.end()) continue;
    v.tokens_.push_back(std::move(t));
  }
  v.ids_.clear();
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.ids_.emplace(v.tokens_[i], i).second) {
      throw std::invalid_argument("duplicate vocabulary token '" + v.tokens_[i] + "'");
    }
  }
  return v;
}

Vocab Vocab::build(const std::vector<std::vector<std::string>>& corpus, std::size_t max_size) {
  std::map<std::string, std::size_t> counts;
  for (const auto& sent : corpus) {
    for (const auto& t : sent) ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  for (auto& [tok, n] : ranked) {
    if (tokens.size() + kNumSpecial >= max_size) break;
    if (std::find(kSpecialTokens.begin(), kSpecialTokens.end(), tok) != kSpecialTokens.end()) continue;
    tokens.push_back(tok);
  }
  return from_tokens(std::move(tokens));
}

std::size_t Vocab::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

std::vector<std::size_t> Vocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<std::size_t> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::size_t> encode_sample(std::string_view entry, std::string_view desc, const Vocab& vocab,
                                       std::size_t max_seq) {
  const auto etoks = tokenize(entry);
  if (etoks.empty()) throw std::invalid_argument("encode_sample: empty entry");
  std::vector<std::size_t> ids{Vocab::kCls};
  for (auto id : vocab.encode(etoks)) ids.push_back(id);
  ids.push_back(Vocab::kSep);
  if (ids.size() > max_seq) {
    throw std::invalid_argument("encode_sample: entry '" + std::string(entry) + "' does not fit max_seq");
  }
  const auto dtoks = tokenize(desc);
  if (dtoks.empty()) return ids;
  if (ids.size() + 1 >= max_seq) return ids;
  const std::size_t room = max_seq - ids.size() - 1;
  const auto dids = vocab.encode(dtoks);
  ids.insert(ids.end(), dids.begin(), dids.begin() + static_cast<std::ptrdiff_t>(std::min(room, dids.size())));
  ids.push_back(Vocab::kSep);
  return ids;
}

std::vector<std::size_t> encode_text(std::string_view text, const Vocab& vocab, std::size_t max_seq) {
  std::vector<std::size_t> ids{Vocab::kCls};
  const auto toks = vocab.encode(tokenize(text));
  const std::size_t room = max_seq - 2;
  ids.insert(ids.end(), toks.begin(), toks.begin() + static_cast<std::ptrdiff_t>(std::min(room, toks.size())));
  ids.push_back(Vocab::kSep);
  return ids;
}

EncodedBatch pad_batch(const std::vector<std::vector<std::size_t>>& seqs, std::size_t min_seq) {
  if (seqs.empty()) throw std::invalid_argument("pad_batch: empty batch");
  EncodedBatch b;
  b.batch = seqs.size();
  b.seq = min_seq;
  for (const auto& s : seqs) b.seq = std::max(b.seq, s.size());
  b.ids.assign(b.batch * b.seq, Vocab::kPad);
  b.mask.assign(b.batch * b.seq, 0);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    for (std::size_t j = 0; j < seqs[i].size(); ++j) {
      b.ids[i * b.seq + j] = seqs[i][j];
      b.mask[i * b.seq + j] = 1;
    }
  }
  return b;
}

// ---- model ------------------------------------------------------------------------

EncoderModel::EncoderModel(EncoderConfig config, Vocab vocab, std::uint64_t seed)
    : config_(config), vocab_(std::move(vocab)) {
  if (config_.vocab_size == 0) config_.vocab_size = vocab_.size();
  if (config_.vocab_size != vocab_.size()) {
    throw std::invalid_argument("config vocab_size " + std::to_string(config_.vocab_size) +
                                " != vocabulary size " + std::to_string(vocab_.size()));
  }
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d_model, ff = config_.d_ff;
  constexpr double std_init = 0.02;
  auto weight = [&](Shape s) { return Tensor::randn(std::move(s), std_init, rng, true); };
  auto zeros = [](Shape s) { return Tensor::zeros(std::move(s), true); };
  auto ones = [](Shape s) { return Tensor::full(std::move(s), 1.0, true); };

  tok_emb_ = weight({config_.vocab_size, d});
  pos_emb_ = weight({config_.max_seq, d});
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    LayerParams p;
    p.ln1_g = ones({d});
    p.ln1_b = zeros({d});
    p.wq = weight({d, d});
    p.bq = zeros({d});
    p.wk = weight({d, d});
    p.bk = zeros({d});
    p.wv = weight({d, d});
    p.bv = zeros({d});
    p.wo = weight({d, d});
    p.bo = zeros({d});
    p.ln2_g = ones({d});
    p.ln2_b = zeros({d});
    p.w1 = weight({d, ff});
    p.b1 = zeros({ff});
    p.w2 = weight({ff, d});
    p.b2 = zeros({d});
    layers_.push_back(std::move(p));
  }
  lnf_g_ = ones({d});
  lnf_b_ = zeros({d});
  mlm_bias_ = zeros({config_.vocab_size});
}

EncoderOutput EncoderModel::forward(const EncodedBatch& batch, std::mt19937_64* rng) const {
  if (batch.seq > config_.max_seq) {
    throw std::length_error("sequence length " + std::to_string(batch.seq) + " exceeds max_seq " +
                            std::to_string(config_.max_seq));
  }
  if (batch.ids.size() != batch.batch * batch.seq || batch.mask.size() != batch.ids.size()) {
    throw std::invalid_argument("forward: ids/mask do not match batch x seq");
  }
  for (auto id : batch.ids) {
    if (id >= config_.vocab_size) throw std::out_of_range("token id " + std::to_string(id) + " outside vocab");
  }
  std::vector<std::size_t> positions(batch.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i % batch.seq;
  std::vector<std::size_t> cls_rows(batch.batch);
  for (std::size_t b = 0; b < batch.batch; ++b) cls_rows[b] = b * batch.seq;

  const double p = config_.dropout;
  Tensor x = add(gather_rows(tok_emb_, batch.ids), gather_rows(pos_emb_, positions));
  x = maybe_dropout(x, p, rng);

  EncoderOutput out;
  for (const auto& layer : layers_) {
    Tensor h = layer_norm(x, layer.ln1_g, layer.ln1_b);
    Tensor a = attention(linear(h, layer.wq, layer.bq), linear(h, layer.wk, layer.bk),
                         linear(h, layer.wv, layer.bv), batch.batch, batch.seq, config_.n_heads, batch.mask);
    x = add(x, maybe_dropout(linear(a, layer.wo, layer.bo), p, rng));
    h = layer_norm(x, layer.ln2_g, layer.ln2_b);
    Tensor f = linear(gelu(linear(h, layer.w1, layer.b1)), layer.w2, layer.b2);
    x = add(x, maybe_dropout(f, p, rng));
    out.cls_per_layer.push_back(gather_rows(x, cls_rows));
  }
  out.last_hidden = x;
  out.pooled = out.cls_per_layer.back();
  return out;
}

Tensor EncoderModel::mlm_logits(const Tensor& hidden) const {
  Tensor h = layer_norm(hidden, lnf_g_, lnf_b_);
  return add_bias(matmul(h, transpose(tok_emb_)), mlm_bias_);
}

std::vector<std::pair<std::string, Tensor>> EncoderModel::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out{{"tok_emb", tok_emb_}, {"pos_emb", pos_emb_}};
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& p = layers_[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    for (const auto& [name, t] :
         std::initializer_list<std::pair<const char*, const Tensor&>>{
             {"ln1_g", p.ln1_g}, {"ln1_b", p.ln1_b}, {"wq", p.wq},       {"bq", p.bq},
             {"wk", p.wk},       {"bk", p.bk},       {"wv", p.wv},       {"bv", p.bv},
             {"wo", p.wo},       {"bo", p.bo},       {"ln2_g", p.ln2_g}, {"ln2_b", p.ln2_b},
             {"w1", p.w1},       {"b1", p.b1},       {"w2", p.w2},       {"b2", p.b2}}) {
      out.emplace_back(pre + name, t);
    }
  }
  out.emplace_back("lnf_g", lnf_g_);
  out.emplace_back("lnf_b", lnf_b_);
  out.emplace_back("mlm_bias", mlm_bias_);
  return out;
}

std::vector<Tensor> EncoderModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void EncoderModel::set_trainable(bool trainable) {
  for (auto& [name, t] : named_parameters()) {
    auto copy = t;
    copy.set_requires_grad(trainable);
    if (!trainable) copy.zero_grad();
  }
}

std::uint32_t EncoderModel::checksum() const {
  std::uint32_t crc = 0;
  for (const auto& [name, t] : named_parameters()) {
    crc = crc32_bytes(t.data().data(), t.numel() * sizeof(double), crc);
  }
  return crc;
}

Checkpoint EncoderModel::to_checkpoint() const {
  Checkpoint ckpt;
  nlohmann::json header = {{"kind", "encoder"}, {"config", config_.to_json()}, {"vocab", vocab_.tokens()}};
  ckpt.header_json = header.dump();
  for (const auto& [name, t] : named_parameters()) {
    ckpt.tensors.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  }
  return ckpt;
}

EncoderModel EncoderModel::from_checkpoint(const Checkpoint& ckpt) {
  const auto header = nlohmann::json::parse(ckpt.header_json);
  if (header.value("kind", "") != "encoder") throw FormatError("checkpoint does not hold an encoder");
  auto vocab = Vocab::from_tokens(header.at("vocab").get<std::vector<std::string>>());
  EncoderModel model(EncoderConfig::from_json(header.at("config")), std::move(vocab), 0);
  for (auto& [name, t] : model.named_parameters()) {
    const auto& stored = ckpt.get(name);
    if (stored.shape != t.shape()) {
      throw FormatError("tensor '" + name + "' has shape " + shape_str(stored.shape) + ", expected " +
                        shape_str(t.shape()));
    }
    auto dst = Tensor(t).mutable_data();
    std::copy(stored.data.begin(), stored.data.end(), dst.begin());
  }
  return model;
}

void EncoderModel::save(const std::filesystem::path& path) const { save_checkpoint(to_checkpoint(), path); }

EncoderModel EncoderModel::load(const std::filesystem::path& path) {
  return from_checkpoint(load_checkpoint(path));
}

}  // namespace dplm
