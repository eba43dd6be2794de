#include "dplm/plugin.hpp"

#include <cmath>
#include <cstring>

#include "dplm/checkpoint.hpp"

namespace dplm {

std::string_view to_string(RetrievalMode mode) { return mode == RetrievalMode::K ? "k" : "kv"; }

RetrievalMode parse_retrieval_mode(std::string_view text) {
  if (text == "k" || text == "K") return RetrievalMode::K;
  if (text == "kv" || text == "KV" || text == "k+v" || text == "K+V") return RetrievalMode::KV;
  throw std::invalid_argument("unknown retrieval mode '" + std::string(text) + "' (expected k or kv)");
}

std::vector<std::size_t> plugin_input(const Dictionary& dict, std::size_t entry, std::size_t sense,
                                      RetrievalMode mode, const Vocab& vocab, std::size_t max_seq) {
  const auto& e = dict.at(entry);
  if (mode == RetrievalMode::K) return encode_sample(e.entry, "", vocab, max_seq);
  return encode_sample(e.entry, e.senses.at(sense), vocab, max_seq);
}

std::vector<EntryMatch> collapse_for_mode(const std::vector<EntryMatch>& matches, RetrievalMode mode) {
  if (mode == RetrievalMode::KV) return matches;
  std::vector<EntryMatch> out;
  for (const auto& m : matches) {
    if (m.sense == 0) out.push_back(m);
  }
  return out;
}

namespace {

std::vector<EntryEmbedding> embed_inputs(const EncoderModel& plugin,
                                         const std::vector<std::vector<std::size_t>>& seqs) {
  NoGradGuard no_grad;
  const auto out = plugin.forward(pad_batch(seqs));
  const std::size_t d = plugin.config().d_model;
  std::vector<EntryEmbedding> embs(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    for (const auto& layer : out.cls_per_layer) {
      auto row = layer.data().subspan(i * d, d);
      embs[i].per_layer.emplace_back(row.begin(), row.end());
    }
  }
  return embs;
}

}  // namespace

std::vector<EntryEmbedding> retrieve_live(const EncoderModel& plugin, const std::vector<EntryMatch>& matches,
                                          const Dictionary& dict, RetrievalMode mode) {
  if (matches.empty()) return {};
  std::vector<std::vector<std::size_t>> seqs;
  for (const auto& m : matches) {
    if (m.entry >= dict.size() || m.sense >= dict.at(m.entry).senses.size()) {
      throw MissingEntryError("match (" + std::to_string(m.entry) + ", " + std::to_string(m.sense) +
                              ") is not in the dictionary");
    }
    seqs.push_back(plugin_input(dict, m.entry, m.sense, mode, plugin.vocab(), plugin.config().max_seq));
  }
  auto embs = embed_inputs(plugin, seqs);
  for (std::size_t i = 0; i < matches.size(); ++i) {
    embs[i].entry = dict.at(matches[i].entry).entry;
    embs[i].sense = matches[i].sense;
    embs[i].mode = mode;
  }
  return embs;
}

// ---- lookup table -------------------------------------------------------------------

void LookupTable::insert(const std::string& entry, std::size_t sense, std::vector<float> values) {
  if (values.size() != n_layers_ * d_model_) {
    throw std::invalid_argument("lookup record for '" + entry + "' has " + std::to_string(values.size()) +
                                " values, expected " + std::to_string(n_layers_ * d_model_));
  }
  auto key = std::make_pair(entry, static_cast<std::uint32_t>(sense));
  auto [it, inserted] = records_.emplace(key, std::move(values));
  if (!inserted) throw std::invalid_argument("duplicate lookup record for '" + entry + "'");
  order_.push_back(std::move(key));
}

const std::vector<float>* LookupTable::find(const std::string& entry, std::size_t sense) const {
  auto it = records_.find({entry, static_cast<std::uint32_t>(sense)});
  return it == records_.end() ? nullptr : &it->second;
}

std::vector<std::uint8_t> LookupTable::serialize() const {
  std::vector<std::uint8_t> out{'D', 'L', 'U', 'T'};
  bytes::put_u32(out, kVersion);
  bytes::put_u8(out, static_cast<std::uint8_t>(mode_));
  bytes::put_u32(out, static_cast<std::uint32_t>(n_layers_));
  bytes::put_u32(out, static_cast<std::uint32_t>(d_model_));
  bytes::put_u32(out, static_cast<std::uint32_t>(order_.size()));
  for (const auto& key : order_) {
    bytes::put_string(out, key.first);
    bytes::put_u32(out, key.second);
    for (float v : records_.at(key)) bytes::put_f32(out, v);
  }
  bytes::put_u32(out, crc32_bytes(out.data(), out.size()));
  return out;
}

LookupTable LookupTable::deserialize(const std::vector<std::uint8_t>& data) {
  if (data.size() < 8 || std::memcmp(data.data(), "DLUT", 4) != 0) {
    throw FormatError("not a DLUT lookup table (bad magic)");
  }
  const std::size_t body = data.size() - 4;
  bytes::Reader crc_reader(data.data() + body, 4);
  if (crc_reader.u32() != crc32_bytes(data.data(), body)) throw FormatError("lookup table CRC32 mismatch");

  bytes::Reader r(data.data() + 4, body - 4);
  const auto version = r.u32();
  if (version != kVersion) throw FormatError("unsupported lookup table version " + std::to_string(version));
  const auto mode = r.u8();
  if (mode > 1) throw FormatError("invalid retrieval mode byte " + std::to_string(mode));
  const auto n_layers = r.u32();
  const auto d_model = r.u32();
  const auto count = r.u32();
  LookupTable table(static_cast<RetrievalMode>(mode), n_layers, d_model);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto entry = r.string();
    const auto sense = r.u32();
    std::vector<float> values(static_cast<std::size_t>(n_layers) * d_model);
    for (auto& v : values) v = r.f32();
    table.insert(entry, sense, std::move(values));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes in lookup table");
  return table;
}

void LookupTable::save(const std::filesystem::path& path) const { bytes::write_file(path, serialize()); }

LookupTable LookupTable::load(const std::filesystem::path& path) { return deserialize(bytes::read_file(path)); }

LookupTable build_lookup_table(const EncoderModel& plugin, const Dictionary& dict, RetrievalMode mode,
                               const std::filesystem::path* out, std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  const auto& cfg = plugin.config();
  LookupTable table(mode, cfg.n_layers, cfg.d_model);
  std::vector<SenseRef> keys;
  for (std::size_t i = 0; i < dict.size(); ++i) {
    const std::size_t senses = mode == RetrievalMode::K ? 1 : dict.at(i).senses.size();
    for (std::size_t s = 0; s < senses; ++s) keys.push_back({i, s});
  }
  for (std::size_t start = 0; start < keys.size(); start += batch_size) {
    const std::size_t end = std::min(keys.size(), start + batch_size);
    std::vector<std::vector<std::size_t>> seqs;
    for (std::size_t k = start; k < end; ++k) {
      seqs.push_back(plugin_input(dict, keys[k].entry, keys[k].sense, mode, plugin.vocab(), cfg.max_seq));
    }
    const auto embs = embed_inputs(plugin, seqs);
    for (std::size_t k = start; k < end; ++k) {
      std::vector<float> values;
      values.reserve(cfg.n_layers * cfg.d_model);
      for (const auto& layer : embs[k - start].per_layer) {
        for (double v : layer) values.push_back(static_cast<float>(v));
      }
      table.insert(dict.at(keys[k].entry).entry, keys[k].sense, std::move(values));
    }
  }
  if (out) table.save(*out);
  return table;
}

std::vector<EntryEmbedding> retrieve_lut(const LookupTable& table, const std::vector<EntryMatch>& matches,
                                         const Dictionary& dict) {
  std::vector<EntryEmbedding> out;
  out.reserve(matches.size());
  const std::size_t d = table.d_model();
  for (const auto& m : matches) {
    if (m.entry >= dict.size()) {
      throw MissingEntryError("match refers to entry " + std::to_string(m.entry) + " outside the dictionary");
    }
    const auto& name = dict.at(m.entry).entry;
    const auto* rec = table.find(name, table.mode() == RetrievalMode::K ? 0 : m.sense);
    if (!rec) {
      throw MissingEntryError("lookup table has no record for '" + name + "' sense " + std::to_string(m.sense));
    }
    EntryEmbedding e{name, m.sense, table.mode(), {}};
    for (std::size_t l = 0; l < table.n_layers(); ++l) {
      e.per_layer.emplace_back(rec->begin() + static_cast<std::ptrdiff_t>(l * d),
                               rec->begin() + static_cast<std::ptrdiff_t>((l + 1) * d));
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace dplm
