#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dplm/dictionary.hpp"
#include "dplm/encoder.hpp"
#include "dplm/matcher.hpp"

namespace dplm {

// K encodes "[CLS] entry [SEP]"; KV encodes "[CLS] entry [SEP] description [SEP]".
enum class RetrievalMode : std::uint8_t { K = 0, KV = 1 };

std::string_view to_string(RetrievalMode mode);
RetrievalMode parse_retrieval_mode(std::string_view text);

class MissingEntryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EntryEmbedding {
  std::string entry;
  std::size_t sense = 0;
  RetrievalMode mode = RetrievalMode::KV;
  std::vector<std::vector<double>> per_layer;  // L vectors of d_model, layer-l [CLS] state

  const std::vector<double>& final() const { return per_layer.back(); }
};

// Plugin input for one (entry, sense) under a retrieval mode.
std::vector<std::size_t> plugin_input(const Dictionary& dict, std::size_t entry, std::size_t sense,
                                      RetrievalMode mode, const Vocab& vocab, std::size_t max_seq);

/// Encodes every match with the frozen plugin, one embedding per match, in
/// match order. Runs without recording a graph; the plugin is never written.
std::vector<EntryEmbedding> retrieve_live(const EncoderModel& plugin, const std::vector<EntryMatch>& matches,
                                          const Dictionary& dict, RetrievalMode mode);

/// K-mode plugin inputs do not depend on the sense, so K-mode knowledge keeps
/// only the sense-0 match of each occurrence. KV mode keeps every sense.
std::vector<EntryMatch> collapse_for_mode(const std::vector<EntryMatch>& matches, RetrievalMode mode);

/// Precomputed per-layer plugin embeddings.
///
/// File layout (little-endian): "DLUT" | u32 version | u8 mode | u32 L |
/// u32 d_model | u32 count | count x (u32 len + entry UTF-8 | u32 sense |
/// L*d_model f32) | u32 CRC32 of all preceding bytes.
class LookupTable {
 public:
  static constexpr std::uint32_t kVersion = 1;

  LookupTable(RetrievalMode mode, std::size_t n_layers, std::size_t d_model)
      : mode_(mode), n_layers_(n_layers), d_model_(d_model) {}

  RetrievalMode mode() const { return mode_; }
  std::size_t n_layers() const { return n_layers_; }
  std::size_t d_model() const { return d_model_; }
  std::size_t size() const { return records_.size(); }

  void insert(const std::string& entry, std::size_t sense, std::vector<float> values);
  // L*d_model values of the record, or nullptr.
  const std::vector<float>* find(const std::string& entry, std::size_t sense) const;

  std::vector<std::uint8_t> serialize() const;
  static LookupTable deserialize(const std::vector<std::uint8_t>& bytes);
  void save(const std::filesystem::path& path) const;
  static LookupTable load(const std::filesystem::path& path);

 private:
  RetrievalMode mode_;
  std::size_t n_layers_;
  std::size_t d_model_;
  std::vector<std::pair<std::string, std::uint32_t>> order_;
  std::map<std::pair<std::string, std::uint32_t>, std::vector<float>> records_;
};

/// Embeds every (entry, sense) of the dictionary (one record per entry in K
/// mode) in batches of batch_size and optionally persists the table.
LookupTable build_lookup_table(const EncoderModel& plugin, const Dictionary& dict, RetrievalMode mode,
                               const std::filesystem::path* out = nullptr, std::size_t batch_size = 64);

std::vector<EntryEmbedding> retrieve_lut(const LookupTable& table, const std::vector<EntryMatch>& matches,
                                         const Dictionary& dict);

// Where fine-tuning and serving get entry knowledge from.
class KnowledgeSource {
 public:
  virtual ~KnowledgeSource() = default;
  virtual RetrievalMode mode() const = 0;
  virtual std::size_t n_layers() const = 0;
  virtual std::size_t d_model() const = 0;
  virtual std::vector<EntryEmbedding> retrieve(const std::vector<EntryMatch>& matches) const = 0;
};

class LivePluginSource : public KnowledgeSource {
 public:
  LivePluginSource(const EncoderModel& plugin, const Dictionary& dict, RetrievalMode mode)
      : plugin_(plugin), dict_(dict), mode_(mode) {}
  RetrievalMode mode() const override { return mode_; }
  std::size_t n_layers() const override { return plugin_.config().n_layers; }
  std::size_t d_model() const override { return plugin_.config().d_model; }
  std::vector<EntryEmbedding> retrieve(const std::vector<EntryMatch>& matches) const override {
    return retrieve_live(plugin_, matches, dict_, mode_);
  }

 private:
  const EncoderModel& plugin_;
  const Dictionary& dict_;
  RetrievalMode mode_;
};

class TableSource : public KnowledgeSource {
 public:
  TableSource(const LookupTable& table, const Dictionary& dict) : table_(table), dict_(dict) {}
  RetrievalMode mode() const override { return table_.mode(); }
  std::size_t n_layers() const override { return table_.n_layers(); }
  std::size_t d_model() const override { return table_.d_model(); }
  std::vector<EntryEmbedding> retrieve(const std::vector<EntryMatch>& matches) const override {
    return retrieve_lut(table_, matches, dict_);
  }

 private:
  const LookupTable& table_;
  const Dictionary& dict_;
};

}  // namespace dplm
