#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "dplm/dictionary.hpp"
#include "dplm/encoder.hpp"
#include "dplm/matcher.hpp"
#include "dplm/plugin.hpp"

namespace dplm {

// None is the plain backbone: the knowledge half of [h^c; h_hat] stays zero.
enum class Mechanism { None, Concat, EHA, LWA };

std::string_view to_string(Mechanism m);
Mechanism parse_mechanism(std::string_view text);

struct FusionConfig {
  Mechanism mechanism = Mechanism::LWA;
  RetrievalMode mode = RetrievalMode::KV;
  bool use_lut = true;
};

class LayerMismatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Single-head attention projections of the extra hop. Row-vector convention:
/// q = h W_q, k_i = e_i W_k, v_i = e_i W_v.
struct HopAttention {
  Tensor wq, wk, wv;
  static HopAttention identity(std::size_t d_model, bool trainable = true);
};

struct FusedRepresentation {
  Tensor backbone_cls;  // [1, d]
  Tensor knowledge;     // [1, d]
  Tensor concat;        // [1, 2d]
  std::vector<std::vector<double>> alphas;  // one weight list per attended layer
};

// h_hat = sum of final-layer entry embeddings.
FusedRepresentation fuse_concat(const Tensor& h_c, const std::vector<EntryEmbedding>& embs);

/// h_hat = sum_i alpha_i (e_i W_v), alpha = softmax_i((h W_q).(e_i W_k) / sqrt(d)),
/// over final-layer embeddings. No entries gives a zero knowledge vector.
FusedRepresentation fuse_eha(const Tensor& h_c, const std::vector<EntryEmbedding>& embs,
                             const HopAttention& att);

// Per-layer extra hop with shared projections, then the mean over layers.
FusedRepresentation fuse_lwa(const std::vector<Tensor>& cls_per_layer, const std::vector<EntryEmbedding>& embs,
                             const HopAttention& att);

// ---- tasks ------------------------------------------------------------------

enum class TaskKind { Classification, MultipleChoice };

struct TaskSample {
  std::string text;
  std::string text_b;  // optional second sequence, fused independently
  std::size_t label = 0;
  std::string question;
  std::vector<std::string> choices;
  std::size_t answer = 0;
};

struct TaskDataset {
  TaskKind kind = TaskKind::Classification;
  std::vector<TaskSample> samples;
  std::size_t num_labels = 0;   // classification only
  std::size_t num_choices = 0;  // multiple choice only
  bool paired = false;          // classification over (text, text_b)
};

TaskDataset parse_task(std::istream& in);
TaskDataset load_task(const std::filesystem::path& path);
void write_classification_task(const std::vector<TaskSample>& samples, std::ostream& out);
void write_choice_task(const std::vector<TaskSample>& samples, std::ostream& out);

// ---- model ----------------------------------------------------------------------

/// Trainable backbone plus hop attention and an affine head over [h^c; h_hat].
class FusionModel {
 public:
  FusionModel(EncoderModel backbone, FusionConfig config, TaskKind kind, std::size_t num_outputs, bool paired,
              std::uint64_t seed);

  const FusionConfig& config() const { return config_; }
  const EncoderModel& backbone() const { return backbone_; }
  TaskKind kind() const { return kind_; }
  std::size_t num_outputs() const { return num_outputs_; }
  bool paired() const { return paired_; }
  const HopAttention& hop() const { return hop_; }

  std::vector<Tensor> parameters() const;

  Checkpoint to_checkpoint() const;
  static FusionModel from_checkpoint(const Checkpoint& ckpt);
  void save(const std::filesystem::path& path) const;
  static FusionModel load(const std::filesystem::path& path);

  // Fused representations for a batch of input sequences.
  std::vector<FusedRepresentation> represent(const std::vector<std::string>& texts, const MatchIndex& index,
                                             const KnowledgeSource* source, std::mt19937_64* rng,
                                             std::vector<std::vector<EntryMatch>>* matches_out = nullptr) const;

  struct Scores {
    Tensor logits;  // classification: [n, labels]; multiple choice: [n, choices]
    std::vector<std::vector<EntryMatch>> matches;           // per input sequence
    std::vector<std::vector<std::vector<double>>> alphas;   // per input sequence
  };
  Scores score(std::span<const TaskSample> samples, const MatchIndex& index, const KnowledgeSource* source,
               std::mt19937_64* rng) const;

 private:
  EncoderModel backbone_;
  FusionConfig config_;
  TaskKind kind_;
  std::size_t num_outputs_;
  bool paired_;
  HopAttention hop_;
  Tensor head_w_, head_b_;
};

struct FinetuneOptions {
  std::size_t epochs = 5;
  std::size_t batch = 32;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> out_dir;  // metrics.csv + model.dplm
};

struct MetricsRow {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<std::size_t> predictions;
};

EvalResult evaluate(const FusionModel& model, const TaskDataset& data, const MatchIndex& index,
                    const KnowledgeSource* source, std::size_t batch = 64);

struct FinetuneResult {
  FusionModel model;
  std::vector<MetricsRow> metrics;
  double test_accuracy = 0.0;
};

/// Fine-tunes a copy of `backbone` together with the hop attention and the task
/// head. The knowledge source (frozen plugin or lookup table) is only read.
FinetuneResult finetune(const EncoderModel& backbone, const KnowledgeSource* source, const MatchIndex& index,
                        const TaskDataset& train, const TaskDataset* test, const FusionConfig& config,
                        const FinetuneOptions& options);

void write_metrics(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);

// JSONL attention dump: {"sample_id", "entries", "alphas"} per input sequence.
void dump_attention(const FusionModel& model, const TaskDataset& data, const MatchIndex& index,
                    const KnowledgeSource* source, const Dictionary& dict, std::ostream& out);

}  // namespace dplm
