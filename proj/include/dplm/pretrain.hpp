#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "dplm/dictionary.hpp"
#include "dplm/encoder.hpp"

namespace dplm {

/// Entry-masked input: every entry token between [CLS] and the first [SEP]
/// is replaced by [MASK]; description tokens are never masked.
struct DepBatch {
  EncodedBatch input;
  std::vector<std::size_t> mask_positions;  // flat row indices into batch*seq
  std::vector<std::size_t> targets;         // original ids at mask_positions
};

DepBatch make_dep_batch(const Dictionary& dict, std::span<const SenseRef> samples, const Vocab& vocab,
                        std::size_t max_seq);

struct LossWeights {
  double lambda1 = 0.4;
  double lambda2 = 0.6;
  void validate() const;
};

// Mean cross-entropy of the tied output head at the masked entry positions.
Tensor dep_loss(const EncoderModel& model, const DepBatch& batch, std::mt19937_64* rng = nullptr);

/// -mean log[ f(o,s) / (f(o,s) + f(o,a)) ] with f(x,y) = exp(x.y), evaluated
/// as softplus(o.a - o.s). Inputs are [n, d] row-aligned representations.
Tensor edd_loss_from_reps(const Tensor& ori, const Tensor& syn, const Tensor& ant);

// Encodes each distinct (entry, sense) of the triples once as "[CLS] e [SEP] desc [SEP]".
Tensor edd_loss(const EncoderModel& model, const Dictionary& dict, std::span<const ContrastiveTriple> triples,
                std::mt19937_64* rng = nullptr);

Tensor combined_loss(const Tensor& dep, const Tensor& edd, const LossWeights& w);

struct PretrainOptions {
  std::size_t epochs = 10;
  std::size_t batch = 32;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::size_t n_pairs = 5;
  std::uint64_t seed = 0;
  LossWeights weights;
  bool use_edd = true;  // false drops the contrastive term entirely (DEP-only)
  std::optional<std::filesystem::path> out_dir;  // per-epoch checkpoints + loss log
};

struct PretrainLogRow {
  std::size_t step = 0;
  double loss_dep = 0.0;
  double loss_edd = 0.0;
  double loss_total = 0.0;
};

struct PretrainResult {
  EncoderModel model;
  std::vector<PretrainLogRow> log;
};

/// Mixed-batch training: every step draws one DEP batch and one EDD batch and
/// minimizes lambda1 * L_dep + lambda2 * L_edd with AdamW. An epoch is one pass
/// over the DEP samples; EDD triples are redrawn every epoch and consumed in
/// step with it. DEP and EDD keep separate random streams.
PretrainResult pretrain_loop(const Dictionary& dict, const EncoderConfig& config, const Vocab& vocab,
                             const PretrainOptions& options);

// Vocabulary over entry words and descriptions, plus any extra tokenized text.
Vocab dictionary_vocab(const Dictionary& dict, const std::vector<std::vector<std::string>>& extra = {},
                       std::size_t max_size = 8192);

void write_pretrain_log(const std::vector<PretrainLogRow>& log, const std::filesystem::path& path);

}  // namespace dplm
