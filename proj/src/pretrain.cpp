#include "dplm/pretrain.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

#include "dplm/optim.hpp"
#include "dplm/text.hpp"

namespace dplm {

namespace {

// Per-row dot products of two [n, d] tensors, as an [n, 1] tensor.
Tensor row_dot(const Tensor& a, const Tensor& b) {
  return matmul(mul(a, b), Tensor::full({a.dim(1), 1}, 1.0));
}

}  // namespace

void LossWeights::validate() const {
  if (lambda1 < 0.0 || lambda1 > 1.0 || lambda2 < 0.0 || lambda2 > 1.0) {
    throw std::invalid_argument("loss weights must lie in [0, 1]");
  }
}

DepBatch make_dep_batch(const Dictionary& dict, std::span<const SenseRef> samples, const Vocab& vocab,
                        std::size_t max_seq) {
  std::vector<std::vector<std::size_t>> seqs;
  std::vector<std::size_t> entry_lengths;
  for (const auto& s : samples) {
    const auto& e = dict.at(s.entry);
    seqs.push_back(encode_sample(e.entry, e.senses.at(s.sense), vocab, max_seq));
    entry_lengths.push_back(split_tokens(e.entry).size());
  }
  DepBatch b;
  b.input = pad_batch(seqs);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    for (std::size_t j = 1; j <= entry_lengths[i]; ++j) {
      const std::size_t flat = i * b.input.seq + j;
      b.mask_positions.push_back(flat);
      b.targets.push_back(b.input.ids[flat]);
      b.input.ids[flat] = Vocab::kMask;
    }
  }
  return b;
}

Tensor dep_loss(const EncoderModel& model, const DepBatch& batch, std::mt19937_64* rng) {
  if (batch.mask_positions.empty()) throw std::invalid_argument("dep_loss: batch has no masked entry tokens");
  const auto out = model.forward(batch.input, rng);
  const Tensor hidden = gather_rows(out.last_hidden, batch.mask_positions);
  return cross_entropy(model.mlm_logits(hidden), batch.targets);
}

Tensor edd_loss_from_reps(const Tensor& ori, const Tensor& syn, const Tensor& ant) {
  return mean(softplus(sub(row_dot(ori, ant), row_dot(ori, syn))));
}

Tensor edd_loss(const EncoderModel& model, const Dictionary& dict, std::span<const ContrastiveTriple> triples,
                std::mt19937_64* rng) {
  if (triples.empty()) throw std::invalid_argument("edd_loss: no triples");
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> slot;
  std::vector<std::vector<std::size_t>> seqs;
  auto row_of = [&](const SenseRef& r) {
    auto [it, inserted] = slot.emplace(std::make_pair(r.entry, r.sense), seqs.size());
    if (inserted) {
      const auto& e = dict.at(r.entry);
      seqs.push_back(encode_sample(e.entry, e.senses.at(r.sense), model.vocab(), model.config().max_seq));
    }
    return it->second;
  };
  std::vector<std::size_t> o, s, a;
  for (const auto& t : triples) {
    o.push_back(row_of(t.original));
    s.push_back(row_of(t.positive));
    a.push_back(row_of(t.negative));
  }
  const auto pooled = model.forward(pad_batch(seqs), rng).pooled;
  return edd_loss_from_reps(gather_rows(pooled, o), gather_rows(pooled, s), gather_rows(pooled, a));
}

Tensor combined_loss(const Tensor& dep, const Tensor& edd, const LossWeights& w) {
  return add(scale(dep, w.lambda1), scale(edd, w.lambda2));
}

Vocab dictionary_vocab(const Dictionary& dict, const std::vector<std::vector<std::string>>& extra,
                       std::size_t max_size) {
  std::vector<std::vector<std::string>> corpus;
  for (const auto& e : dict.entries()) {
    corpus.push_back(split_tokens(e.entry));
    for (const auto& s : e.senses) corpus.push_back(split_tokens(s));
  }
  corpus.insert(corpus.end(), extra.begin(), extra.end());
  return Vocab::build(corpus, max_size);
}

void write_pretrain_log(const std::vector<PretrainLogRow>& log, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,loss_dep,loss_edd,loss_total\n";
  char buf[160];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n", r.step, r.loss_dep, r.loss_edd, r.loss_total);
    out << buf;
  }
}

PretrainResult pretrain_loop(const Dictionary& dict, const EncoderConfig& config, const Vocab& vocab,
                             const PretrainOptions& options) {
  if (dict.empty()) throw EmptyDictionaryError();
  if (options.batch == 0 || options.epochs == 0) throw std::invalid_argument("epochs and batch must be positive");
  options.weights.validate();

  PretrainResult result{EncoderModel(config, vocab, options.seed), {}};
  auto& model = result.model;
  AdamW opt(model.parameters(), {.lr = options.lr, .weight_decay = options.weight_decay});

  // Independent streams so that switching the contrastive term off leaves DEP untouched.
  std::mt19937_64 dep_rng(options.seed ^ 0x9E3779B97F4A7C15ULL);
  std::mt19937_64 edd_rng(options.seed ^ 0xC2B2AE3D27D4EB4FULL);

  auto dep_pool = dep_samples(dict);
  std::vector<ContrastiveTriple> edd_pool;
  std::size_t edd_cursor = 0;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(dep_pool.begin(), dep_pool.end(), dep_rng);
    if (options.use_edd) {
      edd_pool = edd_triples(dict, options.n_pairs, options.seed + epoch).triples;
      std::shuffle(edd_pool.begin(), edd_pool.end(), edd_rng);
      edd_cursor = 0;
    }
    for (std::size_t start = 0; start < dep_pool.size(); start += options.batch) {
      const std::size_t end = std::min(dep_pool.size(), start + options.batch);
      const auto batch = make_dep_batch(dict, std::span(dep_pool).subspan(start, end - start), vocab,
                                        config.max_seq);
      Tensor ld = dep_loss(model, batch, &dep_rng);
      Tensor total = scale(ld, options.weights.lambda1);
      double edd_value = 0.0;
      if (options.use_edd && !edd_pool.empty()) {
        std::vector<ContrastiveTriple> eb;
        for (std::size_t k = 0; k < options.batch; ++k) {
          eb.push_back(edd_pool[edd_cursor]);
          edd_cursor = (edd_cursor + 1) % edd_pool.size();
        }
        Tensor le = edd_loss(model, dict, eb, &edd_rng);
        edd_value = le.item();
        total = combined_loss(ld, le, options.weights);
      }
      opt.zero_grad();
      backward(total);
      opt.step();
      result.log.push_back({++step, ld.item(), edd_value, total.item()});
    }
    if (options.out_dir) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_epoch%02zu.dplm", epoch + 1);
      model.save(*options.out_dir / name);
    }
  }
  if (options.out_dir) {
    model.save(*options.out_dir / "plugin.dplm");
    write_pretrain_log(result.log, *options.out_dir / "pretrain_log.csv");
  }
  return result;
}

}  // namespace dplm
