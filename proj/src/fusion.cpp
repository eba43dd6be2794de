#include "dplm/fusion.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "dplm/optim.hpp"
#include "dplm/text.hpp"

namespace dplm {

std::string_view to_string(Mechanism m) {
  switch (m) {
    case Mechanism::None: return "none";
    case Mechanism::Concat: return "concat";
    case Mechanism::EHA: return "eha";
    case Mechanism::LWA: return "lwa";
  }
  return "?";
}

Mechanism parse_mechanism(std::string_view text) {
  if (text == "none") return Mechanism::None;
  if (text == "concat") return Mechanism::Concat;
  if (text == "eha") return Mechanism::EHA;
  if (text == "lwa") return Mechanism::LWA;
  throw std::invalid_argument("unknown mechanism '" + std::string(text) + "' (expected concat, eha, lwa or none)");
}

HopAttention HopAttention::identity(std::size_t d_model, bool trainable) {
  auto eye = [&] {
    std::vector<double> v(d_model * d_model, 0.0);
    for (std::size_t i = 0; i < d_model; ++i) v[i * d_model + i] = 1.0;
    return Tensor::from({d_model, d_model}, std::move(v), trainable);
  };
  return {eye(), eye(), eye()};
}

namespace {

std::size_t width_of(const Tensor& h) {
  if (h.rank() != 2 || h.dim(0) != 1) throw ShapeError("fusion expects a [1, d] query, got " + shape_str(h.shape()));
  return h.dim(1);
}

// Constant [K, d] matrix of one layer of every embedding.
Tensor layer_matrix(const std::vector<EntryEmbedding>& embs, std::size_t layer, std::size_t d) {
  std::vector<double> data;
  data.reserve(embs.size() * d);
  for (const auto& e : embs) {
    if (layer >= e.per_layer.size()) {
      throw LayerMismatchError("entry '" + e.entry + "' has " + std::to_string(e.per_layer.size()) +
                               " layers, need layer " + std::to_string(layer));
    }
    const auto& v = e.per_layer[layer];
    if (v.size() != d) {
      throw ShapeError("entry embedding width " + std::to_string(v.size()) + " != model width " + std::to_string(d));
    }
    data.insert(data.end(), v.begin(), v.end());
  }
  return Tensor::from({embs.size(), d}, std::move(data));
}

struct HopOutput {
  Tensor knowledge;
  std::vector<double> alpha;
};

HopOutput extra_hop(const Tensor& h, const Tensor& entries, const HopAttention& att) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(h.dim(1)));
  Tensor q = matmul(h, att.wq);
  Tensor k = matmul(entries, att.wk);
  Tensor v = matmul(entries, att.wv);
  Tensor alpha = softmax(scale(matmul(q, transpose(k)), inv_sqrt_d), 1);
  return {matmul(alpha, v), std::vector<double>(alpha.data().begin(), alpha.data().end())};
}

FusedRepresentation assemble(const Tensor& h_c, Tensor knowledge) {
  FusedRepresentation r;
  r.backbone_cls = h_c;
  r.knowledge = std::move(knowledge);
  r.concat = concat_cols({r.backbone_cls, r.knowledge});
  return r;
}

}  // namespace

FusedRepresentation fuse_concat(const Tensor& h_c, const std::vector<EntryEmbedding>& embs) {
  const std::size_t d = width_of(h_c);
  std::vector<double> acc(d, 0.0);
  for (const auto& e : embs) {
    if (e.final().size() != d) {
      throw ShapeError("entry embedding width " + std::to_string(e.final().size()) + " != model width " +
                       std::to_string(d));
    }
    for (std::size_t c = 0; c < d; ++c) acc[c] += e.final()[c];
  }
  return assemble(h_c, Tensor::from({1, d}, std::move(acc)));
}

FusedRepresentation fuse_eha(const Tensor& h_c, const std::vector<EntryEmbedding>& embs, const HopAttention& att) {
  const std::size_t d = width_of(h_c);
  if (embs.empty()) return assemble(h_c, Tensor::zeros({1, d}));
  const std::size_t last = embs.front().per_layer.size() - 1;
  for (const auto& e : embs) {
    if (e.per_layer.size() != last + 1) throw LayerMismatchError("entry embeddings disagree on layer count");
  }
  auto hop = extra_hop(h_c, layer_matrix(embs, last, d), att);
  auto r = assemble(h_c, std::move(hop.knowledge));
  r.alphas.push_back(std::move(hop.alpha));
  return r;
}

FusedRepresentation fuse_lwa(const std::vector<Tensor>& cls_per_layer, const std::vector<EntryEmbedding>& embs,
                             const HopAttention& att) {
  if (cls_per_layer.empty()) throw LayerMismatchError("fuse_lwa: no backbone layers");
  const std::size_t n_layers = cls_per_layer.size();
  const Tensor& h_c = cls_per_layer.back();
  const std::size_t d = width_of(h_c);
  if (embs.empty()) return assemble(h_c, Tensor::zeros({1, d}));
  for (const auto& e : embs) {
    if (e.per_layer.size() != n_layers) {
      throw LayerMismatchError("backbone has " + std::to_string(n_layers) + " layers but entry '" + e.entry +
                               "' carries " + std::to_string(e.per_layer.size()));
    }
  }
  std::vector<std::vector<double>> alphas;
  Tensor total;
  for (std::size_t l = 0; l < n_layers; ++l) {
    width_of(cls_per_layer[l]);
    auto hop = extra_hop(cls_per_layer[l], layer_matrix(embs, l, d), att);
    total = l == 0 ? hop.knowledge : add(total, hop.knowledge);
    alphas.push_back(std::move(hop.alpha));
  }
  auto r = assemble(h_c, scale(total, 1.0 / static_cast<double>(n_layers)));
  r.alphas = std::move(alphas);
  return r;
}

// ---- task files ------------------------------------------------------------------

TaskDataset parse_task(std::istream& in) {
  TaskDataset ds;
  std::string line;
  std::size_t lineno = 0;
  bool kind_known = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(lineno, std::string("invalid JSON: ") + e.what());
    }
    const TaskKind kind = obj.contains("question") ? TaskKind::MultipleChoice : TaskKind::Classification;
    if (kind_known && kind != ds.kind) throw ParseError(lineno, "mixed classification and multiple-choice samples");
    ds.kind = kind;
    kind_known = true;
    TaskSample s;
    try {
      if (kind == TaskKind::Classification) {
        s.text = obj.at("text").get<std::string>();
        const auto label = obj.at("label").get<long long>();
        if (label < 0) throw ParseError(lineno, "label must be non-negative");
        s.label = static_cast<std::size_t>(label);
        if (obj.contains("text_b")) s.text_b = obj.at("text_b").get<std::string>();
        const bool paired = obj.contains("text_b");
        if (ds.samples.empty()) ds.paired = paired;
        if (paired != ds.paired) throw ParseError(lineno, "text_b must be present on all samples or none");
        ds.num_labels = std::max(ds.num_labels, s.label + 1);
      } else {
        s.question = obj.at("question").get<std::string>();
        s.choices = obj.at("choices").get<std::vector<std::string>>();
        const auto answer = obj.at("answer").get<long long>();
        if (s.choices.size() < 2) throw ParseError(lineno, "need at least two choices");
        if (answer < 0 || static_cast<std::size_t>(answer) >= s.choices.size()) {
          throw ParseError(lineno, "answer index out of range");
        }
        s.answer = static_cast<std::size_t>(answer);
        if (ds.num_choices == 0) ds.num_choices = s.choices.size();
        if (s.choices.size() != ds.num_choices) throw ParseError(lineno, "all questions need the same number of choices");
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, std::string("bad task sample: ") + e.what());
    }
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw std::runtime_error("task file contains no samples");
  return ds;
}

TaskDataset load_task(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open task file " + path.string());
  return parse_task(in);
}

void write_classification_task(const std::vector<TaskSample>& samples, std::ostream& out) {
  for (const auto& s : samples) {
    nlohmann::ordered_json obj;
    obj["text"] = s.text;
    if (!s.text_b.empty()) obj["text_b"] = s.text_b;
    obj["label"] = s.label;
    out << obj.dump() << '\n';
  }
}

void write_choice_task(const std::vector<TaskSample>& samples, std::ostream& out) {
  for (const auto& s : samples) {
    nlohmann::ordered_json obj;
    obj["question"] = s.question;
    obj["choices"] = s.choices;
    obj["answer"] = s.answer;
    out << obj.dump() << '\n';
  }
}

// ---- fusion model -----------------------------------------------------------------

FusionModel::FusionModel(EncoderModel backbone, FusionConfig config, TaskKind kind, std::size_t num_outputs,
                         bool paired, std::uint64_t seed)
    : backbone_(std::move(backbone)),
      config_(config),
      kind_(kind),
      num_outputs_(num_outputs),
      paired_(paired),
      hop_(HopAttention::identity(backbone_.config().d_model)) {
  if (num_outputs_ == 0) throw std::invalid_argument("task head needs at least one output");
  const std::size_t d = backbone_.config().d_model;
  const std::size_t in = (paired_ ? 4 : 2) * d;
  // Multiple choice scores each (question, choice) sequence with one logit.
  const std::size_t out = kind_ == TaskKind::MultipleChoice ? 1 : num_outputs_;
  std::mt19937_64 rng(seed ^ 0x5851F42D4C957F2DULL);
  head_w_ = Tensor::randn({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng, true);
  head_b_ = Tensor::zeros({out}, true);
}

std::vector<Tensor> FusionModel::parameters() const {
  auto out = backbone_.parameters();
  if (config_.mechanism == Mechanism::EHA || config_.mechanism == Mechanism::LWA) {
    out.insert(out.end(), {hop_.wq, hop_.wk, hop_.wv});
  }
  out.insert(out.end(), {head_w_, head_b_});
  return out;
}

Checkpoint FusionModel::to_checkpoint() const {
  Checkpoint ckpt = backbone_.to_checkpoint();
  auto header = nlohmann::json::parse(ckpt.header_json);
  header["kind"] = "fusion";
  header["mechanism"] = to_string(config_.mechanism);
  header["mode"] = to_string(config_.mode);
  header["use_lut"] = config_.use_lut;
  header["task"] = kind_ == TaskKind::Classification ? "classification" : "multiple_choice";
  header["num_outputs"] = num_outputs_;
  header["paired"] = paired_;
  ckpt.header_json = header.dump();
  for (auto& t : ckpt.tensors) t.name = "backbone." + t.name;
  auto put = [&](const std::string& name, const Tensor& t) {
    ckpt.tensors.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  };
  put("hop.wq", hop_.wq);
  put("hop.wk", hop_.wk);
  put("hop.wv", hop_.wv);
  put("head.w", head_w_);
  put("head.b", head_b_);
  return ckpt;
}

FusionModel FusionModel::from_checkpoint(const Checkpoint& ckpt) {
  auto header = nlohmann::json::parse(ckpt.header_json);
  if (header.value("kind", "") != "fusion") throw FormatError("checkpoint does not hold a fine-tuned model");
  Checkpoint backbone_part;
  header["kind"] = "encoder";
  backbone_part.header_json = header.dump();
  for (const auto& t : ckpt.tensors) {
    if (t.name.rfind("backbone.", 0) == 0) backbone_part.tensors.push_back({t.name.substr(9), t.shape, t.data});
  }
  FusionConfig cfg{parse_mechanism(header.at("mechanism").get<std::string>()),
                   parse_retrieval_mode(header.at("mode").get<std::string>()), header.value("use_lut", true)};
  const auto kind = header.at("task").get<std::string>() == "classification" ? TaskKind::Classification
                                                                            : TaskKind::MultipleChoice;
  FusionModel model(EncoderModel::from_checkpoint(backbone_part), cfg, kind,
                    header.at("num_outputs").get<std::size_t>(), header.value("paired", false), 0);
  auto load_into = [&](const std::string& name, Tensor t) {
    const auto& stored = ckpt.get(name);
    if (stored.shape != t.shape()) throw FormatError("tensor '" + name + "' has unexpected shape");
    std::copy(stored.data.begin(), stored.data.end(), t.mutable_data().begin());
  };
  load_into("hop.wq", model.hop_.wq);
  load_into("hop.wk", model.hop_.wk);
  load_into("hop.wv", model.hop_.wv);
  load_into("head.w", model.head_w_);
  load_into("head.b", model.head_b_);
  return model;
}

void FusionModel::save(const std::filesystem::path& path) const { save_checkpoint(to_checkpoint(), path); }

FusionModel FusionModel::load(const std::filesystem::path& path) { return from_checkpoint(load_checkpoint(path)); }

std::vector<FusedRepresentation> FusionModel::represent(const std::vector<std::string>& texts,
                                                        const MatchIndex& index, const KnowledgeSource* source,
                                                        std::mt19937_64* rng,
                                                        std::vector<std::vector<EntryMatch>>* matches_out) const {
  const auto& cfg = backbone_.config();
  const bool wants_knowledge = config_.mechanism != Mechanism::None;
  if (wants_knowledge) {
    if (!source) throw std::invalid_argument("mechanism " + std::string(to_string(config_.mechanism)) +
                                             " needs a knowledge source");
    if (source->d_model() != cfg.d_model) {
      throw ShapeError("knowledge width " + std::to_string(source->d_model()) + " != backbone width " +
                       std::to_string(cfg.d_model));
    }
    if (config_.mechanism == Mechanism::LWA && source->n_layers() != cfg.n_layers) {
      throw LayerMismatchError("LWA needs " + std::to_string(cfg.n_layers) + " knowledge layers, source has " +
                               std::to_string(source->n_layers()));
    }
  }

  std::vector<std::vector<std::size_t>> seqs;
  std::vector<std::vector<EntryMatch>> matches(texts.size());
  std::vector<EntryMatch> all;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto tokens = tokenize(texts[i]);
    seqs.push_back(encode_text(texts[i], backbone_.vocab(), cfg.max_seq));
    if (wants_knowledge) {
      matches[i] = collapse_for_mode(find_entries(index, tokens, true), config_.mode);
      all.insert(all.end(), matches[i].begin(), matches[i].end());
    }
  }
  std::vector<EntryEmbedding> embs;
  if (wants_knowledge && !all.empty()) embs = source->retrieve(all);

  const auto out = backbone_.forward(pad_batch(seqs), rng);
  std::vector<FusedRepresentation> reps;
  reps.reserve(texts.size());
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const std::size_t row[1] = {i};
    const std::vector<EntryEmbedding> mine(embs.begin() + static_cast<std::ptrdiff_t>(cursor),
                                           embs.begin() + static_cast<std::ptrdiff_t>(cursor + matches[i].size()));
    cursor += matches[i].size();
    switch (config_.mechanism) {
      case Mechanism::None: {
        Tensor h = gather_rows(out.pooled, row);
        reps.push_back(assemble(h, Tensor::zeros({1, cfg.d_model})));
        break;
      }
      case Mechanism::Concat:
        reps.push_back(fuse_concat(gather_rows(out.pooled, row), mine));
        break;
      case Mechanism::EHA:
        reps.push_back(fuse_eha(gather_rows(out.pooled, row), mine, hop_));
        break;
      case Mechanism::LWA: {
        std::vector<Tensor> layers;
        for (const auto& l : out.cls_per_layer) layers.push_back(gather_rows(l, row));
        reps.push_back(fuse_lwa(layers, mine, hop_));
        break;
      }
    }
  }
  if (matches_out) *matches_out = std::move(matches);
  return reps;
}

FusionModel::Scores FusionModel::score(std::span<const TaskSample> samples, const MatchIndex& index,
                                       const KnowledgeSource* source, std::mt19937_64* rng) const {
  std::vector<std::string> texts;
  for (const auto& s : samples) {
    if (kind_ == TaskKind::Classification) {
      texts.push_back(s.text);
      if (paired_) texts.push_back(s.text_b);
    } else {
      if (s.choices.size() != num_outputs_) {
        throw std::invalid_argument("question has " + std::to_string(s.choices.size()) + " choices, model scores " +
                                    std::to_string(num_outputs_));
      }
      for (const auto& c : s.choices) texts.push_back(s.question + " " + c);
    }
  }
  Scores result;
  const auto reps = represent(texts, index, source, rng, &result.matches);
  std::vector<Tensor> rows;
  if (kind_ == TaskKind::Classification && paired_) {
    for (std::size_t i = 0; i < reps.size(); i += 2) rows.push_back(concat_cols({reps[i].concat, reps[i + 1].concat}));
  } else {
    for (const auto& r : reps) rows.push_back(r.concat);
  }
  for (const auto& r : reps) result.alphas.push_back(r.alphas);
  Tensor logits = add_bias(matmul(concat_rows(rows), head_w_), head_b_);
  if (kind_ == TaskKind::MultipleChoice) logits = reshape(logits, {samples.size(), num_outputs_});
  result.logits = logits;
  return result;
}

// ---- training ------------------------------------------------------------------------

namespace {

std::vector<std::size_t> targets_of(std::span<const TaskSample> samples, TaskKind kind) {
  std::vector<std::size_t> t;
  for (const auto& s : samples) t.push_back(kind == TaskKind::Classification ? s.label : s.answer);
  return t;
}

std::size_t argmax_row(std::span<const double> logits, std::size_t row, std::size_t width) {
  const auto begin = logits.begin() + static_cast<std::ptrdiff_t>(row * width);
  return static_cast<std::size_t>(std::max_element(begin, begin + static_cast<std::ptrdiff_t>(width)) - begin);
}

}  // namespace

EvalResult evaluate(const FusionModel& model, const TaskDataset& data, const MatchIndex& index,
                    const KnowledgeSource* source, std::size_t batch) {
  NoGradGuard no_grad;
  EvalResult r;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  const std::span<const TaskSample> all(data.samples);
  for (std::size_t start = 0; start < all.size(); start += batch) {
    const auto chunk = all.subspan(start, std::min(batch, all.size() - start));
    const auto scores = model.score(chunk, index, source, nullptr);
    const auto targets = targets_of(chunk, model.kind());
    for (auto t : targets) {
      if (t >= scores.logits.dim(1)) throw std::out_of_range("label " + std::to_string(t) + " outside model outputs");
    }
    loss_sum += cross_entropy(scores.logits, targets).item() * static_cast<double>(chunk.size());
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const auto pred = argmax_row(scores.logits.data(), i, scores.logits.dim(1));
      r.predictions.push_back(pred);
      if (pred == targets[i]) ++correct;
    }
  }
  r.loss = loss_sum / static_cast<double>(all.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(all.size());
  return r;
}

FinetuneResult finetune(const EncoderModel& backbone, const KnowledgeSource* source, const MatchIndex& index,
                        const TaskDataset& train, const TaskDataset* test, const FusionConfig& config,
                        const FinetuneOptions& options) {
  if (options.epochs == 0 || options.batch == 0) throw std::invalid_argument("epochs and batch must be positive");
  if (source && config.mechanism != Mechanism::None && source->mode() != config.mode) {
    throw std::invalid_argument("knowledge source mode " + std::string(to_string(source->mode())) +
                                " does not match requested mode " + std::string(to_string(config.mode)));
  }
  const std::size_t outputs = train.kind == TaskKind::Classification ? train.num_labels : train.num_choices;
  if (test && test->kind == TaskKind::Classification && test->num_labels > outputs) {
    throw std::invalid_argument("test set has labels unseen in training");
  }
  FinetuneResult result{FusionModel(EncoderModel::from_checkpoint(backbone.to_checkpoint()), config, train.kind,
                                    std::max<std::size_t>(outputs, 1), train.paired, options.seed),
                        {},
                        0.0};
  auto& model = result.model;
  AdamW opt(model.parameters(), {.lr = options.lr, .weight_decay = options.weight_decay});
  std::mt19937_64 rng(options.seed);

  std::vector<std::size_t> order(train.samples.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch) {
      std::vector<TaskSample> chunk;
      for (std::size_t k = start; k < std::min(order.size(), start + options.batch); ++k) {
        chunk.push_back(train.samples[order[k]]);
      }
      const auto targets = targets_of(chunk, model.kind());
      const auto scores = model.score(chunk, index, source, &rng);
      Tensor loss = cross_entropy(scores.logits, targets);
      opt.zero_grad();
      backward(loss);
      opt.step();
      loss_sum += loss.item() * static_cast<double>(chunk.size());
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        if (argmax_row(scores.logits.data(), i, scores.logits.dim(1)) == targets[i]) ++correct;
      }
    }
    const double n = static_cast<double>(order.size());
    result.metrics.push_back({epoch, "train", loss_sum / n, static_cast<double>(correct) / n});
    if (test) {
      const auto ev = evaluate(model, *test, index, source);
      result.metrics.push_back({epoch, "test", ev.loss, ev.accuracy});
      result.test_accuracy = ev.accuracy;
    }
  }
  if (options.out_dir) {
    write_metrics(result.metrics, *options.out_dir / "metrics.csv");
    model.save(*options.out_dir / "model.dplm");
  }
  return result;
}

void write_metrics(const std::vector<MetricsRow>& rows, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,split,loss,accuracy\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu,%s,%.17g,%.17g\n", r.epoch, r.split.c_str(), r.loss, r.accuracy);
    out << buf;
  }
}

void dump_attention(const FusionModel& model, const TaskDataset& data, const MatchIndex& index,
                    const KnowledgeSource* source, const Dictionary& dict, std::ostream& out) {
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto scores = model.score(std::span(data.samples).subspan(i, 1), index, source, nullptr);
    for (std::size_t s = 0; s < scores.matches.size(); ++s) {
      nlohmann::ordered_json rec;
      rec["sample_id"] = scores.matches.size() == 1 ? std::to_string(i) : std::to_string(i) + ":" + std::to_string(s);
      nlohmann::json entries = nlohmann::json::array();
      for (const auto& m : scores.matches[s]) {
        entries.push_back({{"entry", dict.at(m.entry).entry}, {"sense", m.sense}, {"span", {m.begin, m.end}}});
      }
      rec["entries"] = entries;
      rec["alphas"] = scores.alphas[s];
      out << rec.dump() << '\n';
    }
  }
}

}  // namespace dplm
