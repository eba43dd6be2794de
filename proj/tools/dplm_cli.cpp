// Command-line driver: synthetic data, pre-training, lookup tables,
// fine-tuning, prediction and the retrieval benchmark.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include "dplm/bench.hpp"
#include "dplm/dictionary.hpp"
#include "dplm/encoder.hpp"
#include "dplm/fusion.hpp"
#include "dplm/matcher.hpp"
#include "dplm/plugin.hpp"
#include "dplm/pretrain.hpp"
#include "dplm/synthetic.hpp"
#include "dplm/text.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Bad flag values or combinations; exits with status 2.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& flag, const std::string& path) {
  if (path.empty()) throw ValidationError(flag + " is required");
  if (!fs::exists(path)) throw ValidationError(flag + ": no such file '" + path + "'");
}

void write_run_config(const fs::path& dir, const json& cfg) {
  fs::create_directories(dir);
  std::ofstream out(dir / "run_config.json", std::ios::trunc);
  out << cfg.dump(2) << '\n';
}

json parse_config_flag(const std::string& text) {
  if (text.empty()) return json::object();
  try {
    if (fs::exists(text)) {
      std::ifstream in(text);
      return json::parse(in);
    }
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("--config: ") + e.what());
  }
}

std::vector<std::vector<std::string>> task_tokens(const dplm::TaskDataset& ds) {
  std::vector<std::vector<std::string>> out;
  for (const auto& s : ds.samples) {
    for (const auto* t : {&s.text, &s.text_b, &s.question}) {
      if (!t->empty()) out.push_back(dplm::tokenize(*t));
    }
    for (const auto& c : s.choices) out.push_back(dplm::tokenize(c));
  }
  return out;
}

struct Flags {
  // shared
  std::string dict, task, test, out, plugin, lut, model, config, dump_attention;
  std::uint64_t seed = 0;
  std::optional<std::size_t> epochs;
  std::size_t batch = 32, reps = 100;
  double lr = 1e-3;
  std::string mechanism = "lwa", mode = "kv";
  bool use_lut = false;
  // pretrain
  double lambda1 = 0.4, lambda2 = 0.6;
  bool dep_only = false;
  std::size_t n_pairs = 5;
  std::vector<std::string> vocab_tasks;
  // gen-synthetic
  std::size_t n_entries = 200, n_categories = 4, n_train = 2000, n_test = 500;
};

int cmd_gen(const Flags& f) {
  if (f.out.empty()) throw ValidationError("--out is required");
  dplm::SyntheticOptions opt;
  opt.n_entries = f.n_entries;
  opt.n_categories = f.n_categories;
  opt.seed = f.seed;
  opt.n_train = f.n_train;
  opt.n_test = f.n_test;
  try {
    opt.validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  const auto data = dplm::generate_synthetic(opt);
  dplm::write_synthetic(data, f.out);
  write_run_config(f.out, {{"command", "gen-synthetic"},
                           {"n_entries", opt.n_entries},
                           {"n_categories", opt.n_categories},
                           {"seed", opt.seed},
                           {"n_train", opt.n_train},
                           {"n_test", opt.n_test}});
  std::cout << "wrote " << data.entries.size() << " entries, " << data.train.size() << " train / "
            << data.test.size() << " test samples to " << f.out << '\n';
  return 0;
}

int cmd_pretrain(const Flags& f) {
  require_file("--dict", f.dict);
  if (f.out.empty()) throw ValidationError("--out is required");
  const auto dict = dplm::load_dictionary(f.dict);
  std::vector<std::vector<std::string>> extra;
  for (const auto& t : f.vocab_tasks) {
    require_file("--task", t);
    auto toks = task_tokens(dplm::load_task(t));
    extra.insert(extra.end(), toks.begin(), toks.end());
  }
  const auto vocab = dplm::dictionary_vocab(dict, extra);
  dplm::EncoderConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg = cfg.overridden(parse_config_flag(f.config));
  cfg.vocab_size = vocab.size();
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  dplm::PretrainOptions opt;
  opt.epochs = f.epochs.value_or(10);
  opt.batch = f.batch;
  opt.lr = f.lr;
  opt.seed = f.seed;
  opt.n_pairs = f.n_pairs;
  opt.weights = {f.lambda1, f.lambda2};
  opt.use_edd = !f.dep_only;
  opt.out_dir = f.out;
  try {
    opt.weights.validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  write_run_config(f.out, {{"command", "pretrain"},
                           {"dict", f.dict},
                           {"task", f.vocab_tasks},
                           {"seed", f.seed},
                           {"epochs", opt.epochs},
                           {"batch", opt.batch},
                           {"lr", opt.lr},
                           {"lambda1", opt.weights.lambda1},
                           {"lambda2", opt.weights.lambda2},
                           {"dep_only", f.dep_only},
                           {"n_pairs", opt.n_pairs},
                           {"encoder", cfg.to_json()}});
  const auto result = dplm::pretrain_loop(dict, cfg, vocab, opt);
  const auto& first = result.log.front();
  const auto& last = result.log.back();
  std::cout << "pretrained " << result.log.size() << " steps; loss " << first.loss_total << " -> " << last.loss_total
            << "; checkpoint " << (fs::path(f.out) / "plugin.dplm").string() << '\n';
  return 0;
}

int cmd_build_lut(const Flags& f) {
  require_file("--plugin", f.plugin);
  require_file("--dict", f.dict);
  if (f.out.empty()) throw ValidationError("--out is required");
  const auto mode = dplm::parse_retrieval_mode(f.mode);
  const auto plugin = dplm::EncoderModel::load(f.plugin);
  const auto dict = dplm::load_dictionary(f.dict);
  fs::path out = f.out;
  if (fs::is_directory(out) || !out.has_extension()) {
    write_run_config(out, {{"command", "build-lut"}, {"plugin", f.plugin}, {"dict", f.dict}, {"mode", f.mode}});
    out /= "table.dlut";
  }
  const auto table = dplm::build_lookup_table(plugin, dict, mode, &out);
  std::cout << "wrote " << table.size() << " records (" << dplm::to_string(mode) << ", L=" << table.n_layers()
            << ", d=" << table.d_model() << ") to " << out.string() << '\n';
  return 0;
}

struct Knowledge {
  std::optional<dplm::EncoderModel> plugin;
  std::optional<dplm::LookupTable> table;
  std::unique_ptr<dplm::KnowledgeSource> source;
};

Knowledge open_knowledge(const Flags& f, const dplm::Dictionary& dict, dplm::RetrievalMode mode,
                         dplm::Mechanism mechanism, std::size_t backbone_layers) {
  Knowledge k;
  if (!f.plugin.empty()) {
    require_file("--plugin", f.plugin);
    k.plugin = dplm::EncoderModel::load(f.plugin);
    k.plugin->set_trainable(false);
  }
  if (f.use_lut) {
    require_file("--lut", f.lut);
    k.table = dplm::LookupTable::load(f.lut);
    if (k.table->mode() != mode) {
      throw ValidationError("--lut holds " + std::string(dplm::to_string(k.table->mode())) +
                            "-mode embeddings but --mode is " + std::string(dplm::to_string(mode)));
    }
    if (mechanism == dplm::Mechanism::LWA && backbone_layers != 0 && k.table->n_layers() != backbone_layers) {
      throw ValidationError("--mechanism lwa needs per-layer embeddings for " + std::to_string(backbone_layers) +
                            " layers; table has " + std::to_string(k.table->n_layers()));
    }
    k.source = std::make_unique<dplm::TableSource>(*k.table, dict);
  } else if (!f.lut.empty()) {
    throw ValidationError("--lut given without --use-lut");
  } else if (mechanism != dplm::Mechanism::None) {
    if (!k.plugin) throw ValidationError("live retrieval needs --plugin (or --use-lut --lut)");
    k.source = std::make_unique<dplm::LivePluginSource>(*k.plugin, dict, mode);
  }
  return k;
}

int cmd_finetune(const Flags& f) {
  require_file("--plugin", f.plugin);
  require_file("--dict", f.dict);
  require_file("--task", f.task);
  if (f.out.empty()) throw ValidationError("--out is required");
  const auto mechanism = dplm::parse_mechanism(f.mechanism);
  const auto mode = dplm::parse_retrieval_mode(f.mode);
  const auto dict = dplm::load_dictionary(f.dict);
  const auto train = dplm::load_task(f.task);
  std::optional<dplm::TaskDataset> test;
  if (!f.test.empty()) {
    require_file("--test", f.test);
    test = dplm::load_task(f.test);
  }
  auto knowledge = open_knowledge(f, dict, mode, mechanism, 0);
  const auto& plugin = *knowledge.plugin;
  auto cfg = plugin.config().overridden(parse_config_flag(f.config));
  if (cfg.d_model != plugin.config().d_model || cfg.n_layers != plugin.config().n_layers ||
      cfg.vocab_size != plugin.config().vocab_size) {
    throw ValidationError("--config may not change d_model, n_layers or vocab_size of the plugin");
  }
  if (knowledge.table && mechanism == dplm::Mechanism::LWA && knowledge.table->n_layers() != cfg.n_layers) {
    throw ValidationError("--mechanism lwa needs a per-layer table matching the backbone");
  }
  const std::uint32_t plugin_sum = plugin.checksum();
  const dplm::EncoderModel backbone(cfg, plugin.vocab(), f.seed);
  const auto index = dplm::build_index(dict);
  dplm::FinetuneOptions opt;
  opt.epochs = f.epochs.value_or(5);
  opt.batch = f.batch;
  opt.lr = f.lr;
  opt.seed = f.seed;
  opt.out_dir = f.out;
  write_run_config(f.out, {{"command", "finetune"},
                           {"plugin", f.plugin},
                           {"dict", f.dict},
                           {"task", f.task},
                           {"test", f.test},
                           {"seed", f.seed},
                           {"epochs", opt.epochs},
                           {"batch", opt.batch},
                           {"lr", opt.lr},
                           {"mechanism", f.mechanism},
                           {"mode", f.mode},
                           {"use_lut", f.use_lut},
                           {"lut", f.lut},
                           {"encoder", cfg.to_json()}});
  const dplm::FusionConfig fusion{mechanism, mode, f.use_lut};
  const auto result = dplm::finetune(backbone, knowledge.source.get(), index, train, test ? &*test : nullptr, fusion, opt);
  if (plugin.checksum() != plugin_sum) throw std::runtime_error("plugin parameters changed during fine-tuning");
  for (const auto& m : result.metrics) {
    std::cout << "epoch " << m.epoch << ' ' << m.split << " loss=" << m.loss << " acc=" << m.accuracy << '\n';
  }
  return 0;
}

int cmd_predict(const Flags& f) {
  require_file("--model", f.model);
  require_file("--dict", f.dict);
  require_file("--task", f.task);
  const auto model = dplm::FusionModel::load(f.model);
  const auto dict = dplm::load_dictionary(f.dict);
  const auto data = dplm::load_task(f.task);
  const auto& fc = model.config();
  auto knowledge = open_knowledge(f, dict, fc.mode, fc.mechanism, model.backbone().config().n_layers);
  const auto index = dplm::build_index(dict);
  const auto ev = dplm::evaluate(model, data, index, knowledge.source.get());
  for (std::size_t i = 0; i < ev.predictions.size(); ++i) std::cout << i << '\t' << ev.predictions[i] << '\n';
  std::cout << "accuracy " << ev.accuracy << '\n';
  if (!f.dump_attention.empty()) {
    std::ofstream out(f.dump_attention, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + f.dump_attention);
    dplm::dump_attention(model, data, index, knowledge.source.get(), dict, out);
  }
  if (!f.out.empty()) {
    write_run_config(f.out, {{"command", "predict"}, {"model", f.model}, {"task", f.task}, {"use_lut", f.use_lut}});
    std::ofstream out(fs::path(f.out) / "predictions.txt", std::ios::trunc);
    for (auto p : ev.predictions) out << p << '\n';
  }
  return 0;
}

int cmd_bench(const Flags& f) {
  require_file("--plugin", f.plugin);
  require_file("--dict", f.dict);
  require_file("--task", f.task);
  const auto mode = dplm::parse_retrieval_mode(f.mode);
  const auto plugin = dplm::EncoderModel::load(f.plugin);
  const auto dict = dplm::load_dictionary(f.dict);
  const auto data = dplm::load_task(f.task);
  std::optional<dplm::LookupTable> table;
  if (!f.lut.empty()) {
    require_file("--lut", f.lut);
    table = dplm::LookupTable::load(f.lut);
    if (table->mode() != mode) throw ValidationError("--lut mode does not match --mode");
  } else {
    table = dplm::build_lookup_table(plugin, dict, mode);
  }
  const dplm::EncoderModel backbone(plugin.config(), plugin.vocab(), f.seed);
  const auto index = dplm::build_index(dict);
  std::vector<std::string> texts;
  for (const auto& s : data.samples) texts.push_back(s.text.empty() ? s.question : s.text);
  const auto report = dplm::run_bench(backbone, plugin, *table, dict, index, texts, {f.batch, f.reps, mode});
  dplm::print_bench(report, std::cout);
  if (!f.out.empty()) {
    write_run_config(f.out, {{"command", "bench"}, {"batch", f.batch}, {"reps", f.reps}, {"mode", f.mode}});
    std::ofstream out(fs::path(f.out) / "bench.txt", std::ios::trunc);
    dplm::print_bench(report, out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dictionary-knowledge plugin pre-training and fusion fine-tuning"};
  app.require_subcommand(1);
  Flags f;

  auto* gen = app.add_subcommand("gen-synthetic", "Generate a synthetic dictionary and knowledge-dependent tasks");
  gen->add_option("--n-entries", f.n_entries, "Number of dictionary entries")->capture_default_str();
  gen->add_option("--n-categories", f.n_categories, "Number of latent categories")->capture_default_str();
  gen->add_option("--n-train", f.n_train, "Training sentences")->capture_default_str();
  gen->add_option("--n-test", f.n_test, "Test sentences")->capture_default_str();
  gen->add_option("--seed", f.seed, "Random seed")->capture_default_str();
  gen->add_option("--out", f.out, "Output directory");

  auto* pre = app.add_subcommand("pretrain", "Pre-train the dictionary plugin with DEP + EDD");
  pre->add_option("--dict", f.dict, "Dictionary JSONL");
  pre->add_option("--task", f.vocab_tasks, "Task files whose words join the vocabulary");
  pre->add_option("--out", f.out, "Output directory");
  pre->add_option("--seed", f.seed)->capture_default_str();
  pre->add_option("--epochs", f.epochs, "Epochs (default 10)");
  pre->add_option("--batch", f.batch)->capture_default_str();
  pre->add_option("--lr", f.lr)->capture_default_str();
  pre->add_option("--lambda1", f.lambda1, "DEP loss weight")->capture_default_str();
  pre->add_option("--lambda2", f.lambda2, "EDD loss weight")->capture_default_str();
  pre->add_option("--n-pairs", f.n_pairs, "Contrastive pairs per entry")->capture_default_str();
  pre->add_flag("--dep-only", f.dep_only, "Train without the contrastive objective");
  pre->add_option("--config", f.config, "JSON (or JSON file) overriding the encoder config");

  auto* lut = app.add_subcommand("build-lut", "Precompute entry embeddings into a lookup table");
  lut->add_option("--plugin", f.plugin, "Pre-trained plugin checkpoint");
  lut->add_option("--dict", f.dict, "Dictionary JSONL");
  lut->add_option("--mode", f.mode, "k or kv")->capture_default_str();
  lut->add_option("--out", f.out, "Output .dlut file or directory");

  auto* ft = app.add_subcommand("finetune", "Fine-tune a backbone with the frozen plugin");
  ft->add_option("--plugin", f.plugin, "Pre-trained plugin checkpoint");
  ft->add_option("--dict", f.dict, "Dictionary JSONL");
  ft->add_option("--task", f.task, "Training task JSONL");
  ft->add_option("--test", f.test, "Evaluation task JSONL");
  ft->add_option("--out", f.out, "Output directory");
  ft->add_option("--seed", f.seed)->capture_default_str();
  ft->add_option("--epochs", f.epochs, "Epochs (default 5)");
  ft->add_option("--batch", f.batch)->capture_default_str();
  ft->add_option("--lr", f.lr)->capture_default_str();
  ft->add_option("--mechanism", f.mechanism, "concat, eha, lwa or none")
      ->check(CLI::IsMember({"concat", "eha", "lwa", "none"}))
      ->capture_default_str();
  ft->add_option("--mode", f.mode, "k or kv")->check(CLI::IsMember({"k", "kv"}))->capture_default_str();
  ft->add_flag("--use-lut", f.use_lut, "Read entry knowledge from --lut instead of the live plugin");
  ft->add_option("--lut", f.lut, "Lookup table file");
  ft->add_option("--config", f.config, "JSON overriding the encoder config");

  auto* pr = app.add_subcommand("predict", "Predict with a fine-tuned model");
  pr->add_option("--model", f.model, "Fine-tuned model.dplm");
  pr->add_option("--plugin", f.plugin, "Pre-trained plugin checkpoint (live retrieval)");
  pr->add_option("--dict", f.dict, "Dictionary JSONL");
  pr->add_option("--task", f.task, "Task JSONL to predict");
  pr->add_flag("--use-lut", f.use_lut, "Read entry knowledge from --lut");
  pr->add_option("--lut", f.lut, "Lookup table file");
  pr->add_option("--dump-attention", f.dump_attention, "Write per-sample attention weights (JSONL)");
  pr->add_option("--out", f.out, "Optional output directory");

  auto* be = app.add_subcommand("bench", "Time inline re-encoding vs live plugin vs lookup table");
  be->add_option("--plugin", f.plugin, "Pre-trained plugin checkpoint");
  be->add_option("--dict", f.dict, "Dictionary JSONL");
  be->add_option("--task", f.task, "Task JSONL supplying texts");
  be->add_option("--lut", f.lut, "Lookup table (built in memory when omitted)");
  be->add_option("--mode", f.mode, "k or kv")->check(CLI::IsMember({"k", "kv"}));
  be->add_option("--batch", f.batch, "Samples per batch");
  be->add_option("--reps", f.reps, "Timed repetitions")->capture_default_str();
  be->add_option("--seed", f.seed)->capture_default_str();
  be->add_option("--out", f.out, "Optional output directory");
  be->preparse_callback([&](std::size_t) {
    f.batch = 64;
    f.mode = "k";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen(f);
    if (*pre) return cmd_pretrain(f);
    if (*lut) return cmd_build_lut(f);
    if (*ft) return cmd_finetune(f);
    if (*pr) return cmd_predict(f);
    if (*be) return cmd_bench(f);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
