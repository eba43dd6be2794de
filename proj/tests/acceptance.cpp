// Acceptance run: one PASS/FAIL line per criterion, exit status 1 on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dplm/bench.hpp"
#include "dplm/checkpoint.hpp"
#include "dplm/fusion.hpp"
#include "dplm/pretrain.hpp"
#include "dplm/synthetic.hpp"
#include "dplm/text.hpp"
#include "support/grad_cases.hpp"
#include "support/matcher_fixtures.hpp"
#include "support/oracles.hpp"

using namespace dplm;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kOpTol = 1e-4;
constexpr double kPipelineTol = 1e-3;
constexpr int kGradSeeds = 100;
constexpr double kGradBudgetSec = 60.0;
constexpr double kLn2Tol = 1e-10;
constexpr double kDepInitRel = 0.05;
constexpr double kFusionAbs = 1e-10;
constexpr double kAlphaSum = 1e-12;
constexpr double kPermutation = 1e-12;
constexpr double kLutAbs = 1e-6;
constexpr double kLutAccGap = 0.005;
constexpr double kUplift = 0.10;
constexpr double kAblationTie = 0.005;
constexpr double kUpliftBudgetSec = 600.0;
constexpr int kSeeds = 5;

// Recipe used for the task criteria.
constexpr std::size_t kPretrainEpochs = 30;
constexpr std::size_t kFinetuneEpochs = 1;

int failures = 0;

void report(int id, const std::string& title, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS" : "FAIL") << "  criterion " << id << "  " << title << "  | " << detail << std::endl;
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

class Stopwatch {
 public:
  double wall() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_).count(); }
  double cpu() const { return static_cast<double>(std::clock() - cpu_) / CLOCKS_PER_SEC; }

 private:
  std::chrono::steady_clock::time_point wall_ = std::chrono::steady_clock::now();
  std::clock_t cpu_ = std::clock();
};

std::vector<double> rand_vec(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

oracle::Mat to_mat(const Tensor& t) {
  oracle::Mat m(t.dim(0), oracle::Vec(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i * t.dim(1) + j);
  return m;
}

HopAttention random_hop(std::size_t d, std::mt19937_64& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  return {Tensor::randn({d, d}, s, rng, true), Tensor::randn({d, d}, s, rng, true),
          Tensor::randn({d, d}, s, rng, true)};
}

// Shared world for the task criteria.
struct World {
  SyntheticData data = generate_synthetic({});
  Dictionary dict = Dictionary::from_entries(data.entries);
  MatchIndex index = build_index(dict);
  TaskDataset train{TaskKind::Classification, data.train, 4, 0, false};
  TaskDataset test{TaskKind::Classification, data.test, 4, 0, false};
  Vocab vocab;
  EncoderConfig cfg;

  World() {
    std::vector<std::vector<std::string>> extra;
    for (const auto* ds : {&train, &test})
      for (const auto& s : ds->samples) extra.push_back(tokenize(s.text));
    vocab = dictionary_vocab(dict, extra);
    cfg.vocab_size = vocab.size();
  }

  EncoderModel pretrain(std::uint64_t seed, bool use_edd) const {
    PretrainOptions o;
    o.epochs = kPretrainEpochs;
    o.seed = seed;
    o.use_edd = use_edd;
    return pretrain_loop(dict, cfg, vocab, o).model;
  }

  double finetune_acc(const KnowledgeSource* src, Mechanism m, RetrievalMode mode, std::uint64_t seed,
                      bool lut = false) const {
    FinetuneOptions o;
    o.epochs = kFinetuneEpochs;
    o.seed = 200 + seed;
    return finetune(EncoderModel(cfg, vocab, 300 + seed), src, index, train, &test, {m, mode, lut}, o).test_accuracy;
  }
};

// ---- 1 ---------------------------------------------------------------------------

void gradient_correctness() {
  Stopwatch clock;
  double worst_op = 0.0;
  std::string worst_name;
  bool ok = true;
  auto cases = grad_cases::all();
  // The fusion hop is trainable too.
  cases.emplace_back("fusion_hop", [](std::mt19937_64& rng) -> grad_cases::Case {
    const std::size_t d = grad_cases::pick(rng, 1, 4), L = grad_cases::pick(rng, 1, 3), K = grad_cases::pick(rng, 1, 3);
    auto hop = random_hop(d, rng);
    std::vector<Tensor> hs;
    for (std::size_t l = 0; l < L; ++l) hs.push_back(Tensor::randn({1, d}, 1.0, rng, true));
    std::vector<EntryEmbedding> embs(K);
    for (auto& e : embs)
      for (std::size_t l = 0; l < L; ++l) e.per_layer.push_back(rand_vec(d, rng));
    auto w = Tensor::randn({1, d}, 1.0, rng);
    std::vector<Tensor> inputs{hop.wq, hop.wk, hop.wv};
    inputs.insert(inputs.end(), hs.begin(), hs.end());
    return {inputs, [=] { return grad_cases::weighted_sum(fuse_lwa(hs, embs, hop).knowledge, w); }};
  });
  for (const auto& [name, build] : cases) {
    for (int seed = 0; seed < kGradSeeds; ++seed) {
      std::mt19937_64 rng(static_cast<std::uint64_t>(seed) * 104729 + 17);
      auto [inputs, f] = build(rng);
      const auto r = oracle::grad_check(inputs, f);
      if (r.max_rel > worst_op) {
        worst_op = r.max_rel;
        worst_name = name;
      }
      ok &= r.checked > 0 && r.max_rel <= kOpTol;
    }
  }

  // Full DEP+EDD pipeline through a small encoder, new initialization per seed.
  const auto dict = Dictionary::from_entries({
      {"forest", {"a large area of land covered with trees"}, {"woodland"}, {"desert"}},
      {"woodland", {"land with many trees"}, {"forest"}, {"desert"}},
      {"desert", {"a dry area of land with few plants", "to leave someone"}, {}, {"forest"}},
      {"fall asleep", {"to start sleeping"}, {}, {}},
  });
  const auto vocab = dictionary_vocab(dict);
  EncoderConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 12;
  cfg.max_seq = 24;
  const auto samples = dep_samples(dict);
  const auto batch = make_dep_batch(dict, samples, vocab, cfg.max_seq);
  double worst_pipe = 0.0;
  for (int seed = 0; seed < kGradSeeds; ++seed) {
    EncoderModel m(cfg, vocab, 1000 + static_cast<std::uint64_t>(seed));
    const auto triples = edd_triples(dict, 2, static_cast<std::uint64_t>(seed)).triples;
    auto loss = [&] { return combined_loss(dep_loss(m, batch), edd_loss(m, dict, triples), LossWeights{}); };
    const auto r = oracle::grad_check(m.parameters(), loss, 1e-5, 3, static_cast<std::uint64_t>(seed));
    worst_pipe = std::max(worst_pipe, r.max_rel);
    ok &= r.checked > 0 && r.max_rel <= kPipelineTol;
  }
  const double secs = clock.wall();
  ok &= secs < kGradBudgetSec;
  report(1, "gradient correctness", ok,
         std::to_string(cases.size()) + " ops x " + std::to_string(kGradSeeds) + " seeds, worst " +
             fmt("%.2e", worst_op) + " (" + worst_name + ") <= 1e-4; pipeline " + std::to_string(kGradSeeds) +
             " seeds worst " + fmt("%.2e", worst_pipe) + " <= 1e-3; " + fmt("%.1f", secs) + " s < 60 s");
}

// ---- 2 ---------------------------------------------------------------------------

void loss_identities(const World& w) {
  std::mt19937_64 rng(2);
  double worst_ln2 = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng() % 8, d = 1 + rng() % 64;
    auto o = Tensor::randn({n, d}, 3.0, rng), s = Tensor::randn({n, d}, 3.0, rng);
    worst_ln2 = std::max(worst_ln2, std::abs(edd_loss_from_reps(o, s, s).item() - std::log(2.0)));
  }
  const double combined = combined_loss(Tensor::scalar(1.0), Tensor::scalar(1.0), LossWeights{}).item();

  EncoderModel m(w.cfg, w.vocab, 0);
  const auto samples = dep_samples(w.dict);
  const double lnV = std::log(static_cast<double>(w.vocab.size()));
  double weighted = 0.0, worst_batch = 0.0;
  std::size_t count = 0;
  {
    NoGradGuard no_grad;
    for (std::size_t start = 0; start < samples.size(); start += 32) {
      const auto n = std::min<std::size_t>(32, samples.size() - start);
      const auto b = make_dep_batch(w.dict, std::span(samples).subspan(start, n), w.vocab, w.cfg.max_seq);
      const double l = dep_loss(m, b).item();
      weighted += l * static_cast<double>(b.targets.size());
      count += b.targets.size();
      worst_batch = std::max(worst_batch, std::abs(l - lnV) / lnV);
    }
  }
  const double dep = weighted / static_cast<double>(count);
  const double dep_rel = std::abs(dep - lnV) / lnV;
  const bool ok = worst_ln2 <= kLn2Tol && combined == 1.0 && dep_rel <= kDepInitRel;
  report(2, "loss identities", ok,
         "edd(o,s,s)-ln2 max " + fmt("%.1e", worst_ln2) + "; combined(1,1)=" + fmt("%.17g", combined) +
             "; dep at init " + fmt("%.4f", dep) + " vs ln V " + fmt("%.4f", lnV) + " (" +
             fmt("%.2f", 100 * dep_rel) + "%, worst batch " + fmt("%.2f", 100 * worst_batch) + "%)");
}

// ---- 3 ---------------------------------------------------------------------------

void masking_invariant(const World& w) {
  auto pool = dep_samples(w.dict);
  std::mt19937_64 rng(3);
  std::size_t batches = 0, good = 0, multi = 0;
  for (int epoch = 0; epoch < 10; ++epoch) {
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t start = 0; start < pool.size(); start += 32) {
      const auto n = std::min<std::size_t>(32, pool.size() - start);
      const auto refs = std::span(pool).subspan(start, n);
      const auto b = make_dep_batch(w.dict, refs, w.vocab, w.cfg.max_seq);
      std::vector<std::size_t> expect_pos, expect_tgt;
      for (std::size_t r = 0; r < n; ++r) {
        const auto etoks = split_tokens(w.dict.at(refs[r].entry).entry);
        multi += etoks.size() > 1;
        for (std::size_t k = 0; k < etoks.size(); ++k) {
          expect_pos.push_back(r * b.input.seq + 1 + k);
          expect_tgt.push_back(w.vocab.id(etoks[k]));
        }
      }
      bool ok = b.mask_positions == expect_pos && b.targets == expect_tgt;
      for (std::size_t i = 0; i < b.input.ids.size() && ok; ++i) {
        const bool masked = std::binary_search(expect_pos.begin(), expect_pos.end(), i);
        ok = (b.input.ids[i] == Vocab::kMask) == masked;
      }
      good += ok;
      ++batches;
    }
  }
  report(3, "masking invariant", good == batches && multi > 0,
         std::to_string(good) + "/" + std::to_string(batches) + " batches exact, " + std::to_string(multi) +
             " multi-token entry samples");
}

// ---- 4 ---------------------------------------------------------------------------

void matcher_oracle() {
  const auto d = matcher_fixtures::sweep_dict(1);
  const auto idx = build_index(d);
  const std::vector<std::string> alphabet{"the", "ka", "mo"};
  std::size_t checked = 0, mismatched = 0;
  for (std::size_t len = 1; len <= 12; ++len) {
    std::vector<std::size_t> digits(len, 0);
    std::vector<std::string> tokens(len);
    for (;;) {
      for (std::size_t i = 0; i < len; ++i) tokens[i] = alphabet[digits[i]];
      for (bool dedupe : {true, false}) {
        mismatched += find_entries(idx, tokens, dedupe) != oracle::brute_force_matches(d, tokens, dedupe);
      }
      ++checked;
      std::size_t pos = 0;
      while (pos < len && ++digits[pos] == alphabet.size()) digits[pos++] = 0;
      if (pos == len) break;
    }
  }
  const auto sleep = matcher_fixtures::make_dict({{"resting", 1}, {"tired", 1}, {"fall asleep", 2}});
  const auto tokens = tokenize("someone resting when tired may fall asleep");
  const auto k4 = find_entries(build_index(sleep), tokens);
  const bool k4_ok = k4.size() == 4 && k4 == oracle::brute_force_matches(sleep, tokens, true);
  report(4, "matcher oracle", d.size() == 50 && mismatched == 0 && k4_ok,
         std::to_string(checked) + " sequences (len <= 12, 50 entries) x 2 dedupe modes, " +
             std::to_string(mismatched) + " mismatches; K=4 scenario " + (k4_ok ? "ok" : "wrong"));
}

// ---- 5 ---------------------------------------------------------------------------

void fusion_oracles(const World& w) {
  double worst_abs = 0.0, worst_sum = 0.0, worst_perm = 0.0;
  bool lwa_is_eha = true;
  std::mt19937_64 rng(5);
  for (int t = 0; t < 500; ++t) {
    const std::size_t d = 1 + rng() % 16, L = 1 + rng() % 4, K = 1 + rng() % 6;
    const auto hop = random_hop(d, rng);
    std::vector<Tensor> hs;
    std::vector<oracle::Vec> hv;
    for (std::size_t l = 0; l < L; ++l) {
      hv.push_back(rand_vec(d, rng, 2.0));
      hs.push_back(Tensor::from({1, d}, hv.back()));
    }
    std::vector<EntryEmbedding> embs(K);
    std::vector<std::vector<oracle::Vec>> by_layer(L);
    for (auto& e : embs)
      for (std::size_t l = 0; l < L; ++l) {
        e.per_layer.push_back(rand_vec(d, rng, 2.0));
        by_layer[l].push_back(e.per_layer.back());
      }
    const auto wq = to_mat(hop.wq), wk = to_mat(hop.wk), wv = to_mat(hop.wv);

    const auto eha = fuse_eha(hs.back(), embs, hop);
    const auto eha_want = oracle::extra_hop(hv.back(), by_layer.back(), wq, wk, wv);
    for (std::size_t c = 0; c < d; ++c) worst_abs = std::max(worst_abs, std::abs(eha.knowledge.at(c) - eha_want.knowledge[c]));
    for (std::size_t i = 0; i < K; ++i) worst_abs = std::max(worst_abs, std::abs(eha.alphas[0][i] - eha_want.alphas[i]));

    const auto lwa = fuse_lwa(hs, embs, hop);
    const auto lwa_want = oracle::layerwise_hop(hv, by_layer, wq, wk, wv);
    for (std::size_t c = 0; c < d; ++c) worst_abs = std::max(worst_abs, std::abs(lwa.knowledge.at(c) - lwa_want[c]));
    for (const auto* r : {&eha, &lwa})
      for (const auto& a : r->alphas)
        worst_sum = std::max(worst_sum, std::abs(std::accumulate(a.begin(), a.end(), 0.0) - 1.0));

    const auto single = fuse_lwa({hs.back()}, [&] {
      auto last = embs;
      for (auto& e : last) e.per_layer = {e.per_layer.back()};
      return last;
    }(), hop);
    lwa_is_eha &= std::equal(single.knowledge.data().begin(), single.knowledge.data().end(),
                             eha.knowledge.data().begin()) &&
                  single.alphas == eha.alphas;

    auto shuffled = embs;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto eha_p = fuse_eha(hs.back(), shuffled, hop);
    const auto lwa_p = fuse_lwa(hs, shuffled, hop);
    for (std::size_t c = 0; c < d; ++c) {
      worst_perm = std::max(worst_perm, std::abs(eha_p.knowledge.at(c) - eha.knowledge.at(c)));
      worst_perm = std::max(worst_perm, std::abs(lwa_p.knowledge.at(c) - lwa.knowledge.at(c)));
    }
  }

  // Same checks on embeddings produced by a plugin for a real sentence.
  const EncoderModel plugin(w.cfg, w.vocab, 9);
  const FusionModel model(EncoderModel(w.cfg, w.vocab, 10), {Mechanism::LWA, RetrievalMode::KV, false},
                          TaskKind::Classification, 4, false, 11);
  LivePluginSource src(plugin, w.dict, RetrievalMode::KV);
  for (std::size_t i = 0; i < 20; ++i) {
    std::vector<std::string> parts;
    for (std::size_t k = 0; k < 4; ++k) parts.push_back(w.dict.at((i * 7 + k * 13) % w.dict.size()).entry);
    const std::string text = "we saw " + parts[0] + " and " + parts[1] + " near " + parts[2] + " " + parts[3];
    const auto matches = collapse_for_mode(find_entries(w.index, tokenize(text)), RetrievalMode::KV);
    const auto embs = src.retrieve(matches);
    const auto out = plugin.forward(pad_batch({encode_sample(text, "", w.vocab, w.cfg.max_seq)}));
    std::vector<oracle::Vec> hv;
    std::vector<std::vector<oracle::Vec>> by_layer(out.cls_per_layer.size());
    for (std::size_t l = 0; l < out.cls_per_layer.size(); ++l) {
      hv.emplace_back(out.cls_per_layer[l].data().begin(), out.cls_per_layer[l].data().end());
      for (const auto& e : embs) by_layer[l].push_back(e.per_layer[l]);
    }
    const auto& hop = model.hop();
    const auto got = fuse_lwa(out.cls_per_layer, embs, hop);
    const auto want = oracle::layerwise_hop(hv, by_layer, to_mat(hop.wq), to_mat(hop.wk), to_mat(hop.wv));
    for (std::size_t c = 0; c < want.size(); ++c) worst_abs = std::max(worst_abs, std::abs(got.knowledge.at(c) - want[c]));
  }

  const bool ok = worst_abs <= kFusionAbs && worst_sum <= kAlphaSum && lwa_is_eha && worst_perm <= kPermutation;
  report(5, "fusion oracles", ok,
         "vs scalar max " + fmt("%.1e", worst_abs) + "; |sum alpha - 1| max " + fmt("%.1e", worst_sum) +
             "; LWA(L=1) == EHA " + (lwa_is_eha ? "bitwise" : "NO") + "; permutation max " + fmt("%.1e", worst_perm));
}

// ---- 6, 7, 8 ---------------------------------------------------------------------

void task_criteria(const World& w) {
  struct Row {
    double none = 0, concat_k = 0, lwa_kv = 0, dep_concat_k = 0, untrained_concat_k = 0;
  };
  std::vector<Row> rows(kSeeds);
  double uplift_cpu = 0.0, uplift_wall = 0.0, ablation_wall = 0.0;
  bool frozen = true;
  double lut_worst = 0.0, lut_gap = 0.0, acc_live = 0.0, acc_lut = 0.0;
  std::size_t lut_pairs = 0;

  for (int s = 0; s < kSeeds; ++s) {
    const auto seed = static_cast<std::uint64_t>(s);
    Stopwatch uplift_clock;
    const auto plugin = w.pretrain(100 + seed, true);
    const auto checksum = plugin.checksum();
    LivePluginSource live_k(plugin, w.dict, RetrievalMode::K), live_kv(plugin, w.dict, RetrievalMode::KV);
    rows[s].none = w.finetune_acc(&live_k, Mechanism::None, RetrievalMode::K, seed);
    rows[s].concat_k = w.finetune_acc(&live_k, Mechanism::Concat, RetrievalMode::K, seed);
    rows[s].lwa_kv = w.finetune_acc(&live_kv, Mechanism::LWA, RetrievalMode::KV, seed);
    uplift_cpu += uplift_clock.cpu();
    uplift_wall += uplift_clock.wall();

    if (s == 0) {
      for (auto mode : {RetrievalMode::K, RetrievalMode::KV}) {
        const auto table = build_lookup_table(plugin, w.dict, mode);
        std::vector<EntryMatch> all;
        for (std::size_t e = 0; e < w.dict.size(); ++e) {
          const std::size_t senses = mode == RetrievalMode::K ? 1 : w.dict.at(e).senses.size();
          for (std::size_t k = 0; k < senses; ++k) all.push_back({e, k, 0, 1});
        }
        const auto a = retrieve_live(plugin, all, w.dict, mode);
        const auto b = retrieve_lut(table, all, w.dict);
        for (std::size_t i = 0; i < all.size(); ++i)
          for (std::size_t l = 0; l < a[i].per_layer.size(); ++l)
            for (std::size_t c = 0; c < a[i].per_layer[l].size(); ++c)
              lut_worst = std::max(lut_worst, std::abs(a[i].per_layer[l][c] - b[i].per_layer[l][c]));
        lut_pairs += all.size();
        if (mode == RetrievalMode::KV) {
          TableSource lut(table, w.dict);
          acc_live = rows[s].lwa_kv;
          acc_lut = w.finetune_acc(&lut, Mechanism::LWA, RetrievalMode::KV, seed, true);
          lut_gap = std::abs(acc_live - acc_lut);
        }
      }
    }
    frozen &= plugin.checksum() == checksum;

    Stopwatch ablation_clock;
    const auto dep_only = w.pretrain(100 + seed, false);
    LivePluginSource dep_k(dep_only, w.dict, RetrievalMode::K);
    rows[s].dep_concat_k = w.finetune_acc(&dep_k, Mechanism::Concat, RetrievalMode::K, seed);
    const EncoderModel untrained(w.cfg, w.vocab, 100 + seed);
    LivePluginSource untrained_k(untrained, w.dict, RetrievalMode::K);
    rows[s].untrained_concat_k = w.finetune_acc(&untrained_k, Mechanism::Concat, RetrievalMode::K, seed);
    ablation_wall += ablation_clock.wall();

    std::printf("      seed %d: baseline %.3f  concat(K) %.3f  lwa(KV) %.3f  | dep-only %.3f  untrained %.3f\n", s,
                rows[s].none, rows[s].concat_k, rows[s].lwa_kv, rows[s].dep_concat_k, rows[s].untrained_concat_k);
    std::fflush(stdout);
  }

  report(6, "freeze and LUT equivalence", frozen && lut_worst <= kLutAbs && lut_gap <= kLutAccGap,
         std::string("plugin checksum ") + (frozen ? "unchanged" : "CHANGED") + "; LUT vs live max " +
             fmt("%.1e", lut_worst) + " over " + std::to_string(lut_pairs) + " (entry, sense) records; accuracy live " +
             fmt("%.3f", acc_live) + " vs LUT " + fmt("%.3f", acc_lut));

  Row mean;
  for (const auto& r : rows) {
    mean.none += r.none / kSeeds;
    mean.concat_k += r.concat_k / kSeeds;
    mean.lwa_kv += r.lwa_kv / kSeeds;
    mean.dep_concat_k += r.dep_concat_k / kSeeds;
    mean.untrained_concat_k += r.untrained_concat_k / kSeeds;
  }
  const bool uplift = mean.none < mean.concat_k && mean.concat_k < mean.lwa_kv &&
                      mean.lwa_kv >= mean.none + kUplift && uplift_cpu < kUpliftBudgetSec;
  report(7, "synthetic uplift", uplift,
         "5-seed mean baseline " + fmt("%.3f", mean.none) + " < concat(K) " + fmt("%.3f", mean.concat_k) +
             " < lwa(KV) " + fmt("%.3f", mean.lwa_kv) + "; uplift " + fmt("%.1f", 100 * (mean.lwa_kv - mean.none)) +
             " pts; " + fmt("%.0f", uplift_cpu) + " s CPU (" + fmt("%.0f", uplift_wall) + " s wall) < 600 s");

  const bool ablation = mean.concat_k + kAblationTie >= mean.dep_concat_k &&
                        mean.dep_concat_k + kAblationTie >= mean.untrained_concat_k;
  report(8, "ablation", ablation,
         "concat(K) 5-seed mean DEP+EDD " + fmt("%.3f", mean.concat_k) + " >= DEP-only " +
             fmt("%.3f", mean.dep_concat_k) + " >= untrained " + fmt("%.3f", mean.untrained_concat_k) +
             " (ties within 0.5 pts); extra " + fmt("%.0f", ablation_wall) + " s wall");
}

// ---- 9 ---------------------------------------------------------------------------

void bench(const World& w) {
  const EncoderModel plugin(w.cfg, w.vocab, 1), backbone(w.cfg, w.vocab, 2);
  const auto table = build_lookup_table(plugin, w.dict, RetrievalMode::K);
  std::vector<std::string> texts;
  for (const auto& s : w.test.samples) texts.push_back(s.text);
  const auto r = run_bench(backbone, plugin, table, w.dict, w.index, texts, {});
  std::map<std::string, double> median;
  for (const auto& t : r.timings) median[t.strategy] = t.median_ms;
  const bool ok = r.reps == 100 && r.batch == 64 && median.size() == 3 && median["inline"] > median["live"] &&
                  median["live"] > median["lut"];
  report(9, "bench", ok,
         "median ms inline " + fmt("%.2f", median["inline"]) + " > live " + fmt("%.2f", median["live"]) + " > lut " +
             fmt("%.2f", median["lut"]) + " (" + std::to_string(r.reps) + " reps x " + std::to_string(r.batch) +
             " samples)");
}

// ---- 10 --------------------------------------------------------------------------

std::map<std::string, std::vector<std::uint8_t>> artifacts_of(const fs::path& root) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = bytes::read_file(e.path());
  return out;
}

void reproducibility() {
  const auto root = fs::temp_directory_path() / "dplm_acceptance_repro";
  fs::remove_all(root);
  auto run = [&](const fs::path& dir) {
    const auto data = generate_synthetic({});
    write_synthetic(data, dir / "data");
    const auto dict = load_dictionary(dir / "data" / "dict.jsonl");
    const auto train = load_task(dir / "data" / "train.jsonl");
    const auto test = load_task(dir / "data" / "test.jsonl");
    std::vector<std::vector<std::string>> extra;
    for (const auto* ds : {&train, &test})
      for (const auto& s : ds->samples) extra.push_back(tokenize(s.text));
    const auto vocab = dictionary_vocab(dict, extra);
    EncoderConfig cfg;
    cfg.vocab_size = vocab.size();
    PretrainOptions po;
    po.epochs = 2;
    po.seed = 42;
    po.out_dir = dir / "pretrain";
    const auto plugin = pretrain_loop(dict, cfg, vocab, po).model;
    const auto lut_path = dir / "lut" / "table.dlut";
    fs::create_directories(lut_path.parent_path());
    const auto table = build_lookup_table(plugin, dict, RetrievalMode::KV, &lut_path);
    const auto index = build_index(dict);
    TableSource lut(table, dict);
    LivePluginSource live(plugin, dict, RetrievalMode::K);
    FinetuneOptions fo;
    fo.epochs = 1;
    fo.seed = 43;
    fo.out_dir = dir / "finetune_lwa";
    finetune(EncoderModel(cfg, vocab, 44), &lut, index, train, &test, {Mechanism::LWA, RetrievalMode::KV, true}, fo);
    fo.out_dir = dir / "finetune_concat";
    finetune(EncoderModel(cfg, vocab, 44), &live, index, train, &test, {Mechanism::Concat, RetrievalMode::K, false}, fo);
  };
  run(root / "a");
  run(root / "b");
  const auto a = artifacts_of(root / "a"), b = artifacts_of(root / "b");
  std::size_t differing = 0, ckpt = 0, luts = 0, csv = 0;
  for (const auto& [name, bytes] : a) {
    const auto it = b.find(name);
    differing += it == b.end() || it->second != bytes;
    ckpt += name.ends_with(".dplm");
    luts += name.ends_with(".dlut");
    csv += name.ends_with(".csv");
  }
  const bool ok = a.size() == b.size() && differing == 0 && ckpt > 0 && luts > 0 && csv > 0;
  report(10, "reproducibility", ok,
         std::to_string(a.size()) + " artifacts (" + std::to_string(ckpt) + " checkpoints, " + std::to_string(luts) +
             " LUT, " + std::to_string(csv) + " CSVs), " + std::to_string(differing) + " differ across two runs");
  fs::remove_all(root);
}

}  // namespace

int main() {
  try {
    const World world;
    std::cout << "synthetic task: " << world.dict.size() << " entries, " << world.train.samples.size() << " train / "
              << world.test.samples.size() << " test, vocab " << world.vocab.size() << "; pretrain "
              << kPretrainEpochs << " epochs, fine-tune " << kFinetuneEpochs << " epoch" << std::endl;
    gradient_correctness();
    loss_identities(world);
    masking_invariant(world);
    matcher_oracle();
    fusion_oracles(world);
    task_criteria(world);
    bench(world);
    reproducibility();
  } catch (const std::exception& e) {
    std::cout << "FAIL  acceptance run aborted: " << e.what() << std::endl;
    return 1;
  }
  std::cout << (failures == 0 ? "ALL CRITERIA PASS" : std::to_string(failures) + " CRITERIA FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
