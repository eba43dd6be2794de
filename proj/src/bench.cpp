#include "dplm/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>

#include "dplm/text.hpp"

namespace dplm {

namespace {

BenchTiming time_strategy(const std::string& name, std::size_t reps, const std::function<void()>& body) {
  std::vector<double> ms;
  ms.reserve(reps);
  body();  // warm-up
  for (std::size_t r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    body();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  const double median = ms.size() % 2 ? ms[ms.size() / 2] : 0.5 * (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]);
  return {name, median, ms.front(), ms.back()};
}

}  // namespace

BenchReport run_bench(const EncoderModel& backbone, const EncoderModel& plugin, const LookupTable& table,
                      const Dictionary& dict, const MatchIndex& index, const std::vector<std::string>& texts,
                      const BenchOptions& options) {
  if (texts.empty()) throw std::invalid_argument("bench needs at least one text");
  if (options.reps == 0 || options.batch == 0) throw std::invalid_argument("reps and batch must be positive");
  if (table.mode() != options.mode) throw std::invalid_argument("lookup table mode does not match bench mode");
  std::vector<std::string> batch;
  for (std::size_t i = 0; i < options.batch; ++i) batch.push_back(texts[i % texts.size()]);
  const std::size_t max_seq = backbone.config().max_seq;
  NoGradGuard no_grad;

  auto matches_of = [&](const std::string& text) { return find_entries(index, tokenize(text), true); };

  BenchReport report{options.batch, options.reps, {}};
  report.timings.push_back(time_strategy("inline", options.reps, [&] {
    std::vector<std::vector<std::size_t>> seqs;
    for (const auto& text : batch) {
      std::string expanded = text;
      for (const auto& m : matches_of(text)) expanded += " " + dict.at(m.entry).senses[m.sense];
      seqs.push_back(encode_text(expanded, backbone.vocab(), max_seq));
    }
    auto out = backbone.forward(pad_batch(seqs));
    (void)out;
  }));
  auto encode_texts = [&] {
    std::vector<std::vector<std::size_t>> seqs;
    for (const auto& text : batch) seqs.push_back(encode_text(text, backbone.vocab(), max_seq));
    return seqs;
  };
  report.timings.push_back(time_strategy("live", options.reps, [&] {
    auto out = backbone.forward(pad_batch(encode_texts()));
    std::vector<EntryMatch> all;
    for (const auto& text : batch) {
      auto m = collapse_for_mode(matches_of(text), options.mode);
      all.insert(all.end(), m.begin(), m.end());
    }
    auto embs = retrieve_live(plugin, all, dict, options.mode);
    (void)out;
    (void)embs;
  }));
  report.timings.push_back(time_strategy("lut", options.reps, [&] {
    auto out = backbone.forward(pad_batch(encode_texts()));
    std::vector<EntryMatch> all;
    for (const auto& text : batch) {
      auto m = collapse_for_mode(matches_of(text), options.mode);
      all.insert(all.end(), m.begin(), m.end());
    }
    auto embs = retrieve_lut(table, all, dict);
    (void)out;
    (void)embs;
  }));
  return report;
}

void print_bench(const BenchReport& report, std::ostream& out) {
  char line[128];
  std::snprintf(line, sizeof(line), "batch=%zu reps=%zu\n", report.batch, report.reps);
  out << line;
  std::snprintf(line, sizeof(line), "%-10s %12s %12s %12s\n", "strategy", "median_ms", "min_ms", "max_ms");
  out << line;
  for (const auto& t : report.timings) {
    std::snprintf(line, sizeof(line), "%-10s %12.3f %12.3f %12.3f\n", t.strategy.c_str(), t.median_ms, t.min_ms,
                  t.max_ms);
    out << line;
  }
}

}  // namespace dplm
