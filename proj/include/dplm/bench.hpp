#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "dplm/dictionary.hpp"
#include "dplm/encoder.hpp"
#include "dplm/matcher.hpp"
#include "dplm/plugin.hpp"

namespace dplm {

struct BenchOptions {
  std::size_t batch = 64;
  std::size_t reps = 100;
  RetrievalMode mode = RetrievalMode::K;
};

struct BenchTiming {
  std::string strategy;
  double median_ms = 0.0;
  double min_ms = 0.0;
  double max_ms = 0.0;
};

struct BenchReport {
  std::size_t batch = 0;
  std::size_t reps = 0;
  std::vector<BenchTiming> timings;  // inline, live, lut
};

/// Times three ways of obtaining entry knowledge for one batch of texts:
///  - inline: the backbone re-encodes each text with its matched entries'
///    descriptions appended;
///  - live: backbone over the text, entries encoded by the frozen plugin;
///  - lut: backbone over the text, entries read from the lookup table.
/// Each strategy runs `reps` times over identical inputs; medians are reported.
BenchReport run_bench(const EncoderModel& backbone, const EncoderModel& plugin, const LookupTable& table,
                      const Dictionary& dict, const MatchIndex& index, const std::vector<std::string>& texts,
                      const BenchOptions& options);

void print_bench(const BenchReport& report, std::ostream& out);

}  // namespace dplm
