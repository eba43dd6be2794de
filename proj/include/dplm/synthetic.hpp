#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dplm/dictionary.hpp"
#include "dplm/fusion.hpp"

namespace dplm {

struct SyntheticOptions {
  std::size_t n_entries = 200;
  std::size_t n_categories = 4;
  std::uint64_t seed = 7;
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
  std::size_t n_choice_train = 400;
  std::size_t n_choice_test = 100;
  double heldout_fraction = 0.3;     // entries reserved for test sentences
  double polysemy_fraction = 0.15;   // entries with a second sense
  double multiword_fraction = 0.1;   // two-token entry words
  double no_antonym_fraction = 0.1;

  void validate() const;
};

/// A generated dictionary plus tasks whose label is only recoverable from it.
///
/// Every entry belongs to one category; each of its descriptions contains the
/// category keyword and traits drawn from a per-category pool, synonyms share the category and antonyms come from other
/// categories. Task sentences mention one entry and never a category keyword.
/// Test sentences only use held-out entries, unseen in training sentences.
struct SyntheticData {
  std::vector<DictEntry> entries;
  std::vector<std::size_t> category;  // per entry
  std::vector<std::string> keywords;  // per category
  std::vector<bool> heldout;          // per entry
  std::vector<TaskSample> train, test;
  std::vector<TaskSample> choice_train, choice_test;
};

SyntheticData generate_synthetic(const SyntheticOptions& options);

// dict.jsonl, train.jsonl, test.jsonl, choice_train.jsonl, choice_test.jsonl
void write_synthetic(const SyntheticData& data, const std::filesystem::path& out_dir);

}  // namespace dplm
