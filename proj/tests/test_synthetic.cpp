#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "dplm/checkpoint.hpp"
#include "dplm/synthetic.hpp"
#include "dplm/text.hpp"

using namespace dplm;

namespace {

std::size_t index_of(const SyntheticData& d, const std::string& entry) {
  for (std::size_t i = 0; i < d.entries.size(); ++i)
    if (d.entries[i].entry == entry) return i;
  ADD_FAILURE() << "unknown entry " << entry;
  return 0;
}

bool contains_token(const std::string& text, const std::string& word) {
  const auto toks = tokenize(text);
  return std::find(toks.begin(), toks.end(), word) != toks.end();
}

}  // namespace

TEST(Synthetic, SameSeedWritesIdenticalFiles) {
  const auto root = std::filesystem::temp_directory_path() / "dplm_synth_test";
  std::filesystem::remove_all(root);
  SyntheticOptions o;
  o.n_entries = 40;
  o.n_train = 100;
  o.n_test = 40;
  write_synthetic(generate_synthetic(o), root / "a");
  write_synthetic(generate_synthetic(o), root / "b");
  for (const char* f : {"dict.jsonl", "train.jsonl", "test.jsonl", "choice_train.jsonl", "choice_test.jsonl"}) {
    EXPECT_EQ(bytes::read_file(root / "a" / f), bytes::read_file(root / "b" / f)) << f;
  }
  o.seed += 1;
  write_synthetic(generate_synthetic(o), root / "c");
  EXPECT_NE(bytes::read_file(root / "a" / "dict.jsonl"), bytes::read_file(root / "c" / "dict.jsonl"));
  EXPECT_EQ(load_dictionary(root / "a" / "dict.jsonl").size(), 40u);
  std::filesystem::remove_all(root);
}

TEST(Synthetic, RelationsFollowCategories) {
  const auto d = generate_synthetic({});
  ASSERT_EQ(d.entries.size(), 200u);
  std::size_t with_antonyms = 0;
  for (std::size_t i = 0; i < d.entries.size(); ++i) {
    const auto& e = d.entries[i];
    const auto cat = d.category[i];
    for (const auto& s : d.entries[i].senses) EXPECT_TRUE(contains_token(s, d.keywords[cat])) << s;
    for (const auto& syn : e.synonyms) EXPECT_EQ(d.category[index_of(d, syn)], cat);
    for (const auto& ant : e.antonyms) EXPECT_NE(d.category[index_of(d, ant)], cat);
    with_antonyms += !e.antonyms.empty();
  }
  EXPECT_GT(with_antonyms, 150u);
  EXPECT_LT(with_antonyms, 200u);  // some entries have no antonym at all
  const auto dict = Dictionary::from_entries(d.entries);
  EXPECT_EQ(dict.size(), 200u);
  EXPECT_EQ(dict.dropped_references(), 0u);
}

TEST(Synthetic, TasksNeedTheDictionary) {
  const auto d = generate_synthetic({});
  ASSERT_EQ(d.train.size(), 2000u);
  ASSERT_EQ(d.test.size(), 500u);
  const auto index = build_index(Dictionary::from_entries(d.entries));
  std::vector<std::size_t> per_label(4, 0);
  auto check = [&](const TaskSample& s, bool test) {
    for (const auto& k : d.keywords) EXPECT_FALSE(contains_token(s.text, k)) << s.text;
    const auto matches = find_entries(index, tokenize(s.text));
    ASSERT_FALSE(matches.empty()) << s.text;
    const auto i = matches.front().entry;
    EXPECT_EQ(d.category[i], s.label);
    EXPECT_EQ(d.heldout[i], test) << s.text;
  };
  for (const auto& s : d.train) {
    check(s, false);
    ++per_label.at(s.label);
  }
  for (const auto& s : d.test) check(s, true);
  for (auto n : per_label) EXPECT_EQ(n, 500u);
}

TEST(Synthetic, ChoiceQuestionsHaveOneRightCategory) {
  const auto d = generate_synthetic({});
  const auto index = build_index(Dictionary::from_entries(d.entries));
  for (const auto& s : d.choice_test) {
    ASSERT_EQ(s.choices.size(), 4u);
    const auto q = find_entries(index, tokenize(s.question));
    ASSERT_FALSE(q.empty());
    std::set<std::size_t> cats;
    for (std::size_t j = 0; j < 4; ++j) {
      const auto c = d.category[index_of(d, s.choices[j])];
      cats.insert(c);
      EXPECT_EQ(c == d.category[q.front().entry], j == s.answer);
    }
    EXPECT_EQ(cats.size(), 4u);
  }
}

TEST(Synthetic, RejectsImpossibleOptions) {
  SyntheticOptions o;
  o.n_categories = 1;
  EXPECT_THROW(generate_synthetic(o), std::invalid_argument);
  o.n_categories = 4;
  o.n_entries = 6;
  EXPECT_THROW(generate_synthetic(o), std::invalid_argument);
}
