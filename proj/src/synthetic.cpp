#include "dplm/synthetic.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>

#include "dplm/matcher.hpp"

namespace dplm {

namespace {

constexpr std::array<std::string_view, 14> kOnsets = {"b", "d", "f", "g", "k", "l", "m",
                                                      "n", "p", "r", "s", "t", "v", "z"};
constexpr std::array<std::string_view, 5> kVowels = {"a", "e", "i", "o", "u"};

constexpr std::array<std::string_view, 24> kDescriptionWords = {
    "a",     "kind",  "of",     "thing", "that",  "is",     "often",  "found", "near",  "used",  "for",  "with",
    "some",  "small", "large",  "very",  "known", "mostly", "people", "place", "where", "which", "can",  "be"};

constexpr std::array<std::string_view, 24> kSentenceWords = {
    "we",   "saw", "the",   "old",  "new",   "quite", "there", "today", "my",      "friend", "liked", "near",
    "again", "one", "every", "day", "their", "house", "it",    "was",   "finally", "quietly", "said", "about"};

class WordSmith {
 public:
  explicit WordSmith(std::mt19937_64& rng) : rng_(rng) {}

  // Fresh pronounceable pseudo-word, never repeated and never an English filler word.
  std::string fresh() {
    std::uniform_int_distribution<std::size_t> syll(2, 3), on(0, kOnsets.size() - 1), vo(0, kVowels.size() - 1);
    for (;;) {
      std::string w;
      const std::size_t n = syll(rng_);
      for (std::size_t i = 0; i < n; ++i) {
        w += kOnsets[on(rng_)];
        w += kVowels[vo(rng_)];
      }
      if (std::find(kDescriptionWords.begin(), kDescriptionWords.end(), w) != kDescriptionWords.end() ||
          std::find(kSentenceWords.begin(), kSentenceWords.end(), w) != kSentenceWords.end() || is_stopword(w)) {
        continue;
      }
      if (used_.insert(w).second) return w;
    }
  }

 private:
  std::mt19937_64& rng_;
  std::set<std::string> used_;
};

template <typename T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

std::string pick_word(std::span<const std::string_view> words, std::mt19937_64& rng) {
  return std::string(words[std::uniform_int_distribution<std::size_t>(0, words.size() - 1)(rng)]);
}

bool chance(double p, std::mt19937_64& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; }

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::string describe(const std::string& keyword, const std::vector<std::string>& traits, std::mt19937_64& rng) {
  std::vector<std::string> words;
  const auto n_fill = std::uniform_int_distribution<std::size_t>(4, 6)(rng);
  for (std::size_t i = 0; i < n_fill; ++i) words.push_back(pick_word(kDescriptionWords, rng));
  words.push_back(keyword);
  words.push_back(pick(traits, rng));
  words.push_back(pick(traits, rng));
  std::shuffle(words.begin() + 1, words.end(), rng);
  return join(words);
}

std::string sentence_around(const std::string& entry, std::mt19937_64& rng) {
  std::vector<std::string> words;
  const auto n_fill = std::uniform_int_distribution<std::size_t>(3, 6)(rng);
  for (std::size_t i = 0; i < n_fill; ++i) words.push_back(pick_word(kSentenceWords, rng));
  const auto at = std::uniform_int_distribution<std::size_t>(0, words.size())(rng);
  words.insert(words.begin() + static_cast<std::ptrdiff_t>(at), entry);
  return join(words);
}

}  // namespace

void SyntheticOptions::validate() const {
  if (n_categories < 2) throw std::invalid_argument("n_categories must be >= 2");
  if (n_entries < n_categories) throw std::invalid_argument("n_entries must be >= n_categories");
  if (heldout_fraction <= 0.0 || heldout_fraction >= 1.0) throw std::invalid_argument("heldout_fraction must lie in (0, 1)");
  if (n_entries < 2 * n_categories) {
    throw std::invalid_argument("need at least two entries per category for held-out test entries");
  }
}

SyntheticData generate_synthetic(const SyntheticOptions& options) {
  options.validate();
  std::mt19937_64 rng(options.seed);
  WordSmith smith(rng);
  SyntheticData data;

  for (std::size_t c = 0; c < options.n_categories; ++c) data.keywords.push_back(smith.fresh());
  // Related words share descriptive vocabulary, so each category draws traits from its own pool.
  std::vector<std::vector<std::string>> traits(options.n_categories);
  for (auto& pool : traits)
    for (std::size_t i = 0; i < 10 + options.n_entries / (2 * options.n_categories); ++i) pool.push_back(smith.fresh());

  std::vector<std::vector<std::size_t>> by_category(options.n_categories);
  for (std::size_t i = 0; i < options.n_entries; ++i) {
    DictEntry e;
    e.entry = smith.fresh();
    if (chance(options.multiword_fraction, rng)) e.entry += " " + smith.fresh();
    const std::size_t cat = i % options.n_categories;
    e.senses.push_back(describe(data.keywords[cat], traits[cat], rng));
    if (chance(options.polysemy_fraction, rng)) e.senses.push_back(describe(data.keywords[cat], traits[cat], rng));
    data.category.push_back(cat);
    by_category[cat].push_back(i);
    data.entries.push_back(std::move(e));
  }

  for (std::size_t i = 0; i < options.n_entries; ++i) {
    const std::size_t cat = data.category[i];
    auto& e = data.entries[i];
    const auto n_syn = std::uniform_int_distribution<std::size_t>(2, 4)(rng);
    for (std::size_t k = 0; k < n_syn && by_category[cat].size() > 1; ++k) {
      std::size_t j = pick(by_category[cat], rng);
      if (j == i) continue;
      const auto& name = data.entries[j].entry;
      if (std::find(e.synonyms.begin(), e.synonyms.end(), name) == e.synonyms.end()) e.synonyms.push_back(name);
    }
    if (chance(options.no_antonym_fraction, rng)) continue;
    const auto n_ant = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
    for (std::size_t k = 0; k < n_ant; ++k) {
      auto other = std::uniform_int_distribution<std::size_t>(0, options.n_categories - 2)(rng);
      if (other >= cat) ++other;
      const auto& name = data.entries[pick(by_category[other], rng)].entry;
      if (std::find(e.antonyms.begin(), e.antonyms.end(), name) == e.antonyms.end()) e.antonyms.push_back(name);
    }
  }

  // Hold out the same share of every category.
  data.heldout.assign(options.n_entries, false);
  std::vector<std::vector<std::size_t>> seen(options.n_categories), unseen(options.n_categories);
  for (std::size_t c = 0; c < options.n_categories; ++c) {
    auto members = by_category[c];
    std::shuffle(members.begin(), members.end(), rng);
    auto n_out = static_cast<std::size_t>(static_cast<double>(members.size()) * options.heldout_fraction + 0.5);
    n_out = std::clamp<std::size_t>(n_out, 1, members.size() - 1);
    for (std::size_t k = 0; k < members.size(); ++k) {
      if (k < n_out) {
        data.heldout[members[k]] = true;
        unseen[c].push_back(members[k]);
      } else {
        seen[c].push_back(members[k]);
      }
    }
  }

  auto classification = [&](std::size_t n, const std::vector<std::vector<std::size_t>>& pool) {
    std::vector<TaskSample> out;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t cat = k % options.n_categories;
      TaskSample s;
      s.text = sentence_around(data.entries[pick(pool[cat], rng)].entry, rng);
      s.label = cat;
      out.push_back(std::move(s));
    }
    std::shuffle(out.begin(), out.end(), rng);
    return out;
  };
  data.train = classification(options.n_train, seen);
  data.test = classification(options.n_test, unseen);

  const std::size_t n_choices = std::min<std::size_t>(4, options.n_categories);
  auto choice = [&](std::size_t n, const std::vector<std::vector<std::size_t>>& pool) {
    std::vector<TaskSample> out;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t cat = k % options.n_categories;
      TaskSample s;
      s.question = sentence_around(data.entries[pick(pool[cat], rng)].entry, rng) + " which is alike";
      std::vector<std::size_t> cats{cat};
      while (cats.size() < n_choices) {
        const auto other = std::uniform_int_distribution<std::size_t>(0, options.n_categories - 1)(rng);
        if (std::find(cats.begin(), cats.end(), other) == cats.end()) cats.push_back(other);
      }
      std::shuffle(cats.begin(), cats.end(), rng);
      for (std::size_t j = 0; j < cats.size(); ++j) {
        s.choices.push_back(data.entries[pick(pool[cats[j]], rng)].entry);
        if (cats[j] == cat) s.answer = j;
      }
      out.push_back(std::move(s));
    }
    return out;
  };
  data.choice_train = choice(options.n_choice_train, seen);
  data.choice_test = choice(options.n_choice_test, unseen);
  return data;
}

void write_synthetic(const SyntheticData& data, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  auto open = [&](const char* name) {
    std::ofstream out(out_dir / name, std::ios::trunc | std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (out_dir / name).string());
    return out;
  };
  {
    auto out = open("dict.jsonl");
    write_dictionary(data.entries, out);
  }
  {
    auto out = open("train.jsonl");
    write_classification_task(data.train, out);
  }
  {
    auto out = open("test.jsonl");
    write_classification_task(data.test, out);
  }
  {
    auto out = open("choice_train.jsonl");
    write_choice_task(data.choice_train, out);
  }
  {
    auto out = open("choice_test.jsonl");
    write_choice_task(data.choice_test, out);
  }
}

}  // namespace dplm
