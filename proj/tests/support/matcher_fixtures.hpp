#pragma once

#include <algorithm>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dplm/dictionary.hpp"
#include "dplm/text.hpp"

namespace matcher_fixtures {

using dplm::Dictionary;
using dplm::DictEntry;
using dplm::join_tokens;

inline Dictionary make_dict(const std::vector<std::pair<std::string, std::size_t>>& entries) {
  std::vector<DictEntry> raw;
  for (const auto& [word, senses] : entries) {
    DictEntry e{word, {}, {}, {}};
    for (std::size_t s = 0; s < senses; ++s) e.senses.push_back(word + " meaning " + std::to_string(s));
    raw.push_back(e);
  }
  return Dictionary::from_entries(raw);
}

// 50 entries of one to four tokens over {the, ka, mo}, "the" itself among them.
inline Dictionary sweep_dict(std::uint64_t seed) {
  const std::vector<std::string> alphabet{"the", "ka", "mo"};
  std::vector<std::string> all;
  std::vector<std::string> cur;
  std::function<void(std::size_t)> grow = [&](std::size_t depth) {
    if (!cur.empty()) all.push_back(join_tokens(cur, 0, cur.size()));
    if (depth == 4) return;
    for (const auto& a : alphabet) {
      cur.push_back(a);
      grow(depth + 1);
      cur.pop_back();
    }
  };
  grow(0);
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  std::vector<std::pair<std::string, std::size_t>> chosen{{"the", 1}};
  for (const auto& w : all) {
    if (chosen.size() == 50) break;
    if (w != "the") chosen.push_back({w, 1 + rng() % 2});
  }
  return make_dict(chosen);
}

}  // namespace matcher_fixtures
