#include "dplm/matcher.hpp"

#include <algorithm>
#include <unordered_set>

#include "dplm/text.hpp"

namespace dplm {

const std::array<std::string_view, 30> kStopwords = {
    "a",  "an", "the", "and", "or",   "but",  "of",   "to",  "in",   "on",
    "at", "by", "for", "with", "from", "as",  "is",   "are", "was",  "were",
    "be", "it", "its", "this", "that", "these", "those", "not", "no", "if"};

bool is_stopword(std::string_view normalized_entry) {
  return std::find(kStopwords.begin(), kStopwords.end(), normalized_entry) != kStopwords.end();
}

MatchIndex::MatchIndex(const Dictionary& dict) : nodes_(1) {
  sense_counts_.reserve(dict.size());
  for (std::size_t i = 0; i < dict.size(); ++i) {
    const auto& e = dict.at(i);
    sense_counts_.push_back(e.senses.size());
    if (is_stopword(e.entry)) continue;
    std::size_t cur = 0;
    for (const auto& tok : split_tokens(e.entry)) {
      auto it = nodes_[cur].children.find(tok);
      if (it == nodes_[cur].children.end()) {
        nodes_.emplace_back();
        it = nodes_[cur].children.emplace(tok, nodes_.size() - 1).first;
      }
      cur = it->second;
    }
    nodes_[cur].entry = i;
  }
}

std::optional<std::pair<std::size_t, std::size_t>> MatchIndex::longest_at(
    const std::vector<std::string>& tokens, std::size_t start) const {
  std::optional<std::pair<std::size_t, std::size_t>> best;
  std::size_t cur = 0;
  for (std::size_t j = start; j < tokens.size(); ++j) {
    auto it = nodes_[cur].children.find(tokens[j]);
    if (it == nodes_[cur].children.end()) break;
    cur = it->second;
    if (nodes_[cur].entry) best = std::make_pair(j + 1, *nodes_[cur].entry);
  }
  return best;
}

MatchIndex build_index(const Dictionary& dict) { return MatchIndex(dict); }

std::vector<EntryMatch> find_entries(const MatchIndex& index, const std::vector<std::string>& tokens,
                                     bool dedupe) {
  std::vector<EntryMatch> out;
  std::unordered_set<std::size_t> seen;
  std::size_t i = 0;
  while (i < tokens.size()) {
    auto hit = index.longest_at(tokens, i);
    if (!hit) {
      ++i;
      continue;
    }
    const auto [end, entry] = *hit;
    if (!dedupe || seen.insert(entry).second) {
      for (std::size_t s = 0; s < index.senses_of(entry); ++s) out.push_back({entry, s, i, end});
    }
    i = end;
  }
  return out;
}

}  // namespace dplm
