#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dplm/dictionary.hpp"

namespace dplm {

// Function words never matched as entries.
extern const std::array<std::string_view, 30> kStopwords;
bool is_stopword(std::string_view normalized_entry);

struct EntryMatch {
  std::size_t entry = 0;  // index into the dictionary
  std::size_t sense = 0;
  std::size_t begin = 0;  // token span [begin, end)
  std::size_t end = 0;
  friend bool operator==(const EntryMatch&, const EntryMatch&) = default;
};

/// Token-level prefix tree over normalized entry surface forms.
class MatchIndex {
 public:
  explicit MatchIndex(const Dictionary& dict);

  // Longest entry starting at tokens[start]; returns its end (exclusive) and entry id.
  std::optional<std::pair<std::size_t, std::size_t>> longest_at(const std::vector<std::string>& tokens,
                                                                std::size_t start) const;
  std::size_t senses_of(std::size_t entry) const { return sense_counts_.at(entry); }
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::unordered_map<std::string, std::size_t> children;
    std::optional<std::size_t> entry;
  };
  std::vector<Node> nodes_;
  std::vector<std::size_t> sense_counts_;
};

MatchIndex build_index(const Dictionary& dict);

/// Leftmost-longest, non-overlapping matching. Every matched occurrence expands
/// into one EntryMatch per sense, ordered by span then sense. With dedupe, only
/// the first occurrence of each entry is kept.
std::vector<EntryMatch> find_entries(const MatchIndex& index, const std::vector<std::string>& tokens,
                                     bool dedupe = true);

}  // namespace dplm
