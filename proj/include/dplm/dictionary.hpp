#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dplm {

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class EmptyDictionaryError : public std::runtime_error {
 public:
  EmptyDictionaryError() : std::runtime_error("dictionary contains no entries") {}
};

/// One headword with its senses and lexical relations. All strings are in
/// normalized form; synonyms and antonyms name entries of the same dictionary.
struct DictEntry {
  std::string entry;
  std::vector<std::string> senses;
  std::vector<std::string> synonyms;
  std::vector<std::string> antonyms;
};

struct SenseRef {
  std::size_t entry = 0;
  std::size_t sense = 0;
  friend bool operator==(const SenseRef&, const SenseRef&) = default;
};

struct ContrastiveTriple {
  SenseRef original;
  SenseRef positive;
  SenseRef negative;
  friend bool operator==(const ContrastiveTriple&, const ContrastiveTriple&) = default;
};

class Dictionary {
 public:
  Dictionary() = default;

  // Normalizes, merges duplicate headwords and resolves relation references.
  // Unresolvable or self references are dropped and counted.
  static Dictionary from_entries(std::vector<DictEntry> raw);

  const std::vector<DictEntry>& entries() const { return entries_; }
  const DictEntry& at(std::size_t i) const { return entries_.at(i); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t sense_count() const;

  std::optional<std::size_t> find(std::string_view normalized_entry) const;
  std::size_t dropped_references() const { return dropped_refs_; }

 private:
  std::vector<DictEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t dropped_refs_ = 0;
};

Dictionary parse_dictionary(std::istream& in);
Dictionary load_dictionary(const std::filesystem::path& path);
void write_dictionary(const std::vector<DictEntry>& entries, std::ostream& out);

// One DEP sample per (entry, sense).
std::vector<SenseRef> dep_samples(const Dictionary& dict);

struct EddTriples {
  std::vector<ContrastiveTriple> triples;
  std::size_t skipped_entries = 0;  // entries lacking synonyms or antonyms
};

/// Builds exactly n_pairs triples for every entry with at least one synonym and
/// one antonym. Relation lists shorter than n_pairs are up-sampled (each item
/// repeated evenly, remainder drawn without replacement); longer lists are
/// down-sampled without replacement. Originals and partners use sense 0.
EddTriples edd_triples(const Dictionary& dict, std::size_t n_pairs, std::uint64_t seed);

}  // namespace dplm
