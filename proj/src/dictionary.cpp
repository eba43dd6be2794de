#include "dplm/dictionary.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <random>

#include "dplm/text.hpp"

namespace dplm {

namespace {

void append_unique(std::vector<std::string>& dst, const std::vector<std::string>& src) {
  for (const auto& s : src) {
    if (std::find(dst.begin(), dst.end(), s) == dst.end()) dst.push_back(s);
  }
}

std::vector<std::string> string_array(const nlohmann::json& obj, const char* key, std::size_t line,
                                      bool required) {
  std::vector<std::string> out;
  auto it = obj.find(key);
  if (it == obj.end()) {
    if (required) throw ParseError(line, std::string("missing key '") + key + "'");
    return out;
  }
  if (!it->is_array()) throw ParseError(line, std::string("'") + key + "' must be an array");
  for (const auto& v : *it) {
    if (!v.is_string()) throw ParseError(line, std::string("'") + key + "' must hold strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

// Picks exactly n items from pool, deterministic in rng.
std::vector<std::string> resample(const std::vector<std::string>& pool, std::size_t n,
                                  std::mt19937_64& rng) {
  std::vector<std::string> out;
  out.reserve(n);
  const std::size_t full_rounds = n / pool.size();
  for (std::size_t r = 0; r < full_rounds; ++r) out.insert(out.end(), pool.begin(), pool.end());
  std::vector<std::string> rest = pool;
  std::shuffle(rest.begin(), rest.end(), rng);
  rest.resize(n - out.size());
  out.insert(out.end(), rest.begin(), rest.end());
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

}  // namespace

Dictionary Dictionary::from_entries(std::vector<DictEntry> raw) {
  Dictionary d;
  for (auto& e : raw) {
    DictEntry norm;
    norm.entry = normalize_text(e.entry);
    if (norm.entry.empty()) throw std::invalid_argument("entry word is empty after normalization");
    for (const auto& s : e.senses) {
      auto ns = normalize_text(s);
      if (!ns.empty()) norm.senses.push_back(std::move(ns));
    }
    if (norm.senses.empty()) throw std::invalid_argument("entry '" + norm.entry + "' has no senses");
    for (const auto& s : e.synonyms) norm.synonyms.push_back(normalize_text(s));
    for (const auto& s : e.antonyms) norm.antonyms.push_back(normalize_text(s));

    auto [it, inserted] = d.index_.emplace(norm.entry, d.entries_.size());
    if (inserted) {
      DictEntry fresh{norm.entry, std::move(norm.senses), {}, {}};
      append_unique(fresh.synonyms, norm.synonyms);
      append_unique(fresh.antonyms, norm.antonyms);
      d.entries_.push_back(std::move(fresh));
    } else {
      auto& existing = d.entries_[it->second];
      existing.senses.insert(existing.senses.end(), norm.senses.begin(), norm.senses.end());
      append_unique(existing.synonyms, norm.synonyms);
      append_unique(existing.antonyms, norm.antonyms);
    }
  }
  for (auto& e : d.entries_) {
    for (auto* rel : {&e.synonyms, &e.antonyms}) {
      const auto before = rel->size();
      std::erase_if(*rel, [&](const std::string& r) { return r == e.entry || !d.index_.contains(r); });
      d.dropped_refs_ += before - rel->size();
    }
  }
  return d;
}

std::size_t Dictionary::sense_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.senses.size();
  return n;
}

std::optional<std::size_t> Dictionary::find(std::string_view normalized_entry) const {
  auto it = index_.find(std::string(normalized_entry));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Dictionary parse_dictionary(std::istream& in) {
  std::vector<DictEntry> raw;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(lineno, std::string("invalid JSON: ") + e.what());
    }
    if (!obj.is_object()) throw ParseError(lineno, "expected a JSON object");
    auto entry = obj.find("entry");
    if (entry == obj.end() || !entry->is_string()) throw ParseError(lineno, "'entry' must be a string");
    DictEntry e;
    e.entry = entry->get<std::string>();
    e.senses = string_array(obj, "senses", lineno, true);
    e.synonyms = string_array(obj, "synonyms", lineno, false);
    e.antonyms = string_array(obj, "antonyms", lineno, false);
    if (normalize_text(e.entry).empty()) throw ParseError(lineno, "empty entry word");
    if (std::none_of(e.senses.begin(), e.senses.end(),
                     [](const std::string& s) { return !normalize_text(s).empty(); })) {
      throw ParseError(lineno, "entry has no non-empty sense");
    }
    raw.push_back(std::move(e));
  }
  if (raw.empty()) throw EmptyDictionaryError();
  return Dictionary::from_entries(std::move(raw));
}

Dictionary load_dictionary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dictionary " + path.string());
  return parse_dictionary(in);
}

void write_dictionary(const std::vector<DictEntry>& entries, std::ostream& out) {
  for (const auto& e : entries) {
    nlohmann::ordered_json obj;
    obj["entry"] = e.entry;
    obj["senses"] = e.senses;
    obj["synonyms"] = e.synonyms;
    obj["antonyms"] = e.antonyms;
    out << obj.dump() << '\n';
  }
}

std::vector<SenseRef> dep_samples(const Dictionary& dict) {
  std::vector<SenseRef> out;
  out.reserve(dict.sense_count());
  for (std::size_t i = 0; i < dict.size(); ++i) {
    for (std::size_t s = 0; s < dict.at(i).senses.size(); ++s) out.push_back({i, s});
  }
  return out;
}

EddTriples edd_triples(const Dictionary& dict, std::size_t n_pairs, std::uint64_t seed) {
  if (n_pairs == 0) throw std::invalid_argument("edd_triples: n_pairs must be >= 1");
  EddTriples result;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < dict.size(); ++i) {
    const auto& e = dict.at(i);
    if (e.synonyms.empty() || e.antonyms.empty()) {
      ++result.skipped_entries;
      continue;
    }
    const auto pos = resample(e.synonyms, n_pairs, rng);
    const auto neg = resample(e.antonyms, n_pairs, rng);
    for (std::size_t k = 0; k < n_pairs; ++k) {
      result.triples.push_back({{i, 0}, {*dict.find(pos[k]), 0}, {*dict.find(neg[k]), 0}});
    }
  }
  return result;
}

}  // namespace dplm
