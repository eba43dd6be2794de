#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace dplm {

// Canonical form shared by the dictionary, the matcher and the vocabulary:
// Unicode NFC, lowercase, internal whitespace collapsed to single spaces, trimmed.
std::string normalize_text(std::string_view text);

// Whitespace tokenization of already-normalized text.
std::vector<std::string> split_tokens(std::string_view normalized);

// normalize_text followed by split_tokens.
std::vector<std::string> tokenize(std::string_view text);

std::string join_tokens(const std::vector<std::string>& tokens, std::size_t begin, std::size_t end);

}  // namespace dplm
