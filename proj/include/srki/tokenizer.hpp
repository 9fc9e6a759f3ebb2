#pragma once

#include <cctype>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "srki/errors.hpp"

namespace srki {

using TokenId = std::size_t;

// Word-level vocabulary. Words missing from the vocabulary that consist only of
// uppercase letters (reference ids) are spelled out letter by letter; decoding
// glues consecutive single-letter tokens back together.
class Tokenizer {
 public:
  static constexpr std::string_view kBos = "<bos>";
  static constexpr std::string_view kEos = "<eos>";

  Tokenizer() : Tokenizer(std::vector<std::string>{}) {}

  explicit Tokenizer(const std::vector<std::string>& words) {
    add(std::string(kBos));
    add(std::string(kEos));
    for (char c = 'A'; c <= 'Z'; ++c) add(std::string(1, c));
    for (const auto& w : words) add(w);
  }

  std::size_t size() const { return words_.size(); }
  TokenId bos() const { return 0; }
  TokenId eos() const { return 1; }
  const std::string& word(TokenId id) const { return words_.at(id); }
  const std::vector<std::string>& words() const { return words_; }

  bool contains(std::string_view w) const { return index_.count(std::string(w)) != 0; }

  TokenId id(std::string_view w) const {
    auto it = index_.find(std::string(w));
    if (it == index_.end()) throw ConfigError("tokenizer: unknown word '" + std::string(w) + "'");
    return it->second;
  }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> out;
    std::size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
      std::size_t j = i;
      while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
      if (j > i) {
        const std::string_view w = text.substr(i, j - i);
        if (auto it = index_.find(std::string(w)); it != index_.end()) {
          out.push_back(it->second);
        } else if (all_upper(w)) {
          for (char c : w) out.push_back(id(std::string_view(&c, 1)));
        } else {
          throw ConfigError("tokenizer: unknown word '" + std::string(w) + "'");
        }
      }
      i = j;
    }
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    bool prev_letter = false;
    for (TokenId t : ids) {
      if (t == bos() || t == eos()) continue;
      const std::string& w = word(t);
      const bool letter = w.size() == 1 && std::isupper(static_cast<unsigned char>(w[0]));
      if (!out.empty() && !(letter && prev_letter)) out += ' ';
      out += w;
      prev_letter = letter;
    }
    return out;
  }

 private:
  static bool all_upper(std::string_view w) {
    if (w.empty()) return false;
    for (char c : w) {
      if (!std::isupper(static_cast<unsigned char>(c))) return false;
    }
    return true;
  }

  void add(const std::string& w) {
    if (index_.emplace(w, words_.size()).second) words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace srki
