#pragma once

#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "seva/tensor.hpp"

namespace seva {

using TokenId = int;

// An answer y: token ids terminated by EOS.
struct TokenSequence {
  std::vector<TokenId> tokens;
  std::optional<double> logprob;

  friend bool operator==(const TokenSequence& a, const TokenSequence& b) { return a.tokens == b.tokens; }
};

enum class TokenClass { special, glyph, blank, digit, template_word, yes_no, unused };

class Tokenizer {
public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kSep = 3;
  static constexpr int kMaxGlyphs = 52;

  static constexpr const char* kTemplateWords[5] = {"read_row", "read_col", "count_glyph", "glyph_at", "exists_glyph"};

  // Vocabulary for a world with n_glyphs glyphs; pad_to > 0 appends
  // reserved tokens until the vocabulary has that many entries.
  explicit Tokenizer(int n_glyphs, int pad_to = 0) : n_glyphs_(n_glyphs) {
    if (n_glyphs < 1 || n_glyphs > kMaxGlyphs)
      throw Error("tokenizer: glyph alphabet size must be in [1, " + std::to_string(kMaxGlyphs) + "], got " +
                  std::to_string(n_glyphs));
    add("<pad>", TokenClass::special);
    add("<bos>", TokenClass::special);
    add("<eos>", TokenClass::special);
    add("<sep>", TokenClass::special);
    glyph_base_ = static_cast<TokenId>(vocab_.size());
    for (int g = 1; g <= n_glyphs; ++g) add(glyph_name(g), TokenClass::glyph);
    blank_ = add("blank", TokenClass::blank);
    digit_base_ = static_cast<TokenId>(vocab_.size());
    for (char c = '0'; c <= '9'; ++c) add(std::string(1, c), TokenClass::digit);
    template_base_ = static_cast<TokenId>(vocab_.size());
    for (const char* w : kTemplateWords) add(w, TokenClass::template_word);
    yes_ = add("yes", TokenClass::yes_no);
    no_ = add("no", TokenClass::yes_no);
    if (pad_to > 0 && static_cast<std::size_t>(pad_to) < vocab_.size())
      throw Error("tokenizer: pad_to " + std::to_string(pad_to) + " below base vocabulary " + std::to_string(vocab_.size()));
    for (int k = 0; static_cast<int>(vocab_.size()) < pad_to; ++k) add("<unused" + std::to_string(k) + ">", TokenClass::unused);
  }

  static std::string glyph_name(int g) {
    if (g >= 1 && g <= 26) return std::string(1, static_cast<char>('A' + g - 1));
    if (g > 26 && g <= kMaxGlyphs) return std::string(1, static_cast<char>('a' + g - 27));
    throw Error("tokenizer: glyph id " + std::to_string(g) + " out of range");
  }

  std::size_t size() const { return vocab_.size(); }
  int n_glyphs() const { return n_glyphs_; }
  const std::string& text(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) throw Error("tokenizer: token id " + std::to_string(id) + " out of range");
    return vocab_[static_cast<std::size_t>(id)];
  }
  TokenClass token_class(TokenId id) const {
    text(id);
    return classes_[static_cast<std::size_t>(id)];
  }

  TokenId glyph(int g) const {
    if (g == 0) return blank_;
    if (g < 1 || g > n_glyphs_) throw Error("tokenizer: glyph id " + std::to_string(g) + " out of range");
    return glyph_base_ + g - 1;
  }
  TokenId blank() const { return blank_; }
  TokenId digit(int d) const { return digit_base_ + d; }
  TokenId template_word(int t) const { return template_base_ + t; }
  TokenId yes() const { return yes_; }
  TokenId no() const { return no_; }

  TokenId id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) throw Error("tokenizer: unknown token '" + std::string(word) + "'");
    return it->second;
  }

  // Space-separated surface form.
  std::vector<TokenId> encode(std::string_view s) const {
    std::vector<TokenId> out;
    std::istringstream is{std::string(s)};
    std::string w;
    while (is >> w) out.push_back(id(w));
    return out;
  }

  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += text(ids[i]);
    }
    return out;
  }

  // Answer tokens without the EOS terminator.
  std::string decode_answer(const TokenSequence& seq) const {
    std::vector<TokenId> body;
    for (auto t : seq.tokens) {
      if (t == kEos) break;
      body.push_back(t);
    }
    return decode(body);
  }

  TokenSequence answer(std::string_view s) const {
    TokenSequence seq{encode(s), std::nullopt};
    seq.tokens.push_back(kEos);
    return seq;
  }

  const std::vector<std::string>& vocab() const { return vocab_; }

private:
  TokenId add(std::string w, TokenClass c) {
    auto id = static_cast<TokenId>(vocab_.size());
    index_.emplace(w, id);
    vocab_.push_back(std::move(w));
    classes_.push_back(c);
    return id;
  }

  int n_glyphs_;
  std::vector<std::string> vocab_;
  std::vector<TokenClass> classes_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId glyph_base_ = 0, blank_ = 0, digit_base_ = 0, template_base_ = 0, yes_ = 0, no_ = 0;
};

}  // namespace seva
