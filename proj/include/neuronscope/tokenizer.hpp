#pragma once

// Tokenizers for the toy model. The word mode maps lowercased words and
// single punctuation marks to ids from a closed vocabulary; the byte mode
// maps every UTF-8 byte to its own id and never produces <unk>.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "neuronscope/error.hpp"

namespace nscope {

enum class TokenizerMode { Word, Byte };

class Tokenizer {
 public:
  static constexpr std::int32_t kBos = 0;
  static constexpr std::int32_t kEos = 1;
  static constexpr std::int32_t kUnk = 2;
  static constexpr std::int32_t kFirstRegular = 3;

  static Tokenizer bytes() {
    Tokenizer t(TokenizerMode::Byte);
    for (int b = 0; b < 256; ++b) t.add(std::string(1, static_cast<char>(b)));
    return t;
  }

  // Words are added in the given order after the specials; duplicates are
  // ignored.
  static Tokenizer words(const std::vector<std::string>& vocabulary) {
    Tokenizer t(TokenizerMode::Word);
    for (const auto& w : vocabulary) {
      require(!w.empty() && w.find_first_of(" \t\r\n") == std::string::npos,
              ErrorCode::InvalidArgument, "vocabulary entries must be nonempty single words");
      if (!t.index_.contains(w)) t.add(w);
    }
    return t;
  }

  TokenizerMode mode() const noexcept { return mode_; }
  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(std::int32_t id) const {
    require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), ErrorCode::OutOfRange,
            "token id " + std::to_string(id) + " outside vocabulary");
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::int32_t id(std::string_view word) const {
    const auto it = index_.find(std::string(word));
    return it == index_.end() ? kUnk : it->second;
  }

  static std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    };
    for (unsigned char ch : text) {
      if (std::isalnum(ch) || ch >= 0x80 || ch == '\'' || ch == '%') {
        cur.push_back(static_cast<char>(std::tolower(ch)));
      } else {
        flush();
        if (!std::isspace(ch)) out.emplace_back(1, static_cast<char>(ch));
      }
    }
    flush();
    return out;
  }

  std::vector<std::int32_t> encode(std::string_view text, bool add_bos = false) const {
    std::vector<std::int32_t> ids;
    if (add_bos) ids.push_back(kBos);
    if (mode_ == TokenizerMode::Byte) {
      for (unsigned char ch : text) ids.push_back(kFirstRegular + ch);
    } else {
      for (const auto& w : split_words(text)) ids.push_back(id(w));
    }
    return ids;
  }

  // Specials are dropped. Word mode joins with single spaces.
  std::string decode(const std::vector<std::int32_t>& ids) const {
    std::string out;
    for (auto i : ids) {
      if (i < kFirstRegular) continue;
      const auto& t = token(i);
      if (mode_ == TokenizerMode::Word && !out.empty()) out.push_back(' ');
      out += t;
    }
    return out;
  }

  // One token per line after a `#word` or `#byte` header; byte mode needs no
  // list.
  void save(std::ostream& out) const {
    if (mode_ == TokenizerMode::Byte) {
      out << "#byte\n";
      return;
    }
    out << "#word\n";
    for (std::size_t i = kFirstRegular; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
  }

  static Tokenizer load(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) fail(ErrorCode::FormatError, "empty vocabulary file");
    if (line == "#byte") return bytes();
    if (line != "#word") fail(ErrorCode::FormatError, "unknown vocabulary header '" + line + "'");
    std::vector<std::string> words;
    while (std::getline(in, line))
      if (!line.empty()) words.push_back(line);
    return Tokenizer::words(words);
  }

  void save_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot create " + path);
    save(out);
    if (!out) fail(ErrorCode::Io, "failed writing " + path);
  }

  static Tokenizer load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::Io, "cannot open " + path);
    return load(in);
  }

 private:
  explicit Tokenizer(TokenizerMode mode) : mode_(mode) {
    add("<bos>");
    add("<eos>");
    add("<unk>");
  }

  void add(std::string t) {
    index_.emplace(t, static_cast<std::int32_t>(tokens_.size()));
    tokens_.push_back(std::move(t));
  }

  TokenizerMode mode_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

}  // namespace nscope
