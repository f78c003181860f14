#pragma once

// Binary concept datasets: a concept is a set of positive sentences that use a
// WordNet sense and negative sentences that do not. Sense concepts take their
// negatives from sentences of other lemmas; homograph concepts contrast two
// senses of one lemma.

#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "neuronscope/detail/binary_io.hpp"
#include "neuronscope/detail/random.hpp"
#include "neuronscope/error.hpp"

namespace nscope {

enum class ConceptCategory : std::uint8_t { Sense, Homograph };

constexpr std::string_view to_string(ConceptCategory c) noexcept {
  return c == ConceptCategory::Sense ? "sense" : "homograph";
}

inline ConceptCategory parse_category(std::string_view s) {
  if (s == "sense") return ConceptCategory::Sense;
  if (s == "homograph") return ConceptCategory::Homograph;
  fail(ErrorCode::FormatError, "unknown concept category '" + std::string(s) + "'");
}

struct AnnotatedSentence {
  std::string text;
  std::string head_word;
  std::string sense_key;
  std::string lemma;

  friend bool operator==(const AnnotatedSentence&, const AnnotatedSentence&) = default;
};

struct Concept {
  std::string id;
  std::string lemma;
  ConceptCategory category = ConceptCategory::Sense;
  std::vector<std::string> positives;
  std::vector<std::string> negatives;

  friend bool operator==(const Concept&, const Concept&) = default;
};

// ---------------------------------------------------------------------------
// Tokenization for lemma presence checks.

struct LemmaMatchOptions {
  // Treat "shelters" as an occurrence of "shelter": a token that extends the
  // lemma by at most two alphabetic characters.
  bool inflections = true;
  std::size_t max_suffix = 2;
};

// Lowercased alphanumeric runs; everything else separates tokens.
inline std::vector<std::string> word_tokens(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (unsigned char ch : text) {
    if (std::isalnum(ch) || ch >= 0x80) {
      current.push_back(static_cast<char>(std::tolower(ch)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

inline bool token_matches(std::string_view token, std::string_view lemma_part,
                          const LemmaMatchOptions& opts) {
  if (token == lemma_part) return true;
  if (!opts.inflections || token.size() <= lemma_part.size()) return false;
  if (token.size() - lemma_part.size() > opts.max_suffix) return false;
  if (token.substr(0, lemma_part.size()) != lemma_part) return false;
  return std::all_of(token.begin() + static_cast<std::ptrdiff_t>(lemma_part.size()), token.end(),
                     [](unsigned char c) { return std::isalpha(c) != 0; });
}

// Multi-word lemmas ("new_york") must appear as a consecutive token run; the
// inflection allowance applies to the last word only.
inline bool contains_lemma_tokens(const std::vector<std::string>& tokens,
                                  const std::vector<std::string>& parts,
                                  const LemmaMatchOptions& opts = {}) {
  if (parts.empty() || tokens.size() < parts.size()) return false;
  for (std::size_t i = 0; i + parts.size() <= tokens.size(); ++i) {
    bool ok = true;
    for (std::size_t j = 0; j < parts.size() && ok; ++j) {
      if (j + 1 == parts.size())
        ok = token_matches(tokens[i + j], parts[j], opts);
      else
        ok = tokens[i + j] == parts[j];
    }
    if (ok) return true;
  }
  return false;
}

inline bool contains_lemma(std::string_view text, std::string_view lemma,
                           const LemmaMatchOptions& opts = {}) {
  return contains_lemma_tokens(word_tokens(text), word_tokens(lemma), opts);
}

// ---------------------------------------------------------------------------
// OneSec instance parsing.

struct OnesecParseResult {
  std::vector<AnnotatedSentence> sentences;
  std::size_t malformed = 0;
};

namespace detail {

inline std::string normalize_space(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (unsigned char ch : s) {
    if (std::isspace(ch)) {
      pending_space = !out.empty();
    } else {
      if (pending_space) out.push_back(' ');
      pending_space = false;
      out.push_back(static_cast<char>(ch));
    }
  }
  return out;
}

inline std::string decode_entities(std::string_view s) {
  static const std::pair<std::string_view, char> table[] = {
      {"&amp;", '&'}, {"&lt;", '<'}, {"&gt;", '>'}, {"&quot;", '"'}, {"&apos;", '\''}};
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size();) {
    bool replaced = false;
    if (s[i] == '&') {
      for (const auto& [entity, ch] : table) {
        if (s.substr(i, entity.size()) == entity) {
          out.push_back(ch);
          i += entity.size();
          replaced = true;
          break;
        }
      }
    }
    if (!replaced) out.push_back(s[i++]);
  }
  return out;
}

inline std::size_t count_occurrences(std::string_view hay, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string_view::npos;
       pos = hay.find(needle, pos + needle.size()))
    ++n;
  return n;
}

// The lemma is the part of a sense key before '%'; the rest is
// "A:BB:CC" optionally followed by WordNet's ":head_word:head_id" tail.
inline bool valid_sense_key(const std::string& key) {
  static const std::regex shape(R"(^[^%\s]+%\d:\d{2}:\d{2}(:.*)?$)");
  return std::regex_match(key, shape);
}

// Parses the body of one <instance> ... </instance> record.
inline std::optional<AnnotatedSentence> parse_instance(std::string_view record) {
  const auto answer = record.find("<answer");
  if (answer == std::string_view::npos) return std::nullopt;
  const auto answer_end = record.find('>', answer);
  if (answer_end == std::string_view::npos) return std::nullopt;
  const auto answer_tag = record.substr(answer, answer_end - answer);
  const auto attr = answer_tag.find("senseid=");
  if (attr == std::string_view::npos || attr + 9 > answer_tag.size()) return std::nullopt;
  const char quote = answer_tag[attr + 8];
  if (quote != '"' && quote != '\'') return std::nullopt;
  const auto value_end = answer_tag.find(quote, attr + 9);
  if (value_end == std::string_view::npos) return std::nullopt;
  std::string sense_key =
      normalize_space(decode_entities(answer_tag.substr(attr + 9, value_end - attr - 9)));
  if (!valid_sense_key(sense_key)) return std::nullopt;

  const auto ctx_open = record.find("<context>");
  const auto ctx_close = record.find("</context>");
  if (ctx_open == std::string_view::npos || ctx_close == std::string_view::npos ||
      ctx_close < ctx_open)
    return std::nullopt;
  const auto context = record.substr(ctx_open + 9, ctx_close - ctx_open - 9);
  if (count_occurrences(context, "<head>") != 1 || count_occurrences(context, "</head>") != 1)
    return std::nullopt;
  const auto h_open = context.find("<head>");
  const auto h_close = context.find("</head>");
  if (h_close < h_open) return std::nullopt;

  AnnotatedSentence s;
  s.head_word = normalize_space(decode_entities(context.substr(h_open + 6, h_close - h_open - 6)));
  if (s.head_word.empty()) return std::nullopt;
  std::string stripped;
  stripped.append(context.substr(0, h_open));
  stripped.push_back(' ');
  stripped.append(context.substr(h_open + 6, h_close - h_open - 6));
  stripped.push_back(' ');
  stripped.append(context.substr(h_close + 7));
  s.text = normalize_space(decode_entities(stripped));
  s.lemma = sense_key.substr(0, sense_key.find('%'));
  s.sense_key = std::move(sense_key);
  return s;
}

}  // namespace detail

// Reads consecutive <instance> records. Records that lack a senseid, carry a
// badly shaped one, or do not have exactly one <head> span are skipped and
// counted in `malformed`.
inline OnesecParseResult parse_onesec(std::istream& in) {
  OnesecParseResult result;
  std::string buffer;
  std::string line;
  auto drain = [&](bool at_end) {
    for (;;) {
      const auto open = buffer.find("<instance");
      if (open == std::string::npos) {
        buffer.clear();
        return;
      }
      const auto close = buffer.find("</instance>", open);
      if (close == std::string::npos) {
        if (at_end) {
          ++result.malformed;
          buffer.clear();
        } else {
          buffer.erase(0, open);
        }
        return;
      }
      // A second <instance before the close tag means the first was never closed.
      const auto nested = buffer.find("<instance", open + 9);
      if (nested != std::string::npos && nested < close) {
        ++result.malformed;
        buffer.erase(0, nested);
        continue;
      }
      const std::string_view record(buffer.data() + open, close - open);
      if (auto s = detail::parse_instance(record))
        result.sentences.push_back(std::move(*s));
      else
        ++result.malformed;
      buffer.erase(0, close + 11);
    }
  };
  while (std::getline(in, line)) {
    buffer.append(line);
    buffer.push_back('\n');
    if (line.find("</instance>") != std::string::npos) drain(false);
  }
  drain(true);
  return result;
}

// Plain or gzip-compressed file; zlib reads uncompressed input transparently.
inline OnesecParseResult parse_onesec_file(const std::string& path) {
  gzFile file = gzopen(path.c_str(), "rb");
  if (file == nullptr) fail(ErrorCode::Io, "cannot open " + path);
  std::string data;
  char chunk[1 << 16];
  int n;
  while ((n = gzread(file, chunk, sizeof(chunk))) > 0) data.append(chunk, static_cast<std::size_t>(n));
  const bool bad = n < 0;
  gzclose(file);
  if (bad) fail(ErrorCode::Io, "decompression failed for " + path);
  std::istringstream in(std::move(data));
  return parse_onesec(in);
}

// ---------------------------------------------------------------------------
// Concept construction.

struct ConceptBuildOptions {
  // A sense key becomes a concept only with strictly more sentences than this.
  std::size_t min_sentences = 100;
  std::size_t max_per_side = 1000;
  std::size_t min_negatives = 100;
  LemmaMatchOptions lemma_match{};
  bool homographs = true;
};

struct ConceptBuildStats {
  std::size_t qualifying_senses = 0;
  std::size_t dropped_for_negatives = 0;
};

namespace detail {

inline Rng concept_rng(std::uint64_t seed, std::string_view concept_id) {
  Fnv1a h;
  h.update(&seed, sizeof(seed));
  h.update(concept_id);
  return Rng(h.value());
}

// Seeded uniform subsample of at most `cap` items, kept in input order.
inline std::vector<std::string> capped_sample(const std::vector<std::string>& pool, std::size_t cap,
                                              Rng& rng) {
  if (pool.size() <= cap) return pool;
  auto picks = sample_without_replacement(pool.size(), cap, rng);
  std::sort(picks.begin(), picks.end());
  std::vector<std::string> out;
  out.reserve(picks.size());
  for (auto i : picks) out.push_back(pool[i]);
  return out;
}

inline std::vector<std::string> unique_texts(const std::vector<const AnnotatedSentence*>& group) {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const auto* s : group)
    if (seen.insert(s->text).second) out.push_back(s->text);
  return out;
}

}  // namespace detail

inline std::vector<Concept> build_concepts(const std::vector<AnnotatedSentence>& sentences,
                                           std::uint64_t rng_seed,
                                           const ConceptBuildOptions& opts = {},
                                           ConceptBuildStats* stats = nullptr) {
  std::map<std::string, std::vector<const AnnotatedSentence*>> by_sense;
  for (const auto& s : sentences) by_sense[s.sense_key].push_back(&s);

  std::map<std::string, std::vector<std::string>> senses_of_lemma;  // qualifying only
  for (const auto& [key, group] : by_sense)
    if (group.size() > opts.min_sentences) senses_of_lemma[group.front()->lemma].push_back(key);

  ConceptBuildStats local;
  std::vector<Concept> concepts;

  std::vector<std::vector<std::string>> sentence_tokens;
  if (!senses_of_lemma.empty()) {
    sentence_tokens.reserve(sentences.size());
    for (const auto& s : sentences) sentence_tokens.push_back(word_tokens(s.text));
  }

  for (const auto& [lemma, keys] : senses_of_lemma) {
    for (const auto& key : keys) {
      ++local.qualifying_senses;
      auto rng = detail::concept_rng(rng_seed, key);
      Concept c;
      c.id = key;
      c.lemma = lemma;
      c.category = ConceptCategory::Sense;
      c.positives = detail::capped_sample(detail::unique_texts(by_sense[key]), opts.max_per_side, rng);

      const std::unordered_set<std::string> positive_set(c.positives.begin(), c.positives.end());
      const auto lemma_parts = word_tokens(lemma);
      std::vector<std::string> pool;
      std::unordered_set<std::string> seen;
      for (std::size_t i = 0; i < sentences.size(); ++i) {
        const auto& s = sentences[i];
        if (s.lemma == lemma || positive_set.count(s.text) != 0) continue;
        if (contains_lemma_tokens(sentence_tokens[i], lemma_parts, opts.lemma_match)) continue;
        if (seen.insert(s.text).second) pool.push_back(s.text);
      }
      const auto target = std::min(c.positives.size(), pool.size());
      if (target < opts.min_negatives) {
        ++local.dropped_for_negatives;
        continue;
      }
      c.negatives = detail::capped_sample(pool, target, rng);
      concepts.push_back(std::move(c));
    }
  }

  if (opts.homographs) {
    for (const auto& [lemma, keys] : senses_of_lemma) {
      for (const auto& pos_key : keys) {
        for (const auto& neg_key : keys) {
          if (pos_key == neg_key) continue;
          Concept c;
          c.id = pos_key + " VS. " + neg_key;
          c.lemma = lemma;
          c.category = ConceptCategory::Homograph;
          auto rng = detail::concept_rng(rng_seed, c.id);
          c.positives =
              detail::capped_sample(detail::unique_texts(by_sense[pos_key]), opts.max_per_side, rng);
          const std::unordered_set<std::string> positive_set(c.positives.begin(), c.positives.end());
          std::vector<std::string> pool;
          for (auto& text : detail::unique_texts(by_sense[neg_key])) {
            if (positive_set.count(text) != 0) continue;
            if (!contains_lemma(text, lemma, opts.lemma_match)) continue;
            pool.push_back(std::move(text));
          }
          if (pool.size() < opts.min_negatives) {
            ++local.dropped_for_negatives;
            continue;
          }
          c.negatives = detail::capped_sample(pool, opts.max_per_side, rng);
          concepts.push_back(std::move(c));
        }
      }
    }
  }

  if (stats != nullptr) *stats = local;
  return concepts;
}

// Structural checks that hold for any loaded corpus (count bounds are only
// enforced on the build path).
inline void validate_concept(const Concept& c) {
  require(!c.id.empty(), ErrorCode::FormatError, "concept without id");
  require(!c.positives.empty() && !c.negatives.empty(), ErrorCode::FormatError,
          "concept " + c.id + " needs at least one positive and one negative");
  const std::unordered_set<std::string> pos(c.positives.begin(), c.positives.end());
  for (const auto& n : c.negatives)
    require(pos.count(n) == 0, ErrorCode::FormatError,
            "concept " + c.id + " has a sentence on both sides");
}

// ---------------------------------------------------------------------------
// JSON Lines corpus file: a header line, one concept per line, and a trailer
// line carrying the record count and a CRC32 of the record lines.

inline constexpr std::string_view kCorpusFormat = "neuronscope-corpus";
inline constexpr int kCorpusVersion = 1;

inline void save_corpus(const std::vector<Concept>& concepts, std::ostream& out) {
  nlohmann::ordered_json header;
  header["format"] = kCorpusFormat;
  header["version"] = kCorpusVersion;
  out << header.dump() << '\n';
  detail::Crc32 crc;
  for (const auto& c : concepts) {
    nlohmann::ordered_json j;
    j["id"] = c.id;
    j["lemma"] = c.lemma;
    j["category"] = to_string(c.category);
    j["positives"] = c.positives;
    j["negatives"] = c.negatives;
    const auto line = j.dump() + "\n";
    crc.update(line.data(), line.size());
    out << line;
  }
  nlohmann::ordered_json trailer;
  trailer["records"] = concepts.size();
  trailer["crc32"] = crc.value();
  out << trailer.dump() << '\n';
  if (!out) fail(ErrorCode::Io, "failed writing corpus");
}

inline std::vector<Concept> load_corpus(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::FormatError, "empty corpus file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    fail(ErrorCode::FormatError, "corpus header is not JSON");
  }
  if (!header.is_object() || header.value("format", std::string{}) != kCorpusFormat)
    fail(ErrorCode::BadMagic, "not a neuronscope corpus file");
  if (!header.contains("version") || !header["version"].is_number_integer() ||
      header["version"].get<int>() != kCorpusVersion)
    fail(ErrorCode::UnsupportedVersion, "unsupported corpus version");

  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  if (lines.empty()) fail(ErrorCode::ChecksumMismatch, "corpus trailer missing");

  nlohmann::json trailer;
  try {
    trailer = nlohmann::json::parse(lines.back());
  } catch (const nlohmann::json::exception&) {
    fail(ErrorCode::ChecksumMismatch, "corpus trailer missing or damaged");
  }
  if (!trailer.is_object() || !trailer.contains("crc32") || !trailer.contains("records"))
    fail(ErrorCode::ChecksumMismatch, "corpus trailer missing");
  lines.pop_back();

  detail::Crc32 crc;
  for (const auto& l : lines) {
    crc.update(l.data(), l.size());
    crc.update("\n", 1);
  }
  if (!trailer["crc32"].is_number_unsigned() || trailer["crc32"].get<std::uint32_t>() != crc.value())
    fail(ErrorCode::ChecksumMismatch, "corpus CRC32 mismatch");
  if (!trailer["records"].is_number_unsigned() ||
      trailer["records"].get<std::size_t>() != lines.size())
    fail(ErrorCode::ChecksumMismatch, "corpus record count mismatch");

  std::vector<Concept> concepts;
  concepts.reserve(lines.size());
  for (const auto& l : lines) {
    try {
      const auto j = nlohmann::json::parse(l);
      Concept c;
      c.id = j.at("id").get<std::string>();
      c.lemma = j.at("lemma").get<std::string>();
      c.category = parse_category(j.at("category").get<std::string>());
      c.positives = j.at("positives").get<std::vector<std::string>>();
      c.negatives = j.at("negatives").get<std::vector<std::string>>();
      validate_concept(c);
      concepts.push_back(std::move(c));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::FormatError, std::string("bad concept record: ") + e.what());
    }
  }
  return concepts;
}

inline void save_corpus_file(const std::vector<Concept>& concepts, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot create " + path);
  save_corpus(concepts, out);
}

inline std::vector<Concept> load_corpus_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path);
  return load_corpus(in);
}

}  // namespace nscope
