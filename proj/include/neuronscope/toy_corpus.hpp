#pragma once

// Synthetic topic corpus for the toy model. Every sentence belongs to one
// topic; each position is a word of that topic with probability
// `topic_prob`, a stray word of some other topic with probability
// `stray_prob`, otherwise a shared function word. A topic's word family is
// the concept a probe should find. Stray words keep single-token detectors
// from separating topics perfectly.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "neuronscope/concept_corpus.hpp"
#include "neuronscope/detail/random.hpp"
#include "neuronscope/error.hpp"
#include "neuronscope/tokenizer.hpp"

namespace nscope {

struct ToyTopic {
  std::string_view name;
  std::array<std::string_view, 20> words;
};

inline constexpr std::array<ToyTopic, 8> kToyTopics = {{
    {"birds",
     {"sparrow", "robin", "eagle", "hawk", "owl", "finch", "crow", "raven", "heron", "swan", "dove",
      "gull", "wren", "lark", "parrot", "pigeon", "falcon", "stork", "magpie", "feather"}},
    {"food",
     {"bread", "cheese", "apple", "soup", "rice", "butter", "honey", "salad", "pasta", "onion",
      "pepper", "garlic", "lemon", "cake", "bean", "carrot", "noodle", "tomato", "flour", "spoon"}},
    {"weather",
     {"rain", "snow", "storm", "cloud", "wind", "thunder", "fog", "frost", "sunshine", "drizzle",
      "hail", "breeze", "lightning", "humid", "mist", "gale", "sleet", "drought", "forecast",
      "rainbow"}},
    {"music",
     {"guitar", "piano", "violin", "drum", "melody", "chorus", "rhythm", "tempo", "flute", "harp",
      "trumpet", "cello", "concert", "lyric", "chord", "opera", "banjo", "tune", "ballad", "choir"}},
    {"sports",
     {"soccer", "tennis", "goal", "referee", "stadium", "match", "striker", "coach", "league",
      "racket", "sprint", "marathon", "trophy", "umpire", "hockey", "pitch", "tackle", "dribble",
      "medal", "athlete"}},
    {"tools",
     {"hammer", "wrench", "sander", "drill", "chisel", "pliers", "screw", "nail", "shovel", "ladder",
      "bolt", "clamp", "rake", "axe", "file", "lever", "vise", "trowel", "mallet", "toolbox"}},
    {"ocean",
     {"wave", "tide", "coral", "reef", "shark", "whale", "harbor", "anchor", "sailor", "shell",
      "dolphin", "current", "island", "lagoon", "seaweed", "buoy", "voyage", "shore", "surf",
      "octopus"}},
    {"city",
     {"street", "subway", "tower", "traffic", "bridge", "avenue", "plaza", "taxi", "alley",
      "market", "station", "skyline", "sidewalk", "downtown", "tram", "museum", "district",
      "apartment", "corner", "lamppost"}},
}};

inline constexpr std::array<std::string_view, 37> kToyFunctionWords = {
    "the",  "a",     "an",   "and",   "of",   "to",    "in",   "on",   "with", "for",
    "is",   "was",   "are",  "were",  "it",   "this",  "that", "we",   "they", "he",
    "she",  "saw",   "had",  "near",  "very", "some",  "many", "then", "after", "before",
    "over", "under", "by",   "from",  "at",   "again", "there"};

struct ToyCorpusOptions {
  std::size_t sentences_per_topic = 400;
  std::size_t min_length = 8;
  std::size_t max_length = 14;
  double topic_prob = 0.6;
  double stray_prob = 0.05;
  std::uint64_t seed = 0;
};

struct ToyCorpus {
  Tokenizer tokenizer = Tokenizer::words({});
  std::vector<std::string> sentences;
  std::vector<std::uint32_t> topic_of;  // per sentence

  // <bos> followed by the sentence's tokens.
  std::vector<std::vector<std::int32_t>> sequences() const {
    std::vector<std::vector<std::int32_t>> out;
    out.reserve(sentences.size());
    for (const auto& s : sentences) out.push_back(tokenizer.encode(s, true));
    return out;
  }
};

inline std::vector<std::string> toy_vocabulary() {
  std::vector<std::string> words;
  for (auto w : kToyFunctionWords) words.emplace_back(w);
  for (const auto& t : kToyTopics)
    for (auto w : t.words) words.emplace_back(w);
  return words;
}

inline std::size_t toy_topic_index(std::string_view name) {
  for (std::size_t i = 0; i < kToyTopics.size(); ++i)
    if (kToyTopics[i].name == name) return i;
  fail(ErrorCode::InvalidArgument, "unknown toy topic '" + std::string(name) + "'");
}

// Sentences are interleaved across topics so any prefix is balanced.
inline ToyCorpus make_toy_corpus(const ToyCorpusOptions& opts = {}) {
  require(opts.min_length >= 1 && opts.min_length <= opts.max_length, ErrorCode::InvalidArgument,
          "bad sentence length range");
  require(opts.topic_prob >= 0.0 && opts.stray_prob >= 0.0 &&
              opts.topic_prob + opts.stray_prob <= 1.0,
          ErrorCode::InvalidArgument, "topic_prob + stray_prob must lie in [0, 1]");
  detail::Rng rng(opts.seed);
  ToyCorpus corpus;
  corpus.tokenizer = Tokenizer::words(toy_vocabulary());
  for (std::size_t i = 0; i < opts.sentences_per_topic; ++i) {
    for (std::uint32_t t = 0; t < kToyTopics.size(); ++t) {
      const auto len = opts.min_length + detail::uniform_index(rng, opts.max_length - opts.min_length + 1);
      std::string s;
      bool has_topic_word = false;
      for (std::size_t k = 0; k < len; ++k) {
        std::string_view w;
        // The last slot guarantees at least one topic word per sentence.
        const double u = detail::uniform_unit(rng);
        if (u < opts.topic_prob || (k + 1 == len && !has_topic_word)) {
          w = kToyTopics[t].words[detail::uniform_index(rng, kToyTopics[t].words.size())];
          has_topic_word = true;
        } else if (u < opts.topic_prob + opts.stray_prob) {
          const auto other = (t + 1 + detail::uniform_index(rng, kToyTopics.size() - 1)) % kToyTopics.size();
          w = kToyTopics[other].words[detail::uniform_index(rng, kToyTopics[other].words.size())];
        } else {
          w = kToyFunctionWords[detail::uniform_index(rng, kToyFunctionWords.size())];
        }
        if (!s.empty()) s.push_back(' ');
        s += w;
      }
      corpus.sentences.push_back(std::move(s));
      corpus.topic_of.push_back(t);
    }
  }
  return corpus;
}

// Positives are the topic's sentences, negatives those of every other topic,
// each side capped by seeded subsampling.
inline Concept toy_concept(const ToyCorpus& corpus, std::size_t topic, std::size_t max_per_side,
                           std::uint64_t seed) {
  require(topic < kToyTopics.size(), ErrorCode::OutOfRange, "topic index out of range");
  Concept c;
  c.id = "toy:" + std::string(kToyTopics[topic].name);
  c.lemma = std::string(kToyTopics[topic].name);
  c.category = ConceptCategory::Sense;
  std::vector<std::string> pos, neg;
  for (std::size_t i = 0; i < corpus.sentences.size(); ++i)
    (corpus.topic_of[i] == topic ? pos : neg).push_back(corpus.sentences[i]);
  auto rng = detail::concept_rng(seed, c.id);
  c.positives = detail::capped_sample(pos, max_per_side, rng);
  c.negatives = detail::capped_sample(neg, max_per_side, rng);
  return c;
}

inline std::vector<std::string> toy_topic_words(std::size_t topic) {
  require(topic < kToyTopics.size(), ErrorCode::OutOfRange, "topic index out of range");
  return {kToyTopics[topic].words.begin(), kToyTopics[topic].words.end()};
}

}  // namespace nscope
