#pragma once

// Runs a concept's sentences through the toy model and records the
// max-pooled response of every unit: positives first (label 1), then
// negatives (label 0).

#include <algorithm>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "neuronscope/activation_store.hpp"
#include "neuronscope/concept_corpus.hpp"
#include "neuronscope/detail/parallel.hpp"
#include "neuronscope/tlm/model.hpp"
#include "neuronscope/tokenizer.hpp"

namespace nscope::tlm {

struct ProbeOptions {
  bool add_bos = true;
  std::size_t jobs = 1;
  // Rows computed per parallel batch before being streamed out.
  std::size_t batch_rows = 64;
};

// Sentences longer than the context are cut to the first context_length
// tokens.
inline std::vector<std::int32_t> probe_tokens(const Tokenizer& tok, const std::string& text,
                                              std::size_t context_length, bool add_bos) {
  auto ids = tok.encode(text, add_bos);
  require(!ids.empty(), ErrorCode::InvalidArgument, "sentence encodes to no tokens");
  if (ids.size() > context_length) ids.resize(context_length);
  return ids;
}

template <typename T>
void probe_concept(const Tlm<T>& model, const Tokenizer& tok, const Concept& concept_,
                   std::ostream& out, const ProbeOptions& opts = {},
                   std::uint32_t chunk_width = kDefaultChunkWidth) {
  require(tok.size() <= model.config().vocab_size, ErrorCode::ShapeMismatch,
          "tokenizer vocabulary larger than the model's");
  std::vector<const std::string*> texts;
  std::vector<std::uint8_t> labels;
  for (const auto& s : concept_.positives) {
    texts.push_back(&s);
    labels.push_back(1);
  }
  for (const auto& s : concept_.negatives) {
    texts.push_back(&s);
    labels.push_back(0);
  }
  const auto catalog = model.catalog();
  ActivationWriter writer(out, concept_.id, catalog, labels, chunk_width);
  const std::size_t batch = std::max<std::size_t>(1, opts.batch_rows);
  std::vector<std::vector<float>> rows(batch);
  for (std::size_t start = 0; start < texts.size(); start += batch) {
    const auto count = std::min(batch, texts.size() - start);
    nscope::detail::parallel_for(count, opts.jobs, [&](std::size_t i) {
      const auto ids =
          probe_tokens(tok, *texts[start + i], model.config().context_length, opts.add_bos);
      ForwardCache<T> cache;
      model.forward(ids, cache);
      const auto tap = model.tap(cache);
      rows[i].assign(tap.begin(), tap.end());
    });
    for (std::size_t i = 0; i < count; ++i) writer.append_row(rows[i]);
  }
  writer.finish();
}

template <typename T>
ActivationMatrix probe_matrix(const Tlm<T>& model, const Tokenizer& tok, const Concept& concept_,
                              const ProbeOptions& opts = {}) {
  ActivationMatrix m;
  m.concept_id = concept_.id;
  m.catalog = model.catalog();
  const std::size_t cols = m.catalog.total_units();
  std::vector<const std::string*> texts;
  for (const auto& s : concept_.positives) {
    texts.push_back(&s);
    m.labels.push_back(1);
  }
  for (const auto& s : concept_.negatives) {
    texts.push_back(&s);
    m.labels.push_back(0);
  }
  m.responses.assign(texts.size() * cols, 0.0f);
  nscope::detail::parallel_for(texts.size(), opts.jobs, [&](std::size_t r) {
    const auto ids = probe_tokens(tok, *texts[r], model.config().context_length, opts.add_bos);
    ForwardCache<T> cache;
    model.forward(ids, cache);
    const auto tap = model.tap(cache);
    std::copy(tap.begin(), tap.end(), m.responses.begin() + static_cast<std::ptrdiff_t>(r * cols));
  });
  validate(m);
  return m;
}

}  // namespace nscope::tlm
