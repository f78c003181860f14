#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "neuronscope/detail/random.hpp"
#include "neuronscope/error.hpp"
#include "neuronscope/tlm/model.hpp"

namespace nscope::tlm {

struct DecodeConfig {
  double nucleus_p = 0.9;
  std::size_t max_new_tokens = 32;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  // When set, forcing skips the context and touches generated positions only.
  bool force_generated_only = false;
  // Generation stops early after emitting this token; -1 disables.
  std::int32_t stop_token = -1;

  void validate() const {
    require(nucleus_p > 0.0 && nucleus_p <= 1.0, ErrorCode::InvalidArgument,
            "nucleus_p must lie in (0, 1]");
    require(temperature > 0.0 && std::isfinite(temperature), ErrorCode::InvalidArgument,
            "temperature must be positive");
  }
};

// Softmax in double with an optional temperature.
template <typename T>
std::vector<double> softmax(std::span<const T> logits, double temperature = 1.0) {
  std::vector<double> p(logits.size());
  double maxv = -std::numeric_limits<double>::infinity();
  for (auto v : logits) maxv = std::max(maxv, static_cast<double>(v) / temperature);
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) / temperature - maxv);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

// Smallest set of most probable tokens whose mass reaches p, in descending
// probability order (ties by ascending id).
inline std::vector<std::uint32_t> nucleus_set(std::span<const double> probs, double p) {
  require(!probs.empty(), ErrorCode::EmptyInput, "empty distribution");
  require(p > 0.0 && p <= 1.0, ErrorCode::InvalidArgument, "nucleus_p must lie in (0, 1]");
  std::vector<std::uint32_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (probs[a] != probs[b]) return probs[a] > probs[b];
    return a < b;
  });
  if (p >= 1.0) return order;
  double mass = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    mass += probs[order[keep++]];
    if (mass >= p) break;
  }
  order.resize(keep);
  return order;
}

template <typename Rng>
std::uint32_t sample_nucleus(std::span<const double> probs, double p, Rng& rng) {
  const auto nucleus = nucleus_set(probs, p);
  if (nucleus.size() == 1) return nucleus.front();
  double mass = 0.0;
  for (auto t : nucleus) mass += probs[t];
  double u = nscope::detail::uniform_unit(rng) * mass;
  for (auto t : nucleus) {
    u -= probs[t];
    if (u < 0.0) return t;
  }
  return nucleus.back();
}

// Autoregressive nucleus sampling. Returns only the new tokens. When the
// sequence outgrows the context window the oldest tokens are dropped.
template <typename T>
std::vector<std::int32_t> generate(const Tlm<T>& model, std::span<const std::int32_t> context,
                                   const ForcingPlan& plan, const DecodeConfig& cfg) {
  cfg.validate();
  require(!context.empty(), ErrorCode::InvalidArgument, "generation needs a nonempty context");
  model.check_tokens(context.size() <= model.config().context_length
                         ? context
                         : context.subspan(context.size() - model.config().context_length));
  const auto resolved = resolve_plan<T>(plan, model.catalog());
  const std::size_t window = model.config().context_length;
  const std::size_t vocab = model.config().vocab_size;

  nscope::detail::Rng rng(cfg.seed);
  std::vector<std::int32_t> seq(context.begin(), context.end());
  std::vector<std::int32_t> out;
  ForwardCache<T> cache;
  for (std::size_t step = 0; step < cfg.max_new_tokens; ++step) {
    const std::size_t begin = seq.size() > window ? seq.size() - window : 0;
    std::span<const std::int32_t> view(seq.data() + begin, seq.size() - begin);
    ForwardOptions<T> fo;
    fo.plan = plan.empty() ? nullptr : &resolved;
    if (cfg.force_generated_only) {
      const std::size_t generated_start = context.size();
      fo.force_from = generated_start > begin ? generated_start - begin : 0;
    }
    model.forward(view, cache, fo);
    std::span<const T> last(cache.logits.data() + (view.size() - 1) * vocab, vocab);
    const auto probs = softmax(last, cfg.temperature);
    const auto next = static_cast<std::int32_t>(sample_nucleus(probs, cfg.nucleus_p, rng));
    seq.push_back(next);
    out.push_back(next);
    if (next == cfg.stop_token) break;
  }
  return out;
}

}  // namespace nscope::tlm
