#pragma once

// Conditioned generation: the top-K experts of a concept are pinned to their
// median response on the concept's positive sentences while the model
// samples.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <iterator>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "neuronscope/activation_store.hpp"
#include "neuronscope/average_precision.hpp"
#include "neuronscope/detail/binary_io.hpp"
#include "neuronscope/detail/parallel.hpp"
#include "neuronscope/error.hpp"
#include "neuronscope/tlm/model.hpp"
#include "neuronscope/tlm/sampling.hpp"
#include "neuronscope/tokenizer.hpp"

namespace nscope {

inline double median(std::vector<double> v) {
  require(!v.empty(), ErrorCode::EmptyInput, "median of an empty set");
  const auto n = v.size();
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (n % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return lo + (hi - lo) / 2.0;
}

struct ForcingValueOptions {
  // Median over positive rows where the unit is above zero; falls back to
  // all positive rows when none is.
  bool active_only = false;
};

inline tlm::ForcingPlan forcing_values(const ActivationMatrix& matrix,
                                       const std::vector<UnitId>& experts,
                                       const ForcingValueOptions& opts = {}) {
  std::vector<std::size_t> positive_rows;
  for (std::size_t r = 0; r < matrix.rows(); ++r)
    if (matrix.labels[r] == 1) positive_rows.push_back(r);
  require(!positive_rows.empty(), ErrorCode::DegenerateLabels, "no positive rows to take medians from");
  tlm::ForcingPlan plan;
  plan.entries.reserve(experts.size());
  std::vector<double> values;
  for (const auto& unit : experts) {
    require(matrix.catalog.contains(unit), ErrorCode::UnknownUnit,
            "expert " + to_string(unit) + " outside the catalog");
    const auto col = matrix.catalog.flatten(unit);
    values.clear();
    for (auto r : positive_rows) values.push_back(matrix.at(r, col));
    if (opts.active_only) {
      std::vector<double> active;
      std::copy_if(values.begin(), values.end(), std::back_inserter(active),
                   [](double v) { return v > 0.0; });
      if (!active.empty()) values = std::move(active);
    }
    plan.entries.push_back({unit, median(values)});
  }
  return plan;
}

inline std::string plan_hash(const tlm::ForcingPlan& plan) {
  detail::Fnv1a h;
  for (const auto& e : plan.entries) {
    const std::uint32_t fields[3] = {e.unit.block, static_cast<std::uint32_t>(e.unit.kind),
                                     e.unit.channel};
    h.update(fields, sizeof(fields));
    h.update(&e.value, sizeof(e.value));
  }
  return h.hex();
}

struct ConceptEvaluator {
  std::set<std::string> tokens;
  bool case_fold = true;

  ConceptEvaluator() = default;
  ConceptEvaluator(const std::vector<std::string>& words, bool fold = true) : case_fold(fold) {
    for (const auto& w : words) tokens.insert(fold ? lower(w) : w);
    require(!tokens.empty(), ErrorCode::InvalidArgument, "concept token set is empty");
  }

  bool contains(std::string_view token) const {
    return tokens.count(case_fold ? lower(token) : std::string(token)) != 0;
  }

  static std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
  }
};

inline double concept_frequency(const std::vector<std::string>& tokens,
                                const ConceptEvaluator& evaluator) {
  require(!tokens.empty(), ErrorCode::EmptyInput, "concept frequency of empty text");
  require(!evaluator.tokens.empty(), ErrorCode::InvalidArgument, "concept token set is empty");
  std::size_t hits = 0;
  for (const auto& t : tokens) hits += evaluator.contains(t) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(tokens.size());
}

// Whitespace-separated text.
inline double concept_frequency(std::string_view text, const ConceptEvaluator& evaluator) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const auto start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) tokens.emplace_back(text.substr(start, i - start));
  }
  return concept_frequency(tokens, evaluator);
}

struct ConditionResult {
  tlm::ForcingPlan plan;
  std::vector<std::int32_t> context_tokens;
  std::vector<std::int32_t> tokens;  // generated only
  std::string text;                  // decoded generated tokens
  double percent_forced = 0.0;
  nlohmann::ordered_json trace;
};

inline double percent_forced(std::size_t k, std::uint64_t total_units) {
  return 100.0 * static_cast<double>(k) / static_cast<double>(total_units);
}

// Experts in top_experts order: descending AP, then ascending index.
inline tlm::ForcingPlan top_k_plan(const ApTable& table, const ActivationMatrix& matrix,
                                   std::size_t k, const ForcingValueOptions& opts = {}) {
  require(table.catalog == matrix.catalog, ErrorCode::MismatchedCatalog,
          "AP table and activations use different catalogs");
  require(k <= table.catalog.total_units(), ErrorCode::OutOfRange,
          "K=" + std::to_string(k) + " exceeds M=" + std::to_string(table.catalog.total_units()));
  if (k == 0) return {};
  std::vector<UnitId> experts;
  for (const auto& r : top_experts(table, k)) experts.push_back(r.unit);
  return forcing_values(matrix, experts, opts);
}

template <typename T>
ConditionResult condition_with_plan(const tlm::Tlm<T>& model, const Tokenizer& tok,
                                    tlm::ForcingPlan plan, std::string_view context,
                                    const tlm::DecodeConfig& cfg, bool add_bos = true) {
  ConditionResult out;
  out.plan = std::move(plan);
  out.context_tokens = tok.encode(context, add_bos);
  out.tokens = tlm::generate(model, out.context_tokens, out.plan, cfg);
  out.text = tok.decode(out.tokens);
  out.percent_forced = percent_forced(out.plan.size(), model.catalog().total_units());
  out.trace["context"] = std::string(context);
  out.trace["K"] = out.plan.size();
  out.trace["percent"] = out.percent_forced;
  out.trace["plan_hash"] = plan_hash(out.plan);
  out.trace["tokens"] = out.tokens;
  out.trace["seed"] = cfg.seed;
  return out;
}

template <typename T>
ConditionResult condition(const tlm::Tlm<T>& model, const Tokenizer& tok, const ApTable& table,
                          const ActivationMatrix& matrix, std::size_t k, std::string_view context,
                          const tlm::DecodeConfig& cfg, const ForcingValueOptions& opts = {}) {
  require(table.catalog == model.catalog(), ErrorCode::MismatchedCatalog,
          "AP table does not describe this model");
  return condition_with_plan(model, tok, top_k_plan(table, matrix, k, opts), context, cfg);
}

// ---------------------------------------------------------------------------
// K x seed sweeps.

struct SweepCell {
  std::size_t k = 0;
  double percent_forced = 0.0;
  std::uint64_t seed = 0;
  // Empty when the generation decoded to no text.
  std::optional<double> frequency;
  std::string text;
  std::string text_path;
};

struct SweepOptions {
  std::vector<std::size_t> ks;
  std::vector<std::uint64_t> seeds;
  std::string context;
  tlm::DecodeConfig decode;
  ForcingValueOptions forcing;
  std::size_t jobs = 1;
};

template <typename T>
std::vector<SweepCell> condition_sweep(const tlm::Tlm<T>& model, const Tokenizer& tok,
                                       const ApTable& table, const ActivationMatrix& matrix,
                                       const ConceptEvaluator& evaluator, const SweepOptions& opts) {
  std::vector<tlm::ForcingPlan> plans;
  for (auto k : opts.ks) plans.push_back(top_k_plan(table, matrix, k, opts.forcing));
  std::vector<SweepCell> cells(opts.ks.size() * opts.seeds.size());
  detail::parallel_for(cells.size(), opts.jobs, [&](std::size_t i) {
    const auto ki = i / opts.seeds.size();
    auto cfg = opts.decode;
    cfg.seed = opts.seeds[i % opts.seeds.size()];
    const auto r = condition_with_plan(model, tok, plans[ki], opts.context, cfg);
    auto& cell = cells[i];
    cell.k = opts.ks[ki];
    cell.percent_forced = r.percent_forced;
    cell.seed = cfg.seed;
    cell.text = r.text;
    if (!r.text.empty()) cell.frequency = concept_frequency(r.text, evaluator);
  });
  return cells;
}

// Mean frequency per K over cells that produced text, in opts.ks order.
inline std::vector<double> mean_frequency_by_k(const std::vector<SweepCell>& cells,
                                               const std::vector<std::size_t>& ks) {
  std::vector<double> out;
  for (auto k : ks) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& c : cells)
      if (c.k == k && c.frequency) {
        sum += *c.frequency;
        ++n;
      }
    out.push_back(n > 0 ? sum / static_cast<double>(n) : 0.0);
  }
  return out;
}

inline void write_sweep_csv(const std::vector<SweepCell>& cells, std::ostream& out) {
  out << "K,percent_forced,seed,concept_frequency,text_path\n";
  for (const auto& c : cells) {
    out << c.k << ',' << detail::format_double(c.percent_forced) << ',' << c.seed << ','
        << (c.frequency ? detail::format_double(*c.frequency) : std::string()) << ','
        << c.text_path << '\n';
  }
}

}  // namespace nscope
