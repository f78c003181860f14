#pragma once

// Every unit is treated as a binary classifier of a concept: its max-pooled
// responses rank the sentences and the ranking is scored by average
// precision, the area under the step precision/recall curve.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuronscope/activation_store.hpp"
#include "neuronscope/detail/parallel.hpp"
#include "neuronscope/error.hpp"
#include "neuronscope/unit_catalog.hpp"

namespace nscope {

// Reusable buffers so a sweep over many columns does not reallocate.
struct ApScratch {
  std::vector<std::uint32_t> order;
};

// Tied scores form a single threshold group: the precision/recall point is
// taken only after the whole group is admitted. Accumulation is in double.
template <typename Score>
double average_precision(std::span<const Score> scores, std::span<const std::uint8_t> labels,
                         ApScratch& scratch) {
  const auto n = scores.size();
  require(labels.size() == n, ErrorCode::LengthMismatch, "scores and labels differ in length");
  require(n >= 2, ErrorCode::DegenerateLabels, "need at least two samples");
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n; ++i) {
    require(std::isfinite(static_cast<double>(scores[i])), ErrorCode::NonFiniteScore,
            "score " + std::to_string(i) + " is not finite");
    require(labels[i] <= 1, ErrorCode::InvalidArgument, "labels must be 0 or 1");
    positives += labels[i];
  }
  require(positives > 0 && positives < n, ErrorCode::DegenerateLabels,
          "labels are all positive or all negative");

  auto& order = scratch.order;
  order.resize(n);
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(),
            [&](std::uint32_t a, std::uint32_t b) { return scores[a] > scores[b]; });

  const double total_pos = static_cast<double>(positives);
  std::size_t tp = 0;
  std::size_t seen = 0;
  double ap = 0.0;
  for (std::size_t i = 0; i < n;) {
    const auto threshold = scores[order[i]];
    std::size_t group_tp = 0;
    std::size_t j = i;
    for (; j < n && scores[order[j]] == threshold; ++j) group_tp += labels[order[j]];
    tp += group_tp;
    seen += j - i;
    if (group_tp > 0)
      ap += (static_cast<double>(group_tp) / total_pos) *
            (static_cast<double>(tp) / static_cast<double>(seen));
    i = j;
  }
  return std::clamp(ap, 0.0, 1.0);
}

template <typename Score>
double average_precision(std::span<const Score> scores, std::span<const std::uint8_t> labels) {
  ApScratch scratch;
  return average_precision(scores, labels, scratch);
}

inline double average_precision(const std::vector<double>& scores,
                                const std::vector<std::uint8_t>& labels) {
  return average_precision(std::span<const double>(scores), std::span<const std::uint8_t>(labels));
}

struct ApTable {
  std::string concept_id;
  UnitCatalog catalog;
  std::vector<double> ap;  // indexed by flattened unit index
};

struct ConceptBestAp {
  std::string concept_id;
  double best_ap = 0.0;
  std::uint64_t best_index = 0;
  UnitId best_unit;
};

struct RankedUnit {
  std::uint64_t index = 0;
  UnitId unit;
  double ap = 0.0;
};

struct ApSweepOptions {
  std::size_t chunk_columns = kDefaultChunkWidth;
  std::size_t jobs = 1;
};

inline ApTable ap_sweep(const ActivationMatrix& matrix, const ApSweepOptions& opts = {}) {
  validate(matrix);
  ApTable table{matrix.concept_id, matrix.catalog, std::vector<double>(matrix.cols())};
  const auto chunk = std::max<std::size_t>(1, opts.chunk_columns);
  const auto chunks = (matrix.cols() + chunk - 1) / chunk;
  detail::parallel_for(chunks, opts.jobs, [&](std::size_t k) {
    ApScratch scratch;
    std::vector<float> column(matrix.rows());
    const auto end = std::min(matrix.cols(), (k + 1) * chunk);
    for (std::size_t m = k * chunk; m < end; ++m) {
      for (std::size_t r = 0; r < matrix.rows(); ++r) column[r] = matrix.at(r, m);
      table.ap[m] = average_precision(std::span<const float>(column),
                                      std::span<const std::uint8_t>(matrix.labels), scratch);
    }
  });
  return table;
}

// Out-of-core sweep: each worker walks its own contiguous column range with
// a private cursor.
inline ApTable ap_sweep(const ActivationFile& file, const ApSweepOptions& opts = {}) {
  validate_labels(file.labels());
  ApTable table{file.concept_id(), file.catalog(), std::vector<double>(file.cols())};
  const auto chunk = std::max<std::size_t>(1, opts.chunk_columns);
  const auto total = file.cols();
  const auto jobs = std::max<std::size_t>(1, opts.jobs);
  // A few ranges per worker keeps the tail short without tiny seeks.
  const std::uint64_t ranges = std::min<std::uint64_t>((total + chunk - 1) / chunk, jobs * 4);
  const std::uint64_t per_range = (total + ranges - 1) / ranges;
  detail::parallel_for(static_cast<std::size_t>(ranges), jobs, [&](std::size_t k) {
    const auto first = k * per_range;
    const auto last = std::min<std::uint64_t>(total, first + per_range);
    if (first >= last) return;
    auto cursor = file.cursor(chunk, first, last);
    ApScratch scratch;
    ColumnChunk* block = nullptr;
    while (cursor.next(block))
      for (std::size_t j = 0; j < block->count; ++j)
        table.ap[block->first + j] = average_precision(
            block->column(j), std::span<const std::uint8_t>(file.labels()), scratch);
  });
  return table;
}

// Descending AP, ties by ascending flattened index.
inline std::vector<RankedUnit> top_experts(const ApTable& table, std::size_t k) {
  const auto total = table.ap.size();
  require(k >= 1 && k <= total, ErrorCode::OutOfRange,
          "k=" + std::to_string(k) + " outside [1, " + std::to_string(total) + "]");
  std::vector<std::uint64_t> idx(total);
  std::iota(idx.begin(), idx.end(), std::uint64_t{0});
  auto better = [&](std::uint64_t a, std::uint64_t b) {
    if (table.ap[a] != table.ap[b]) return table.ap[a] > table.ap[b];
    return a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
  std::vector<RankedUnit> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i)
    out.push_back({idx[i], table.catalog.unflatten(idx[i]), table.ap[idx[i]]});
  return out;
}

inline ConceptBestAp best_ap(const ApTable& table) {
  require(!table.ap.empty(), ErrorCode::EmptyInput, "empty AP table");
  std::uint64_t best = 0;
  for (std::uint64_t m = 1; m < table.ap.size(); ++m)
    if (table.ap[m] > table.ap[best]) best = m;
  return {table.concept_id, table.ap[best], best, table.catalog.unflatten(best)};
}

// ---------------------------------------------------------------------------
// Export: CSV `block,kind,channel,ap` plus a JSON sidecar.

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline void write_ap_csv(const ApTable& table, std::ostream& out) {
  out << "block,kind,channel,ap\n";
  for (std::uint64_t m = 0; m < table.ap.size(); ++m) {
    const auto id = table.catalog.unflatten(m);
    out << id.block << ',' << to_string(id.kind) << ',' << id.channel << ','
        << detail::format_double(table.ap[m]) << '\n';
  }
}

inline nlohmann::ordered_json ap_sidecar(const ApTable& table) {
  const auto best = best_ap(table);
  nlohmann::ordered_json j;
  j["concept_id"] = table.concept_id;
  j["M"] = table.catalog.total_units();
  j["best_ap"] = best.best_ap;
  j["best_unit"] = {{"block", best.best_unit.block},
                    {"kind", to_string(best.best_unit.kind)},
                    {"channel", best.best_unit.channel},
                    {"index", best.best_index}};
  j["model_dim"] = table.catalog.model_dim();
  j["num_blocks"] = table.catalog.num_blocks();
  return j;
}

inline void save_ap_table(const ApTable& table, const std::string& csv_path,
                          const std::string& json_path) {
  std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
  if (!csv) fail(ErrorCode::Io, "cannot create " + csv_path);
  write_ap_csv(table, csv);
  std::ofstream js(json_path, std::ios::binary | std::ios::trunc);
  if (!js) fail(ErrorCode::Io, "cannot create " + json_path);
  js << ap_sidecar(table).dump(2) << '\n';
  if (!csv || !js) fail(ErrorCode::Io, "failed writing AP table");
}

inline ApTable load_ap_table(const std::string& csv_path, const std::string& json_path) {
  std::ifstream js(json_path, std::ios::binary);
  if (!js) fail(ErrorCode::Io, "cannot open " + json_path);
  nlohmann::json meta;
  try {
    js >> meta;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, std::string("bad AP sidecar: ") + e.what());
  }
  ApTable table;
  try {
    table.concept_id = meta.at("concept_id").get<std::string>();
    table.catalog =
        UnitCatalog(meta.at("model_dim").get<std::uint32_t>(), meta.at("num_blocks").get<std::uint32_t>());
    if (meta.at("M").get<std::uint64_t>() != table.catalog.total_units())
      fail(ErrorCode::FormatError, "sidecar M disagrees with catalog");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, std::string("bad AP sidecar: ") + e.what());
  }

  std::ifstream csv(csv_path, std::ios::binary);
  if (!csv) fail(ErrorCode::Io, "cannot open " + csv_path);
  std::string line;
  if (!std::getline(csv, line) || line != "block,kind,channel,ap")
    fail(ErrorCode::FormatError, "AP CSV header mismatch in " + csv_path);
  table.ap.assign(table.catalog.total_units(), -1.0);
  std::uint64_t rows = 0;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string block, kind, channel, ap;
    if (!std::getline(ls, block, ',') || !std::getline(ls, kind, ',') ||
        !std::getline(ls, channel, ',') || !std::getline(ls, ap))
      fail(ErrorCode::FormatError, "bad AP CSV row: " + line);
    const auto k = parse_unit_kind(kind);
    if (!k) fail(ErrorCode::FormatError, "bad unit kind: " + kind);
    UnitId id;
    double value = 0.0;
    try {
      id = {static_cast<std::uint32_t>(std::stoul(block)), *k,
            static_cast<std::uint32_t>(std::stoul(channel))};
      value = std::stod(ap);
    } catch (const std::exception&) {
      fail(ErrorCode::FormatError, "bad AP CSV row: " + line);
    }
    if (!table.catalog.contains(id)) fail(ErrorCode::FormatError, "unit outside catalog: " + line);
    if (!(value >= 0.0 && value <= 1.0)) fail(ErrorCode::FormatError, "AP outside [0,1]: " + line);
    table.ap[table.catalog.flatten(id)] = value;
    ++rows;
  }
  if (rows != table.catalog.total_units() ||
      std::any_of(table.ap.begin(), table.ap.end(), [](double v) { return v < 0.0; }))
    fail(ErrorCode::FormatError, "AP CSV does not cover every unit exactly once");
  return table;
}

}  // namespace nscope
