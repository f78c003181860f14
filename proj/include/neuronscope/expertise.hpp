#pragma once

// Concept expertise: the share of concepts whose best expert reaches an
// acquisition threshold gamma, the search for the gamma that best tracks
// downstream performance across models, and per-layer / histogram reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "neuronscope/average_precision.hpp"
#include "neuronscope/concept_corpus.hpp"
#include "neuronscope/detail/parallel.hpp"
#include "neuronscope/detail/random.hpp"
#include "neuronscope/error.hpp"
#include "neuronscope/unit_catalog.hpp"

namespace nscope {

struct Expertise {
  double fraction = 0.0;
  std::size_t acquired = 0;
  std::size_t concepts = 0;
};

inline void check_gamma(double gamma) {
  require(gamma >= 0.5 && gamma < 1.0, ErrorCode::OutOfRange,
          "gamma must lie in [0.5, 1), got " + std::to_string(gamma));
}

// X_gamma = |{c : AP*_c >= gamma}| / |C|.
inline Expertise concept_expertise(std::span<const double> best_aps, double gamma) {
  require(!best_aps.empty(), ErrorCode::EmptyInput, "no concepts");
  check_gamma(gamma);
  const auto acquired = static_cast<std::size_t>(
      std::count_if(best_aps.begin(), best_aps.end(), [&](double v) { return v >= gamma; }));
  return {static_cast<double>(acquired) / static_cast<double>(best_aps.size()), acquired,
          best_aps.size()};
}

struct CategoryExpertise {
  double fraction = 0.0;
  std::size_t concepts = 0;
};

// Count-weighted mean over categories.
inline double combined_expertise(std::span<const CategoryExpertise> categories) {
  require(!categories.empty(), ErrorCode::EmptyInput, "no categories");
  double weighted = 0.0;
  std::size_t total = 0;
  for (const auto& c : categories) {
    require(c.concepts > 0, ErrorCode::InvalidArgument, "category with zero concepts");
    weighted += static_cast<double>(c.concepts) * c.fraction;
    total += c.concepts;
  }
  return weighted / static_cast<double>(total);
}

inline double combined_expertise(CategoryExpertise sense, CategoryExpertise homograph) {
  const CategoryExpertise both[] = {sense, homograph};
  return combined_expertise(both);
}

// Squared sample Pearson correlation.
inline double pearson_r2(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), ErrorCode::LengthMismatch, "pearson inputs differ in length");
  require(x.size() >= 3, ErrorCode::InvalidArgument, "pearson needs at least three points");
  const auto n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  require(sxx > 0.0 && syy > 0.0, ErrorCode::ZeroVariance, "pearson input has zero variance");
  return std::clamp((sxy * sxy) / (sxx * syy), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Task panels: per-model downstream scores plus per-model AP* arrays.

struct PanelModel {
  std::string id;
  std::map<ConceptCategory, std::vector<double>> best_aps;
};

struct PanelTask {
  std::string name;                          // "task/metric"
  std::vector<std::optional<double>> values;  // one per model, same order as models
};

struct TaskPanel {
  std::vector<PanelModel> models;
  std::vector<PanelTask> tasks;

  std::size_t model_index(const std::string& id) const {
    for (std::size_t i = 0; i < models.size(); ++i)
      if (models[i].id == id) return i;
    fail(ErrorCode::InvalidArgument, "unknown model " + id);
  }
};

inline void validate(const TaskPanel& panel) {
  require(panel.models.size() >= 3, ErrorCode::InvalidArgument,
          "a task panel needs at least three models");
  for (const auto& t : panel.tasks) {
    require(t.values.size() == panel.models.size(), ErrorCode::ShapeMismatch,
            "task " + t.name + " has the wrong number of model entries");
    const auto reported = std::count_if(t.values.begin(), t.values.end(),
                                        [](const auto& v) { return v.has_value(); });
    require(reported >= 3, ErrorCode::InvalidArgument,
            "task " + t.name + " has fewer than three reporting models");
  }
}

// CSV with header `model,task,metric,value`; an empty value marks an
// unreported metric. Model order follows first appearance.
inline TaskPanel parse_task_panel(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::FormatError, "empty task panel");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "model,task,metric,value") fail(ErrorCode::FormatError, "task panel header mismatch");
  TaskPanel panel;
  std::map<std::string, std::size_t> task_index;
  std::vector<std::tuple<std::string, std::string, std::optional<double>>> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (cells.size() != 4) fail(ErrorCode::FormatError, "bad task panel row: " + line);
    const auto name = cells[2].empty() ? cells[1] : cells[1] + "/" + cells[2];
    std::optional<double> value;
    if (!cells[3].empty()) {
      try {
        std::size_t used = 0;
        value = std::stod(cells[3], &used);
        if (used != cells[3].size()) throw std::invalid_argument(cells[3]);
      } catch (const std::exception&) {
        fail(ErrorCode::FormatError, "bad task value: " + line);
      }
    }
    if (std::none_of(panel.models.begin(), panel.models.end(),
                     [&](const PanelModel& m) { return m.id == cells[0]; }))
      panel.models.push_back({cells[0], {}});
    if (task_index.emplace(name, panel.tasks.size()).second) panel.tasks.push_back({name, {}});
    rows.emplace_back(cells[0], name, value);
  }
  for (auto& t : panel.tasks) t.values.assign(panel.models.size(), std::nullopt);
  for (const auto& [model, task, value] : rows)
    panel.tasks[task_index[task]].values[panel.model_index(model)] = value;
  return panel;
}

inline TaskPanel load_task_panel(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open " + path);
  return parse_task_panel(in);
}

// CSV `concept_id,category,best_ap` listing one model's AP* values.
inline std::map<ConceptCategory, std::vector<double>> parse_best_aps(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("concept_id,category,best_ap", 0) != 0)
    fail(ErrorCode::FormatError, "best-AP CSV header mismatch");
  std::map<ConceptCategory, std::vector<double>> out;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    // Split from the right so concept ids may contain commas.
    const auto last = line.rfind(',');
    const auto mid = last == std::string::npos ? std::string::npos : line.rfind(',', last - 1);
    if (mid == std::string::npos) fail(ErrorCode::FormatError, "bad best-AP row: " + line);
    const auto category = parse_category(line.substr(mid + 1, last - mid - 1));
    double value = 0.0;
    try {
      value = std::stod(line.substr(last + 1));
    } catch (const std::exception&) {
      fail(ErrorCode::FormatError, "bad best-AP row: " + line);
    }
    out[category].push_back(value);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gamma search.

struct GammaSearchResult {
  double gamma_star = 0.0;
  std::vector<std::pair<double, double>> curve;  // (gamma, mean r^2)
  std::optional<double> split_rmse;
};

struct GammaSearchOptions {
  double grid_step = 0.001;
  double grid_min = 0.5;
  double grid_max = 0.999;
  std::vector<std::string> include_tasks;  // empty means every task
  std::size_t jobs = 1;
};

// Grid values are rounded to 1e-9 so that 0.5 + 400 * 0.001 is exactly 0.9.
inline std::vector<double> gamma_grid(double step, double lo = 0.5, double hi = 0.999) {
  require(step > 0.0, ErrorCode::InvalidArgument, "grid step must be positive");
  check_gamma(lo);
  check_gamma(hi);
  std::vector<double> grid;
  for (std::size_t i = 0;; ++i) {
    const double g = std::round((lo + static_cast<double>(i) * step) * 1e9) / 1e9;
    if (g > hi + 1e-12 || g >= 1.0) break;
    grid.push_back(g);
  }
  return grid;
}

namespace detail {

inline std::vector<std::size_t> select_tasks(const TaskPanel& panel,
                                             const std::vector<std::string>& include) {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < panel.tasks.size(); ++t)
    if (include.empty() ||
        std::find(include.begin(), include.end(), panel.tasks[t].name) != include.end())
      out.push_back(t);
  return out;
}

// Mean r^2 over the given tasks at one gamma. Degenerate columns count as 0.
inline double mean_r2_at(const TaskPanel& panel, ConceptCategory category,
                         const std::vector<std::size_t>& tasks, double gamma) {
  std::vector<double> expertise(panel.models.size());
  for (std::size_t m = 0; m < panel.models.size(); ++m) {
    const auto it = panel.models[m].best_aps.find(category);
    require(it != panel.models[m].best_aps.end() && !it->second.empty(), ErrorCode::InvalidArgument,
            "model " + panel.models[m].id + " has no AP* values for " +
                std::string(to_string(category)));
    expertise[m] = concept_expertise(it->second, gamma).fraction;
  }
  double sum = 0.0;
  for (auto t : tasks) {
    std::vector<double> x, y;
    for (std::size_t m = 0; m < panel.models.size(); ++m) {
      if (!panel.tasks[t].values[m]) continue;
      x.push_back(expertise[m]);
      y.push_back(*panel.tasks[t].values[m]);
    }
    try {
      sum += pearson_r2(x, y);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::ZeroVariance) throw;
    }
  }
  return sum / static_cast<double>(tasks.size());
}

inline GammaSearchResult gamma_search_tasks(const TaskPanel& panel, ConceptCategory category,
                                            const std::vector<std::size_t>& tasks,
                                            const GammaSearchOptions& opts) {
  require(!tasks.empty(), ErrorCode::InvalidArgument, "no tasks selected");
  const auto grid = gamma_grid(opts.grid_step, opts.grid_min, opts.grid_max);
  GammaSearchResult result;
  result.curve.resize(grid.size());
  parallel_for(grid.size(), opts.jobs, [&](std::size_t i) {
    result.curve[i] = {grid[i], mean_r2_at(panel, category, tasks, grid[i])};
  });
  // Ties go to the largest gamma. Affinely related expertise vectors give
  // equal r^2 up to rounding, so values within kTieTolerance count as tied.
  constexpr double kTieTolerance = 1e-12;
  std::size_t best = 0;
  double best_value = result.curve[0].second;
  for (std::size_t i = 1; i < result.curve.size(); ++i) {
    if (result.curve[i].second >= best_value - kTieTolerance) {
      best = i;
      best_value = std::max(best_value, result.curve[i].second);
    }
  }
  result.gamma_star = result.curve[best].first;
  return result;
}

}  // namespace detail

inline GammaSearchResult gamma_search(const TaskPanel& panel, ConceptCategory category,
                                      const GammaSearchOptions& opts = {}) {
  validate(panel);
  return detail::gamma_search_tasks(panel, category, detail::select_tasks(panel, opts.include_tasks),
                                    opts);
}

struct RobustnessOptions {
  std::size_t splits = 10;
  double reference_ratio = 0.6;
  std::uint64_t seed = 0;
};

// Splits the tasks into reference/test subsets (seeded Fisher-Yates, first
// round(ratio * T) tasks are the reference), finds gamma* on each side and
// returns the RMSE of the differences over all splits.
inline double gamma_robustness(const TaskPanel& panel, ConceptCategory category,
                               const GammaSearchOptions& search = {},
                               const RobustnessOptions& opts = {}) {
  validate(panel);
  const auto tasks = detail::select_tasks(panel, search.include_tasks);
  require(tasks.size() >= 2, ErrorCode::InvalidArgument, "need at least two tasks to split");
  require(opts.splits > 0, ErrorCode::InvalidArgument, "need at least one split");
  const auto ref_count = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(opts.reference_ratio * static_cast<double>(tasks.size()))),
      1, tasks.size() - 1);
  detail::Rng rng(opts.seed);
  double sq = 0.0;
  for (std::size_t s = 0; s < opts.splits; ++s) {
    auto order = tasks;
    detail::shuffle(order, rng);
    const std::vector<std::size_t> ref(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(ref_count));
    const std::vector<std::size_t> test(order.begin() + static_cast<std::ptrdiff_t>(ref_count), order.end());
    const auto g_ref = detail::gamma_search_tasks(panel, category, ref, search).gamma_star;
    const auto g_test = detail::gamma_search_tasks(panel, category, test, search).gamma_star;
    sq += (g_ref - g_test) * (g_ref - g_test);
  }
  return std::sqrt(sq / static_cast<double>(opts.splits));
}

// ---------------------------------------------------------------------------
// Reports.

// counts[block * 4 + kind]: number of concepts with at least one unit of that
// (block, kind) group at or above gamma.
struct LayerDistribution {
  UnitCatalog catalog;
  std::vector<std::size_t> counts;

  std::size_t at(std::uint32_t block, UnitKind kind) const {
    return counts[block * 4 + static_cast<std::size_t>(kind)];
  }
};

inline LayerDistribution layer_distribution(std::span<const ApTable> tables, double gamma) {
  require(!tables.empty(), ErrorCode::EmptyInput, "no AP tables");
  LayerDistribution dist{tables.front().catalog,
                         std::vector<std::size_t>(tables.front().catalog.num_blocks() * 4, 0)};
  const auto& cat = dist.catalog;
  for (const auto& t : tables) {
    require(t.catalog == cat && t.ap.size() == cat.total_units(), ErrorCode::MismatchedCatalog,
            "AP table " + t.concept_id + " uses a different unit catalog");
    for (std::uint32_t b = 0; b < cat.num_blocks(); ++b) {
      for (auto kind : kAllUnitKinds) {
        const auto begin = cat.group_begin(b, kind);
        const auto end = begin + cat.width(kind);
        if (std::any_of(t.ap.begin() + static_cast<std::ptrdiff_t>(begin),
                        t.ap.begin() + static_cast<std::ptrdiff_t>(end),
                        [&](double v) { return v >= gamma; }))
          ++dist.counts[b * 4 + static_cast<std::size_t>(kind)];
      }
    }
  }
  return dist;
}

inline void write_layer_distribution_csv(const LayerDistribution& d, std::ostream& out) {
  out << "block,kind,count\n";
  for (std::uint32_t b = 0; b < d.catalog.num_blocks(); ++b)
    for (auto kind : kAllUnitKinds) out << b << ',' << to_string(kind) << ',' << d.at(b, kind) << '\n';
}

// Bins are [edges[i], edges[i+1]); the final bin also includes its upper edge.
struct Histogram {
  std::vector<double> edges;
  std::vector<std::size_t> counts;

  std::size_t total() const {
    std::size_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }

  void add(double v) {
    if (edges.size() < 2 || v < edges.front() || v > edges.back()) return;
    auto it = std::upper_bound(edges.begin(), edges.end(), v);
    auto bin = static_cast<std::size_t>(it - edges.begin());
    bin = bin == 0 ? 0 : bin - 1;
    counts[std::min(bin, counts.size() - 1)] += 1;
  }
};

inline Histogram uniform_histogram(double lo, double hi, std::size_t bins) {
  require(bins > 0 && hi > lo, ErrorCode::InvalidArgument, "bad histogram range");
  Histogram h;
  for (std::size_t i = 0; i <= bins; ++i)
    h.edges.push_back(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins));
  h.edges.back() = hi;
  h.counts.assign(bins, 0);
  return h;
}

// Edges 0, 1, 2, 4, 8, ... up to the first power of two >= max_count + 1.
inline Histogram log2_count_histogram(std::uint64_t max_count) {
  Histogram h;
  h.edges.push_back(0.0);
  std::uint64_t e = 1;
  h.edges.push_back(1.0);
  while (e <= max_count) {
    e *= 2;
    h.edges.push_back(static_cast<double>(e));
  }
  h.counts.assign(h.edges.size() - 1, 0);
  return h;
}

struct ExpertHistograms {
  Histogram best_ap;
  Histogram expert_count;
  std::vector<std::size_t> experts_per_concept;
  double median_experts = 0.0;
};

struct HistogramOptions {
  double gamma = 0.95;
  std::size_t ap_bins = 50;
  std::vector<double> count_edges;  // empty: log2-spaced edges
};

inline ExpertHistograms expert_histograms(std::span<const ApTable> tables,
                                          const HistogramOptions& opts = {}) {
  require(!tables.empty(), ErrorCode::EmptyInput, "no AP tables");
  ExpertHistograms out;
  out.best_ap = uniform_histogram(0.0, 1.0, opts.ap_bins);
  std::uint64_t max_units = 0;
  for (const auto& t : tables) {
    out.best_ap.add(best_ap(t).best_ap);
    const auto n = static_cast<std::size_t>(
        std::count_if(t.ap.begin(), t.ap.end(), [&](double v) { return v >= opts.gamma; }));
    out.experts_per_concept.push_back(n);
    max_units = std::max<std::uint64_t>(max_units, t.ap.size());
  }
  if (opts.count_edges.empty()) {
    out.expert_count = log2_count_histogram(max_units);
  } else {
    out.expert_count.edges = opts.count_edges;
    out.expert_count.counts.assign(opts.count_edges.size() - 1, 0);
  }
  for (auto n : out.experts_per_concept) out.expert_count.add(static_cast<double>(n));
  auto sorted = out.experts_per_concept;
  std::sort(sorted.begin(), sorted.end());
  const auto k = sorted.size();
  out.median_experts = k % 2 == 1 ? static_cast<double>(sorted[k / 2])
                                  : 0.5 * static_cast<double>(sorted[k / 2 - 1] + sorted[k / 2]);
  return out;
}

}  // namespace nscope
