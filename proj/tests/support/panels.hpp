#pragma once

// Synthetic task panels for the gamma search, plus an independent
// reimplementation of the split-robustness loop.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "neuronscope/expertise.hpp"
#include "support/oracles.hpp"

namespace nscope::testing {

// Four models with ten concepts each. AP* values sit on four levels; the
// per-model counts at each level are chosen so that X_gamma is collinear with
// the task only while gamma lies in (0.85, 0.9]:
//   n(0.95) = [1, 0, 2, 0]            X over (0.9, 0.95]
//   n(0.95) + n(0.90) = [1, 2, 3, 4]  X over (0.85, 0.9]  -> r^2 = 1
//   ... + n(0.85) = [4, 2, 3, 6]      X over (0.4, 0.85]
// Task values [4, 5, 6, 7] are linear in the middle column.
inline TaskPanel planted_panel(std::size_t task_copies = 1) {
  const int n95[] = {1, 0, 2, 0};
  const int n90[] = {0, 2, 1, 4};
  const int n85[] = {3, 0, 0, 2};
  TaskPanel p;
  for (int m = 0; m < 4; ++m) {
    PanelModel model;
    model.id = "m" + std::to_string(m);
    auto& aps = model.best_aps[ConceptCategory::Sense];
    for (int i = 0; i < n95[m]; ++i) aps.push_back(0.95);
    for (int i = 0; i < n90[m]; ++i) aps.push_back(0.9);
    for (int i = 0; i < n85[m]; ++i) aps.push_back(0.85);
    while (aps.size() < 10) aps.push_back(0.4);
    p.models.push_back(model);
  }
  for (std::size_t t = 0; t < task_copies; ++t)
    p.tasks.push_back({"task" + std::to_string(t), {4.0, 5.0, 6.0, 7.0}});
  return p;
}

// Five models, four tasks with unrelated values and random AP* spreads.
inline TaskPanel noisy_panel(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ap(0.5, 1.0);
  std::uniform_real_distribution<double> score(50.0, 90.0);
  TaskPanel p;
  for (int m = 0; m < 5; ++m) {
    PanelModel model;
    model.id = "m" + std::to_string(m);
    auto& aps = model.best_aps[ConceptCategory::Sense];
    for (int i = 0; i < 40; ++i) aps.push_back(ap(rng));
    p.models.push_back(model);
  }
  for (int t = 0; t < 4; ++t) {
    PanelTask task{"t" + std::to_string(t), {}};
    for (int m = 0; m < 5; ++m) task.values.push_back(score(rng));
    p.tasks.push_back(task);
  }
  return p;
}

// Straightforward gamma* over an explicit task subset.
inline double oracle_gamma_star(const TaskPanel& p, const std::vector<std::size_t>& tasks, double step) {
  double best_gamma = 0.0, best = -1.0;
  for (long i = 0;; ++i) {
    const double g = std::round((0.5 + static_cast<double>(i) * step) * 1e9) / 1e9;
    if (g > 0.999 + 1e-12) break;
    std::vector<double> x;
    for (const auto& m : p.models) {
      const auto& aps = m.best_aps.at(ConceptCategory::Sense);
      double hits = 0;
      for (double v : aps) hits += v >= g ? 1 : 0;
      x.push_back(hits / static_cast<double>(aps.size()));
    }
    double total = 0.0;
    for (auto t : tasks) {
      std::vector<double> xs, ys;
      for (std::size_t m = 0; m < p.models.size(); ++m)
        if (p.tasks[t].values[m]) {
          xs.push_back(x[m]);
          ys.push_back(*p.tasks[t].values[m]);
        }
      bool flat = true;
      for (double v : xs) flat = flat && v == xs.front();
      if (!flat) total += sample_pearson_r2(xs, ys);
    }
    const double mean = total / static_cast<double>(tasks.size());
    if (mean >= best - 1e-12) {
      best = std::max(best, mean);
      best_gamma = g;
    }
  }
  return best_gamma;
}

// Documented split procedure: mt19937_64 seeded with the seed, Fisher-Yates
// from the back with rejection-sampled bounded draws, first round(0.6 * T)
// tasks form the reference set.
inline double oracle_robustness(const TaskPanel& p, std::size_t splits, double ratio, std::uint64_t seed,
                                double step) {
  std::mt19937_64 rng(seed);
  auto bounded = [&](std::uint64_t bound) {
    const auto max = std::numeric_limits<std::uint64_t>::max();
    const auto limit = max - max % bound;
    std::uint64_t d;
    do d = rng();
    while (d >= limit);
    return d % bound;
  };
  const std::size_t total = p.tasks.size();
  auto ref_count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(total)));
  ref_count = std::min(std::max<std::size_t>(ref_count, 1), total - 1);
  double sq = 0.0;
  for (std::size_t s = 0; s < splits; ++s) {
    std::vector<std::size_t> order(total);
    for (std::size_t i = 0; i < total; ++i) order[i] = i;
    for (std::size_t i = total; i > 1; --i) std::swap(order[i - 1], order[bounded(i)]);
    const std::vector<std::size_t> ref(order.begin(), order.begin() + static_cast<long>(ref_count));
    const std::vector<std::size_t> test(order.begin() + static_cast<long>(ref_count), order.end());
    const double d = oracle_gamma_star(p, ref, step) - oracle_gamma_star(p, test, step);
    sq += d * d;
  }
  return std::sqrt(sq / static_cast<double>(splits));
}

}  // namespace nscope::testing
