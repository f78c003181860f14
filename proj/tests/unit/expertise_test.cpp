#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "neuronscope/expertise.hpp"
#include "support/oracles.hpp"
#include "support/panels.hpp"

namespace nscope {
namespace {

Expertise expertise_of(std::vector<double> aps, double gamma) { return concept_expertise(aps, gamma); }

TEST(ConceptExpertise, DirectCount) {
  const auto e = expertise_of({0.99, 0.998, 0.95}, 0.997);
  EXPECT_DOUBLE_EQ(e.fraction, 1.0 / 3.0);
  EXPECT_EQ(e.acquired, 1u);
  EXPECT_EQ(e.concepts, 3u);
}

TEST(ConceptExpertise, InclusiveThreshold) {
  EXPECT_EQ(expertise_of({0.9, 0.8999}, 0.9).acquired, 1u);
  const auto all = expertise_of({0.5, 0.7, 1.0}, 0.5);
  EXPECT_DOUBLE_EQ(all.fraction, 1.0);
  EXPECT_EQ(all.acquired, 3u);
}

TEST(ConceptExpertise, SenseCountsOfTheLargeGptModel) {
  std::vector<double> aps(1344, 0.99);
  std::fill_n(aps.begin(), 202, 0.998);
  const auto e = concept_expertise(aps, 0.997);
  EXPECT_EQ(e.acquired, 202u);
  EXPECT_NEAR(100.0 * e.fraction, 15.03, 0.005);
}

TEST(ConceptExpertise, Errors) {
  EXPECT_THROW(expertise_of({}, 0.9), Error);
  EXPECT_THROW(expertise_of({0.9}, 0.49), Error);
  EXPECT_THROW(expertise_of({0.9}, 1.0), Error);
}

TEST(ConceptExpertise, NonIncreasingInGamma) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> aps(100);
    for (auto& v : aps) v = u(rng);
    double prev = 2.0;
    for (double g = 0.5; g < 0.9995; g += 0.001) {
      const double x = concept_expertise(aps, g).fraction;
      EXPECT_LE(x, prev);
      prev = x;
    }
  }
}

TEST(CombinedExpertise, TableRows) {
  EXPECT_NEAR(100 * combined_expertise({0.1503, 1344}, {0.0337, 297}), 12.92, 0.01);
  EXPECT_NEAR(100 * combined_expertise({0.1786, 1344}, {0.0404, 297}), 15.36, 0.01);
  // The acquired counts give the same value.
  EXPECT_NEAR(100.0 * (202 + 10) / 1641.0, 12.92, 0.005);
}

TEST(CombinedExpertise, EqualFractions) {
  EXPECT_DOUBLE_EQ(combined_expertise({0.25, 10}, {0.25, 990}), 0.25);
}

TEST(CombinedExpertise, LiesBetweenCategories) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> n(1, 2000);
  for (int i = 0; i < 500; ++i) {
    const CategoryExpertise a{u(rng), n(rng)}, b{u(rng), n(rng)};
    const double c = combined_expertise(a, b);
    EXPECT_GE(c, std::min(a.fraction, b.fraction) - 1e-15);
    EXPECT_LE(c, std::max(a.fraction, b.fraction) + 1e-15);
  }
}

TEST(PearsonR2, Examples) {
  const std::vector<double> x{1, 2, 3};
  EXPECT_NEAR(pearson_r2(x, std::vector<double>{2, 4, 6}), 1.0, 1e-15);
  EXPECT_NEAR(pearson_r2(x, std::vector<double>{1, 1, 2}), 0.75, 1e-15);
  try {
    pearson_r2(x, std::vector<double>{5, 5, 5});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ZeroVariance);
  }
  try {
    pearson_r2(x, std::vector<double>{1, 2, 3, 4});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LengthMismatch);
  }
}

TEST(PearsonR2, AffineInvarianceAndOracle) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0, 1);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> x(8), y(8);
    for (auto& v : x) v = nd(rng);
    for (auto& v : y) v = nd(rng);
    const double r2 = pearson_r2(x, y);
    EXPECT_NEAR(r2, testing::sample_pearson_r2(x, y), 1e-10);
    auto xa = x, ya = y;
    for (auto& v : xa) v = 3.5 * v - 2.0;
    for (auto& v : ya) v = 0.25 * v + 7.0;
    EXPECT_NEAR(pearson_r2(xa, ya), r2, 1e-12);
  }
}

TEST(GammaSearch, RecoversPlantedOptimum) {
  const auto panel = testing::planted_panel();
  for (double step : {0.001, 0.005, 0.01}) {
    const auto r = gamma_search(panel, ConceptCategory::Sense, {.grid_step = step});
    EXPECT_NEAR(r.gamma_star, 0.9, step + 1e-12) << "step " << step;
    double best = 0.0;
    for (const auto& [g, v] : r.curve) best = std::max(best, v);
    EXPECT_NEAR(best, 1.0, 1e-12);
  }
}

TEST(GammaSearch, FlatObjectivePicksLargestGamma) {
  auto panel = testing::planted_panel();
  for (auto& m : panel.models) m.best_aps[ConceptCategory::Sense] = {0.7, 0.7};
  const auto r = gamma_search(panel, ConceptCategory::Sense);
  EXPECT_DOUBLE_EQ(r.gamma_star, 0.999);
}

TEST(GammaSearch, DeterministicAndJobsIndependent) {
  const auto panel = testing::noisy_panel(4);
  const auto a = gamma_search(panel, ConceptCategory::Sense, {.jobs = 1});
  const auto b = gamma_search(panel, ConceptCategory::Sense, {.jobs = 4});
  EXPECT_EQ(a.gamma_star, b.gamma_star);
  EXPECT_EQ(a.curve, b.curve);
  std::vector<std::size_t> all{0, 1, 2, 3};
  EXPECT_NEAR(a.gamma_star, testing::oracle_gamma_star(panel, all, 0.001), 1e-12);
}

TEST(GammaSearch, MissingValuesAndIncludeList) {
  auto panel = testing::planted_panel(2);
  panel.models.push_back(panel.models[0]);
  panel.models.back().id = "m4";
  panel.tasks[0].values.push_back(std::nullopt);
  panel.tasks[1].values.push_back(100.0);
  panel.tasks[1].name = "other";
  const auto r = gamma_search(panel, ConceptCategory::Sense, {.include_tasks = {"task0"}});
  EXPECT_NEAR(r.gamma_star, 0.9, 1e-12);
}

TEST(GammaSearch, TooFewModels) {
  auto panel = testing::planted_panel();
  panel.models.resize(2);
  for (auto& t : panel.tasks) t.values.resize(2);
  EXPECT_THROW(gamma_search(panel, ConceptCategory::Sense), Error);
}

TEST(GammaRobustness, IdenticalTasksGiveZero) {
  const auto panel = testing::planted_panel(5);
  EXPECT_EQ(gamma_robustness(panel, ConceptCategory::Sense, {}, {.seed = 17}), 0.0);
}

TEST(GammaRobustness, MatchesIndependentSplitLoop) {
  const auto panel = testing::noisy_panel(8);
  for (std::uint64_t seed : {0u, 1u, 99u}) {
    const double got = gamma_robustness(panel, ConceptCategory::Sense, {.grid_step = 0.002},
                                        {.splits = 10, .reference_ratio = 0.6, .seed = seed});
    EXPECT_NEAR(got, testing::oracle_robustness(panel, 10, 0.6, seed, 0.002), 1e-12);
    EXPECT_EQ(got, gamma_robustness(panel, ConceptCategory::Sense, {.grid_step = 0.002},
                                    {.splits = 10, .reference_ratio = 0.6, .seed = seed}));
  }
}

TEST(GammaRobustness, NeedsTwoTasks) {
  EXPECT_THROW(gamma_robustness(testing::planted_panel(1), ConceptCategory::Sense), Error);
}

TEST(TaskPanelCsv, ParsesBlanksAsMissing) {
  std::istringstream in(
      "model,task,metric,value\n"
      "a,CoLA,mcc,50\nb,CoLA,mcc,55\nc,CoLA,mcc,\n"
      "a,SQuAD,f1,80\nb,SQuAD,f1,81\nc,SQuAD,f1,82\n");
  const auto p = parse_task_panel(in);
  ASSERT_EQ(p.models.size(), 3u);
  ASSERT_EQ(p.tasks.size(), 2u);
  EXPECT_EQ(p.tasks[0].name, "CoLA/mcc");
  EXPECT_FALSE(p.tasks[0].values[2].has_value());
  EXPECT_DOUBLE_EQ(*p.tasks[1].values[2], 82.0);
}

TEST(TaskPanelCsv, RejectsBadHeader) {
  std::istringstream in("model,task,value\n");
  EXPECT_THROW(parse_task_panel(in), Error);
}

TEST(BestApCsv, GroupsByCategory) {
  std::istringstream in(
      "concept_id,category,best_ap\n"
      "a%1:00:00,sense,0.99\n"
      "a%1:00:00 VS. a%1:00:01,homograph,0.5\n"
      "b%1:00:00,sense,0.7\n");
  const auto m = parse_best_aps(in);
  EXPECT_EQ(m.at(ConceptCategory::Sense), (std::vector<double>{0.99, 0.7}));
  EXPECT_EQ(m.at(ConceptCategory::Homograph), (std::vector<double>{0.5}));
}

ApTable table(const UnitCatalog& cat, double fill) {
  return {"c", cat, std::vector<double>(cat.total_units(), fill)};
}

TEST(LayerDistribution, SingleAcquiringUnit) {
  const UnitCatalog cat(2, 2);
  auto t = table(cat, 0.5);
  t.ap[cat.flatten({1, UnitKind::B, 3})] = 0.97;
  const ApTable tables[] = {t};
  const auto d = layer_distribution(tables, 0.95);
  std::size_t nonzero = 0;
  for (auto c : d.counts) nonzero += c != 0;
  EXPECT_EQ(nonzero, 1u);
  EXPECT_EQ(d.at(1, UnitKind::B), 1u);
}

TEST(LayerDistribution, BelowThresholdRowIsZero) {
  const UnitCatalog cat(2, 2);
  const ApTable tables[] = {table(cat, 0.94)};
  for (auto c : layer_distribution(tables, 0.95).counts) EXPECT_EQ(c, 0u);
}

TEST(LayerDistribution, ConceptCountsOncePerGroup) {
  const UnitCatalog cat(2, 1);
  auto t = table(cat, 0.1);
  t.ap[cat.flatten({0, UnitKind::A, 0})] = 0.99;
  t.ap[cat.flatten({0, UnitKind::A, 5})] = 0.99;
  t.ap[cat.flatten({0, UnitKind::Bproj, 1})] = 0.96;
  const ApTable tables[] = {t, t};
  const auto d = layer_distribution(tables, 0.95);
  EXPECT_EQ(d.at(0, UnitKind::A), 2u);
  EXPECT_EQ(d.at(0, UnitKind::Bproj), 2u);
  EXPECT_EQ(d.at(0, UnitKind::B), 0u);
  std::ostringstream csv;
  write_layer_distribution_csv(d, csv);
  EXPECT_EQ(csv.str(), "block,kind,count\n0,A,2\n0,Aproj,0\n0,B,0\n0,Bproj,2\n");
}

TEST(LayerDistribution, CatalogMismatch) {
  const ApTable tables[] = {table(UnitCatalog(2, 1), 0.5), table(UnitCatalog(2, 2), 0.5)};
  EXPECT_THROW(layer_distribution(tables, 0.95), Error);
}

TEST(ExpertHistograms, SevenExperts) {
  const UnitCatalog cat(4, 1);
  auto t = table(cat, 0.3);
  for (int i = 0; i < 7; ++i) t.ap[static_cast<std::size_t>(i * 3)] = 0.96;
  const ApTable tables[] = {t};
  const auto h = expert_histograms(tables);
  EXPECT_EQ(h.experts_per_concept, (std::vector<std::size_t>{7}));
  EXPECT_DOUBLE_EQ(h.median_experts, 7.0);
  // 7 falls in the [4, 8) bin of the log-spaced count edges.
  const auto bin = std::find(h.expert_count.edges.begin(), h.expert_count.edges.end(), 4.0) -
                   h.expert_count.edges.begin();
  EXPECT_EQ(h.expert_count.counts[static_cast<std::size_t>(bin)], 1u);
  EXPECT_EQ(h.expert_count.total(), 1u);
}

TEST(ExpertHistograms, PerfectApLandsInTopBin) {
  const UnitCatalog cat(1, 1);
  const ApTable tables[] = {table(cat, 1.0), table(cat, 1.0)};
  const auto h = expert_histograms(tables);
  EXPECT_EQ(h.best_ap.counts.back(), 2u);
  EXPECT_EQ(h.best_ap.counts.size(), 50u);
}

TEST(ExpertHistograms, Conservation) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const UnitCatalog cat(3, 2);
  std::vector<ApTable> tables;
  for (int i = 0; i < 37; ++i) {
    auto t = table(cat, 0.0);
    for (auto& v : t.ap) v = u(rng);
    tables.push_back(t);
  }
  const auto h = expert_histograms(tables);
  EXPECT_EQ(h.best_ap.total(), 37u);
  EXPECT_EQ(h.expert_count.total(), 37u);
}

}  // namespace
}  // namespace nscope
