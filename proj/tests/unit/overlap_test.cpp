#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>

#include "neuronscope/overlap.hpp"

namespace nscope {
namespace {

ExpertSet set_of(std::vector<std::uint64_t> members, std::string id = "q", std::uint64_t m = 1000) {
  return {std::move(id), 0.0, m, std::move(members)};
}

ApTable table_of(std::vector<double> ap) {
  // 100 or 200 units: D = 100/9 is not integral, so the catalog is only
  // nominal here; expert sets read the AP vector alone.
  ApTable t;
  t.concept_id = "c";
  t.catalog = UnitCatalog(1, 1);
  t.ap = std::move(ap);
  return t;
}

TEST(ExpertSet, OrderStatisticByHand) {
  std::vector<double> ap(200);
  for (std::size_t m = 0; m < ap.size(); ++m) ap[m] = static_cast<double>(m) / 200.0;
  const auto s = expert_set(table_of(ap));
  // ceil(0.99 * 200) = 198th smallest value is 197 / 200.
  EXPECT_DOUBLE_EQ(s.tau, 197.0 / 200.0);
  EXPECT_EQ(s.members, (std::vector<std::uint64_t>{198, 199}));
}

TEST(ExpertSet, AllEqualIsEmpty) {
  EXPECT_TRUE(expert_set(table_of(std::vector<double>(150, 0.7))).members.empty());
}

TEST(ExpertSet, SingleStandout) {
  std::vector<double> ap(100, 0.0);
  ap[42] = 1.0;
  const auto s = expert_set(table_of(ap));
  EXPECT_EQ(s.members, (std::vector<std::uint64_t>{42}));
}

TEST(ExpertSet, NeedsHundredUnits) {
  EXPECT_THROW(expert_set(table_of(std::vector<double>(99, 0.5))), Error);
}

TEST(ExpertSet, DistinctValuesGiveExactSize) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (std::size_t m : {100u, 101u, 250u, 999u, 1000u}) {
    std::vector<double> ap(m);
    for (auto& v : ap) v = u(rng);
    const auto s = expert_set(table_of(ap));
    EXPECT_EQ(s.members.size(), m - (99 * m + 99) / 100) << m;
    EXPECT_LE(s.members.size(), m / 100 + 1);
  }
}

TEST(Overlap, HandCases) {
  EXPECT_DOUBLE_EQ(overlap(set_of({1, 2, 3}), set_of({2, 3, 4})), 0.5);
  EXPECT_DOUBLE_EQ(overlap(set_of({1, 2, 3}), set_of({1, 2, 3})), 1.0);
  EXPECT_DOUBLE_EQ(overlap(set_of({}), set_of({})), 0.0);
  EXPECT_DOUBLE_EQ(overlap(set_of({1}), set_of({2})), 0.0);
}

TEST(Overlap, MismatchedCatalog) {
  try {
    overlap(set_of({1}, "a", 100), set_of({1}, "b", 200));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MismatchedCatalog);
  }
}

std::vector<std::uint64_t> random_members(std::mt19937_64& rng, std::uint64_t m) {
  std::set<std::uint64_t> s;
  const auto n = std::uniform_int_distribution<std::size_t>(0, 30)(rng);
  while (s.size() < n) s.insert(std::uniform_int_distribution<std::uint64_t>(0, m - 1)(rng));
  return {s.begin(), s.end()};
}

TEST(Overlap, Properties) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 500; ++i) {
    auto q = set_of(random_members(rng, 60), "q", 60);
    auto v = set_of(random_members(rng, 60), "v", 60);
    const double o = overlap(q, v);
    EXPECT_DOUBLE_EQ(o, overlap(v, q));
    EXPECT_GE(o, 0.0);
    EXPECT_LE(o, 1.0);
    if (!q.members.empty()) {
      EXPECT_DOUBLE_EQ(overlap(q, q), 1.0);
    }
    for (std::uint64_t extra = 0; extra < 60; ++extra) {
      if (std::binary_search(q.members.begin(), q.members.end(), extra) &&
          std::binary_search(v.members.begin(), v.members.end(), extra))
        continue;
      auto q2 = q, v2 = v;
      for (auto* s : {&q2, &v2}) {
        if (!std::binary_search(s->members.begin(), s->members.end(), extra)) {
          s->members.insert(std::upper_bound(s->members.begin(), s->members.end(), extra), extra);
        }
      }
      EXPECT_GE(overlap(q2, v2), o);
      break;
    }
  }
}

TEST(NearestConcepts, DisjointSets) {
  const std::vector<ExpertSet> all{set_of({1, 2}, "q"), set_of({3}, "b"), set_of({4}, "a")};
  const auto n = nearest_concepts(all[0], all, 3);
  ASSERT_EQ(n.size(), 3u);
  EXPECT_EQ(n[0].concept_id, "q");
  EXPECT_DOUBLE_EQ(n[0].overlap, 1.0);
  EXPECT_EQ(n[1].concept_id, "a");
  EXPECT_EQ(n[2].concept_id, "b");
  EXPECT_DOUBLE_EQ(n[1].overlap, 0.0);
}

TEST(NearestConcepts, PlantedNeighbor) {
  std::vector<std::uint64_t> base;
  for (std::uint64_t i = 0; i < 10; ++i) base.push_back(i * 10);
  auto close = base;
  close.back() = 999;
  std::sort(close.begin(), close.end());
  const std::vector<ExpertSet> all{set_of({1, 11, 21}, "far"), set_of(close, "near"), set_of(base, "q"),
                                   set_of({0, 500, 600}, "mid")};
  const auto n = nearest_concepts(all[2], all, 2);
  EXPECT_EQ(n[0].concept_id, "q");
  EXPECT_EQ(n[1].concept_id, "near");
  EXPECT_NEAR(n[1].overlap, 9.0 / 11.0, 1e-15);
}

TEST(NearestConcepts, KOutOfRange) {
  const std::vector<ExpertSet> all{set_of({1}, "q")};
  EXPECT_THROW(nearest_concepts(all[0], all, 2), Error);
  EXPECT_THROW(nearest_concepts(all[0], all, 0), Error);
}

TEST(ExpertSetJson, RoundTripAndValidation) {
  const auto s = ExpertSet{"chair%1:06:00", 0.75, 414720, {3, 9, 414719}};
  const auto back = expert_set_from_json(nlohmann::json::parse(to_json(s).dump()));
  EXPECT_EQ(back.concept_id, s.concept_id);
  EXPECT_EQ(back.tau, s.tau);
  EXPECT_EQ(back.total_units, s.total_units);
  EXPECT_EQ(back.members, s.members);
  EXPECT_THROW(expert_set_from_json(nlohmann::json::parse(
                   R"({"concept_id":"x","tau":0.1,"M":10,"members":[3,2]})")),
               Error);
  EXPECT_THROW(expert_set_from_json(nlohmann::json::parse(R"({"concept_id":"x"})")), Error);
}

TEST(NeighborCsv, Format) {
  std::ostringstream out;
  write_neighbors_csv({{"q", 1.0}, {"b", 0.5}}, out);
  EXPECT_EQ(out.str(), "rank,concept_id,overlap\n1,q,1\n2,b,0.5\n");
}

}  // namespace
}  // namespace nscope
