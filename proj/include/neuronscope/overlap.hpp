#pragma once

// Binary top-expert representations and the Jaccard overlap between them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuronscope/average_precision.hpp"
#include "neuronscope/error.hpp"

namespace nscope {

struct ExpertSet {
  std::string concept_id;
  double tau = 0.0;
  std::uint64_t total_units = 0;
  std::vector<std::uint64_t> members;  // sorted flattened indices with AP > tau
};

inline constexpr std::uint64_t kMinUnitsForExpertSet = 100;

// Nearest-rank 99th percentile: the ceil(0.99 * M)-th smallest AP. Membership
// is strict, so ties at tau are excluded.
inline double percentile_99(std::vector<double> values) {
  require(!values.empty(), ErrorCode::EmptyInput, "percentile of an empty vector");
  const auto m = values.size();
  // ceil(0.99 * m) computed in integers: (99 * m + 99) / 100.
  const auto rank = (99 * m + 99) / 100;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(rank - 1),
                   values.end());
  return values[rank - 1];
}

inline ExpertSet expert_set(const ApTable& table) {
  const auto total = table.ap.size();
  require(total >= kMinUnitsForExpertSet, ErrorCode::InvalidArgument,
          "expert sets need M >= 100, got " + std::to_string(total));
  ExpertSet s{table.concept_id, percentile_99(table.ap), total, {}};
  for (std::uint64_t m = 0; m < total; ++m)
    if (table.ap[m] > s.tau) s.members.push_back(m);
  return s;
}

inline std::size_t intersection_size(const std::vector<std::uint64_t>& a,
                                     const std::vector<std::uint64_t>& b) {
  std::size_t n = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

// |q & v| / |q | v|; two empty sets overlap by 0.
inline double overlap(const ExpertSet& q, const ExpertSet& v) {
  require(q.total_units == v.total_units, ErrorCode::MismatchedCatalog,
          "expert sets come from catalogs of different size");
  const auto inter = intersection_size(q.members, v.members);
  const auto uni = q.members.size() + v.members.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct Neighbor {
  std::string concept_id;
  double overlap = 0.0;
};

// Top-k concepts by overlap with the query, descending, ties by concept id.
inline std::vector<Neighbor> nearest_concepts(const ExpertSet& query, const std::vector<ExpertSet>& all,
                                              std::size_t k) {
  require(k >= 1 && k <= all.size(), ErrorCode::OutOfRange,
          "k=" + std::to_string(k) + " outside [1, " + std::to_string(all.size()) + "]");
  std::vector<Neighbor> scored;
  scored.reserve(all.size());
  for (const auto& s : all) scored.push_back({s.concept_id, overlap(query, s)});
  auto better = [](const Neighbor& a, const Neighbor& b) {
    if (a.overlap != b.overlap) return a.overlap > b.overlap;
    return a.concept_id < b.concept_id;
  };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(),
                    better);
  scored.resize(k);
  return scored;
}

inline nlohmann::ordered_json to_json(const ExpertSet& s) {
  nlohmann::ordered_json j;
  j["concept_id"] = s.concept_id;
  j["tau"] = s.tau;
  j["M"] = s.total_units;
  j["members"] = s.members;
  return j;
}

inline ExpertSet expert_set_from_json(const nlohmann::json& j) {
  try {
    ExpertSet s{j.at("concept_id").get<std::string>(), j.at("tau").get<double>(),
                j.at("M").get<std::uint64_t>(), j.at("members").get<std::vector<std::uint64_t>>()};
    require(std::is_sorted(s.members.begin(), s.members.end()) &&
                std::adjacent_find(s.members.begin(), s.members.end()) == s.members.end() &&
                (s.members.empty() || s.members.back() < s.total_units),
            ErrorCode::FormatError, "expert set members must be sorted, unique and < M");
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, std::string("bad expert set JSON: ") + e.what());
  }
}

inline void write_neighbors_csv(const std::vector<Neighbor>& neighbors, std::ostream& out) {
  out << "rank,concept_id,overlap\n";
  for (std::size_t i = 0; i < neighbors.size(); ++i)
    out << (i + 1) << ',' << neighbors[i].concept_id << ',' << detail::format_double(neighbors[i].overlap)
        << '\n';
}

}  // namespace nscope
