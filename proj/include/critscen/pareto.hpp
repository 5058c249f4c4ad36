#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"

namespace critscen {

/// a dominates b iff a >= b componentwise and a != b (violations are maximized).
inline bool dominates(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw ValidationError("dominates: length mismatch (" + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()) + ")");
  bool strict = false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (a[k] < b[k]) return false;
    if (a[k] > b[k]) strict = true;
  }
  return strict;
}

inline bool has_positive(std::span<const double> v) {
  return std::any_of(v.begin(), v.end(), [](double x) { return x > 0.0; });
}

/// Indices of the non-dominated points, ascending. Exact duplicates of a
/// non-dominated point are all kept.
///
/// Any dominator of p is lexicographically greater than p, so scanning in
/// descending lexicographic order means each point only needs to be checked
/// against the front accumulated so far.
inline std::vector<std::size_t> pareto_set(const std::vector<std::vector<double>>& points) {
  if (points.empty()) throw ValidationError("pareto_set: empty input");
  const std::size_t K = points.front().size();
  for (const auto& p : points)
    if (p.size() != K) throw ValidationError("pareto_set: points have different lengths");

  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return points[a] > points[b]; });
  std::vector<std::size_t> front;
  for (std::size_t i : order) {
    bool dominated = false;
    for (std::size_t j : front) {
      if (dominates(points[j], points[i])) {
        dominated = true;
        break;
      }
    }
    if (!dominated) front.push_back(i);
  }
  std::sort(front.begin(), front.end());
  return front;
}

/// Non-dominated points that also carry at least one strictly positive
/// violation. An all-zero point is never critical.
inline std::vector<std::size_t> critical_set(const std::vector<std::vector<double>>& points) {
  auto front = pareto_set(points);
  std::erase_if(front, [&](std::size_t i) { return !has_positive(points[i]); });
  return front;
}

inline bool is_critical(std::size_t index, const std::vector<std::vector<double>>& points) {
  if (index >= points.size()) throw ValidationError("is_critical: index out of range");
  if (!has_positive(points[index])) return false;
  for (const auto& q : points)
    if (dominates(q, points[index])) return false;
  return true;
}

/// Running set of mutually non-dominated violation vectors restricted to a
/// fixed list of objectives. Only points with some positive entry are admitted.
class ParetoArchive {
 public:
  struct Member {
    std::int64_t scenario_id;
    std::vector<double> values;
  };

  ParetoArchive() = default;
  explicit ParetoArchive(std::vector<std::size_t> objective_ids) : objective_ids_(std::move(objective_ids)) {}

  const std::vector<std::size_t>& objective_ids() const { return objective_ids_; }
  const std::vector<Member>& members() const { return members_; }
  bool empty() const { return members_.empty(); }

  /// `full` is a complete violation vector; it is projected onto objective_ids().
  /// Returns true if the point joined the archive.
  bool insert(std::int64_t scenario_id, std::span<const double> full) {
    std::vector<double> v(objective_ids_.size());
    for (std::size_t i = 0; i < objective_ids_.size(); ++i) v[i] = full[objective_ids_[i]];
    if (!has_positive(v)) return false;
    for (const auto& m : members_)
      if (dominates(m.values, v)) return false;
    std::erase_if(members_, [&](const Member& m) { return dominates(v, m.values); });
    members_.push_back({scenario_id, std::move(v)});
    return true;
  }

 private:
  std::vector<std::size_t> objective_ids_;
  std::vector<Member> members_;
};

}  // namespace critscen
