#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "feeder.hpp"
#include "io.hpp"
#include "search.hpp"

namespace critscen {

/// Indices of `space` ordered by total adopted PV (descending), ties by index.
inline std::vector<std::size_t> rank_by_total_pv(const Feeder& f, const std::vector<Bits>& space) {
  std::vector<double> pv(space.size());
  for (std::size_t i = 0; i < space.size(); ++i) pv[i] = f.total_pv_kw(space[i]);
  std::vector<std::size_t> order(space.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pv[a] > pv[b]; });
  return order;
}

/// Naive comparator: evaluates the n scenarios with the most PV. Ids refer to
/// positions in `oracle.search_space`.
inline SearchResult top_n_by_pv(const Feeder& f, const SearchResult& oracle, std::size_t n) {
  const auto order = rank_by_total_pv(f, oracle.search_space);
  std::set<std::int64_t> chosen;
  for (std::size_t i = 0; i < std::min(n, order.size()); ++i) chosen.insert(static_cast<std::int64_t>(order[i]));
  SearchResult r;
  r.stop_reason = "top_n";
  r.num_objectives = oracle.num_objectives;
  r.num_bus_objectives = oracle.num_bus_objectives;
  r.num_adopters = oracle.num_adopters;
  r.search_space = oracle.search_space;
  r.simulated = oracle.simulated;
  for (const auto& e : oracle.evaluated)
    if (chosen.count(e.id)) r.evaluated.push_back(e);
  summarize(r);
  return r;
}

/// Fraction of `critical` (bitstrings) present among `evaluated` bitstrings; 1 when empty.
inline double recovered_fraction(const std::set<std::string>& critical, const std::set<std::string>& evaluated) {
  if (critical.empty()) return 1.0;
  std::size_t hit = 0;
  for (const auto& s : critical) hit += evaluated.count(s);
  return static_cast<double>(hit) / static_cast<double>(critical.size());
}

inline std::set<std::string> bitstrings(const SearchResult& r, const std::vector<std::int64_t>& ids) {
  std::set<std::string> out;
  for (auto id : ids) out.insert(to_bitstring(r.search_space[id]));
  return out;
}

inline std::set<std::string> evaluated_bitstrings(const SearchResult& r) {
  std::set<std::string> out;
  for (const auto& e : r.evaluated) out.insert(to_bitstring(r.search_space[e.id]));
  return out;
}

inline std::set<std::string> critical_bitstrings(const SearchResult& r) {
  auto s = bitstrings(r, r.bus_critical);
  auto l = bitstrings(r, r.line_critical);
  s.insert(l.begin(), l.end());
  return s;
}

/// Reconstructs a run from its artifact directory (search_space.txt and
/// evaluations.csv); the derived sets are recomputed.
inline SearchResult load_run(const std::filesystem::path& dir, const Feeder& f) {
  if (!std::filesystem::is_directory(dir)) throw ValidationError("run directory '" + dir.string() + "' does not exist");
  const auto sf = load_scenario_file((dir / "search_space.txt").string());
  check_scenarios_match(sf, f);
  const auto res = read_json_file((dir / "result.json").string());
  if (res.value("feeder_hash", "") != feeder_hash(f))
    throw ValidationError((dir / "result.json").string() + " belongs to a different feeder");
  SearchResult r;
  r.stop_reason = res.value("stop_reason", "");
  r.steps = res.value("steps", 0);
  r.simulated = res.value("simulated", std::uint64_t{0});
  r.num_adopters = f.num_adopters();
  r.num_bus_objectives = f.num_groups();
  r.num_objectives = f.num_groups() + f.num_lines();
  r.search_space = sf.scenarios;
  for (const auto& row : load_evaluation_log((dir / "evaluations.csv").string(), r.num_objectives)) {
    if (row.id < 0 || static_cast<std::size_t>(row.id) >= r.search_space.size() ||
        to_bitstring(r.search_space[row.id]) != row.bitstring)
      throw ValidationError((dir / "evaluations.csv").string() + ": scenario " + std::to_string(row.id) +
                            " does not match search_space.txt");
    r.evaluated.push_back({row.id, {row.stress}, {row.violations}, row.step});
  }
  summarize(r);
  return r;
}

/// Report artifacts: PV ranking with the bus-violation column, per-objective
/// maxima for oracle / search / top-N, relevance (copied from the search run)
/// and a summary.
inline ArtifactSet report_artifacts(const Feeder& f, const SearchResult& oracle, const SearchResult* search,
                                    const std::string* relevance, std::size_t top_n) {
  const std::size_t K = oracle.num_objectives;
  const std::size_t P = oracle.num_bus_objectives;
  const SearchResult top = top_n_by_pv(f, oracle, top_n);
  const auto bus_crit = bitstrings(oracle, oracle.bus_critical);
  const auto line_crit = bitstrings(oracle, oracle.line_critical);
  const auto crit = critical_bitstrings(oracle);
  const auto found = search ? evaluated_bitstrings(*search) : std::set<std::string>{};

  std::map<std::int64_t, const EvaluatedPoint*> by_id;
  for (const auto& e : oracle.evaluated) by_id[e.id] = &e;

  std::ostringstream rank;
  rank << "rank,scenario_id,bitstring,total_pv_kw,max_bus_violation,bus_critical,line_critical";
  if (search) rank << ",found_by_search";
  rank << '\n';
  std::size_t r = 0;
  for (std::size_t i : rank_by_total_pv(f, oracle.search_space)) {
    auto it = by_id.find(static_cast<std::int64_t>(i));
    if (it == by_id.end()) continue;  // non-converged
    const auto& v = it->second->violations.values;
    const double max_bus = P ? *std::max_element(v.begin(), v.begin() + P) : 0.0;
    const std::string bits = to_bitstring(oracle.search_space[i]);
    rank << ++r << ',' << i << ',' << bits << ',' << fmt_num(f.total_pv_kw(oracle.search_space[i])) << ','
         << fmt_num(max_bus) << ',' << bus_crit.count(bits) << ',' << line_crit.count(bits);
    if (search) rank << ',' << found.count(bits);
    rank << '\n';
  }

  std::ostringstream maxv;
  maxv << "objective_id,family,oracle,search,top_n\n";
  for (std::size_t k = 0; k < K; ++k)
    maxv << k + 1 << ',' << objective_family(k, P) << ',' << fmt_num(oracle.max_violation[k]) << ','
         << (search ? fmt_num(search->max_violation[k]) : std::string("nan")) << ','
         << fmt_num(top.max_violation[k]) << '\n';

  const auto top_eval = evaluated_bitstrings(top);
  nlohmann::json s;
  s["top_n"] = top_n;
  s["oracle_scenarios"] = oracle.search_space.size();
  s["oracle_bus_critical"] = bus_crit.size();
  s["oracle_line_critical"] = line_crit.size();
  s["oracle_critical"] = crit.size();
  s["top_n_recovered_fraction"] = recovered_fraction(crit, top_eval);
  if (search) {
    s["search_evaluations"] = search->evaluated.size();
    s["search_bus_recovered_fraction"] = recovered_fraction(bus_crit, found);
    s["search_line_recovered_fraction"] = recovered_fraction(line_crit, found);
    s["search_recovered_fraction"] = recovered_fraction(crit, found);
  }

  ArtifactSet a;
  a.add("pv_ranking.csv", rank.str());
  a.add("max_violation_comparison.csv", maxv.str());
  if (relevance) a.add("relevance.csv", *relevance);
  a.add("summary.json", json_text(s));
  return a;
}

}  // namespace critscen
