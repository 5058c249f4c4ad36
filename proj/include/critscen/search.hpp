#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "adoption.hpp"
#include "errors.hpp"
#include "feeder.hpp"
#include "parallel.hpp"
#include "pareto.hpp"
#include "powerflow.hpp"
#include "rng.hpp"
#include "surrogate.hpp"

namespace critscen {

enum class Family { Bus, Line };

inline const char* to_string(Family f) { return f == Family::Bus ? "bus" : "line"; }

struct SearchConfig {
  int n0 = 20;                    // initial evaluated scenarios
  int n_init = 300;               // extra simulations forming the first search space
  int n_expand = 50;              // fresh simulations per step
  int batch_size = 4;             // B
  int num_mc_samples = 50;        // N, joint posterior draws per acquisition
  int num_candidates = 0;         // M; 0 means |S_1|
  double tau_bar = 0.1;           // stop when max(tau_bus, tau_line) < tau_bar
  double stress_threshold = -0.02;  // s_bar < 0 for stressed objectives
  int refit_period = 5;           // N_0, steps between hyperparameter refits
  std::uint64_t seed = 0;
  int max_search_space = 0;       // cap on |S_n| (0 = unlimited)
  int max_steps = 5000;
  int fit_restarts = 5;
  int fit_max_iter = 100;
  double theta_max_factor = 1e3;  // theta_j <= factor * A
  double max_invalid_fraction = 0.1;
  int threads = 1;

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v < 1) throw ValidationError(std::string("search.") + name + " must be >= 1");
    };
    positive(n0, "n0");
    if (n_init < 0) throw ValidationError("search.n_init must be >= 0");
    if (n_expand < 0) throw ValidationError("search.n_expand must be >= 0");
    positive(batch_size, "batch_size");
    positive(num_mc_samples, "num_mc_samples");
    if (num_candidates < 0) throw ValidationError("search.num_candidates must be >= 0");
    if (!(tau_bar > 0.0)) throw ValidationError("search.tau_bar must be > 0");
    if (!(stress_threshold < 0.0)) throw ValidationError("search.stress_threshold must be < 0");
    positive(refit_period, "refit_period");
    if (max_search_space < 0) throw ValidationError("search.max_search_space must be >= 0");
    positive(max_steps, "max_steps");
    positive(fit_restarts, "fit_restarts");
    positive(fit_max_iter, "fit_max_iter");
    if (!(theta_max_factor > 0.0)) throw ValidationError("search.theta_max_factor must be > 0");
    if (!(max_invalid_fraction >= 0.0 && max_invalid_fraction <= 1.0))
      throw ValidationError("search.max_invalid_fraction must be in [0, 1]");
    positive(threads, "threads");
  }
};

// ---------------------------------------------------------------------------
// Scenario sources

/// Sequential supplier of simulated scenarios for the growing search space.
class ScenarioSource {
 public:
  virtual ~ScenarioSource() = default;
  /// Next scenario, or nullopt when the source is exhausted.
  virtual std::optional<Bits> draw() = 0;
};

/// Fresh diffusion simulations; draw i uses sub-seed derive_seed(seed, "search-diffusion", i).
class DiffusionSource final : public ScenarioSource {
 public:
  DiffusionSource(std::size_t num_adopters, DiffusionParams params, std::uint64_t seed)
      : num_adopters_(num_adopters), params_(params), seed_(seed) {
    params_.validate();
  }
  std::optional<Bits> draw() override {
    Rng rng = make_rng(derive_seed(seed_, "search-diffusion", counter_++), "diffusion");
    return simulate_trajectory(num_adopters_, params_, rng);
  }

 private:
  std::size_t num_adopters_;
  DiffusionParams params_;
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

/// Draws without replacement from a fixed database in a seeded random order.
class DatabaseSource final : public ScenarioSource {
 public:
  DatabaseSource(std::vector<Bits> database, std::uint64_t seed) : db_(std::move(database)) {
    Rng rng = make_rng(seed, "database-order");
    for (std::size_t i = db_.size(); i > 1; --i) std::swap(db_[i - 1], db_[uniform_index(rng, i)]);
  }
  std::optional<Bits> draw() override {
    if (next_ >= db_.size()) return std::nullopt;
    return db_[next_++];
  }

 private:
  std::vector<Bits> db_;
  std::size_t next_ = 0;
};

// ---------------------------------------------------------------------------
// State

struct EvaluatedPoint {
  std::int64_t id = 0;
  StressVector stress;
  ViolationVector violations;
  int step = 0;  // 0 for the initial design
};

enum class ScenarioStatus : std::uint8_t { Unevaluated, Evaluated, Invalid };

struct ObjectiveSets {
  std::vector<std::size_t> critical;  // some evaluated f_k > 0
  std::vector<std::size_t> stressed;  // max evaluated f_k > s_bar
  std::vector<std::size_t> active;    // union, restricted to one family
};

struct TraceRow {
  int step = 0;
  Family phase = Family::Bus;
  std::size_t evaluated = 0;
  std::size_t search_space = 0;
  double tau_bus = std::numeric_limits<double>::infinity();
  double tau_line = std::numeric_limits<double>::infinity();
  std::size_t active = 0;
  std::size_t batch = 0;
};

class SearchState {
 public:
  explicit SearchState(std::size_t num_objectives, std::size_t num_bus_objectives)
      : num_objectives_(num_objectives), num_bus_(num_bus_objectives) {}

  /// Adds a scenario to the search space unless an identical layout is already
  /// present. Returns the scenario id and whether it was new.
  std::pair<std::int64_t, bool> add(const Bits& bits) {
    auto key = to_bitstring(bits);
    auto [it, inserted] = index_.emplace(std::move(key), static_cast<std::int64_t>(space_.size()));
    if (inserted) {
      space_.push_back(bits);
      status_.push_back(ScenarioStatus::Unevaluated);
      counts_.push_back(0);
    }
    return {it->second, inserted};
  }

  void record(EvaluatedPoint p) {
    status_[p.id] = ScenarioStatus::Evaluated;
    evaluated_.push_back(std::move(p));
  }
  void mark_invalid(std::int64_t id) {
    status_[id] = ScenarioStatus::Invalid;
    invalid_.push_back(id);
  }

  std::size_t num_objectives() const { return num_objectives_; }
  std::size_t num_bus_objectives() const { return num_bus_; }
  const std::vector<Bits>& space() const { return space_; }
  const Bits& bits(std::int64_t id) const { return space_[id]; }
  ScenarioStatus status(std::int64_t id) const { return status_[id]; }
  const std::vector<EvaluatedPoint>& evaluated() const { return evaluated_; }
  const std::vector<std::int64_t>& invalid() const { return invalid_; }
  int candidate_count(std::int64_t id) const { return counts_[id]; }
  void bump_candidate_count(std::int64_t id) { ++counts_[id]; }

  std::vector<std::int64_t> unevaluated() const {
    std::vector<std::int64_t> out;
    for (std::size_t i = 0; i < space_.size(); ++i)
      if (status_[i] == ScenarioStatus::Unevaluated) out.push_back(static_cast<std::int64_t>(i));
    return out;
  }

  std::pair<std::size_t, std::size_t> family_range(Family f) const {
    return f == Family::Bus ? std::pair<std::size_t, std::size_t>{0, num_bus_}
                            : std::pair<std::size_t, std::size_t>{num_bus_, num_objectives_};
  }

  double tau_bus = std::numeric_limits<double>::infinity();
  double tau_line = std::numeric_limits<double>::infinity();
  Family phase = Family::Bus;
  std::uint64_t simulated = 0;
  ObjectiveSets sets;
  std::vector<TraceRow> trace;

 private:
  std::size_t num_objectives_;
  std::size_t num_bus_;
  std::vector<Bits> space_;
  std::unordered_map<std::string, std::int64_t> index_;
  std::vector<ScenarioStatus> status_;
  std::vector<int> counts_;
  std::vector<EvaluatedPoint> evaluated_;
  std::vector<std::int64_t> invalid_;
};

// ---------------------------------------------------------------------------
// Operations

inline ObjectiveSets detect_active_objectives(const SearchState& state, double stress_threshold, Family family) {
  if (state.evaluated().empty()) throw ValidationError("detect_active_objectives: no evaluations");
  const std::size_t K = state.num_objectives();
  std::vector<double> best(K, -std::numeric_limits<double>::infinity());
  for (const auto& e : state.evaluated())
    for (std::size_t k = 0; k < K; ++k) best[k] = std::max(best[k], e.stress.values[k]);
  ObjectiveSets s;
  const auto [lo, hi] = state.family_range(family);
  for (std::size_t k = 0; k < K; ++k) {
    if (best[k] > 0.0) s.critical.push_back(k);
    if (best[k] > stress_threshold) s.stressed.push_back(k);
    if (k >= lo && k < hi && (best[k] > 0.0 || best[k] > stress_threshold)) s.active.push_back(k);
  }
  return s;
}

/// Weighted sampling without replacement from the unevaluated scenarios with
/// weight 1 / (1 + times previously sampled). Increments the counts of the
/// chosen scenarios. Returns ids in ascending order; empty means exhaustion.
inline std::vector<std::int64_t> sample_candidates(SearchState& state, std::size_t M, std::uint64_t seed) {
  const auto pool = state.unevaluated();
  if (pool.empty()) return {};
  std::vector<std::int64_t> chosen;
  if (M >= pool.size()) {
    chosen = pool;
  } else {
    // Efraimidis-Spirakis: keep the M largest u^(1/w).
    Rng rng = make_rng(seed, "candidate-sampling");
    std::vector<std::pair<double, std::int64_t>> keyed;
    keyed.reserve(pool.size());
    for (std::int64_t id : pool) {
      const double w = 1.0 / (1.0 + state.candidate_count(id));
      double u = uniform01(rng);
      while (u <= 0.0) u = uniform01(rng);
      keyed.emplace_back(std::log(u) / w, id);
    }
    std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(M), keyed.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    for (std::size_t i = 0; i < M; ++i) chosen.push_back(keyed[i].second);
    std::sort(chosen.begin(), chosen.end());
  }
  for (std::int64_t id : chosen) state.bump_candidate_count(id);
  return chosen;
}

/// Probability-of-non-domination acquisition from joint posterior draws.
///
/// `posteriors[o]` is the joint posterior over the M candidates for objective
/// `objectives[o]`. `fixed_points` holds the violation vectors of already
/// evaluated scenarios projected onto the same objectives. For each of the N
/// joint draws the sampled stresses are mapped to violations and the Pareto
/// set of (fixed points + sampled candidates) is formed; alpha_m is the
/// fraction of draws in which candidate m is in that set with at least one
/// positive violation.
inline std::vector<double> alpha_from_posteriors(const std::vector<JointPosterior>& posteriors,
                                                 const std::vector<std::size_t>& objectives,
                                                 std::size_t num_bus_objectives, const ViolationConfig& vcfg,
                                                 const std::vector<std::vector<double>>& fixed_points,
                                                 int num_samples, std::uint64_t seed) {
  if (posteriors.empty() || posteriors.size() != objectives.size())
    throw ValidationError("acquisition needs one posterior per active objective");
  const std::size_t K = objectives.size();
  const Eigen::Index M = posteriors.front().mean.size();
  for (const auto& p : posteriors)
    if (p.mean.size() != M) throw ValidationError("acquisition: posteriors disagree on candidate count");

  std::vector<std::vector<double>> front;
  if (!fixed_points.empty())
    for (std::size_t i : pareto_set(fixed_points)) front.push_back(fixed_points[i]);

  std::vector<Eigen::MatrixXd> draws(K);
  for (std::size_t o = 0; o < K; ++o)
    draws[o] = sample_joint(posteriors[o], num_samples, derive_seed(seed, "alpha-draws", objectives[o]));

  std::vector<double> alpha(static_cast<std::size_t>(M), 0.0);
  std::vector<std::vector<double>> points(front.size() + static_cast<std::size_t>(M), std::vector<double>(K));
  std::copy(front.begin(), front.end(), points.begin());
  for (int i = 0; i < num_samples; ++i) {
    for (Eigen::Index m = 0; m < M; ++m)
      for (std::size_t o = 0; o < K; ++o)
        points[front.size() + static_cast<std::size_t>(m)][o] =
            objective_violation(objectives[o], draws[o](i, m), num_bus_objectives, vcfg);
    for (std::size_t idx : pareto_set(points)) {
      if (idx < front.size()) continue;
      if (has_positive(points[idx])) alpha[idx - front.size()] += 1.0;
    }
  }
  for (double& a : alpha) a /= num_samples;
  return alpha;
}

inline std::vector<double> acquisition_alpha_nd(const std::vector<const GPSurrogate*>& gps,
                                                const std::vector<std::size_t>& objectives,
                                                const std::vector<Bits>& candidates,
                                                std::size_t num_bus_objectives, const ViolationConfig& vcfg,
                                                const std::vector<std::vector<double>>& fixed_points,
                                                int num_samples, std::uint64_t seed) {
  std::vector<JointPosterior> posts;
  posts.reserve(gps.size());
  for (const auto* gp : gps) posts.push_back(gp->posterior(candidates));
  return alpha_from_posteriors(posts, objectives, num_bus_objectives, vcfg, fixed_points, num_samples, seed);
}

/// Sum of alpha over a subsample of unevaluated scenarios; approximates the
/// probability that a critical scenario has been missed.
inline double stopping_criterion(const std::vector<double>& alpha) {
  return std::accumulate(alpha.begin(), alpha.end(), 0.0);
}

/// Up to B candidates with the highest positive alpha; ties go to the lower id.
inline std::vector<std::int64_t> select_batch(const std::vector<double>& alpha, const std::vector<std::int64_t>& ids,
                                              std::size_t B) {
  if (alpha.size() != ids.size()) throw ValidationError("select_batch: alpha/candidate size mismatch");
  if (B < 1) throw ValidationError("select_batch: batch size must be >= 1");
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < alpha.size(); ++i)
    if (alpha[i] > 0.0) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return alpha[a] > alpha[b] || (alpha[a] == alpha[b] && ids[a] < ids[b]);
  });
  std::vector<std::int64_t> batch;
  for (std::size_t i = 0; i < order.size() && batch.size() < B; ++i)
    if (std::find(batch.begin(), batch.end(), ids[order[i]]) == batch.end()) batch.push_back(ids[order[i]]);
  return batch;
}

// ---------------------------------------------------------------------------
// Results

struct SearchResult {
  std::string stop_reason;  // converged | exhausted | max_steps | oracle
  int steps = 0;
  std::size_t num_objectives = 0;
  std::size_t num_bus_objectives = 0;
  std::size_t num_adopters = 0;
  std::uint64_t simulated = 0;        // scenario draws, duplicates included
  std::vector<Bits> search_space;     // distinct scenarios; id = position
  std::vector<EvaluatedPoint> evaluated;
  std::vector<std::int64_t> invalid;
  std::vector<std::int64_t> violating;      // evaluated with some f_k > 0
  std::vector<std::int64_t> bus_critical;   // critical w.r.t. bus objectives
  std::vector<std::int64_t> line_critical;  // critical w.r.t. line objectives
  std::vector<std::size_t> critical_objectives;  // some evaluated V_k > 0
  std::vector<double> max_violation;
  std::vector<double> max_stress;
  std::vector<TraceRow> trace;
  std::map<std::size_t, KernelParams> kernel_params;  // latest fit per objective

  std::size_t search_space_size() const { return search_space.size(); }
};

/// Critical scenario ids among `evaluated` with respect to objectives [lo, hi).
inline std::vector<std::int64_t> family_critical(const std::vector<EvaluatedPoint>& evaluated, std::size_t lo,
                                                 std::size_t hi) {
  if (evaluated.empty() || lo >= hi) return {};
  std::vector<std::vector<double>> pts;
  pts.reserve(evaluated.size());
  for (const auto& e : evaluated) pts.emplace_back(e.violations.values.begin() + lo, e.violations.values.begin() + hi);
  std::vector<std::int64_t> ids;
  for (std::size_t i : critical_set(pts)) ids.push_back(evaluated[i].id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// Fills the derived fields (critical sets, maxima, violating set) of a result
/// from its evaluation table.
inline void summarize(SearchResult& r) {
  const std::size_t K = r.num_objectives;
  r.max_violation.assign(K, 0.0);
  r.max_stress.assign(K, -std::numeric_limits<double>::infinity());
  r.violating.clear();
  for (const auto& e : r.evaluated) {
    bool violates = false;
    for (std::size_t k = 0; k < K; ++k) {
      r.max_violation[k] = std::max(r.max_violation[k], e.violations.values[k]);
      r.max_stress[k] = std::max(r.max_stress[k], e.stress.values[k]);
      violates = violates || e.stress.values[k] > 0.0;
    }
    if (violates) r.violating.push_back(e.id);
  }
  std::sort(r.violating.begin(), r.violating.end());
  r.critical_objectives.clear();
  for (std::size_t k = 0; k < K; ++k)
    if (r.max_violation[k] > 0.0) r.critical_objectives.push_back(k);
  r.bus_critical = family_critical(r.evaluated, 0, r.num_bus_objectives);
  r.line_critical = family_critical(r.evaluated, r.num_bus_objectives, K);
}

/// Evaluates every scenario. Scenario i gets id i. Fronts are exact for the set.
inline SearchResult brute_force_oracle(const Evaluator& evaluator, const std::vector<Bits>& scenarios,
                                       std::size_t max_scenarios = 100000, int threads = 1) {
  if (scenarios.size() > max_scenarios)
    throw ValidationError("brute_force_oracle: " + std::to_string(scenarios.size()) +
                          " scenarios exceed the budget of " + std::to_string(max_scenarios));
  SearchResult r;
  r.stop_reason = "oracle";
  r.num_objectives = evaluator.num_objectives();
  r.num_bus_objectives = evaluator.num_bus_objectives();
  r.num_adopters = evaluator.num_adopters();
  r.search_space = scenarios;
  r.simulated = scenarios.size();
  std::vector<Evaluation> evals(scenarios.size());
  parallel_for(scenarios.size(), threads, [&](std::size_t i) { evals[i] = evaluator.evaluate(scenarios[i]); });
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    if (!evals[i].converged) {
      r.invalid.push_back(static_cast<std::int64_t>(i));
      continue;
    }
    r.evaluated.push_back({static_cast<std::int64_t>(i), std::move(evals[i].stress), std::move(evals[i].violations), 0});
  }
  summarize(r);
  return r;
}

// ---------------------------------------------------------------------------
// Orchestration

namespace detail {

struct ObjectiveModel {
  std::optional<KernelParams> params;
  int last_fit_step = 0;
};

}  // namespace detail

/// Bayesian-optimization search for critical scenarios.
///
/// Each step alternates between the bus and line objective families. For the
/// current family it determines the active objectives, (re)builds one GP per
/// active objective, scores M candidates with the non-domination acquisition,
/// evaluates the top-B batch, estimates the stopping statistic on a disjoint
/// subsample of unevaluated scenarios and grows the search space. The loop
/// stops when max(tau_bus, tau_line) < tau_bar, when no unevaluated scenario
/// is left, or after max_steps.
inline SearchResult run_search(const Evaluator& evaluator, ScenarioSource& source, const SearchConfig& cfg,
                               std::ostream* log = nullptr) {
  cfg.validate();
  const std::size_t K = evaluator.num_objectives();
  const std::size_t P = evaluator.num_bus_objectives();
  const std::size_t A = evaluator.num_adopters();
  const ViolationConfig& vcfg = evaluator.violation_config();
  SearchState state(K, P);
  std::size_t attempted = 0;

  auto at_cap = [&] { return cfg.max_search_space > 0 && state.space().size() >= static_cast<std::size_t>(cfg.max_search_space); };
  auto expand = [&](int draws) {
    std::size_t added = 0;
    for (int d = 0; d < draws && !at_cap(); ++d) {
      auto bits = source.draw();
      if (!bits) break;
      ++state.simulated;
      if (state.add(*bits).second) ++added;
    }
    return added;
  };
  auto evaluate_ids = [&](const std::vector<std::int64_t>& ids, int step) {
    std::vector<Evaluation> evals(ids.size());
    parallel_for(ids.size(), cfg.threads, [&](std::size_t i) { evals[i] = evaluator.evaluate(state.bits(ids[i])); });
    for (std::size_t i = 0; i < ids.size(); ++i) {
      ++attempted;
      if (!evals[i].converged) {
        state.mark_invalid(ids[i]);
        if (log) *log << "step " << step << ": power flow did not converge for scenario " << ids[i] << ", skipped\n";
        continue;
      }
      state.record({ids[i], std::move(evals[i].stress), std::move(evals[i].violations), step});
    }
    if (attempted >= 10 && static_cast<double>(state.invalid().size()) > cfg.max_invalid_fraction * static_cast<double>(attempted))
      throw NumericalError("power flow failed on " + std::to_string(state.invalid().size()) + " of " +
                           std::to_string(attempted) + " evaluated scenarios");
  };

  // Initial design: n0 distinct simulated scenarios, all evaluated.
  {
    std::vector<std::int64_t> init;
    for (int tries = 0; static_cast<int>(init.size()) < cfg.n0 && tries < 100 * cfg.n0 && !at_cap(); ++tries) {
      auto bits = source.draw();
      if (!bits) break;
      ++state.simulated;
      auto [id, fresh] = state.add(*bits);
      if (fresh) init.push_back(id);
    }
    evaluate_ids(init, 0);
    if (state.evaluated().empty()) throw NumericalError("no initial scenario could be evaluated");
  }
  expand(cfg.n_init);
  const std::size_t M = cfg.num_candidates > 0 ? static_cast<std::size_t>(cfg.num_candidates) : state.space().size();

  std::vector<detail::ObjectiveModel> models(K);
  SearchResult result;
  result.stop_reason = "max_steps";
  const KernelParams default_init = KernelParams::isotropic(A, 2.0, 1.0, 1e-3);

  int step = 1;
  for (; step <= cfg.max_steps; ++step) {
    const Family phase = step % 2 == 1 ? Family::Bus : Family::Line;
    state.phase = phase;
    double& tau = phase == Family::Bus ? state.tau_bus : state.tau_line;

    if (state.unevaluated().empty() && expand(cfg.n_expand) == 0) {
      result.stop_reason = "exhausted";
      break;
    }

    state.sets = detect_active_objectives(state, cfg.stress_threshold, phase);
    const auto& active = state.sets.active;
    std::vector<std::int64_t> batch;

    if (active.empty()) {
      tau = 0.0;
    } else {
      // Training data shared by every active objective.
      std::vector<Bits> train_x;
      train_x.reserve(state.evaluated().size());
      for (const auto& e : state.evaluated()) train_x.push_back(state.bits(e.id));

      std::vector<std::optional<GPSurrogate>> gps(active.size());
      parallel_for(active.size(), cfg.threads, [&](std::size_t o) {
        const std::size_t k = active[o];
        std::vector<double> y;
        y.reserve(train_x.size());
        for (const auto& e : state.evaluated()) y.push_back(e.stress.values[k]);
        auto& model = models[k];
        const bool refit = !model.params || step - model.last_fit_step >= cfg.refit_period;
        if (refit && train_x.size() >= 2) {
          FitOptions fo;
          fo.restarts = cfg.fit_restarts;
          fo.max_iter = cfg.fit_max_iter;
          fo.theta_max_factor = cfg.theta_max_factor;
          fo.seed = derive_seed(cfg.seed, "hyperparameter-fit", static_cast<std::uint64_t>(step) * K + k);
          model.params = fit_hyperparameters(train_x, y, model.params.value_or(default_init), fo);
          model.last_fit_step = step;
        } else if (!model.params) {
          model.params = default_init;
          model.last_fit_step = step;
        }
        gps[o].emplace(train_x, y, *model.params);
      });
      std::vector<const GPSurrogate*> gp_ptrs;
      for (const auto& g : gps) gp_ptrs.push_back(&*g);

      std::vector<std::vector<double>> fixed;
      fixed.reserve(state.evaluated().size());
      for (const auto& e : state.evaluated()) {
        std::vector<double> v(active.size());
        for (std::size_t o = 0; o < active.size(); ++o) v[o] = e.violations.values[active[o]];
        fixed.push_back(std::move(v));
      }

      const auto cand = sample_candidates(state, M, derive_seed(cfg.seed, "candidates", static_cast<std::uint64_t>(step)));
      std::vector<Bits> cand_bits;
      for (auto id : cand) cand_bits.push_back(state.bits(id));
      const auto alpha = acquisition_alpha_nd(gp_ptrs, active, cand_bits, P, vcfg, fixed, cfg.num_mc_samples,
                                              derive_seed(cfg.seed, "acquisition", static_cast<std::uint64_t>(step)));
      batch = select_batch(alpha, cand, static_cast<std::size_t>(cfg.batch_size));

      // Stopping statistic on unevaluated scenarios outside the candidate set,
      // topped up from the non-selected candidates when too few remain.
      std::vector<std::int64_t> pool, overlap;
      for (auto id : state.unevaluated()) {
        if (std::find(batch.begin(), batch.end(), id) != batch.end()) continue;
        (std::binary_search(cand.begin(), cand.end(), id) ? overlap : pool).push_back(id);
      }
      Rng srng = make_rng(cfg.seed, "stop-subsample", static_cast<std::uint64_t>(step));
      for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[uniform_index(srng, i)]);
      if (pool.size() > M) pool.resize(M);
      for (std::size_t i = overlap.size(); i > 1; --i) std::swap(overlap[i - 1], overlap[uniform_index(srng, i)]);
      for (std::size_t i = 0; pool.size() < M && i < overlap.size(); ++i) pool.push_back(overlap[i]);
      std::sort(pool.begin(), pool.end());
      if (pool.empty()) {
        tau = 0.0;
      } else {
        std::vector<Bits> sub_bits;
        for (auto id : pool) sub_bits.push_back(state.bits(id));
        const auto sub_alpha = acquisition_alpha_nd(gp_ptrs, active, sub_bits, P, vcfg, fixed, cfg.num_mc_samples,
                                                    derive_seed(cfg.seed, "stopping", static_cast<std::uint64_t>(step)));
        tau = stopping_criterion(sub_alpha);
      }
      evaluate_ids(batch, step);
    }

    expand(cfg.n_expand);
    TraceRow row;
    row.step = step;
    row.phase = phase;
    row.evaluated = state.evaluated().size();
    row.search_space = state.space().size();
    row.tau_bus = state.tau_bus;
    row.tau_line = state.tau_line;
    row.active = active.size();
    row.batch = batch.size();
    state.trace.push_back(row);
    if (log)
      *log << "step " << step << " [" << to_string(phase) << "] active=" << active.size() << " batch=" << batch.size()
           << " n=" << row.evaluated << " |S|=" << row.search_space << " tau_bus=" << state.tau_bus
           << " tau_line=" << state.tau_line << '\n';
    if (std::max(state.tau_bus, state.tau_line) < cfg.tau_bar) {
      result.stop_reason = "converged";
      break;
    }
  }

  result.steps = std::min(step, cfg.max_steps);
  result.num_objectives = K;
  result.num_bus_objectives = P;
  result.num_adopters = A;
  result.simulated = state.simulated;
  result.search_space = state.space();
  result.evaluated = state.evaluated();
  result.invalid = state.invalid();
  std::sort(result.invalid.begin(), result.invalid.end());
  result.trace = state.trace;
  summarize(result);

  // Relevance needs a fitted kernel for every critical objective.
  std::vector<Bits> train_x;
  for (const auto& e : result.evaluated) train_x.push_back(result.search_space[e.id]);
  for (std::size_t k : result.critical_objectives) {
    if (!models[k].params && train_x.size() >= 2) {
      std::vector<double> y;
      for (const auto& e : result.evaluated) y.push_back(e.stress.values[k]);
      FitOptions fo;
      fo.restarts = cfg.fit_restarts;
      fo.max_iter = cfg.fit_max_iter;
      fo.theta_max_factor = cfg.theta_max_factor;
      fo.seed = derive_seed(cfg.seed, "final-fit", k);
      models[k].params = fit_hyperparameters(train_x, y, default_init, fo);
    }
    if (models[k].params) result.kernel_params.emplace(k, *models[k].params);
  }
  return result;
}

}  // namespace critscen
