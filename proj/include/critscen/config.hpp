#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>

#include <json.hpp>

#include "adoption.hpp"
#include "errors.hpp"
#include "feeder.hpp"
#include "powerflow.hpp"
#include "search.hpp"

namespace critscen {

/// Run configuration, a versioned JSON document:
///
///   {
///     "schema": 1,
///     "feeder": "feeder.json",          relative paths resolve against the config file
///     "scenarios": "scenarios.txt",     optional; search draws from this database
///     "output_dir": "out",              optional; --out overrides
///     "seed": 1,
///     "diffusion": {"p", "q", "horizon_steps", "initial_rate"},
///     "violation": {"line_bins": [0, 0.1, 0.25, 0.5]},
///     "powerflow": {"tolerance", "max_iter", "pv_derate"},
///     "search": {"n0", "n_init", "n_expand", "batch_size", "num_mc_samples", "num_candidates",
///                "tau_bar", "stress_threshold", "refit_period", "max_search_space", "max_steps",
///                "fit_restarts", "fit_max_iter", "theta_max_factor", "max_invalid_fraction"}
///   }
///
/// Every section and field is optional except schema and feeder. Unknown keys
/// are rejected.
struct RunConfig {
  std::string feeder_path;
  std::string scenarios_path;
  std::string output_dir;
  std::uint64_t seed = 0;
  DiffusionParams diffusion;
  ViolationConfig violation;
  PowerFlowOptions powerflow;
  SearchConfig search;

  void validate() const {
    diffusion.validate();
    violation.validate();
    powerflow.validate();
    search.validate();
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ValidationError("unknown field '" + (where.empty() ? k : where + "." + k) + "'");
}

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  const std::string name = where.empty() ? key : where + "." + key;
  if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ValidationError(name + " must be a string");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw ValidationError(name + " must be an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (v.is_number_integer() && !v.is_number_unsigned()) throw ValidationError(name + " must be >= 0");
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ValidationError(name + " must be a number");
  }
  out = v.get<T>();
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  using detail::read_field;
  using detail::reject_unknown;
  reject_unknown(j, {"schema", "feeder", "scenarios", "output_dir", "seed", "diffusion", "violation", "powerflow", "search"},
                 "");
  if (!j.contains("schema")) throw ValidationError("missing field 'schema'");
  if (!j.at("schema").is_number_integer() || j.at("schema").get<int>() != 1)
    throw ValidationError("schema: unsupported version (expected 1)");
  if (!j.contains("feeder")) throw ValidationError("missing field 'feeder'");

  RunConfig c;
  read_field(j, "feeder", c.feeder_path, "");
  read_field(j, "scenarios", c.scenarios_path, "");
  read_field(j, "output_dir", c.output_dir, "");
  read_field(j, "seed", c.seed, "");
  auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative() && !base_dir.empty()) p = (base_dir / p).lexically_normal().string();
  };
  resolve(c.feeder_path);
  resolve(c.scenarios_path);
  resolve(c.output_dir);

  if (j.contains("diffusion")) {
    const auto& d = j.at("diffusion");
    reject_unknown(d, {"p", "q", "horizon_steps", "initial_rate"}, "diffusion");
    read_field(d, "p", c.diffusion.p, "diffusion");
    read_field(d, "q", c.diffusion.q, "diffusion");
    read_field(d, "horizon_steps", c.diffusion.horizon_steps, "diffusion");
    read_field(d, "initial_rate", c.diffusion.initial_rate, "diffusion");
  }
  if (j.contains("violation")) {
    const auto& v = j.at("violation");
    reject_unknown(v, {"line_bins"}, "violation");
    if (v.contains("line_bins")) {
      if (!v.at("line_bins").is_array()) throw ValidationError("violation.line_bins must be an array");
      c.violation.line_bins.clear();
      for (const auto& x : v.at("line_bins")) {
        if (!x.is_number()) throw ValidationError("violation.line_bins must contain numbers");
        c.violation.line_bins.push_back(x.get<double>());
      }
    }
  }
  if (j.contains("powerflow")) {
    const auto& p = j.at("powerflow");
    reject_unknown(p, {"tolerance", "max_iter", "pv_derate"}, "powerflow");
    read_field(p, "tolerance", c.powerflow.tolerance, "powerflow");
    read_field(p, "max_iter", c.powerflow.max_iter, "powerflow");
    read_field(p, "pv_derate", c.powerflow.pv_derate, "powerflow");
  }
  if (j.contains("search")) {
    const auto& s = j.at("search");
    reject_unknown(s,
                   {"n0", "n_init", "n_expand", "batch_size", "num_mc_samples", "num_candidates", "tau_bar",
                    "stress_threshold", "refit_period", "max_search_space", "max_steps", "fit_restarts",
                    "fit_max_iter", "theta_max_factor", "max_invalid_fraction"},
                   "search");
    auto& sc = c.search;
    read_field(s, "n0", sc.n0, "search");
    read_field(s, "n_init", sc.n_init, "search");
    read_field(s, "n_expand", sc.n_expand, "search");
    read_field(s, "batch_size", sc.batch_size, "search");
    read_field(s, "num_mc_samples", sc.num_mc_samples, "search");
    read_field(s, "num_candidates", sc.num_candidates, "search");
    read_field(s, "tau_bar", sc.tau_bar, "search");
    read_field(s, "stress_threshold", sc.stress_threshold, "search");
    read_field(s, "refit_period", sc.refit_period, "search");
    read_field(s, "max_search_space", sc.max_search_space, "search");
    read_field(s, "max_steps", sc.max_steps, "search");
    read_field(s, "fit_restarts", sc.fit_restarts, "search");
    read_field(s, "fit_max_iter", sc.fit_max_iter, "search");
    read_field(s, "theta_max_factor", sc.theta_max_factor, "search");
    read_field(s, "max_invalid_fraction", sc.max_invalid_fraction, "search");
  }
  c.search.seed = c.seed;
  c.validate();
  return c;
}

/// Fully resolved form; config_from_json(config_to_json(c)) == c.
inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["schema"] = 1;
  j["feeder"] = c.feeder_path;
  if (!c.scenarios_path.empty()) j["scenarios"] = c.scenarios_path;
  if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
  j["seed"] = c.seed;
  j["diffusion"] = {{"p", c.diffusion.p},
                    {"q", c.diffusion.q},
                    {"horizon_steps", c.diffusion.horizon_steps},
                    {"initial_rate", c.diffusion.initial_rate}};
  j["violation"] = {{"line_bins", c.violation.line_bins}};
  j["powerflow"] = {{"tolerance", c.powerflow.tolerance},
                    {"max_iter", c.powerflow.max_iter},
                    {"pv_derate", c.powerflow.pv_derate}};
  const auto& s = c.search;
  j["search"] = {{"n0", s.n0},
                 {"n_init", s.n_init},
                 {"n_expand", s.n_expand},
                 {"batch_size", s.batch_size},
                 {"num_mc_samples", s.num_mc_samples},
                 {"num_candidates", s.num_candidates},
                 {"tau_bar", s.tau_bar},
                 {"stress_threshold", s.stress_threshold},
                 {"refit_period", s.refit_period},
                 {"max_search_space", s.max_search_space},
                 {"max_steps", s.max_steps},
                 {"fit_restarts", s.fit_restarts},
                 {"fit_max_iter", s.fit_max_iter},
                 {"theta_max_factor", s.theta_max_factor},
                 {"max_invalid_fraction", s.max_invalid_fraction}};
  return j;
}

inline RunConfig load_config(const std::string& path) {
  const auto j = read_json_file(path);
  return config_from_json(j, std::filesystem::path(path).parent_path());
}

}  // namespace critscen
