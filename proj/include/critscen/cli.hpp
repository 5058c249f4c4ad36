#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "adoption.hpp"
#include "config.hpp"
#include "errors.hpp"
#include "feeder.hpp"
#include "io.hpp"
#include "powerflow.hpp"
#include "report.hpp"
#include "search.hpp"

namespace critscen {

/// Process exit codes.
namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int failure = 1;
inline constexpr int usage = 2;
inline constexpr int validation = 3;
inline constexpr int numerical = 4;
inline constexpr int exhausted = 5;  // search ran out of unevaluated scenarios
inline constexpr int max_steps = 6;  // search hit search.max_steps
}  // namespace exit_code

namespace cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string absolute(const std::string& p) { return p.empty() ? p : fs::absolute(p).lexically_normal().string(); }

inline void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw UsageError(what + " is required");
  if (!fs::is_regular_file(path)) throw ValidationError(what + " '" + path + "' does not exist");
}

/// Loads a run config or, when given a manifest, the config it recorded.
inline RunConfig load_config_or_manifest(const std::string& path) {
  require_file(path, "config");
  const json j = read_json_file(path);
  if (j.contains("command") && j.contains("args")) {
    const json& a = j.at("args");
    if (!a.contains("config")) throw ValidationError(path + ": manifest has no recorded config");
    return config_from_json(a.at("config"));
  }
  return config_from_json(j, fs::path(path).parent_path());
}

inline json manifest_json(const std::string& command, const json& args, const ArtifactSet& artifacts) {
  json m;
  m["schema"] = 1;
  m["command"] = command;
  m["args"] = args;
  m["artifacts"] = artifacts.names();
  return m;
}

struct Outcome {
  ArtifactSet artifacts;
  int code = exit_code::ok;
};

// ---------------------------------------------------------------------------
// Commands. Each takes its fully resolved arguments as JSON; the same object is
// stored in manifest.json so a run can be replayed with `--manifest`.

inline Outcome make_feeder(const json& a) {
  const int buses = a.at("buses"), adopters = a.at("adopters"), groups = a.at("groups");
  if (buses < 2) throw UsageError("--buses must be >= 2");
  if (adopters < 1 || adopters >= buses) throw UsageError("--adopters must be in [1, buses - 1]");
  if (groups < 1 || groups > buses) throw UsageError("--groups must be in [1, buses]");
  const Feeder raw = generate_synthetic_feeder(buses, adopters, a.at("seed").get<std::uint64_t>());
  const Feeder f = apply_partition(raw, fallback_partition(raw, groups));
  Outcome o;
  o.artifacts.add("feeder.json", json_text(feeder_to_json(f)));
  return o;
}

inline Outcome simulate(const json& a) {
  const int count = a.at("count");
  if (count < 1) throw UsageError("--count must be >= 1");
  const std::string path = a.at("feeder");
  require_file(path, "feeder");
  const Feeder f = load_feeder(path);
  DiffusionParams d;
  d.p = a.at("diffusion").at("p");
  d.q = a.at("diffusion").at("q");
  d.horizon_steps = a.at("diffusion").at("horizon_steps");
  d.initial_rate = a.at("diffusion").at("initial_rate");
  d.validate();
  ScenarioFile sf{feeder_hash(f), f.num_adopters(), {}};
  for (auto& s : simulate_batch(f, d, count, a.at("seed").get<std::uint64_t>())) sf.scenarios.push_back(std::move(s.bits));
  Outcome o;
  o.artifacts.add("scenarios.txt", scenario_file_text(sf));
  return o;
}

inline Outcome evaluate(const json& a, int threads) {
  const RunConfig c = config_from_json(a.at("config"));
  require_file(c.feeder_path, "feeder");
  require_file(c.scenarios_path, "scenarios");
  const Feeder f = load_feeder(c.feeder_path);
  const ScenarioFile sf = load_scenario_file(c.scenarios_path);
  check_scenarios_match(sf, f);
  SweepEvaluator ev(f, feeder_partition(f), c.violation, c.powerflow);
  std::vector<Evaluation> evals(sf.scenarios.size());
  parallel_for(evals.size(), threads, [&](std::size_t i) { evals[i] = ev.evaluate(sf.scenarios[i]); });
  Outcome o;
  o.artifacts.add("evaluations.csv", evaluation_table_csv(evals, ev.num_objectives()));
  return o;
}

inline Outcome search(const json& a, int threads, std::ostream* log) {
  RunConfig c = config_from_json(a.at("config"));
  c.search.threads = threads;
  require_file(c.feeder_path, "feeder");
  const Feeder f = load_feeder(c.feeder_path);
  SweepEvaluator ev(f, feeder_partition(f), c.violation, c.powerflow);
  std::unique_ptr<ScenarioSource> source;
  if (!c.scenarios_path.empty()) {
    require_file(c.scenarios_path, "scenarios");
    ScenarioFile sf = load_scenario_file(c.scenarios_path);
    check_scenarios_match(sf, f);
    source = std::make_unique<DatabaseSource>(std::move(sf.scenarios), c.seed);
  } else {
    source = std::make_unique<DiffusionSource>(f.num_adopters(), c.diffusion, c.seed);
  }
  const SearchResult r = run_search(ev, *source, c.search, log);
  Outcome o;
  o.artifacts = run_artifacts(r, f);
  if (r.stop_reason == "exhausted") o.code = exit_code::exhausted;
  if (r.stop_reason == "max_steps") o.code = exit_code::max_steps;
  return o;
}

inline std::vector<Bits> enumerate_scenarios(std::size_t A) {
  if (A > 16) throw ValidationError("full enumeration needs <= 16 adopters; pass --scenarios");
  std::vector<Bits> all;
  for (std::size_t m = 0; m < (std::size_t{1} << A); ++m) {
    Bits b(A);
    for (std::size_t j = 0; j < A; ++j) b[j] = (m >> j) & 1U;
    all.push_back(std::move(b));
  }
  return all;
}

inline Outcome brute_force(const json& a, int threads) {
  const RunConfig c = config_from_json(a.at("config"));
  require_file(c.feeder_path, "feeder");
  const Feeder f = load_feeder(c.feeder_path);
  SweepEvaluator ev(f, feeder_partition(f), c.violation, c.powerflow);
  std::vector<Bits> scenarios;
  if (!c.scenarios_path.empty()) {
    require_file(c.scenarios_path, "scenarios");
    ScenarioFile sf = load_scenario_file(c.scenarios_path);
    check_scenarios_match(sf, f);
    scenarios = std::move(sf.scenarios);
  } else {
    scenarios = enumerate_scenarios(f.num_adopters());
  }
  const std::size_t budget = a.at("max_scenarios");
  const SearchResult r = brute_force_oracle(ev, scenarios, budget, threads);
  Outcome o;
  o.artifacts = run_artifacts(r, f);
  return o;
}

inline Outcome report(const json& a) {
  const std::string feeder_path = a.at("feeder"), oracle_dir = a.at("oracle"), search_dir = a.at("search");
  const int top_n = a.at("top_n");
  if (top_n < 1) throw UsageError("--top-n must be >= 1");
  require_file(feeder_path, "feeder");
  const Feeder f = load_feeder(feeder_path);
  const SearchResult oracle = load_run(oracle_dir, f);
  std::optional<SearchResult> found;
  std::optional<std::string> relevance;
  if (!search_dir.empty()) {
    found = load_run(search_dir, f);
    std::ifstream in(fs::path(search_dir) / "relevance.csv");
    if (in) {
      std::stringstream ss;
      ss << in.rdbuf();
      relevance = ss.str();
    }
  }
  Outcome o;
  o.artifacts = report_artifacts(f, oracle, found ? &*found : nullptr, relevance ? &*relevance : nullptr,
                                 static_cast<std::size_t>(top_n));
  return o;
}

inline json diffusion_json(const DiffusionParams& d) {
  return {{"p", d.p}, {"q", d.q}, {"horizon_steps", d.horizon_steps}, {"initial_rate", d.initial_rate}};
}

}  // namespace cli

/// Entry point of the `critscen` tool.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using nlohmann::json;
  namespace fs = std::filesystem;

  CLI::App app{"Bayesian-optimization search for critical PV adoption scenarios on radial feeders", "critscen"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "critscen 1.0");

  std::string out_dir, manifest_path;
  int threads = 1;
  auto common = [&](CLI::App* sub, bool with_threads) {
    sub->add_option("--out", out_dir, "Output directory");
    sub->add_option("--manifest", manifest_path, "Replay the arguments recorded in a manifest.json");
    if (with_threads) sub->add_option("--threads", threads, "Worker threads for power-flow evaluation")->check(CLI::PositiveNumber);
  };

  int buses = 15, adopters = 12, groups = 3, count = 0, top_n = 25;
  std::int64_t seed = 0, max_scenarios = 100000;
  std::string feeder, scenarios, config, oracle_dir, search_dir;
  bool verbose = false;
  DiffusionParams diffusion;

  auto* mk = app.add_subcommand("make-feeder", "Generate a synthetic radial feeder with bus groups");
  mk->add_option("--buses", buses, "Number of buses including the slack bus");
  mk->add_option("--adopters", adopters, "Number of PV adopter buses");
  mk->add_option("--groups", groups, "Number of bus groups (voltage objectives)");
  mk->add_option("--seed", seed, "Generator seed");
  common(mk, false);

  auto* sim = app.add_subcommand("simulate", "Simulate adoption scenarios");
  sim->add_option("--feeder", feeder, "Feeder file");
  sim->add_option("--count", count, "Number of scenarios");
  sim->add_option("--seed", seed, "Simulation seed");
  sim->add_option("--p", diffusion.p, "Innovation coefficient");
  sim->add_option("--q", diffusion.q, "Imitation coefficient");
  sim->add_option("--horizon", diffusion.horizon_steps, "Diffusion steps");
  sim->add_option("--initial-rate", diffusion.initial_rate, "Initial adoption probability");
  common(sim, false);

  auto* eval = app.add_subcommand("evaluate", "Power flow, stresses and violations for a scenario file");
  eval->add_option("--feeder", feeder, "Feeder file");
  eval->add_option("--scenarios", scenarios, "Scenario file");
  eval->add_option("--config", config, "Run config (violation bins, power-flow options)");
  common(eval, true);

  auto* srch = app.add_subcommand("search", "Run the Bayesian-optimization search");
  srch->add_option("--config", config, "Run config or a previous manifest.json");
  srch->add_flag("--verbose", verbose, "Log search progress to stderr");
  common(srch, true);

  auto* bf = app.add_subcommand("brute-force", "Evaluate every scenario and report the exact critical sets");
  bf->add_option("--config", config, "Run config or a previous manifest.json");
  bf->add_option("--scenarios", scenarios, "Scenario file (default: config's, else all 2^A scenarios)");
  bf->add_option("--max-scenarios", max_scenarios, "Evaluation budget");
  common(bf, true);

  auto* rep = app.add_subcommand("report", "Ranking, max-violation comparison and relevance tables");
  rep->add_option("--feeder", feeder, "Feeder file");
  rep->add_option("--oracle", oracle_dir, "brute-force output directory");
  rep->add_option("--search", search_dir, "search output directory (optional)");
  rep->add_option("--top-n", top_n, "Size of the top-by-total-PV comparator");
  common(rep, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return exit_code::usage;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();

  try {
    json args;
    if (!manifest_path.empty()) {
      cli::require_file(manifest_path, "manifest");
      const json m = read_json_file(manifest_path);
      if (m.value("command", "") != command)
        throw UsageError("manifest '" + manifest_path + "' records command '" + m.value("command", "") + "'");
      args = m.at("args");
      if (out_dir.empty()) out_dir = args.value("out", "");
    } else if (command == "make-feeder") {
      args = {{"buses", buses}, {"adopters", adopters}, {"groups", groups}, {"seed", seed}};
    } else if (command == "simulate") {
      if (count < 1) throw UsageError("--count must be >= 1");
      args = {{"feeder", cli::absolute(feeder)}, {"count", count}, {"seed", seed}, {"diffusion", cli::diffusion_json(diffusion)}};
    } else if (command == "evaluate") {
      RunConfig c;
      if (!config.empty()) c = cli::load_config_or_manifest(config);
      if (!feeder.empty()) c.feeder_path = feeder;
      if (!scenarios.empty()) c.scenarios_path = scenarios;
      c.feeder_path = cli::absolute(c.feeder_path);
      c.scenarios_path = cli::absolute(c.scenarios_path);
      cli::require_file(c.feeder_path, "feeder");
      args = {{"config", config_to_json(c)}};
    } else if (command == "search" || command == "brute-force") {
      if (config.empty()) throw UsageError("--config is required");
      RunConfig c = cli::load_config_or_manifest(config);
      if (!scenarios.empty()) c.scenarios_path = scenarios;
      c.feeder_path = cli::absolute(c.feeder_path);
      c.scenarios_path = cli::absolute(c.scenarios_path);
      if (out_dir.empty()) out_dir = c.output_dir;
      c.output_dir.clear();
      args = {{"config", config_to_json(c)}};
      if (command == "brute-force") args["max_scenarios"] = max_scenarios;
    } else if (command == "report") {
      if (oracle_dir.empty()) throw UsageError("--oracle is required");
      args = {{"feeder", cli::absolute(feeder)},
              {"oracle", cli::absolute(oracle_dir)},
              {"search", cli::absolute(search_dir)},
              {"top_n", top_n}};
    }
    if (out_dir.empty()) throw UsageError("--out is required");
    out_dir = cli::absolute(out_dir);

    cli::Outcome o;
    if (command == "make-feeder") o = cli::make_feeder(args);
    else if (command == "simulate") o = cli::simulate(args);
    else if (command == "evaluate") o = cli::evaluate(args, threads);
    else if (command == "search") o = cli::search(args, threads, verbose ? &err : nullptr);
    else if (command == "brute-force") o = cli::brute_force(args, threads);
    else if (command == "report") o = cli::report(args);

    json recorded = args;
    recorded["out"] = out_dir;
    o.artifacts.add("manifest.json", json_text(cli::manifest_json(command, recorded, o.artifacts)));
    o.artifacts.commit(out_dir);
    out << command << ": wrote";
    for (const auto& n : o.artifacts.names()) out << ' ' << n;
    out << " to " << out_dir << '\n';
    if (o.code == exit_code::exhausted) err << "search stopped: no unevaluated scenarios left\n";
    if (o.code == exit_code::max_steps) err << "search stopped: reached search.max_steps\n";
    return o.code;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n" << sub->help();
    return exit_code::usage;
  } catch (const ParseError& e) {
    err << "invalid input: " << e.what() << '\n';
    return exit_code::validation;
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << '\n';
    return exit_code::validation;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return exit_code::numerical;
  } catch (const json::exception& e) {
    err << "invalid input: " << e.what() << '\n';
    return exit_code::validation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::failure;
  }
}

}  // namespace critscen
