#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "adoption.hpp"
#include "errors.hpp"
#include "feeder.hpp"
#include "powerflow.hpp"
#include "search.hpp"
#include "surrogate.hpp"

namespace critscen {

// ---------------------------------------------------------------------------
// Scenario files
//
//   # critscen-scenarios v1 feeder=<hash> adopters=<A> count=<n>
//   010011...
//   ...

struct ScenarioFile {
  std::string feeder_hash;
  std::size_t num_adopters = 0;
  std::vector<Bits> scenarios;
};

inline std::string scenario_file_text(const ScenarioFile& sf) {
  std::ostringstream os;
  os << "# critscen-scenarios v1 feeder=" << sf.feeder_hash << " adopters=" << sf.num_adopters
     << " count=" << sf.scenarios.size() << '\n';
  for (const auto& b : sf.scenarios) os << to_bitstring(b) << '\n';
  return os.str();
}

inline ScenarioFile parse_scenario_file(std::istream& in, const std::string& name = "scenarios") {
  std::string header;
  if (!std::getline(in, header)) throw ParseError(name + ": empty scenario file");
  std::istringstream hs(header);
  std::string hash, tag, version;
  hs >> hash >> tag >> version;
  if (hash != "#" || tag != "critscen-scenarios" || version != "v1")
    throw ParseError(name + ": missing 'critscen-scenarios v1' header");
  ScenarioFile sf;
  long long count = -1;
  std::string kv;
  while (hs >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ParseError(name + ": bad header field '" + kv + "'");
    const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
    try {
      if (key == "feeder") sf.feeder_hash = val;
      else if (key == "adopters") sf.num_adopters = std::stoul(val);
      else if (key == "count") count = std::stoll(val);
    } catch (const std::logic_error&) {
      throw ParseError(name + ": bad header value '" + kv + "'");
    }
  }
  if (sf.feeder_hash.empty() || sf.num_adopters == 0) throw ParseError(name + ": header needs feeder= and adopters=");
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line.size() != sf.num_adopters)
      throw ParseError(name + ":" + std::to_string(lineno) + ": expected " + std::to_string(sf.num_adopters) +
                       " bits, got " + std::to_string(line.size()));
    sf.scenarios.push_back(from_bitstring(line));
  }
  if (count >= 0 && static_cast<std::size_t>(count) != sf.scenarios.size())
    throw ParseError(name + ": header count " + std::to_string(count) + " but " +
                     std::to_string(sf.scenarios.size()) + " scenarios");
  return sf;
}

inline ScenarioFile load_scenario_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  return parse_scenario_file(in, path);
}

/// Throws unless the scenario file was produced for this feeder.
inline void check_scenarios_match(const ScenarioFile& sf, const Feeder& f) {
  if (sf.num_adopters != f.num_adopters())
    throw ValidationError("scenario file has " + std::to_string(sf.num_adopters) + " adopters, feeder has " +
                          std::to_string(f.num_adopters()));
  if (sf.feeder_hash != feeder_hash(f))
    throw ValidationError("scenario file was generated for feeder " + sf.feeder_hash + ", not " + feeder_hash(f));
}

// ---------------------------------------------------------------------------
// Text formatting

/// Shortest decimal form that round-trips; "nan" / "inf" for non-finite values.
inline std::string fmt_num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return nlohmann::json(v).dump();
}

inline std::string objective_family(std::size_t k, std::size_t P) { return k < P ? "bus" : "line"; }

/// Writes text files into an output directory. Nothing touches the disk until
/// commit(), so a failing run leaves no partial outputs behind.
class ArtifactSet {
 public:
  void add(std::string name, std::string content) { files_[std::move(name)] = std::move(content); }
  std::vector<std::string> names() const {
    std::vector<std::string> n;
    for (const auto& [k, v] : files_) n.push_back(k);
    return n;
  }
  const std::string& get(const std::string& name) const { return files_.at(name); }

  void commit(const std::filesystem::path& dir) const {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error("cannot create output directory '" + dir.string() + "': " + ec.message());
    for (const auto& [name, content] : files_) {
      std::ofstream out(dir / name, std::ios::binary);
      if (!out) throw Error("cannot write '" + (dir / name).string() + "'");
      out << content;
    }
  }

 private:
  std::map<std::string, std::string> files_;
};

inline std::string json_text(const nlohmann::json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Evaluation tables

/// One row per scenario: id, stresses f_1..f_K, violations V_1..V_K, converged.
inline std::string evaluation_table_csv(const std::vector<Evaluation>& evals, std::size_t K) {
  std::ostringstream os;
  os << "scenario_id";
  for (std::size_t k = 1; k <= K; ++k) os << ",f_" << k;
  for (std::size_t k = 1; k <= K; ++k) os << ",v_" << k;
  os << ",converged\n";
  for (std::size_t i = 0; i < evals.size(); ++i) {
    os << i;
    for (std::size_t k = 0; k < K; ++k) os << ',' << fmt_num(evals[i].stress.values[k]);
    for (std::size_t k = 0; k < K; ++k) os << ',' << fmt_num(evals[i].violations.values[k]);
    os << ',' << (evals[i].converged ? 1 : 0) << '\n';
  }
  return os.str();
}

/// Evaluation log of a search or oracle run, in evaluation order.
inline std::string evaluation_log_csv(const SearchResult& r) {
  const std::size_t K = r.num_objectives;
  std::ostringstream os;
  os << "step,scenario_id,bitstring";
  for (std::size_t k = 1; k <= K; ++k) os << ",f_" << k;
  for (std::size_t k = 1; k <= K; ++k) os << ",v_" << k;
  os << '\n';
  for (const auto& e : r.evaluated) {
    os << e.step << ',' << e.id << ',' << to_bitstring(r.search_space[e.id]);
    for (double v : e.stress.values) os << ',' << fmt_num(v);
    for (double v : e.violations.values) os << ',' << fmt_num(v);
    os << '\n';
  }
  return os.str();
}

inline std::string tau_trace_csv(const SearchResult& r) {
  std::ostringstream os;
  // A family's tau is blank until its first phase has run.
  auto tau = [](double v) { return std::isfinite(v) ? fmt_num(v) : std::string(); };
  os << "step,phase,tau_bus,tau_line,evaluated,search_space,active_objectives,batch\n";
  for (const auto& t : r.trace)
    os << t.step << ',' << to_string(t.phase) << ',' << tau(t.tau_bus) << ',' << tau(t.tau_line) << ','
       << t.evaluated << ',' << t.search_space << ',' << t.active << ',' << t.batch << '\n';
  return os.str();
}

/// Relevance of each adopter per objective with fitted hyperparameters.
inline std::string relevance_csv(const SearchResult& r) {
  std::ostringstream os;
  os << "objective_id,family";
  for (std::size_t j = 1; j <= r.num_adopters; ++j) os << ",adopter_" << j;
  os << '\n';
  for (const auto& [k, params] : r.kernel_params) {
    const Eigen::VectorXd rel = adopter_relevance(params);
    os << k + 1 << ',' << objective_family(k, r.num_bus_objectives);
    for (Eigen::Index j = 0; j < rel.size(); ++j) os << ',' << fmt_num(rel[j]);
    os << '\n';
  }
  return os.str();
}

/// Critical scenarios per family with the family's objective ids, violations
/// and raw stresses.
inline std::string fronts_csv(const SearchResult& r) {
  std::map<std::int64_t, const EvaluatedPoint*> by_id;
  for (const auto& e : r.evaluated) by_id[e.id] = &e;
  std::ostringstream os;
  os << "family,scenario_id,bitstring,objective_ids,violations,stresses\n";
  auto emit = [&](const std::vector<std::int64_t>& ids, std::size_t lo, std::size_t hi, const char* fam) {
    for (std::int64_t id : ids) {
      const EvaluatedPoint& e = *by_id.at(id);
      std::string objs, viol, str;
      for (std::size_t k = lo; k < hi; ++k) {
        const char* sep = k == lo ? "" : " ";
        objs += sep + std::to_string(k + 1);
        viol += sep + fmt_num(e.violations.values[k]);
        str += sep + fmt_num(e.stress.values[k]);
      }
      os << fam << ',' << id << ',' << to_bitstring(r.search_space[id]) << ',' << objs << ',' << viol << ','
         << str << '\n';
    }
  };
  emit(r.bus_critical, 0, r.num_bus_objectives, "bus");
  emit(r.line_critical, r.num_bus_objectives, r.num_objectives, "line");
  return os.str();
}

inline nlohmann::json kernel_params_json(const KernelParams& p) {
  std::vector<double> theta(p.theta.data(), p.theta.data() + p.theta.size());
  return {{"eta", p.eta}, {"theta", theta}, {"noise", p.noise}};
}

inline nlohmann::json result_json(const SearchResult& r, const std::string& feeder_hash_hex) {
  using nlohmann::json;
  std::map<std::int64_t, const EvaluatedPoint*> by_id;
  for (const auto& e : r.evaluated) by_id[e.id] = &e;
  auto scenarios = [&](const std::vector<std::int64_t>& ids, std::size_t lo, std::size_t hi) {
    json arr = json::array();
    for (std::int64_t id : ids) {
      const EvaluatedPoint& e = *by_id.at(id);
      std::vector<double> v(e.violations.values.begin() + lo, e.violations.values.begin() + hi);
      arr.push_back({{"id", id}, {"bitstring", to_bitstring(r.search_space[id])}, {"violations", v}});
    }
    return arr;
  };
  auto one_based = [](const std::vector<std::size_t>& ks) {
    std::vector<std::size_t> out;
    for (auto k : ks) out.push_back(k + 1);
    return out;
  };
  std::vector<std::size_t> bus_ids, line_ids;
  for (std::size_t k = 0; k < r.num_objectives; ++k) (k < r.num_bus_objectives ? bus_ids : line_ids).push_back(k + 1);
  json violating = json::array();
  for (std::int64_t id : r.violating) violating.push_back(to_bitstring(r.search_space[id]));
  json kp = json::object();
  for (const auto& [k, p] : r.kernel_params) kp[std::to_string(k + 1)] = kernel_params_json(p);
  std::vector<double> max_stress;
  for (double v : r.max_stress) max_stress.push_back(std::isfinite(v) ? v : std::numeric_limits<double>::quiet_NaN());

  json j;
  j["schema"] = 1;
  j["stop_reason"] = r.stop_reason;
  j["feeder_hash"] = feeder_hash_hex;
  j["num_adopters"] = r.num_adopters;
  j["bus_objective_ids"] = bus_ids;
  j["line_objective_ids"] = line_ids;
  j["steps"] = r.steps;
  j["simulated"] = r.simulated;
  j["search_space_size"] = r.search_space.size();
  j["evaluation_count"] = r.evaluated.size();
  j["invalid_ids"] = r.invalid;
  j["critical_objectives"] = one_based(r.critical_objectives);
  j["max_violation"] = r.max_violation;
  j["max_stress"] = max_stress;  // NaN (null) when nothing was evaluated
  j["bus_critical"] = scenarios(r.bus_critical, 0, r.num_bus_objectives);
  j["line_critical"] = scenarios(r.line_critical, r.num_bus_objectives, r.num_objectives);
  j["violating_scenarios"] = violating;
  j["kernel_params"] = kp;
  return j;
}

/// Artifacts shared by `search` and `brute-force`.
inline ArtifactSet run_artifacts(const SearchResult& r, const Feeder& f) {
  ArtifactSet a;
  a.add("result.json", json_text(result_json(r, feeder_hash(f))));
  a.add("evaluations.csv", evaluation_log_csv(r));
  a.add("tau_trace.csv", tau_trace_csv(r));
  a.add("relevance.csv", relevance_csv(r));
  a.add("fronts.csv", fronts_csv(r));
  a.add("search_space.txt", scenario_file_text({feeder_hash(f), f.num_adopters(), r.search_space}));
  return a;
}

// ---------------------------------------------------------------------------
// Reading run artifacts back (for `report`)

struct LoggedEvaluation {
  int step = 0;
  std::int64_t id = 0;
  std::string bitstring;
  std::vector<double> stress;
  std::vector<double> violations;
};

inline double parse_num(const std::string& s, const std::string& where) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::logic_error&) {
    throw ParseError(where + ": bad number '" + s + "'");
  }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::vector<LoggedEvaluation> load_evaluation_log(const std::string& path, std::size_t K) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line.rfind("step,scenario_id,bitstring", 0) != 0)
    throw ParseError(path + ": not an evaluation log");
  std::vector<LoggedEvaluation> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    const std::string where = path + ":" + std::to_string(lineno);
    if (cells.size() != 3 + 2 * K) throw ParseError(where + ": expected " + std::to_string(3 + 2 * K) + " columns");
    LoggedEvaluation e;
    e.step = static_cast<int>(parse_num(cells[0], where));
    e.id = static_cast<std::int64_t>(parse_num(cells[1], where));
    e.bitstring = cells[2];
    for (std::size_t k = 0; k < K; ++k) e.stress.push_back(parse_num(cells[3 + k], where));
    for (std::size_t k = 0; k < K; ++k) e.violations.push_back(parse_num(cells[3 + K + k], where));
    rows.push_back(std::move(e));
  }
  return rows;
}

}  // namespace critscen
