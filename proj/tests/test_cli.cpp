#include <catch_amalgamated.hpp>

#include <critscen/cli.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace critscen;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "critscen");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("critscen_cli_test_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

const std::string toy_config = std::string(CRITSCEN_CONFIGS) + "/toy.json";
const std::string toy_feeder = std::string(CRITSCEN_CONFIGS) + "/toy_feeder.json";

fs::path write_config(const std::string& name, json patch) {
  json j = read_json_file(toy_config);
  j["feeder"] = toy_feeder;
  j.merge_patch(patch);
  const fs::path p = scratch(name + ".json");
  std::ofstream(p) << j.dump(2);
  return p;
}

void expect_same_artifacts(const fs::path& a, const fs::path& b) {
  std::set<std::string> names_a, names_b;
  for (const auto& e : fs::directory_iterator(a)) names_a.insert(e.path().filename().string());
  for (const auto& e : fs::directory_iterator(b)) names_b.insert(e.path().filename().string());
  CHECK(names_a == names_b);
  for (const auto& n : names_a) {
    if (n == "manifest.json") continue;
    INFO(n);
    CHECK(slurp(a / n) == slurp(b / n));
  }
}

}  // namespace

TEST_CASE("make-feeder") {
  const auto a = scratch("feeder_a"), b = scratch("feeder_b");
  REQUIRE(run({"make-feeder", "--buses", "20", "--adopters", "8", "--groups", "4", "--seed", "3", "--out", a}).code == 0);
  REQUIRE(run({"make-feeder", "--buses", "20", "--adopters", "8", "--groups", "4", "--seed", "3", "--out", b}).code == 0);
  CHECK(slurp(a / "feeder.json") == slurp(b / "feeder.json"));
  const Feeder f = load_feeder((a / "feeder.json").string());
  CHECK(f.num_buses() == 20);
  CHECK(f.num_adopters() == 8);
  CHECK(f.num_groups() == 4);
  CHECK(feeder_hash(load_feeder(toy_feeder)) != feeder_hash(f));

  const auto bad = scratch("feeder_bad");
  CHECK(run({"make-feeder", "--buses", "5", "--adopters", "5", "--out", bad}).code == exit_code::usage);
  CHECK_FALSE(fs::exists(bad));
  CHECK(run({"make-feeder", "--buses", "5", "--adopters", "2"}).code == exit_code::usage);
  CHECK(run({"no-such-command"}).code == exit_code::usage);
  CHECK(run({}).code == exit_code::usage);
}

TEST_CASE("simulate") {
  const auto a = scratch("sim_a"), b = scratch("sim_b"), c = scratch("sim_c");
  REQUIRE(run({"simulate", "--feeder", toy_feeder, "--count", "3000", "--seed", "9", "--out", a}).code == 0);
  REQUIRE(run({"simulate", "--feeder", toy_feeder, "--count", "3000", "--seed", "9", "--out", b}).code == 0);
  REQUIRE(run({"simulate", "--feeder", toy_feeder, "--count", "3000", "--seed", "10", "--out", c}).code == 0);
  CHECK(line_count(a / "scenarios.txt") == 3001);
  CHECK(slurp(a / "scenarios.txt") == slurp(b / "scenarios.txt"));
  CHECK(slurp(a / "scenarios.txt") != slurp(c / "scenarios.txt"));
  const auto sf = load_scenario_file((a / "scenarios.txt").string());
  CHECK(sf.scenarios.size() == 3000);
  CHECK(sf.num_adopters == 12);
  for (const auto& s : sf.scenarios) CHECK(s.size() == 12);

  CHECK(run({"simulate", "--feeder", toy_feeder, "--count", "0", "--out", scratch("sim_zero")}).code == exit_code::usage);
  CHECK(run({"simulate", "--feeder", toy_feeder, "--count", "5", "--p", "0.9", "--q", "0.5", "--out", scratch("sim_bad")})
            .code == exit_code::validation);
}

TEST_CASE("evaluate") {
  const auto sim = scratch("eval_sim"), out = scratch("eval_out");
  REQUIRE(run({"simulate", "--feeder", toy_feeder, "--count", "50", "--seed", "2", "--out", sim}).code == 0);
  const auto r = run({"evaluate", "--feeder", toy_feeder, "--scenarios", (sim / "scenarios.txt").string(), "--out", out});
  REQUIRE(r.code == 0);
  CHECK(line_count(out / "evaluations.csv") == 51);
  std::ifstream in(out / "evaluations.csv");
  std::string header;
  std::getline(in, header);
  const Feeder f = load_feeder(toy_feeder);
  const std::size_t K = f.num_groups() + f.num_lines();
  CHECK(split_csv_line(header).size() == 2 + 2 * K);

  // Scenarios generated for another feeder are rejected.
  const auto other = scratch("eval_other"), sim2 = scratch("eval_sim2");
  REQUIRE(run({"make-feeder", "--buses", "15", "--adopters", "12", "--seed", "99", "--out", other}).code == 0);
  REQUIRE(run({"simulate", "--feeder", (other / "feeder.json").string(), "--count", "5", "--out", sim2}).code == 0);
  const auto bad = run({"evaluate", "--feeder", toy_feeder, "--scenarios", (sim2 / "scenarios.txt").string(), "--out",
                        scratch("eval_bad")});
  CHECK(bad.code == exit_code::validation);
  CHECK(bad.err.find("feeder") != std::string::npos);
}

TEST_CASE("search writes its artifacts and replays from the manifest") {
  const auto a = scratch("search_a"), b = scratch("search_b"), c = scratch("search_c");
  REQUIRE(run({"search", "--config", toy_config, "--out", a}).code == 0);
  for (const char* n : {"result.json", "evaluations.csv", "tau_trace.csv", "relevance.csv", "fronts.csv",
                        "search_space.txt", "manifest.json"})
    CHECK(fs::exists(a / n));
  const json res = read_json_file((a / "result.json").string());
  CHECK(res.at("stop_reason") == "converged");
  CHECK(res.at("evaluation_count").get<std::size_t>() + 1 == line_count(a / "evaluations.csv"));

  const json m = read_json_file((a / "manifest.json").string());
  CHECK(m.at("command") == "search");
  CHECK(m.at("artifacts").size() == 6);

  REQUIRE(run({"search", "--manifest", (a / "manifest.json").string(), "--out", b, "--threads", "2"}).code == 0);
  expect_same_artifacts(a, b);
  REQUIRE(run({"search", "--config", (a / "manifest.json").string(), "--out", c}).code == 0);
  expect_same_artifacts(a, c);
  CHECK(run({"simulate", "--manifest", (a / "manifest.json").string(), "--out", scratch("search_wrong")}).code ==
        exit_code::usage);
}

TEST_CASE("a tighter threshold costs more evaluations") {
  const auto loose = scratch("tau_loose"), tight = scratch("tau_tight");
  REQUIRE(run({"search", "--config", write_config("tau_loose", {{"search", {{"tau_bar", 0.5}}}}), "--out", loose}).code == 0);
  REQUIRE(run({"search", "--config", write_config("tau_tight", {{"search", {{"tau_bar", 0.05}}}}), "--out", tight}).code == 0);
  const auto n_loose = read_json_file((loose / "result.json").string()).at("evaluation_count").get<int>();
  const auto n_tight = read_json_file((tight / "result.json").string()).at("evaluation_count").get<int>();
  CHECK(n_tight >= n_loose);
}

TEST_CASE("config errors") {
  SECTION("missing feeder leaves no output") {
    const auto out = scratch("cfg_missing");
    const auto r = run({"search", "--config", write_config("cfg_missing", {{"feeder", "/nonexistent/feeder.json"}}), "--out", out});
    CHECK(r.code == exit_code::validation);
    CHECK(r.err.find("feeder") != std::string::npos);
    CHECK_FALSE(fs::exists(out));
  }
  SECTION("invalid value") {
    const auto r = run({"search", "--config", write_config("cfg_tau", {{"search", {{"tau_bar", -1.0}}}}), "--out",
                        scratch("cfg_tau_out")});
    CHECK(r.code == exit_code::validation);
    CHECK(r.err.find("tau_bar") != std::string::npos);
  }
  SECTION("unknown field") {
    const auto r = run({"search", "--config", write_config("cfg_unknown", {{"search", {{"tua_bar", 0.1}}}}), "--out",
                        scratch("cfg_unknown_out")});
    CHECK(r.code == exit_code::validation);
    CHECK(r.err.find("search.tua_bar") != std::string::npos);
  }
  SECTION("wrong type") {
    const auto r = run({"search", "--config", write_config("cfg_type", {{"search", {{"n0", "twenty"}}}}), "--out",
                        scratch("cfg_type_out")});
    CHECK(r.code == exit_code::validation);
    CHECK(r.err.find("search.n0") != std::string::npos);
  }
  SECTION("missing config") {
    CHECK(run({"search", "--out", scratch("cfg_none")}).code == exit_code::usage);
    CHECK(run({"search", "--config", "/nonexistent.json", "--out", scratch("cfg_none2")}).code == exit_code::validation);
  }
}

TEST_CASE("config round trip") {
  const RunConfig c = load_config(toy_config);
  CHECK(c.feeder_path == toy_feeder);
  CHECK(c.search.max_search_space == 4096);
  const RunConfig d = config_from_json(config_to_json(c));
  CHECK(config_to_json(d) == config_to_json(c));
  CHECK(d.search.seed == c.seed);
  CHECK_THROWS_AS(config_from_json(json{{"schema", 2}, {"feeder", "x"}}), ValidationError);
  CHECK_THROWS_AS(config_from_json(json{{"schema", 1}}), ValidationError);
}

TEST_CASE("search exit codes for early stops") {
  const auto out = scratch("stop_max");
  const auto r = run({"search", "--config", write_config("stop_max", {{"search", {{"max_steps", 2}, {"tau_bar", 1e-6}}}}),
                      "--out", out});
  CHECK(r.code == exit_code::max_steps);
  CHECK(read_json_file((out / "result.json").string()).at("stop_reason") == "max_steps");
}

TEST_CASE("brute-force and report") {
  const auto oracle = scratch("bf"), search = scratch("bf_search"), all = scratch("rep_all"), rep1 = scratch("rep_1"),
             rep2 = scratch("rep_2");
  REQUIRE(run({"search", "--config", toy_config, "--out", search}).code == 0);
  REQUIRE(run({"brute-force", "--config", toy_config, "--scenarios", (search / "search_space.txt").string(), "--out",
               oracle}).code == 0);
  CHECK(run({"brute-force", "--config", toy_config, "--max-scenarios", "10", "--out", scratch("bf_small")}).code ==
        exit_code::validation);

  // Top-N over everything is the oracle itself.
  REQUIRE(run({"report", "--feeder", toy_feeder, "--oracle", oracle, "--top-n", "100000", "--out", all}).code == 0);
  std::ifstream in(all / "max_violation_comparison.csv");
  std::string line;
  std::getline(in, line);
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    const auto cells = split_csv_line(line);
    REQUIRE(cells.size() == 5);
    CHECK(cells[2] == cells[4]);
    ++rows;
  }
  const Feeder f = load_feeder(toy_feeder);
  CHECK(rows == f.num_groups() + f.num_lines());
  CHECK(read_json_file((all / "summary.json").string()).at("top_n_recovered_fraction") == 1.0);

  REQUIRE(run({"report", "--feeder", toy_feeder, "--oracle", oracle, "--search", search, "--out", rep1}).code == 0);
  REQUIRE(run({"report", "--feeder", toy_feeder, "--oracle", oracle, "--search", search, "--out", rep2}).code == 0);
  expect_same_artifacts(rep1, rep2);
  const json s = read_json_file((rep1 / "summary.json").string());
  CHECK(s.at("top_n") == 25);
  CHECK(s.at("top_n_recovered_fraction").get<double>() < 1.0);
  CHECK(s.at("oracle_critical").get<int>() > 0);
  CHECK(slurp(rep1 / "relevance.csv") == slurp(search / "relevance.csv"));
  CHECK(line_count(rep1 / "pv_ranking.csv") > 26);

  CHECK(run({"report", "--feeder", toy_feeder, "--oracle", scratch("nope"), "--out", scratch("rep_bad")}).code ==
        exit_code::validation);
  CHECK(run({"report", "--feeder", toy_feeder, "--oracle", oracle, "--top-n", "0", "--out", scratch("rep_zero")}).code ==
        exit_code::usage);
}

TEST_CASE("installed binary") {
  const auto out = scratch("binary");
  const std::string cmd = std::string(CRITSCEN_CLI) + " make-feeder --buses 6 --adopters 3 --groups 2 --out " +
                          out.string() + " > /dev/null";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 0);
  CHECK(fs::exists(out / "feeder.json"));
  const int bad = std::system((std::string(CRITSCEN_CLI) + " make-feeder --buses 2 --adopters 4 --out " + out.string() +
                               "x 2> /dev/null").c_str());
  REQUIRE(WIFEXITED(bad));
  CHECK(WEXITSTATUS(bad) == exit_code::usage);
}
