#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <queue>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "rng.hpp"

namespace critscen {

struct Bus {
  int id = 0;
  double load_p_kw = 0.0;    // min-daytime-load snapshot
  double load_q_kvar = 0.0;
  double v_lower = 0.95;     // p.u.
  double v_upper = 1.05;     // p.u.
  int group = 1;             // 1-based voltage zone
  bool is_adopter = false;
  double pv_capacity_kw = 0.0;
};

struct Line {
  int id = 0;  // objective index, in [P+1, P+L]
  int from_bus = 0;
  int to_bus = 0;
  double resistance_ohm = 0.0;
  double reactance_ohm = 0.0;
  double rating_pu = 1.0;  // apparent-power capacity in p.u. of base_power
};

/// Group index (1-based) per bus, in the feeder's bus order.
struct BusPartition {
  std::vector<int> assignment;
  int num_groups = 0;
};

/// Validated radial feeder. Immutable after construction; the constructor
/// checks every structural invariant and precomputes the rooted tree.
class Feeder {
 public:
  Feeder(std::vector<Bus> buses, std::vector<Line> lines, int slack_bus, double base_voltage_kv,
         double base_power_mva, int num_groups)
      : buses_(std::move(buses)),
        lines_(std::move(lines)),
        slack_bus_(slack_bus),
        base_voltage_kv_(base_voltage_kv),
        base_power_mva_(base_power_mva),
        num_groups_(num_groups) {
    validate_and_index();
  }

  const std::vector<Bus>& buses() const { return buses_; }
  const std::vector<Line>& lines() const { return lines_; }
  int slack_bus() const { return slack_bus_; }
  int slack_index() const { return slack_index_; }
  double base_voltage_kv() const { return base_voltage_kv_; }
  double base_power_mva() const { return base_power_mva_; }
  int num_groups() const { return num_groups_; }
  std::size_t num_buses() const { return buses_.size(); }
  std::size_t num_lines() const { return lines_.size(); }
  /// Number of stress objectives, P + L.
  std::size_t num_objectives() const { return num_groups_ + lines_.size(); }

  /// Bus indices of potential adopters, ordered by bus id. Scenario
  /// coordinate j refers to adopters()[j].
  const std::vector<int>& adopters() const { return adopters_; }
  std::size_t num_adopters() const { return adopters_.size(); }

  double impedance_base_ohm() const { return base_voltage_kv_ * base_voltage_kv_ / base_power_mva_; }
  double power_base_kw() const { return base_power_mva_ * 1000.0; }

  int bus_index(int bus_id) const {
    auto it = bus_index_.find(bus_id);
    if (it == bus_index_.end()) throw ValidationError("unknown bus id " + std::to_string(bus_id));
    return it->second;
  }

  // Rooted-tree view. parent_line(i) is -1 for the slack bus.
  int parent(int bus) const { return parent_[bus]; }
  int parent_line(int bus) const { return parent_line_[bus]; }
  const std::vector<int>& children(int bus) const { return children_[bus]; }
  /// Buses in breadth-first order from the slack bus.
  const std::vector<int>& bfs_order() const { return bfs_order_; }
  /// Downstream (child-side) bus of each line.
  int line_child(int line) const { return line_child_[line]; }
  int line_parent(int line) const { return parent_[line_child_[line]]; }

  /// Bus indices belonging to each group (index 0 holds group 1).
  const std::vector<std::vector<int>>& group_members() const { return group_members_; }

  double total_pv_kw(const std::vector<std::uint8_t>& bits) const {
    double total = 0.0;
    for (std::size_t j = 0; j < adopters_.size() && j < bits.size(); ++j)
      if (bits[j]) total += buses_[adopters_[j]].pv_capacity_kw;
    return total;
  }

 private:
  void validate_and_index() {
    if (buses_.empty()) throw ValidationError("feeder has no buses");
    if (!(base_voltage_kv_ > 0.0)) throw ValidationError("base_voltage_kv must be positive");
    if (!(base_power_mva_ > 0.0)) throw ValidationError("base_power_mva must be positive");
    if (num_groups_ < 1) throw ValidationError("num_groups must be at least 1");
    if (lines_.size() + 1 != buses_.size())
      throw ValidationError("not radial: " + std::to_string(lines_.size()) + " lines for " +
                            std::to_string(buses_.size()) + " buses (expected buses - 1)");

    for (std::size_t i = 0; i < buses_.size(); ++i) {
      const Bus& b = buses_[i];
      const std::string where = "bus " + std::to_string(b.id) + ": ";
      if (!bus_index_.emplace(b.id, static_cast<int>(i)).second)
        throw ValidationError(where + "duplicate bus id");
      if (!(b.v_lower < b.v_upper)) throw ValidationError(where + "v_lower must be < v_upper");
      if (!(b.pv_capacity_kw >= 0.0)) throw ValidationError(where + "pv_capacity_kw must be >= 0");
      if (b.pv_capacity_kw > 0.0 && !b.is_adopter)
        throw ValidationError(where + "pv_capacity_kw > 0 requires is_adopter");
      if (!std::isfinite(b.load_p_kw) || !std::isfinite(b.load_q_kvar))
        throw ValidationError(where + "non-finite load");
      if (b.group < 1 || b.group > num_groups_)
        throw ValidationError(where + "group " + std::to_string(b.group) + " outside [1, " +
                              std::to_string(num_groups_) + "]");
    }
    auto slack = bus_index_.find(slack_bus_);
    if (slack == bus_index_.end())
      throw ValidationError("slack_bus " + std::to_string(slack_bus_) + " does not exist");
    slack_index_ = slack->second;

    const int P = num_groups_;
    const int L = static_cast<int>(lines_.size());
    std::vector<bool> seen_id(L, false);
    std::vector<std::vector<std::pair<int, int>>> adj(buses_.size());  // (neighbor, line)
    for (int k = 0; k < L; ++k) {
      const Line& l = lines_[k];
      const std::string where = "line " + std::to_string(l.id) + ": ";
      if (l.id < P + 1 || l.id > P + L)
        throw ValidationError(where + "id outside [" + std::to_string(P + 1) + ", " +
                              std::to_string(P + L) + "]");
      if (seen_id[l.id - P - 1]) throw ValidationError(where + "duplicate line id");
      seen_id[l.id - P - 1] = true;
      if (!(l.resistance_ohm >= 0.0) || !(l.reactance_ohm >= 0.0))
        throw ValidationError(where + "impedance components must be >= 0");
      if (!(l.resistance_ohm + l.reactance_ohm > 0.0))
        throw ValidationError(where + "zero impedance");
      if (!(l.rating_pu > 0.0)) throw ValidationError(where + "rating must be positive");
      auto f = bus_index_.find(l.from_bus);
      auto t = bus_index_.find(l.to_bus);
      if (f == bus_index_.end() || t == bus_index_.end())
        throw ValidationError(where + "references unknown bus");
      if (f->second == t->second) throw ValidationError("not radial: self-loop on line " + std::to_string(l.id));
      adj[f->second].emplace_back(t->second, k);
      adj[t->second].emplace_back(f->second, k);
    }

    // Orient the tree from the slack bus. With |lines| = |buses| - 1,
    // connectivity is equivalent to acyclicity.
    const std::size_t B = buses_.size();
    parent_.assign(B, -1);
    parent_line_.assign(B, -1);
    children_.assign(B, {});
    line_child_.assign(L, -1);
    std::vector<bool> visited(B, false);
    std::queue<int> q;
    q.push(slack_index_);
    visited[slack_index_] = true;
    while (!q.empty()) {
      const int u = q.front();
      q.pop();
      bfs_order_.push_back(u);
      auto nbrs = adj[u];
      std::sort(nbrs.begin(), nbrs.end(), [&](auto a, auto b) { return a.second < b.second; });
      for (auto [v, k] : nbrs) {
        if (k == parent_line_[u]) continue;
        if (visited[v]) throw ValidationError("not radial: cycle detected through line " + std::to_string(lines_[k].id));
        visited[v] = true;
        parent_[v] = u;
        parent_line_[v] = k;
        line_child_[k] = v;
        children_[u].push_back(v);
        q.push(v);
      }
    }
    if (bfs_order_.size() != B) throw ValidationError("not radial: network is disconnected");

    group_members_.assign(num_groups_, {});
    for (std::size_t i = 0; i < B; ++i) group_members_[buses_[i].group - 1].push_back(static_cast<int>(i));
    for (int g = 0; g < num_groups_; ++g)
      if (group_members_[g].empty())
        throw ValidationError("bus group " + std::to_string(g + 1) + " is empty");

    for (std::size_t i = 0; i < B; ++i)
      if (buses_[i].is_adopter) adopters_.push_back(static_cast<int>(i));
    std::sort(adopters_.begin(), adopters_.end(),
              [&](int a, int b) { return buses_[a].id < buses_[b].id; });
  }

  std::vector<Bus> buses_;
  std::vector<Line> lines_;
  int slack_bus_;
  double base_voltage_kv_;
  double base_power_mva_;
  int num_groups_;

  int slack_index_ = 0;
  std::map<int, int> bus_index_;
  std::vector<int> parent_, parent_line_, line_child_, bfs_order_, adopters_;
  std::vector<std::vector<int>> children_;
  std::vector<std::vector<int>> group_members_;
};

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json feeder_to_json(const Feeder& f) {
  nlohmann::json j;
  j["schema"] = 1;
  j["base_voltage_kv"] = f.base_voltage_kv();
  j["base_power_mva"] = f.base_power_mva();
  j["slack_bus"] = f.slack_bus();
  j["num_groups"] = f.num_groups();
  auto& buses = j["buses"] = nlohmann::json::array();
  for (const Bus& b : f.buses()) {
    buses.push_back({{"id", b.id},
                     {"load_p_kw", b.load_p_kw},
                     {"load_q_kvar", b.load_q_kvar},
                     {"v_lower", b.v_lower},
                     {"v_upper", b.v_upper},
                     {"group", b.group},
                     {"is_adopter", b.is_adopter},
                     {"pv_capacity_kw", b.pv_capacity_kw}});
  }
  auto& lines = j["lines"] = nlohmann::json::array();
  for (const Line& l : f.lines()) {
    lines.push_back({{"id", l.id},
                     {"from_bus", l.from_bus},
                     {"to_bus", l.to_bus},
                     {"r_ohm", l.resistance_ohm},
                     {"x_ohm", l.reactance_ohm},
                     {"rating_pu", l.rating_pu}});
  }
  return j;
}

namespace detail {

template <class T>
T require(const nlohmann::json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key))
    throw ParseError(where + ": missing required key '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError(where + ": key '" + key + "' has the wrong type");
  }
}

template <class T>
T optional(const nlohmann::json& obj, const char* key, T fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  return require<T>(obj, key, where);
}

}  // namespace detail

inline Feeder feeder_from_json(const nlohmann::json& j) {
  using detail::require;
  if (!j.is_object()) throw ParseError("feeder: document must be a JSON object");
  const int schema = require<int>(j, "schema", "feeder");
  if (schema != 1) throw ParseError("feeder: unsupported schema version " + std::to_string(schema));
  std::vector<Bus> buses;
  const auto& jb = j.contains("buses") ? j.at("buses") : throw ParseError("feeder: missing required key 'buses'");
  if (!jb.is_array()) throw ParseError("feeder: 'buses' must be an array");
  for (std::size_t i = 0; i < jb.size(); ++i) {
    const auto& r = jb[i];
    const std::string where = "buses[" + std::to_string(i) + "]";
    Bus b;
    b.id = require<int>(r, "id", where);
    b.load_p_kw = require<double>(r, "load_p_kw", where);
    b.load_q_kvar = require<double>(r, "load_q_kvar", where);
    b.v_lower = require<double>(r, "v_lower", where);
    b.v_upper = require<double>(r, "v_upper", where);
    b.group = require<int>(r, "group", where);
    b.is_adopter = require<bool>(r, "is_adopter", where);
    b.pv_capacity_kw = require<double>(r, "pv_capacity_kw", where);
    buses.push_back(b);
  }
  std::vector<Line> lines;
  const auto& jl = j.contains("lines") ? j.at("lines") : throw ParseError("feeder: missing required key 'lines'");
  if (!jl.is_array()) throw ParseError("feeder: 'lines' must be an array");
  for (std::size_t i = 0; i < jl.size(); ++i) {
    const auto& r = jl[i];
    const std::string where = "lines[" + std::to_string(i) + "]";
    Line l;
    l.id = require<int>(r, "id", where);
    l.from_bus = require<int>(r, "from_bus", where);
    l.to_bus = require<int>(r, "to_bus", where);
    l.resistance_ohm = require<double>(r, "r_ohm", where);
    l.reactance_ohm = require<double>(r, "x_ohm", where);
    l.rating_pu = require<double>(r, "rating_pu", where);
    lines.push_back(l);
  }
  return Feeder(std::move(buses), std::move(lines), require<int>(j, "slack_bus", "feeder"),
                require<double>(j, "base_voltage_kv", "feeder"),
                require<double>(j, "base_power_mva", "feeder"), require<int>(j, "num_groups", "feeder"));
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("'" + path + "': " + e.what());
  }
}

inline Feeder load_feeder(const std::string& path) { return feeder_from_json(read_json_file(path)); }

inline void save_feeder(const Feeder& f, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  out << feeder_to_json(f).dump(2) << '\n';
}

/// Stable 64-bit fingerprint of the feeder's canonical JSON form, as hex.
inline std::string feeder_hash(const Feeder& f) {
  const std::string canon = feeder_to_json(f).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canon) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

// ---------------------------------------------------------------------------
// Synthetic feeders

/// Sampling ranges for generate_synthetic_feeder. Every quantity is drawn
/// uniformly from its [lo, hi] interval.
struct SyntheticRanges {
  double base_voltage_kv = 4.16;
  double base_power_mva = 1.0;
  double load_p_kw[2] = {3.0, 20.0};
  double power_factor = 0.95;
  double r_ohm[2] = {0.6, 1.5};
  double x_over_r[2] = {0.5, 1.0};
  double pv_kw[2] = {40.0, 120.0};
  // Lines with downstream PV are rated at a fraction of that PV (p.u.);
  // lines without downstream PV get a multiple of their downstream load.
  double rating_pv_fraction[2] = {0.4, 1.0};
  double rating_load_multiple[2] = {1.5, 3.0};
  double v_bounds[2] = {0.95, 1.05};
  int attach_window = 3;  // a new bus attaches to one of the last `attach_window` buses
};

inline Feeder generate_synthetic_feeder(int num_buses, int num_adopters, std::uint64_t seed,
                                        const SyntheticRanges& rg = {}) {
  if (num_buses < 2) throw ValidationError("num_buses must be >= 2");
  if (num_adopters < 0 || num_adopters >= num_buses)
    throw ValidationError("num_adopters must be in [0, num_buses)");
  Rng rng = make_rng(seed, "synthetic-feeder");

  std::vector<int> parent(num_buses, -1);
  for (int i = 1; i < num_buses; ++i) {
    const int lo = std::max(0, i - rg.attach_window);
    parent[i] = lo + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(i - lo)));
  }

  // Adopters: a uniformly random subset of the non-slack buses.
  std::vector<int> candidates(num_buses - 1);
  std::iota(candidates.begin(), candidates.end(), 1);
  for (int i = static_cast<int>(candidates.size()) - 1; i > 0; --i)
    std::swap(candidates[i], candidates[uniform_index(rng, static_cast<std::uint64_t>(i + 1))]);
  std::vector<bool> adopter(num_buses, false);
  for (int a = 0; a < num_adopters; ++a) adopter[candidates[a]] = true;

  const double tan_phi = std::tan(std::acos(rg.power_factor));
  std::vector<Bus> buses(num_buses);
  for (int i = 0; i < num_buses; ++i) {
    Bus& b = buses[i];
    b.id = i;
    b.load_p_kw = i == 0 ? 0.0 : uniform(rng, rg.load_p_kw[0], rg.load_p_kw[1]);
    b.load_q_kvar = b.load_p_kw * tan_phi;
    b.v_lower = rg.v_bounds[0];
    b.v_upper = rg.v_bounds[1];
    b.group = 1;
    b.is_adopter = adopter[i];
    b.pv_capacity_kw = adopter[i] ? uniform(rng, rg.pv_kw[0], rg.pv_kw[1]) : 0.0;
  }

  // Downstream totals (children always have larger index than parents).
  std::vector<double> down_pv(num_buses, 0.0), down_load(num_buses, 0.0);
  for (int i = num_buses - 1; i >= 1; --i) {
    down_pv[i] += buses[i].pv_capacity_kw;
    down_load[i] += std::hypot(buses[i].load_p_kw, buses[i].load_q_kvar);
    down_pv[parent[i]] += down_pv[i];
    down_load[parent[i]] += down_load[i];
  }

  const double sbase_kw = rg.base_power_mva * 1000.0;
  std::vector<Line> lines;
  for (int i = 1; i < num_buses; ++i) {
    Line l;
    l.id = 1 + i;  // P = 1 until a partition is applied
    l.from_bus = parent[i];
    l.to_bus = i;
    l.resistance_ohm = uniform(rng, rg.r_ohm[0], rg.r_ohm[1]);
    l.reactance_ohm = l.resistance_ohm * uniform(rng, rg.x_over_r[0], rg.x_over_r[1]);
    const double frac = uniform(rng, rg.rating_pv_fraction[0], rg.rating_pv_fraction[1]);
    const double mult = uniform(rng, rg.rating_load_multiple[0], rg.rating_load_multiple[1]);
    l.rating_pu = down_pv[i] > 0.0 ? frac * down_pv[i] / sbase_kw : mult * down_load[i] / sbase_kw;
    l.rating_pu = std::max(l.rating_pu, 1e-3);
    lines.push_back(l);
  }
  return Feeder(std::move(buses), std::move(lines), 0, rg.base_voltage_kv, rg.base_power_mva, 1);
}

// ---------------------------------------------------------------------------
// Partitioning

/// Deterministic balanced tree cut: removes target_groups - 1 edges, each time
/// cutting the edge whose remaining subtree size is closest to B / target_groups
/// (ties to the lowest line index). Every resulting group is a connected subtree.
inline BusPartition fallback_partition(const Feeder& f, int target_groups) {
  const int B = static_cast<int>(f.num_buses());
  if (target_groups < 1 || target_groups > B)
    throw ValidationError("target_groups must be in [1, " + std::to_string(B) + "]");
  const double ideal = static_cast<double>(B) / target_groups;
  std::vector<bool> cut(f.num_lines(), false);

  auto subtree_sizes = [&] {
    std::vector<int> size(B, 1);
    const auto& order = f.bfs_order();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const int u = *it;
      const int pl = f.parent_line(u);
      if (pl >= 0 && !cut[pl]) size[f.parent(u)] += size[u];
    }
    return size;
  };

  for (int g = 1; g < target_groups; ++g) {
    const auto size = subtree_sizes();
    int best = -1;
    double best_gap = 0.0;
    for (std::size_t k = 0; k < f.num_lines(); ++k) {
      if (cut[k]) continue;
      const double gap = std::abs(size[f.line_child(static_cast<int>(k))] - ideal);
      if (best < 0 || gap < best_gap) {
        best = static_cast<int>(k);
        best_gap = gap;
      }
    }
    cut[best] = true;
  }

  // Label components; group numbers follow the smallest bus index in each.
  std::vector<int> comp(B, -1);
  int next = 0;
  for (int start = 0; start < B; ++start) {
    if (comp[start] >= 0) continue;
    std::vector<int> stack{start};
    comp[start] = next;
    while (!stack.empty()) {
      const int u = stack.back();
      stack.pop_back();
      auto visit = [&](int v) {
        if (comp[v] < 0) {
          comp[v] = next;
          stack.push_back(v);
        }
      };
      if (f.parent_line(u) >= 0 && !cut[f.parent_line(u)]) visit(f.parent(u));
      for (int c : f.children(u))
        if (!cut[f.parent_line(c)]) visit(c);
    }
    ++next;
  }
  BusPartition part;
  part.num_groups = next;
  part.assignment.resize(B);
  for (int i = 0; i < B; ++i) part.assignment[i] = comp[i] + 1;
  return part;
}

/// The feeder's own group labels as a partition.
inline BusPartition feeder_partition(const Feeder& f) {
  BusPartition p;
  p.num_groups = f.num_groups();
  for (const Bus& b : f.buses()) p.assignment.push_back(b.group);
  return p;
}

/// Returns a copy of the feeder with bus groups replaced by the partition.
/// Line ids are renumbered to P+1..P+L in line order.
inline Feeder apply_partition(const Feeder& f, const BusPartition& part) {
  if (part.assignment.size() != f.num_buses())
    throw ValidationError("partition size does not match bus count");
  std::vector<Bus> buses = f.buses();
  for (std::size_t i = 0; i < buses.size(); ++i) buses[i].group = part.assignment[i];
  std::vector<Line> lines = f.lines();
  for (std::size_t k = 0; k < lines.size(); ++k) lines[k].id = part.num_groups + 1 + static_cast<int>(k);
  return Feeder(std::move(buses), std::move(lines), f.slack_bus(), f.base_voltage_kv(),
                f.base_power_mva(), part.num_groups);
}

}  // namespace critscen
