#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <string>
#include <vector>

#include "adoption.hpp"
#include "errors.hpp"
#include "feeder.hpp"

namespace critscen {

using Complex = std::complex<double>;

struct PowerFlowOptions {
  double tolerance = 1e-8;  // max voltage change between sweeps, p.u.
  int max_iter = 50;
  double pv_derate = 1.0;   // fraction of nameplate PV output

  void validate() const {
    if (!(tolerance > 0.0)) throw ValidationError("powerflow.tolerance must be > 0");
    if (max_iter < 1) throw ValidationError("powerflow.max_iter must be >= 1");
    if (!(pv_derate >= 0.0 && pv_derate <= 1.0)) throw ValidationError("powerflow.pv_derate must be in [0, 1]");
  }
};

struct PowerFlowResult {
  std::vector<double> voltages;        // |V| per bus, p.u.
  std::vector<double> flows;           // |S| at the sending (upstream) end per line, p.u.
  std::vector<Complex> voltage_phasors;
  std::vector<Complex> sending_power;  // complex S at the sending end per line
  std::vector<Complex> line_current;   // current flowing from parent to child per line
  bool converged = false;
  int iterations = 0;
};

/// Per-bus complex power demand in p.u. (load minus PV output at unity power factor).
inline std::vector<Complex> net_demand_pu(const Feeder& f, const Bits& bits, double pv_derate = 1.0) {
  if (bits.size() != f.num_adopters())
    throw ValidationError("scenario length " + std::to_string(bits.size()) + " does not match " +
                          std::to_string(f.num_adopters()) + " adopters");
  const double sb = f.power_base_kw();
  std::vector<Complex> s(f.num_buses());
  for (std::size_t i = 0; i < f.num_buses(); ++i)
    s[i] = Complex(f.buses()[i].load_p_kw / sb, f.buses()[i].load_q_kvar / sb);
  for (std::size_t j = 0; j < bits.size(); ++j)
    if (bits[j]) s[f.adopters()[j]] -= Complex(pv_derate * f.buses()[f.adopters()[j]].pv_capacity_kw / sb, 0.0);
  return s;
}

inline std::vector<Complex> line_impedance_pu(const Feeder& f) {
  const double zb = f.impedance_base_ohm();
  std::vector<Complex> z(f.num_lines());
  for (std::size_t k = 0; k < f.num_lines(); ++k)
    z[k] = Complex(f.lines()[k].resistance_ohm / zb, f.lines()[k].reactance_ohm / zb);
  return z;
}

/// Backward/forward sweep with constant-power loads. The slack bus is held at
/// 1.0 p.u.; non-convergence is reported through `converged`, not thrown.
inline PowerFlowResult solve_power_flow(const Feeder& f, const Bits& bits, const PowerFlowOptions& opt = {}) {
  const std::size_t B = f.num_buses();
  const std::size_t L = f.num_lines();
  const auto demand = net_demand_pu(f, bits, opt.pv_derate);
  const auto z = line_impedance_pu(f);
  const auto& order = f.bfs_order();

  PowerFlowResult r;
  r.voltage_phasors.assign(B, Complex(1.0, 0.0));
  r.line_current.assign(L, Complex(0.0, 0.0));
  std::vector<Complex> branch(B);

  for (int it = 1; it <= opt.max_iter; ++it) {
    r.iterations = it;
    // Backward: accumulate currents from the leaves.
    for (std::size_t i = 0; i < B; ++i) branch[i] = std::conj(demand[i] / r.voltage_phasors[i]);
    for (auto u = order.rbegin(); u != order.rend(); ++u) {
      const int pl = f.parent_line(*u);
      if (pl < 0) continue;
      r.line_current[pl] = branch[*u];
      branch[f.parent(*u)] += branch[*u];
    }
    // Forward: voltage drops from the slack bus.
    double delta = 0.0;
    bool finite = true;
    for (int u : order) {
      const int pl = f.parent_line(u);
      if (pl < 0) continue;
      const Complex v = r.voltage_phasors[f.parent(u)] - z[pl] * r.line_current[pl];
      delta = std::max(delta, std::abs(v - r.voltage_phasors[u]));
      r.voltage_phasors[u] = v;
      if (!std::isfinite(v.real()) || !std::isfinite(v.imag()) || std::abs(v) < 1e-6) finite = false;
    }
    if (!finite) break;
    if (delta < opt.tolerance) {
      r.converged = true;
      break;
    }
  }

  // Currents consistent with the final voltages.
  for (std::size_t i = 0; i < B; ++i) branch[i] = std::conj(demand[i] / r.voltage_phasors[i]);
  for (auto u = order.rbegin(); u != order.rend(); ++u) {
    const int pl = f.parent_line(*u);
    if (pl < 0) continue;
    r.line_current[pl] = branch[*u];
    branch[f.parent(*u)] += branch[*u];
  }

  r.voltages.resize(B);
  for (std::size_t i = 0; i < B; ++i) r.voltages[i] = std::abs(r.voltage_phasors[i]);
  r.sending_power.resize(L);
  r.flows.resize(L);
  for (std::size_t k = 0; k < L; ++k) {
    r.sending_power[k] = r.voltage_phasors[f.line_parent(static_cast<int>(k))] * std::conj(r.line_current[k]);
    r.flows[k] = std::abs(r.sending_power[k]);
  }
  for (double v : r.voltages)
    if (!std::isfinite(v) || v <= 0.0) r.converged = false;
  return r;
}

// ---------------------------------------------------------------------------
// Stress and violations

/// f(x) in R^(P+L): entries [0, P) are bus-group stresses, entry (line id - 1)
/// is the stress of that line. Positive means violated.
struct StressVector {
  std::vector<double> values;
};

/// V(f(x)): rectified bus stresses and binned line overloads.
struct ViolationVector {
  std::vector<double> values;
};

inline StressVector compute_stress(const Feeder& f, const BusPartition& part, const PowerFlowResult& pf) {
  if (!pf.converged) throw NumericalError("compute_stress: power flow did not converge");
  if (part.assignment.size() != f.num_buses()) throw ValidationError("partition size does not match bus count");
  const int P = part.num_groups;
  StressVector s;
  s.values.assign(P + f.num_lines(), -std::numeric_limits<double>::infinity());
  for (std::size_t b = 0; b < f.num_buses(); ++b) {
    const Bus& bus = f.buses()[b];
    const double v = pf.voltages[b];
    const double dev = std::max(v - bus.v_upper, bus.v_lower - v);
    double& slot = s.values[part.assignment[b] - 1];
    slot = std::max(slot, dev);
  }
  for (std::size_t k = 0; k < f.num_lines(); ++k) {
    const Line& l = f.lines()[k];
    s.values[P + (l.id - f.num_groups() - 1)] = pf.flows[k] - l.rating_pu;
  }
  for (double v : s.values)
    if (!std::isfinite(v)) throw ValidationError("compute_stress: partition leaves a group empty");
  return s;
}

struct ViolationConfig {
  std::vector<double> line_bins{0.0, 0.1, 0.25, 0.5};  // c_0 = 0 < c_1 < ... < c_J, p.u. excess flow

  void validate() const {
    if (line_bins.empty() || line_bins.front() != 0.0)
      throw ValidationError("violation.line_bins must start at 0");
    for (std::size_t j = 1; j < line_bins.size(); ++j)
      if (!(line_bins[j] > line_bins[j - 1]))
        throw ValidationError("violation.line_bins must be strictly increasing");
  }
};

/// Index j with max(y, 0) in [c_j, c_{j+1}); values at or above c_J map to J.
inline double line_violation(double stress, const ViolationConfig& cfg) {
  const double y = std::max(stress, 0.0);
  auto it = std::upper_bound(cfg.line_bins.begin(), cfg.line_bins.end(), y);
  return static_cast<double>(std::distance(cfg.line_bins.begin(), it) - 1);
}

inline double objective_violation(std::size_t k, double stress, std::size_t num_groups, const ViolationConfig& cfg) {
  return k < num_groups ? std::max(stress, 0.0) : line_violation(stress, cfg);
}

inline ViolationVector violation_map(const StressVector& stress, std::size_t num_groups, const ViolationConfig& cfg) {
  ViolationVector v;
  v.values.resize(stress.values.size());
  for (std::size_t k = 0; k < stress.values.size(); ++k)
    v.values[k] = objective_violation(k, stress.values[k], num_groups, cfg);
  return v;
}

// ---------------------------------------------------------------------------
// Evaluator interface

struct Evaluation {
  StressVector stress;
  ViolationVector violations;
  bool converged = false;
};

/// Maps a scenario to its objectives. The search only talks to this interface,
/// so another power-flow backend can be plugged in.
class Evaluator {
 public:
  virtual ~Evaluator() = default;
  virtual Evaluation evaluate(const Bits& bits) const = 0;
  virtual std::size_t num_objectives() const = 0;
  virtual std::size_t num_bus_objectives() const = 0;
  virtual std::size_t num_adopters() const = 0;
  virtual const ViolationConfig& violation_config() const = 0;
};

class SweepEvaluator final : public Evaluator {
 public:
  SweepEvaluator(const Feeder& feeder, BusPartition partition, ViolationConfig vcfg, PowerFlowOptions opt = {})
      : feeder_(feeder), partition_(std::move(partition)), vcfg_(std::move(vcfg)), opt_(opt) {
    vcfg_.validate();
    opt_.validate();
    if (partition_.assignment.size() != feeder_.num_buses())
      throw ValidationError("partition size does not match bus count");
  }

  Evaluation evaluate(const Bits& bits) const override {
    Evaluation e;
    const auto pf = solve_power_flow(feeder_, bits, opt_);
    e.converged = pf.converged;
    if (!pf.converged) {
      e.stress.values.assign(num_objectives(), std::numeric_limits<double>::quiet_NaN());
      e.violations.values.assign(num_objectives(), std::numeric_limits<double>::quiet_NaN());
      return e;
    }
    e.stress = compute_stress(feeder_, partition_, pf);
    e.violations = violation_map(e.stress, partition_.num_groups, vcfg_);
    return e;
  }
  std::size_t num_objectives() const override { return partition_.num_groups + feeder_.num_lines(); }
  std::size_t num_bus_objectives() const override { return partition_.num_groups; }
  std::size_t num_adopters() const override { return feeder_.num_adopters(); }
  const ViolationConfig& violation_config() const override { return vcfg_; }
  const Feeder& feeder() const { return feeder_; }

 private:
  const Feeder& feeder_;
  BusPartition partition_;
  ViolationConfig vcfg_;
  PowerFlowOptions opt_;
};

}  // namespace critscen
