#include <catch_amalgamated.hpp>

#include <critscen/powerflow.hpp>

#include <Eigen/Dense>
#include <cmath>

using namespace critscen;

namespace {

// Independent reference: Newton-Raphson on the full nodal mismatch
// S_i + V_i conj(sum_j Y_ij V_j) = 0 in rectangular coordinates, with a
// finite-difference Jacobian.
std::vector<Complex> newton_voltages(const Feeder& f, const Bits& bits) {
  const int B = static_cast<int>(f.num_buses());
  const auto z = line_impedance_pu(f);
  const auto s = net_demand_pu(f, bits);
  Eigen::MatrixXcd Y = Eigen::MatrixXcd::Zero(B, B);
  for (std::size_t k = 0; k < f.num_lines(); ++k) {
    const int a = f.bus_index(f.lines()[k].from_bus), b = f.bus_index(f.lines()[k].to_bus);
    const Complex y = 1.0 / z[k];
    Y(a, a) += y;
    Y(b, b) += y;
    Y(a, b) -= y;
    Y(b, a) -= y;
  }
  const int slack = f.slack_index();
  std::vector<int> unk;
  for (int i = 0; i < B; ++i)
    if (i != slack) unk.push_back(i);
  const int n = static_cast<int>(unk.size());
  Eigen::VectorXcd V = Eigen::VectorXcd::Ones(B);
  auto residual = [&](const Eigen::VectorXcd& v) {
    Eigen::VectorXd r(2 * n);
    const Eigen::VectorXcd I = Y * v;
    for (int t = 0; t < n; ++t) {
      const int i = unk[t];
      const Complex mis = s[i] + v[i] * std::conj(I[i]);
      r[2 * t] = mis.real();
      r[2 * t + 1] = mis.imag();
    }
    return r;
  };
  for (int it = 0; it < 50; ++it) {
    const Eigen::VectorXd r = residual(V);
    if (r.cwiseAbs().maxCoeff() < 1e-13) break;
    Eigen::MatrixXd J(2 * n, 2 * n);
    const double h = 1e-7;
    for (int t = 0; t < n; ++t)
      for (int part = 0; part < 2; ++part) {
        Eigen::VectorXcd Vp = V, Vm = V;
        const Complex d = part == 0 ? Complex(h, 0) : Complex(0, h);
        Vp[unk[t]] += d;
        Vm[unk[t]] -= d;
        J.col(2 * t + part) = (residual(Vp) - residual(Vm)) / (2 * h);
      }
    const Eigen::VectorXd dx = J.fullPivLu().solve(-r);
    for (int t = 0; t < n; ++t) V[unk[t]] += Complex(dx[2 * t], dx[2 * t + 1]);
  }
  return {V.data(), V.data() + B};
}

Feeder random_small_feeder(std::uint64_t seed, int buses) {
  SyntheticRanges rg;
  rg.r_ohm[0] = 0.5;
  rg.r_ohm[1] = 2.0;
  return generate_synthetic_feeder(buses, buses - 2, seed, rg);
}

Feeder chain(int n, double r, double x, std::vector<double> loads, std::vector<double> pv, double rating = 1.0) {
  std::vector<Bus> buses;
  std::vector<Line> lines;
  for (int i = 0; i < n; ++i) {
    Bus b;
    b.id = i;
    b.load_p_kw = loads[i];
    b.pv_capacity_kw = pv[i];
    b.is_adopter = pv[i] > 0;
    buses.push_back(b);
    if (i) lines.push_back({1 + i, i - 1, i, r, x, rating});
  }
  return Feeder(buses, lines, 0, 1.0, 1.0, 1);  // Z_base = 1 ohm, S_base = 1000 kW
}

}  // namespace

TEST_CASE("no injections gives a flat profile") {
  std::vector<Bus> buses(6);
  std::vector<Line> lines;
  for (int i = 0; i < 6; ++i) buses[i].id = i;
  for (int i = 1; i < 6; ++i) lines.push_back({1 + i, (i - 1) / 2, i, 0.3, 0.2, 1.0});
  const Feeder f(buses, lines, 0, 4.16, 1.0, 1);
  const auto r = solve_power_flow(f, {});
  REQUIRE(r.converged);
  for (double v : r.voltages) CHECK(v == Catch::Approx(1.0).margin(1e-14));
  for (double s : r.flows) CHECK(s == Catch::Approx(0.0).margin(1e-14));
}

TEST_CASE("two-bus resistive feeder matches the quadratic root") {
  for (double P : {0.05, 0.1, 0.2}) {
    const double rpu = 0.8;
    const Feeder f = chain(2, rpu, 0.0, {0.0, P * 1000.0}, {0.0, 0.0});
    const auto r = solve_power_flow(f, {});
    REQUIRE(r.converged);
    const double v = (1.0 + std::sqrt(1.0 - 4.0 * rpu * P)) / 2.0;
    CHECK(std::abs(r.voltages[1] - v) < 1e-8);
  }
}

TEST_CASE("reverse flow on a three-bus chain") {
  const Feeder f = chain(3, 0.05, 0.03, {0.0, 20.0, 10.0}, {0.0, 0.0, 150.0});
  const auto off = solve_power_flow(f, {0});
  const auto on = solve_power_flow(f, {1});
  REQUIRE(on.converged);
  CHECK(off.sending_power[0].real() > 0.0);
  CHECK(on.sending_power[0].real() < 0.0);
  CHECK(on.sending_power[1].real() < 0.0);
  CHECK(on.voltages[2] > 1.0);
  CHECK(off.voltages[2] < 1.0);
  const auto ref = newton_voltages(f, {1});
  for (int i = 0; i < 3; ++i) CHECK(std::abs(std::abs(ref[i]) - on.voltages[i]) < 1e-9);
}

TEST_CASE("sweep agrees with a Newton solve on small random feeders", "[property]") {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const int buses = 3 + static_cast<int>(seed % 8);  // 3..10 buses
    const Feeder f = random_small_feeder(seed, buses);
    Rng rng = make_rng(seed, "pf-test");
    Bits bits(f.num_adopters());
    for (auto& b : bits) b = uniform01(rng) < 0.5;
    const auto r = solve_power_flow(f, bits);
    REQUIRE(r.converged);
    const auto ref = newton_voltages(f, bits);
    for (std::size_t i = 0; i < f.num_buses(); ++i) worst = std::max(worst, std::abs(r.voltage_phasors[i] - ref[i]));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("nodal power balance", "[property]") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const Feeder f = generate_synthetic_feeder(15, 12, seed);
    Bits bits(f.num_adopters());
    Rng rng = make_rng(seed, "balance");
    for (auto& b : bits) b = uniform01(rng) < 0.5;
    const auto r = solve_power_flow(f, bits);
    REQUIRE(r.converged);
    const auto s = net_demand_pu(f, bits);
    const auto z = line_impedance_pu(f);
    double worst = 0.0;
    for (std::size_t u = 0; u < f.num_buses(); ++u) {
      const int pl = f.parent_line(static_cast<int>(u));
      if (pl < 0) continue;
      // Power arriving from the parent line = sending power minus series losses.
      const Complex arriving = r.sending_power[pl] - z[pl] * std::norm(r.line_current[pl]);
      Complex leaving = s[u];
      for (int c : f.children(static_cast<int>(u))) leaving += r.sending_power[f.parent_line(c)];
      worst = std::max(worst, std::abs(arriving - leaving));
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("end-of-feeder PV raises the local voltage") {
  const Feeder f = chain(5, 0.05, 0.02, {0, 10, 10, 10, 0}, {0, 0, 0, 0, 40});
  CHECK(solve_power_flow(f, {1}).voltages[4] >= solve_power_flow(f, {0}).voltages[4]);
}

TEST_CASE("non-convergence is reported") {
  const Feeder f = chain(3, 2.0, 1.0, {0, 400, 400}, {0, 0, 0});
  const auto r = solve_power_flow(f, {});
  CHECK_FALSE(r.converged);
  const BusPartition part{{1, 1, 1}, 1};
  CHECK_THROWS_AS(compute_stress(f, part, r), NumericalError);
  SweepEvaluator ev(f, part, {});
  const auto e = ev.evaluate({});
  CHECK_FALSE(e.converged);
  CHECK(std::isnan(e.stress.values[0]));
}

TEST_CASE("scenario length must match the adopter count") {
  const Feeder f = chain(3, 0.05, 0.03, {0.0, 20.0, 10.0}, {0.0, 0.0, 150.0});
  CHECK_THROWS_AS(solve_power_flow(f, {1, 0}), ValidationError);
}

TEST_CASE("stress function") {
  std::vector<Bus> buses(2);
  buses[0].id = 0;
  buses[0].group = 1;
  buses[1].id = 1;
  buses[1].group = 2;
  const Feeder f(buses, {{3, 0, 1, 0.1, 0.1, 1.0}}, 0, 4.16, 1.0, 2);
  PowerFlowResult pf;
  pf.converged = true;
  pf.voltages = {1.0, 1.07};
  pf.flows = {0.8};
  const auto s = compute_stress(f, feeder_partition(f), pf);
  REQUIRE(s.values.size() == 3);
  CHECK(s.values[0] == Catch::Approx(-0.05));
  CHECK(s.values[1] == Catch::Approx(0.02));
  CHECK(s.values[2] == Catch::Approx(-0.2));
  pf.voltages = {1.0, 0.93};
  CHECK(compute_stress(f, feeder_partition(f), pf).values[1] == Catch::Approx(0.02));
}

TEST_CASE("violation map") {
  const ViolationConfig c3{{0.0, 0.1, 0.3}};
  CHECK(objective_violation(0, -0.03, 1, c3) == 0.0);
  CHECK(objective_violation(0, 0.04, 1, c3) == Catch::Approx(0.04));
  CHECK(line_violation(0.15, c3) == 1.0);
  CHECK(line_violation(0.0, c3) == 0.0);
  CHECK(line_violation(-0.4, c3) == 0.0);
  CHECK(line_violation(0.1, c3) == 1.0);
  CHECK(line_violation(0.3, c3) == 2.0);
  CHECK(line_violation(7.0, c3) == 2.0);

  const ViolationConfig def;
  Rng rng = make_rng(1, "monotone");
  for (int i = 0; i < 10000; ++i) {
    const double a = uniform(rng, -1, 1), b = uniform(rng, -1, 1);
    const double lo = std::min(a, b), hi = std::max(a, b);
    CHECK(line_violation(lo, def) <= line_violation(hi, def));
    CHECK(objective_violation(0, lo, 1, def) <= objective_violation(0, hi, 1, def));
  }
  const auto v = violation_map({{0.02, -0.1, 0.3}}, 1, def);
  CHECK(v.values == std::vector<double>{0.02, 0.0, 2.0});

  CHECK_THROWS_AS((ViolationConfig{{0.1, 0.2}}).validate(), ValidationError);
  CHECK_THROWS_AS((ViolationConfig{{0.0, 0.2, 0.2}}).validate(), ValidationError);
  CHECK_THROWS_AS((PowerFlowOptions{0.0, 50, 1.0}).validate(), ValidationError);
}

TEST_CASE("evaluator objective layout") {
  const Feeder f0 = generate_synthetic_feeder(15, 12, 7);
  const Feeder f = apply_partition(f0, fallback_partition(f0, 3));
  SweepEvaluator ev(f, feeder_partition(f), {});
  CHECK(ev.num_objectives() == 3 + 14);
  CHECK(ev.num_bus_objectives() == 3);
  const auto e = ev.evaluate(Bits(12, 1));
  REQUIRE(e.converged);
  const auto pf = solve_power_flow(f, Bits(12, 1));
  for (std::size_t k = 0; k < f.num_lines(); ++k)
    CHECK(e.stress.values[f.lines()[k].id - 1] == Catch::Approx(pf.flows[k] - f.lines()[k].rating_pu));
}
