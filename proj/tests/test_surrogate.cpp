#include <catch_amalgamated.hpp>

#include <critscen/surrogate.hpp>

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>

using namespace critscen;

namespace {

std::vector<Bits> random_bits(Rng& rng, std::size_t n, std::size_t A) {
  std::vector<Bits> xs(n, Bits(A));
  for (auto& x : xs)
    for (auto& b : x) b = uniform01(rng) < 0.5;
  return xs;
}

KernelParams random_params(Rng& rng, std::size_t A) {
  KernelParams p;
  p.eta = uniform(rng, 0.1, 5.0);
  p.noise = uniform(rng, 1e-4, 0.5);
  p.theta.resize(static_cast<Eigen::Index>(A));
  for (Eigen::Index j = 0; j < p.theta.size(); ++j) p.theta[j] = uniform(rng, 0.0, 3.0 * A);
  return p;
}

}  // namespace

TEST_CASE("kernel values") {
  const std::size_t A = 6;
  const auto p = KernelParams::isotropic(A, 2.5, 1.7);
  const Bits x{1, 0, 1, 1, 0, 0};
  Bits y = x;
  for (auto& b : y) b = !b;
  CHECK(kernel_eval(p, x, x) == Catch::Approx(1.7));
  CHECK(kernel_eval(p, x, y) == Catch::Approx(1.7 * std::exp(-2.5)));
  CHECK(kernel_eval(KernelParams::isotropic(A, 0.0, 0.9), x, y) == Catch::Approx(0.9));
  CHECK_THROWS_AS(kernel_eval(p, x, Bits{1, 0}), ValidationError);

  Rng rng = make_rng(1, "gram");
  const auto xs = random_bits(rng, 12, A);
  const auto q = random_params(rng, A);
  const Eigen::MatrixXd X = to_design(xs, A);
  const Eigen::MatrixXd K = gram(q, X, X);
  for (std::size_t i = 0; i < xs.size(); ++i)
    for (std::size_t j = 0; j < xs.size(); ++j) CHECK(K(i, j) == Catch::Approx(kernel_eval(q, xs[i], xs[j])));
}

TEST_CASE("gram matrices are symmetric positive semidefinite", "[property]") {
  Rng rng = make_rng(2, "psd");
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t A = 2 + uniform_index(rng, 14);
    const auto xs = random_bits(rng, 5 + uniform_index(rng, 40), A);
    const auto p = random_params(rng, A);
    const Eigen::MatrixXd X = to_design(xs, A);
    const Eigen::MatrixXd K = gram(p, X, X);
    CHECK((K - K.transpose()).cwiseAbs().maxCoeff() == 0.0);
    worst = std::min(worst, Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(K).eigenvalues().minCoeff());
  }
  CHECK(worst >= -1e-8);
}

TEST_CASE("adopter relevance") {
  KernelParams p = KernelParams::isotropic(4, 0.0);
  p.theta << 0.0, 4.0, 1e6, 2.0;
  const auto r = adopter_relevance(p);
  CHECK(r[0] == 0.0);
  CHECK(r[1] == Catch::Approx(1.0 - std::exp(-1.0)));
  CHECK(r[2] == Catch::Approx(1.0));
  CHECK(r[2] < 1.0 + 1e-15);
  CHECK(r[3] < r[1]);
}

TEST_CASE("two-point posterior matches the closed form") {
  KernelParams p = KernelParams::isotropic(3, 0.0, 1.3, 0.05);
  p.theta << 0.7, 2.0, 4.0;
  const std::vector<Bits> X{{0, 1, 0}, {1, 1, 0}};
  const std::vector<double> y{0.4, -1.1};
  const Bits xs{1, 0, 0};
  const GPSurrogate gp(X, y, p, false);
  const auto post = gp.posterior({xs});

  const double a = p.eta + p.noise, b = kernel_eval(p, X[0], X[1]);
  const double det = a * a - b * b;
  const double k1 = kernel_eval(p, xs, X[0]), k2 = kernel_eval(p, xs, X[1]);
  // [a b; b a]^{-1} = [a -b; -b a] / det
  const double w1 = (a * k1 - b * k2) / det, w2 = (-b * k1 + a * k2) / det;
  CHECK(post.mean[0] == Catch::Approx(w1 * y[0] + w2 * y[1]).epsilon(1e-12));
  CHECK(post.covariance(0, 0) == Catch::Approx(p.eta - (w1 * k1 + w2 * k2)).epsilon(1e-12));
}

TEST_CASE("interpolation and prior reversion", "[property]") {
  Rng rng = make_rng(3, "limits");
  const std::size_t A = 8;
  const auto X = random_bits(rng, 15, A);
  std::vector<double> y;
  for (const auto& x : X) y.push_back(0.3 * x[0] - 0.2 * x[3] + 0.1 * x[5]);

  SECTION("training point with vanishing noise") {
    auto xs = X;
    std::sort(xs.begin(), xs.end());
    xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
    std::vector<double> ys;
    for (const auto& x : xs) ys.push_back(0.3 * x[0] - 0.2 * x[3] + 0.1 * x[5]);
    const GPSurrogate gp(xs, ys, KernelParams::isotropic(A, 3.0, 1.0, 1e-10), false);
    const auto [mu, var] = gp.marginals({xs[2]});
    CHECK(mu[0] == Catch::Approx(ys[2]).margin(1e-6));
    CHECK(var[0] < 1e-6);
  }
  SECTION("uncorrelated candidate") {
    const GPSurrogate gp(X, y, KernelParams::isotropic(A, 1e4 * A, 0.8, 1e-3), false);
    Bits far = X[0];
    for (auto& b : far) b = !b;
    bool fresh = std::find(X.begin(), X.end(), far) == X.end();
    REQUIRE(fresh);
    const auto post = gp.posterior({far});
    CHECK(post.mean[0] == Catch::Approx(0.0).margin(1e-12));
    CHECK(post.covariance(0, 0) == Catch::Approx(0.8));
  }
}

TEST_CASE("posterior variance is bounded by the prior and shrinks with data") {
  Rng rng = make_rng(4, "variance");
  for (int t = 0; t < 30; ++t) {
    const std::size_t A = 6;
    const auto X = random_bits(rng, 20, A);
    const auto cand = random_bits(rng, 10, A);
    std::vector<double> y;
    for (std::size_t i = 0; i < X.size(); ++i) y.push_back(standard_normal(rng));
    const auto p = random_params(rng, A);
    const GPSurrogate small(std::vector<Bits>(X.begin(), X.end() - 1), std::vector<double>(y.begin(), y.end() - 1), p, false);
    const GPSurrogate big(X, y, p, false);
    const auto [m1, v1] = small.marginals(cand);
    const auto [m2, v2] = big.marginals(cand);
    for (Eigen::Index i = 0; i < v1.size(); ++i) {
      CHECK(v1[i] <= p.eta + 1e-10);
      CHECK(v2[i] <= v1[i] + 1e-10);
    }
    const auto post = big.posterior(cand);
    CHECK((post.covariance.diagonal() - v2).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("log marginal likelihood gradient matches finite differences", "[property]") {
  Rng rng = make_rng(5, "grad");
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t A = 3 + uniform_index(rng, 5);
    const auto xs = random_bits(rng, 12, A);
    const Eigen::MatrixXd X = to_design(xs, A);
    Eigen::VectorXd y(static_cast<Eigen::Index>(xs.size()));
    for (Eigen::Index i = 0; i < y.size(); ++i) y[i] = standard_normal(rng);
    auto p = random_params(rng, A);
    for (Eigen::Index j = 0; j < p.theta.size(); ++j) p.theta[j] = uniform(rng, 0.2, 2.0 * A);
    Eigen::VectorXd g;
    log_marginal_likelihood(X, y, p, &g);
    const Eigen::VectorXd phi = to_phi(p);
    for (Eigen::Index i = 0; i < phi.size(); ++i) {
      const double h = 1e-5;
      Eigen::VectorXd a = phi, b = phi;
      a[i] += h;
      b[i] -= h;
      const double fd = (log_marginal_likelihood(X, y, from_phi(a)) - log_marginal_likelihood(X, y, from_phi(b))) / (2 * h);
      worst = std::max(worst, std::abs(fd - g[i]) / std::max(1.0, std::abs(fd)));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("relevance ranking recovers the active coordinate") {
  Rng rng = make_rng(6, "ard");
  const std::size_t A = 8;
  const auto X = random_bits(rng, 60, A);
  std::vector<double> y;
  for (const auto& x : X) y.push_back(2.0 * x[0] + 0.01 * standard_normal(rng));
  FitOptions opt;
  opt.seed = 3;
  const auto p = fit_hyperparameters(X, y, KernelParams::isotropic(A, 2.0, 1.0, 1e-3), opt);
  std::vector<double> rest(p.theta.data() + 1, p.theta.data() + A);
  std::sort(rest.begin(), rest.end());
  CHECK(p.theta[0] > rest[rest.size() / 2]);

  const auto again = fit_hyperparameters(X, y, KernelParams::isotropic(A, 2.0, 1.0, 1e-3), opt);
  CHECK(again.eta == p.eta);
  CHECK(again.noise == p.noise);
  CHECK(again.theta == p.theta);

  const auto init = KernelParams::isotropic(A, 2.0, 1.0, 1e-3);
  const Eigen::MatrixXd D = to_design(X, A);
  Eigen::VectorXd ys = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
  ys = (ys.array() - ys.mean()) / std::sqrt((ys.array() - ys.mean()).square().mean());
  CHECK(log_marginal_likelihood(D, ys, p) >= log_marginal_likelihood(D, ys, init));
  CHECK_THROWS_AS(fit_hyperparameters({X[0]}, {1.0}, init, opt), ValidationError);
}

TEST_CASE("constant outputs") {
  Rng rng = make_rng(7, "const");
  const std::size_t A = 5;
  const auto X = random_bits(rng, 10, A);
  const std::vector<double> y(X.size(), -0.37);
  const auto p = fit_hyperparameters(X, y, KernelParams::isotropic(A, 2.0));
  const GPSurrogate gp(X, y, p);
  const auto [mu, var] = gp.marginals(random_bits(rng, 6, A));
  for (Eigen::Index i = 0; i < mu.size(); ++i) CHECK(mu[i] == Catch::Approx(-0.37).margin(1e-9));
}

TEST_CASE("joint sampling") {
  JointPosterior zero{Eigen::Vector3d(1.0, -2.0, 0.5), Eigen::Matrix3d::Zero()};
  const auto z = sample_joint(zero, 20, 1);
  for (Eigen::Index s = 0; s < z.rows(); ++s) CHECK((z.row(s).transpose() - zero.mean).cwiseAbs().maxCoeff() == 0.0);

  Eigen::Matrix3d C;
  C << 1.0, 0.6, 0.2, 0.6, 2.0, -0.3, 0.2, -0.3, 0.5;
  JointPosterior post{Eigen::Vector3d(0.3, -1.0, 2.0), C};
  const int N = 100000;
  const auto draws = sample_joint(post, N, 42);
  const Eigen::VectorXd mean = draws.colwise().mean().transpose();
  for (int m = 0; m < 3; ++m) CHECK(std::abs(mean[m] - post.mean[m]) < 4 * std::sqrt(C(m, m) / N));
  const Eigen::MatrixXd centered = draws.rowwise() - mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / (N - 1);
  CHECK((cov - C).cwiseAbs().maxCoeff() < 0.05);
  CHECK(sample_joint(post, 10, 42) == draws.topRows(10));
  CHECK(sample_joint(post, 10, 43) != draws.topRows(10));

  JointPosterior bad{Eigen::Vector2d(0, 0), Eigen::Matrix2d(Eigen::Vector2d(1.0, -1.0).asDiagonal())};
  CHECK_THROWS_AS(sample_joint(bad, 5, 1), NumericalError);
  // Rank-deficient but PSD covariance is repaired by jitter.
  JointPosterior flat{Eigen::Vector2d(0, 0), Eigen::Matrix2d::Ones()};
  CHECK_NOTHROW(sample_joint(flat, 5, 1));
}
