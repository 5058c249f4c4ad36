#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "adoption.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace critscen {

/// Hyperparameters of the ARD categorical (Hamming) kernel
///   k(x, x') = eta * exp(-(1/A) * sum_j theta_j * [x_j != x'_j])
/// plus a nugget `noise` on the diagonal of the training Gram matrix.
struct KernelParams {
  double eta = 1.0;
  Eigen::VectorXd theta;
  double noise = 1e-4;

  static KernelParams isotropic(std::size_t num_adopters, double theta, double eta = 1.0, double noise = 1e-4) {
    return {eta, Eigen::VectorXd::Constant(static_cast<Eigen::Index>(num_adopters), theta), noise};
  }

  void validate() const {
    if (!(eta > 0.0)) throw ValidationError("kernel eta must be > 0");
    if (!(noise > 0.0)) throw ValidationError("kernel noise must be > 0");
    for (Eigen::Index j = 0; j < theta.size(); ++j)
      if (!(theta[j] >= 0.0) || !std::isfinite(theta[j])) throw ValidationError("kernel theta must be finite and >= 0");
  }
};

inline double kernel_eval(const KernelParams& params, const Bits& x1, const Bits& x2) {
  if (x1.size() != x2.size() || static_cast<Eigen::Index>(x1.size()) != params.theta.size())
    throw ValidationError("kernel_eval: length mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < x1.size(); ++j)
    if (x1[j] != x2[j]) s += params.theta[static_cast<Eigen::Index>(j)];
  return params.eta * std::exp(-s / static_cast<double>(x1.size()));
}

/// Relevance of each adopter, 1 - exp(-theta_j / A), in [0, 1).
inline Eigen::VectorXd adopter_relevance(const KernelParams& params) {
  const double A = static_cast<double>(params.theta.size());
  return (1.0 - (-params.theta.array() / A).exp()).matrix();
}

/// Scenarios as an n x A matrix of 0/1 doubles.
inline Eigen::MatrixXd to_design(const std::vector<Bits>& xs, std::size_t num_adopters) {
  Eigen::MatrixXd X(static_cast<Eigen::Index>(xs.size()), static_cast<Eigen::Index>(num_adopters));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].size() != num_adopters) throw ValidationError("scenario length does not match adopter count");
    for (std::size_t j = 0; j < num_adopters; ++j)
      X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = xs[i][j];
  }
  return X;
}

/// Gram matrix K(X1, X2) without nugget. Uses
///   sum_j theta_j [a_j != b_j] = theta.a + theta.b - 2 (a o theta).b
/// for 0/1 vectors so the work is two matrix products.
inline Eigen::MatrixXd gram(const KernelParams& p, const Eigen::MatrixXd& X1, const Eigen::MatrixXd& X2) {
  const double A = static_cast<double>(p.theta.size());
  const Eigen::VectorXd a1 = X1 * p.theta;
  const Eigen::VectorXd a2 = X2 * p.theta;
  Eigen::MatrixXd S = -2.0 * (X1 * p.theta.asDiagonal()) * X2.transpose();
  S.colwise() += a1;
  S.rowwise() += a2.transpose();
  if (&X1 == &X2) S = (0.5 * (S + S.transpose())).eval();  // reassociation in the products can break symmetry
  return p.eta * (-S.array().max(0.0) / A).exp().matrix();
}

// ---------------------------------------------------------------------------
// Log marginal likelihood

/// Unconstrained coordinates used by the optimizer:
///   phi = [log eta, u_1..u_A, log noise],  theta_j = softplus(u_j).
inline double softplus(double u) { return u > 30.0 ? u : std::log1p(std::exp(u)); }
inline double softplus_inv(double t) { return t > 30.0 ? t : std::log(std::expm1(std::max(t, 1e-300))); }
inline double sigmoid(double u) { return 1.0 / (1.0 + std::exp(-u)); }

inline Eigen::VectorXd to_phi(const KernelParams& p) {
  const Eigen::Index A = p.theta.size();
  Eigen::VectorXd phi(A + 2);
  phi[0] = std::log(p.eta);
  for (Eigen::Index j = 0; j < A; ++j) phi[1 + j] = softplus_inv(p.theta[j]);
  phi[A + 1] = std::log(p.noise);
  return phi;
}

inline KernelParams from_phi(const Eigen::VectorXd& phi) {
  const Eigen::Index A = phi.size() - 2;
  KernelParams p;
  p.eta = std::exp(phi[0]);
  p.theta.resize(A);
  for (Eigen::Index j = 0; j < A; ++j) p.theta[j] = softplus(phi[1 + j]);
  p.noise = std::exp(phi[A + 1]);
  return p;
}

/// Gaussian log marginal likelihood of y under a zero-mean GP with kernel
/// params `p` on design X. If `grad_phi` is non-null it receives the gradient
/// with respect to the unconstrained coordinates (see to_phi). Returns -inf if
/// the Gram matrix cannot be factorized.
inline double log_marginal_likelihood(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const KernelParams& p,
                                      Eigen::VectorXd* grad_phi = nullptr) {
  const Eigen::Index n = X.rows();
  const Eigen::Index A = X.cols();
  const Eigen::MatrixXd Kf = gram(p, X, X);
  Eigen::MatrixXd K = Kf;
  K.diagonal().array() += p.noise;
  Eigen::LLT<Eigen::MatrixXd> llt(K);
  if (llt.info() != Eigen::Success) {
    if (grad_phi) grad_phi->setZero(A + 2);
    return -std::numeric_limits<double>::infinity();
  }
  const Eigen::VectorXd alpha = llt.solve(y);
  const Eigen::MatrixXd& Lm = llt.matrixLLT();
  const double logdet = 2.0 * Lm.diagonal().array().log().sum();
  const double lml = -0.5 * y.dot(alpha) - 0.5 * logdet - 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);

  if (grad_phi) {
    // dL/dp = 1/2 tr((alpha alpha^T - K^-1) dK/dp)
    const Eigen::MatrixXd Kinv = llt.solve(Eigen::MatrixXd::Identity(n, n));
    const Eigen::MatrixXd W = alpha * alpha.transpose() - Kinv;
    const Eigen::MatrixXd G = W.cwiseProduct(Kf);
    grad_phi->resize(A + 2);
    (*grad_phi)[0] = 0.5 * G.sum();
    // sum_ik G_ik [x_ij != x_kj] = 2 sum_i x_ij r_i - 2 (X^T G X)_jj, r = G 1.
    const Eigen::VectorXd r = G.rowwise().sum();
    const Eigen::MatrixXd GX = G * X;
    for (Eigen::Index j = 0; j < A; ++j) {
      const double hamming_weighted = 2.0 * X.col(j).dot(r) - 2.0 * X.col(j).dot(GX.col(j));
      const double dL_dtheta = -0.5 / static_cast<double>(A) * hamming_weighted;
      (*grad_phi)[1 + j] = dL_dtheta * sigmoid(softplus_inv(p.theta[j]));
    }
    (*grad_phi)[A + 1] = 0.5 * p.noise * W.trace();
  }
  return lml;
}

// ---------------------------------------------------------------------------
// Hyperparameter fitting

struct FitOptions {
  int restarts = 5;
  int max_iter = 100;
  double learning_rate = 0.08;
  double theta_max_factor = 1e3;  // theta_j <= theta_max_factor * A
  double min_noise = 1e-6;        // standardized units
  double max_noise = 1.0;
  double min_eta = 1e-3;
  double max_eta = 1e3;
  std::uint64_t seed = 0;
};

namespace detail {

inline void clamp_phi(Eigen::VectorXd& phi, std::size_t A, const FitOptions& o) {
  const Eigen::Index a = static_cast<Eigen::Index>(A);
  phi[0] = std::clamp(phi[0], std::log(o.min_eta), std::log(o.max_eta));
  const double umax = softplus_inv(o.theta_max_factor * static_cast<double>(A));
  for (Eigen::Index j = 1; j <= a; ++j) phi[j] = std::clamp(phi[j], -20.0, umax);
  phi[a + 1] = std::clamp(phi[a + 1], std::log(o.min_noise), std::log(o.max_noise));
}

struct Standardization {
  double mean = 0.0;
  double scale = 1.0;
  bool degenerate = false;
};

inline Standardization standardize(const Eigen::VectorXd& y) {
  Standardization s;
  s.mean = y.mean();
  const double var = y.size() > 1 ? (y.array() - s.mean).square().sum() / static_cast<double>(y.size()) : 0.0;
  const double floor = 1e-12 * std::max(1.0, std::abs(s.mean));
  s.degenerate = !(std::sqrt(var) > floor);
  s.scale = s.degenerate ? 1.0 : std::sqrt(var);
  return s;
}

}  // namespace detail

/// Maximum-likelihood fit of the kernel hyperparameters to standardized
/// outputs. Restart 0 starts from `init`; the others start from seeded random
/// draws. Each restart runs projected Adam ascent on the unconstrained
/// coordinates; the best likelihood seen across restarts wins.
inline KernelParams fit_hyperparameters(const std::vector<Bits>& inputs, const std::vector<double>& outputs,
                                        const KernelParams& init, const FitOptions& opt = {}) {
  if (inputs.size() < 2) throw ValidationError("fit_hyperparameters needs at least 2 training points");
  if (inputs.size() != outputs.size()) throw ValidationError("fit_hyperparameters: input/output size mismatch");
  const std::size_t A = inputs.front().size();
  if (static_cast<std::size_t>(init.theta.size()) != A) throw ValidationError("fit_hyperparameters: init theta length");
  const Eigen::MatrixXd X = to_design(inputs, A);
  const Eigen::VectorXd yraw = Eigen::Map<const Eigen::VectorXd>(outputs.data(), static_cast<Eigen::Index>(outputs.size()));
  const auto st = detail::standardize(yraw);
  if (st.degenerate) {
    KernelParams p = init;
    p.eta = opt.min_eta;
    p.noise = opt.max_noise;
    return p;
  }
  const Eigen::VectorXd y = (yraw.array() - st.mean) / st.scale;

  Rng rng = make_rng(opt.seed, "hyperparameter-restarts");
  Eigen::VectorXd best_phi = to_phi(init);
  detail::clamp_phi(best_phi, A, opt);
  double best = log_marginal_likelihood(X, y, from_phi(best_phi));

  const double dA = static_cast<double>(A);
  for (int r = 0; r < std::max(1, opt.restarts); ++r) {
    Eigen::VectorXd phi(static_cast<Eigen::Index>(A) + 2);
    if (r == 0) {
      phi = to_phi(init);
    } else {
      phi[0] = uniform(rng, std::log(0.3), std::log(3.0));
      for (std::size_t j = 0; j < A; ++j) phi[1 + j] = softplus_inv(dA * std::exp(uniform(rng, -2.5, 1.5)));
      phi[static_cast<Eigen::Index>(A) + 1] = uniform(rng, std::log(1e-4), std::log(1e-1));
    }
    detail::clamp_phi(phi, A, opt);

    Eigen::VectorXd m = Eigen::VectorXd::Zero(phi.size());
    Eigen::VectorXd v = Eigen::VectorXd::Zero(phi.size());
    Eigen::VectorXd g;
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (int it = 1; it <= opt.max_iter; ++it) {
      const double lml = log_marginal_likelihood(X, y, from_phi(phi), &g);
      if (!std::isfinite(lml)) break;
      if (lml > best) {
        best = lml;
        best_phi = phi;
      }
      if (g.norm() < 1e-5) break;
      m = b1 * m + (1 - b1) * g;
      v = b2 * v + (1 - b2) * g.cwiseProduct(g);
      const double c1 = 1 - std::pow(b1, it), c2 = 1 - std::pow(b2, it);
      phi += (opt.learning_rate * (m / c1).array() / ((v / c2).array().sqrt() + eps)).matrix();
      detail::clamp_phi(phi, A, opt);
    }
    const double final_lml = log_marginal_likelihood(X, y, from_phi(phi));
    if (final_lml > best) {
      best = final_lml;
      best_phi = phi;
    }
  }
  return from_phi(best_phi);
}

// ---------------------------------------------------------------------------
// Posterior

struct JointPosterior {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  double jitter_unit = 1.0;  // jitter is expressed in multiples of this variance

  /// Lower Cholesky factor of the covariance, adding jitter 1e-8, 1e-7, ...,
  /// 1e-4 (times jitter_unit) until factorization succeeds. An exactly zero
  /// covariance yields a zero factor.
  Eigen::MatrixXd factor() const {
    const Eigen::Index M = covariance.rows();
    if (covariance.diagonal().cwiseAbs().maxCoeff() == 0.0 && covariance.cwiseAbs().maxCoeff() == 0.0)
      return Eigen::MatrixXd::Zero(M, M);
    Eigen::MatrixXd C = 0.5 * (covariance + covariance.transpose());
    Eigen::LLT<Eigen::MatrixXd> llt(C);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    for (double jitter = 1e-8; jitter <= 1e-4 * 1.0000001; jitter *= 10.0) {
      Eigen::MatrixXd Cj = C;
      Cj.diagonal().array() += jitter * jitter_unit;
      llt.compute(Cj);
      if (llt.info() == Eigen::Success) return llt.matrixL();
    }
    throw NumericalError("posterior covariance is not factorizable after maximum jitter");
  }
};

/// Zero-mean GP on (optionally) standardized outputs, with the training
/// factorization cached. Immutable; with_data() returns an updated copy.
class GPSurrogate {
 public:
  GPSurrogate(std::vector<Bits> inputs, const std::vector<double>& outputs, KernelParams params,
              bool standardize_outputs = true)
      : params_(std::move(params)), inputs_(std::move(inputs)), outputs_(outputs), standardize_(standardize_outputs) {
    params_.validate();
    if (inputs_.empty()) throw ValidationError("GPSurrogate needs at least one training point");
    if (inputs_.size() != outputs_.size()) throw ValidationError("GPSurrogate: input/output size mismatch");
    A_ = inputs_.front().size();
    if (static_cast<std::size_t>(params_.theta.size()) != A_) throw ValidationError("GPSurrogate: theta length mismatch");
    X_ = to_design(inputs_, A_);
    const Eigen::VectorXd yraw = Eigen::Map<const Eigen::VectorXd>(outputs_.data(), static_cast<Eigen::Index>(outputs_.size()));
    if (standardize_) {
      const auto st = detail::standardize(yraw);
      mean_ = st.mean;
      scale_ = st.scale;
    }
    y_ = (yraw.array() - mean_) / scale_;
    Eigen::MatrixXd K = gram(params_, X_, X_);
    K.diagonal().array() += params_.noise;
    chol_.compute(K);
    for (double jitter = 1e-8; chol_.info() != Eigen::Success; jitter *= 10.0) {
      if (jitter > 1e-4 * 1.0000001) throw NumericalError("GP training covariance is not factorizable");
      Eigen::MatrixXd Kj = K;
      Kj.diagonal().array() += jitter;
      chol_.compute(Kj);
    }
    alpha_ = chol_.solve(y_);
  }

  const KernelParams& params() const { return params_; }
  const std::vector<Bits>& inputs() const { return inputs_; }
  const std::vector<double>& outputs() const { return outputs_; }
  double output_mean() const { return mean_; }
  double output_scale() const { return scale_; }
  std::size_t size() const { return inputs_.size(); }

  GPSurrogate with_data(const std::vector<Bits>& more_inputs, const std::vector<double>& more_outputs) const {
    auto in = inputs_;
    auto out = outputs_;
    in.insert(in.end(), more_inputs.begin(), more_inputs.end());
    out.insert(out.end(), more_outputs.begin(), more_outputs.end());
    return GPSurrogate(std::move(in), out, params_, standardize_);
  }

  /// Joint predictive distribution over the candidates, on the original output scale.
  JointPosterior posterior(const std::vector<Bits>& candidates) const {
    if (candidates.empty()) throw ValidationError("posterior: no candidates");
    const Eigen::MatrixXd Xc = to_design(candidates, A_);
    const Eigen::MatrixXd Kcx = gram(params_, Xc, X_);
    JointPosterior post;
    post.mean = (Kcx * alpha_).array() * scale_ + mean_;
    const Eigen::MatrixXd V = chol_.matrixL().solve(Kcx.transpose());
    Eigen::MatrixXd cov = gram(params_, Xc, Xc);
    cov.noalias() -= V.transpose() * V;
    post.covariance = (0.5 * (cov + cov.transpose())) * (scale_ * scale_);
    post.jitter_unit = scale_ * scale_;
    return post;
  }

  /// Marginal predictive means and variances (original scale).
  std::pair<Eigen::VectorXd, Eigen::VectorXd> marginals(const std::vector<Bits>& candidates) const {
    const Eigen::MatrixXd Xc = to_design(candidates, A_);
    const Eigen::MatrixXd Kcx = gram(params_, Xc, X_);
    Eigen::VectorXd mu = (Kcx * alpha_).array() * scale_ + mean_;
    const Eigen::MatrixXd V = chol_.matrixL().solve(Kcx.transpose());
    Eigen::VectorXd var = (params_.eta - V.colwise().squaredNorm().transpose().array()).max(0.0) * (scale_ * scale_);
    return {mu, var};
  }

  double log_marginal_likelihood() const { return critscen::log_marginal_likelihood(X_, y_, params_); }

 private:
  KernelParams params_;
  std::vector<Bits> inputs_;
  std::vector<double> outputs_;
  bool standardize_;
  std::size_t A_ = 0;
  Eigen::MatrixXd X_;
  Eigen::VectorXd y_;
  double mean_ = 0.0;
  double scale_ = 1.0;
  Eigen::LLT<Eigen::MatrixXd> chol_;
  Eigen::VectorXd alpha_;
};

/// N x M matrix of joint draws mean + L z (rows are samples).
inline Eigen::MatrixXd sample_joint(const JointPosterior& post, int num_samples, std::uint64_t seed) {
  if (num_samples < 1) throw ValidationError("sample_joint: num_samples must be >= 1");
  const Eigen::MatrixXd L = post.factor();
  const Eigen::Index M = post.mean.size();
  Rng rng = make_rng(seed, "posterior-samples");
  Eigen::MatrixXd Z(M, num_samples);
  for (Eigen::Index s = 0; s < num_samples; ++s)
    for (Eigen::Index m = 0; m < M; ++m) Z(m, s) = standard_normal(rng);
  Eigen::MatrixXd out = (L.triangularView<Eigen::Lower>() * Z).transpose();
  out.rowwise() += post.mean.transpose();
  return out;
}

}  // namespace critscen
