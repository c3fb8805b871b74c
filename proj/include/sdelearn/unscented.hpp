#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

#include "sdelearn/cholesky.hpp"

namespace sdelearn {

/// Spread parameters of the unscented transform; lambda = alpha^2 (n+kappa) - n.
struct UtParams {
  double alpha = 1e-3;
  double beta = 2.0;
  double kappa = 0.0;

  double lambda(int n) const { return alpha * alpha * (n + kappa) - n; }
};

/// 2n+1 sigma points with mean weights and covariance weights. The diagonal
/// covariance weights are kept alongside the full weight matrix
/// W = (I - [w_m ... w_m]) diag(c) (I - [w_m ... w_m])^T, which is the matrix
/// appearing in the compact transform Y W Y^T.
struct SigmaSet {
  Eigen::MatrixXd points;        // n x (2n+1), column 0 is the mean
  Eigen::VectorXd mean_weights;  // length 2n+1, sums to 1
  Eigen::VectorXd cov_weights;   // diagonal entries of the center matrix
  bool fourth_moment_fallback = false;

  int dim() const { return static_cast<int>(points.rows()); }
  int count() const { return static_cast<int>(points.cols()); }

  Eigen::MatrixXd cov_weight_matrix() const {
    const int m = count();
    Eigen::MatrixXd centering =
        Eigen::MatrixXd::Identity(m, m) - mean_weights.replicate(1, m);
    return centering * cov_weights.asDiagonal() * centering.transpose();
  }
};

/// Weighted mean of transformed points, evaluated in deviation form so the
/// large center weight at small alpha does not amplify roundoff.
inline Eigen::VectorXd sigma_mean(const Eigen::MatrixXd& y, const Eigen::VectorXd& w) {
  Eigen::VectorXd mu = y.col(0);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(y.rows());
  for (int i = 1; i < y.cols(); ++i) acc += w[i] * (y.col(i) - y.col(0));
  return mu + acc;
}

inline Eigen::MatrixXd sigma_cov(const Eigen::MatrixXd& y, const Eigen::VectorXd& cw,
                                 const Eigen::VectorXd& mean) {
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(y.rows(), y.rows());
  for (int i = 0; i < y.cols(); ++i) {
    const Eigen::VectorXd d = y.col(i) - mean;
    cov.noalias() += cw[i] * d * d.transpose();
  }
  return cov;
}

/// Standard symmetric sigma points: column 0 at the mean, columns i and n+i at
/// mean +/- sqrt(n+lambda) * [chol(cov)]_i.
inline SigmaSet sigma_points(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                             const UtParams& p, const std::string& context = "") {
  const int n = static_cast<int>(mean.size());
  if (cov.rows() != n || cov.cols() != n)
    throw std::invalid_argument("sigma_points: covariance shape mismatch");
  const double lam = p.lambda(n);
  if (!(n + lam > 0.0))
    throw std::invalid_argument("sigma_points: n + lambda must be positive");
  const double scale = std::sqrt(n + lam);

  const Eigen::MatrixXd L = jittered_cholesky(cov, context);

  SigmaSet s;
  s.points.resize(n, 2 * n + 1);
  s.points.col(0) = mean;
  for (int i = 0; i < n; ++i) {
    s.points.col(1 + i) = mean + scale * L.col(i);
    s.points.col(1 + n + i) = mean - scale * L.col(i);
  }
  s.mean_weights.resize(2 * n + 1);
  s.cov_weights.resize(2 * n + 1);
  s.mean_weights[0] = lam / (n + lam);
  s.cov_weights[0] = lam / (n + lam) + (1.0 - p.alpha * p.alpha + p.beta);
  const double wi = 1.0 / (2.0 * (n + lam));
  for (int i = 1; i <= 2 * n; ++i) {
    s.mean_weights[i] = wi;
    s.cov_weights[i] = wi;
  }
  return s;
}

/// Moment estimate of y = F(z): mean = Y w_m, cov = Y W Y^T.
template <class F>
std::pair<Eigen::VectorXd, Eigen::MatrixXd> ut_transform(const SigmaSet& s, F&& f) {
  Eigen::MatrixXd y;
  for (int i = 0; i < s.count(); ++i) {
    const Eigen::VectorXd yi = f(Eigen::VectorXd(s.points.col(i)));
    if (!yi.allFinite())
      throw std::runtime_error("ut_transform: non-finite output at sigma point " +
                               std::to_string(i));
    if (y.size() == 0) y.resize(yi.size(), s.count());
    y.col(i) = yi;
  }
  const Eigen::VectorXd mean = sigma_mean(y, s.mean_weights);
  return {mean, sigma_cov(y, s.cov_weights, mean)};
}

/// Four-moment sigma points: in coordinates whitened by chol(cov), each axis
/// carries an asymmetric point pair whose weights solve the per-axis mean,
/// variance, skewness and kurtosis conditions; a shared center point absorbs
/// the remaining probability mass. Falls back to a symmetric Gaussian-moment
/// set when the requested moments are not realizable.
inline SigmaSet sigma_points_4m(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                                const Eigen::VectorXd& skew, const Eigen::VectorXd& kurt,
                                const std::string& context = "") {
  const int n = static_cast<int>(mean.size());
  if (skew.size() != n || kurt.size() != n)
    throw std::invalid_argument("sigma_points_4m: moment vector size mismatch");

  const Eigen::MatrixXd L = jittered_cholesky(cov, context);

  // Whitened-axis third/fourth moments reproducing the per-component central
  // moments of x: solve sum_j L_ij^3 g_j = skew_i sigma_i^3 and the quartic
  // analogue by forward substitution (axis points carry no cross moments).
  Eigen::VectorXd gamma(n), kap(n);
  bool realizable = true;
  for (int i = 0; i < n && realizable; ++i) {
    const double sd = std::sqrt(std::max(cov(i, i), 0.0));
    double m3 = skew[i] * sd * sd * sd;
    double m4 = kurt[i] * sd * sd * sd * sd;
    for (int j = 0; j < i; ++j) {
      m3 -= L(i, j) * L(i, j) * L(i, j) * gamma[j];
      m4 -= L(i, j) * L(i, j) * L(i, j) * L(i, j) * kap[j];
    }
    const double d3 = L(i, i) * L(i, i) * L(i, i);
    if (d3 <= 0.0) {
      realizable = false;
      break;
    }
    gamma[i] = m3 / d3;
    kap[i] = m4 / (d3 * L(i, i));
    if (kap[i] < 1.0 + gamma[i] * gamma[i] - 1e-12) realizable = false;
  }

  SigmaSet s;
  if (!realizable) {
    // Gaussian-moment placement (points at +/- sqrt(3), weights 1/6).
    UtParams fallback{1.0, 0.0, 3.0 - n};
    s = sigma_points(mean, cov, fallback, context);
    s.cov_weights = s.mean_weights;  // plain probability weights
    s.fourth_moment_fallback = true;
    return s;
  }

  s.points.resize(n, 2 * n + 1);
  s.mean_weights.resize(2 * n + 1);
  s.points.col(0) = mean;
  double center_w = 1.0;
  for (int j = 0; j < n; ++j) {
    const double disc = std::sqrt(std::max(4.0 * kap[j] - 3.0 * gamma[j] * gamma[j], 0.0));
    const double a_plus = 0.5 * (disc + gamma[j]);
    const double a_minus = 0.5 * (disc - gamma[j]);
    const double span = a_plus + a_minus;
    const double p_plus = 1.0 / (a_plus * span);
    const double p_minus = 1.0 / (a_minus * span);
    s.points.col(1 + j) = mean + a_plus * L.col(j);
    s.points.col(1 + n + j) = mean - a_minus * L.col(j);
    s.mean_weights[1 + j] = p_plus;
    s.mean_weights[1 + n + j] = p_minus;
    center_w -= p_plus + p_minus;
  }
  s.mean_weights[0] = center_w;
  s.cov_weights = s.mean_weights;
  return s;
}

}  // namespace sdelearn
