#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>

namespace sdelearn {

struct SingularCovarianceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Lower Cholesky factor of a symmetric PSD matrix with diagonal jitter.
// Jitter starts at 1e-10 * trace/n and doubles up to 1e-6 * trace/n before
// giving up; data-estimated covariances are exactly singular at k=0, so an
// absolute floor keeps the zero-matrix case usable.
inline Eigen::MatrixXd jittered_cholesky(const Eigen::MatrixXd& p,
                                         const std::string& context = "",
                                         double* jitter_used = nullptr) {
  const int n = static_cast<int>(p.rows());
  const double scale = p.trace() / std::max(1, n);
  const double base = scale > 0.0 ? 1e-10 * scale : 1e-30;
  const double cap = scale > 0.0 ? 1e-6 * scale : 1e-26;

  Eigen::LLT<Eigen::MatrixXd> llt(p);
  if (llt.info() == Eigen::Success) {
    if (jitter_used) *jitter_used = 0.0;
    return llt.matrixL();
  }
  for (double j = base; j <= cap; j *= 2.0) {
    llt.compute(p + j * Eigen::MatrixXd::Identity(n, n));
    if (llt.info() == Eigen::Success) {
      if (jitter_used) *jitter_used = j;
      return llt.matrixL();
    }
  }
  throw SingularCovarianceError("covariance not factorizable after max jitter" +
                                (context.empty() ? "" : " (" + context + ")"));
}

// Reverse pass of the Cholesky factorization A = L L^T (lower L).
// Given dLoss/dL, returns dLoss/dA as a full symmetric matrix, assuming the
// forward read the full symmetric A. Loop-reversal of the classical
// column-by-column factorization.
inline Eigen::MatrixXd cholesky_backward(const Eigen::MatrixXd& L,
                                         const Eigen::MatrixXd& L_bar_in) {
  const int n = static_cast<int>(L.rows());
  Eigen::MatrixXd Lb = L_bar_in;
  // Gradients w.r.t. strictly-upper entries of L are meaningless; drop them.
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) Lb(i, j) = 0.0;
  Eigen::MatrixXd Ab = Eigen::MatrixXd::Zero(n, n);

  for (int j = n - 1; j >= 0; --j) {
    for (int i = n - 1; i > j; --i) {
      // forward: L(i,j) = (A(i,j) - sum_p L(i,p) L(j,p)) / L(j,j)
      const double g = Lb(i, j);
      if (g != 0.0) {
        const double inv = 1.0 / L(j, j);
        Ab(i, j) += g * inv;
        for (int p = 0; p < j; ++p) {
          Lb(i, p) -= g * L(j, p) * inv;
          Lb(j, p) -= g * L(i, p) * inv;
        }
        Lb(j, j) -= g * L(i, j) * inv;
      }
      Lb(i, j) = 0.0;
    }
    // forward: L(j,j) = sqrt(A(j,j) - sum_p L(j,p)^2)
    const double d_bar = Lb(j, j) / (2.0 * L(j, j));
    Ab(j, j) += d_bar;
    for (int p = 0; p < j; ++p) Lb(j, p) -= 2.0 * L(j, p) * d_bar;
    Lb(j, j) = 0.0;
  }

  // The factorization reads only the lower triangle; map back to a gradient
  // w.r.t. the full symmetric matrix.
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    out(i, i) = Ab(i, i);
    for (int j = 0; j < i; ++j) {
      out(i, j) = 0.5 * Ab(i, j);
      out(j, i) = 0.5 * Ab(i, j);
    }
  }
  return out;
}

}  // namespace sdelearn
