#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdelearn/cholesky.hpp"
#include "sdelearn/moments.hpp"
#include "sdelearn/odeint.hpp"
#include "sdelearn/structure.hpp"
#include "sdelearn/unscented.hpp"

namespace sdelearn {

enum class Propagator { linearization, ut2m, ut4m };

inline std::string propagator_name(Propagator p) {
  switch (p) {
    case Propagator::linearization: return "linearization";
    case Propagator::ut2m: return "ut2m";
    case Propagator::ut4m: return "ut4m";
  }
  return "?";
}

inline Propagator propagator_from_name(const std::string& s) {
  if (s == "linearization" || s == "lin") return Propagator::linearization;
  if (s == "ut2m") return Propagator::ut2m;
  if (s == "ut4m") return Propagator::ut4m;
  throw std::invalid_argument("unknown propagator: " + s);
}

struct PropagationConfig {
  Propagator method = Propagator::ut2m;
  UtParams ut;
  SolverConfig solver;
};

struct MomentPrediction {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // empty for mean-only predictions
};

struct SourceMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  Eigen::VectorXd skew;  // optional, used by ut4m
  Eigen::VectorXd kurt;
};

inline SourceMoments source_from(const MomentRecord& r) {
  return {r.mean, r.cov, r.skew, r.kurt};
}

namespace detail {

/// Independent sigma-column ODEs dy_i/dt = f(y_i,u) + h(y_i,u) w_i with the
/// noise values w_i frozen per column; state is the column-stacked matrix Y.
class SigmaColumnSystem {
 public:
  SigmaColumnSystem(const NetSde& sde, const Eigen::VectorXd& u, const Eigen::MatrixXd& wcols,
                    bool with_noise)
      : sde_(sde), u_(u), wcols_(wcols), with_noise_(with_noise) {}

  int dim() const { return static_cast<int>(sde_.state_dim() * wcols_.cols()); }
  int theta_dim() const { return sde_.theta_dim(); }

  void eval(const Eigen::VectorXd& y, Eigen::VectorXd& dy) const {
    const int nx = sde_.state_dim();
    const int m = static_cast<int>(wcols_.cols());
    dy.resize(nx * m);
    Eigen::VectorXd f;
    Eigen::MatrixXd h;
    for (int i = 0; i < m; ++i) {
      const Eigen::VectorXd xi = y.segment(i * nx, nx);
      sde_.drift(xi, u_, f);
      Eigen::VectorXd d = f;
      if (with_noise_ && !wcols_.col(i).isZero()) {
        sde_.diffusion(xi, u_, h);
        d.noalias() += h * wcols_.col(i);
      }
      dy.segment(i * nx, nx) = d;
    }
  }

  void vjp(const Eigen::VectorXd& y, const Eigen::VectorXd& v, Eigen::VectorXd& y_bar,
           Eigen::Ref<Eigen::VectorXd> theta_bar) const {
    const int nx = sde_.state_dim();
    const int m = static_cast<int>(wcols_.cols());
    Eigen::VectorXd xbar(nx);
    for (int i = 0; i < m; ++i) {
      const Eigen::VectorXd xi = y.segment(i * nx, nx);
      const Eigen::VectorXd vi = v.segment(i * nx, nx);
      xbar.setZero();
      sde_.drift_vjp(xi, u_, vi, xbar, theta_bar);
      if (with_noise_ && !wcols_.col(i).isZero()) {
        const Eigen::MatrixXd hbar = vi * wcols_.col(i).transpose();
        sde_.diffusion_vjp(xi, u_, hbar, xbar, theta_bar);
      }
      y_bar.segment(i * nx, nx) += xbar;
    }
  }

 private:
  const NetSde& sde_;
  const Eigen::VectorXd& u_;
  const Eigen::MatrixXd& wcols_;
  bool with_noise_;
};

inline SigmaSet augmented_sigma_set(const SourceMoments& src, int nw, double dt,
                                    const PropagationConfig& cfg, const std::string& context) {
  const int nx = static_cast<int>(src.mean.size());
  const int na = nx + nw;
  Eigen::VectorXd m_aug = Eigen::VectorXd::Zero(na);
  m_aug.head(nx) = src.mean;
  Eigen::MatrixXd p_aug = Eigen::MatrixXd::Zero(na, na);
  p_aug.topLeftCorner(nx, nx) = src.cov;
  // The noise block carries the averaged white-noise rate over the sampling
  // interval, w ~ N(0, I/dt), so that h * w * dt reproduces the
  // Euler-Maruyama increment variance h^2 dt.
  p_aug.bottomRightCorner(nw, nw) = (1.0 / dt) * Eigen::MatrixXd::Identity(nw, nw);

  if (cfg.method == Propagator::ut4m) {
    if (src.skew.size() != nx || src.kurt.size() != nx)
      throw std::invalid_argument("ut4m propagation needs skew and kurtosis in the source record");
    Eigen::VectorXd skew_aug = Eigen::VectorXd::Zero(na);
    skew_aug.head(nx) = src.skew;
    Eigen::VectorXd kurt_aug = Eigen::VectorXd::Constant(na, 3.0);  // Gaussian noise axes
    kurt_aug.head(nx) = src.kurt;
    return sigma_points_4m(m_aug, p_aug, skew_aug, kurt_aug, context);
  }
  return sigma_points(m_aug, p_aug, cfg.ut, context);
}

}  // namespace detail

/// Forward result of the decoupled propagator; keeps what the reverse pass
/// needs (integration tape, transformed columns, weights).
struct DecoupledResult {
  MomentPrediction pred;
  Eigen::MatrixXd y1;     // nx x m transformed columns at the horizon
  Eigen::MatrixXd wcols;  // nw x m frozen noise values
  Eigen::VectorXd wm, cw;
  IntegrationTape tape;
  bool mean_only = false;
  bool fallback_4m = false;
  bool identity = false;  // dt == 0
};

/// Integrates the transformed sigma columns as independent ODEs and applies
/// the matrix-form weights. In mean-only mode the diffusion term is dropped
/// and the noise columns collapse onto the center, which keeps the predicted
/// mean exactly independent of the diffusion parameters.
inline DecoupledResult propagate_decoupled(const NetSde& sde, const SourceMoments& src,
                                           const Eigen::VectorXd& u, double dt,
                                           const PropagationConfig& cfg, bool mean_only = false,
                                           const std::string& context = "") {
  const int nx = sde.state_dim();
  const int nw = sde.noise_dim();
  DecoupledResult res;
  res.mean_only = mean_only;
  if (dt == 0.0) {
    res.identity = true;
    res.pred.mean = src.mean;
    if (!mean_only) res.pred.cov = src.cov;
    return res;
  }

  const SigmaSet aug = detail::augmented_sigma_set(src, nw, dt, cfg, context);
  res.fallback_4m = aug.fourth_moment_fallback;
  const int na = nx + nw;

  std::vector<int> cols;
  if (mean_only) {
    cols.reserve(2 * nx + 1);
    cols.push_back(0);
    for (int j = 0; j < nx; ++j) cols.push_back(1 + j);
    for (int j = 0; j < nx; ++j) cols.push_back(1 + na + j);
  } else {
    cols.resize(aug.count());
    for (int i = 0; i < aug.count(); ++i) cols[i] = i;
  }
  const int m = static_cast<int>(cols.size());

  Eigen::MatrixXd y0(nx, m);
  res.wcols = Eigen::MatrixXd::Zero(nw, m);
  res.wm.resize(m);
  res.cw.resize(m);
  for (int i = 0; i < m; ++i) {
    y0.col(i) = aug.points.col(cols[i]).head(nx);
    if (!mean_only) res.wcols.col(i) = aug.points.col(cols[i]).tail(nw);
    res.wm[i] = aug.mean_weights[cols[i]];
    res.cw[i] = aug.cov_weights[cols[i]];
  }
  if (mean_only) {
    // noise-axis columns sit at the mean and integrate like the center
    double dropped = 0.0;
    for (int i = 0; i < aug.count(); ++i) {
      bool kept = false;
      for (int c : cols) kept = kept || (c == i);
      if (!kept) dropped += aug.mean_weights[i];
    }
    res.wm[0] += dropped;
  }

  detail::SigmaColumnSystem sys(sde, u, res.wcols, !mean_only);
  Eigen::VectorXd y0v(nx * m);
  for (int i = 0; i < m; ++i) y0v.segment(i * nx, nx) = y0.col(i);
  auto [y1v, tape] = integrate(sys, y0v, dt, cfg.solver);
  res.tape = std::move(tape);
  res.y1.resize(nx, m);
  for (int i = 0; i < m; ++i) res.y1.col(i) = y1v.segment(i * nx, nx);

  res.pred.mean = sigma_mean(res.y1, res.wm);
  if (!mean_only) res.pred.cov = sigma_cov(res.y1, res.cw, res.pred.mean);
  return res;
}

/// Reverse pass of propagate_decoupled: accumulates d loss / d theta given
/// cotangents of the predicted mean and covariance (either may be empty).
inline void propagate_decoupled_backward(const NetSde& sde, const Eigen::VectorXd& u,
                                         const PropagationConfig& cfg,
                                         const DecoupledResult& res,
                                         const Eigen::VectorXd& mean_bar,
                                         const Eigen::MatrixXd& cov_bar,
                                         Eigen::Ref<Eigen::VectorXd> theta_bar) {
  if (res.identity) return;
  const int nx = sde.state_dim();
  const int m = static_cast<int>(res.y1.cols());
  Eigen::MatrixXd ybar = Eigen::MatrixXd::Zero(nx, m);

  Eigen::VectorXd mu_bar_total = Eigen::VectorXd::Zero(nx);
  if (mean_bar.size()) mu_bar_total = mean_bar;
  if (cov_bar.size()) {
    const Eigen::MatrixXd s = 0.5 * (cov_bar + cov_bar.transpose());
    for (int i = 0; i < m; ++i) {
      const Eigen::VectorXd q = 2.0 * res.cw[i] * (s * (res.y1.col(i) - res.pred.mean));
      ybar.col(i) += q;
      mu_bar_total -= q;
    }
  }
  // mean = y0 + sum_i w_i (y_i - y0)
  ybar.col(0) += mu_bar_total;
  for (int i = 1; i < m; ++i) {
    ybar.col(i) += res.wm[i] * mu_bar_total;
    ybar.col(0) -= res.wm[i] * mu_bar_total;
  }

  detail::SigmaColumnSystem sys(sde, u, res.wcols, !res.mean_only);
  Eigen::VectorXd ybar_v(nx * m);
  for (int i = 0; i < m; ++i) ybar_v.segment(i * nx, nx) = ybar.col(i);
  auto [y0_bar, tb] = backprop_integrate(sys, res.tape, ybar_v);
  (void)y0_bar;  // source moments are data
  theta_bar += tb;
}

namespace detail {

/// Coupled moment ODEs over the state [m; vec(P)]: sigma points are re-formed
/// from (m, P) at every evaluation, the drift enters through the weighted
/// cross-covariance sandwich and the diffusion through the noise-column outer
/// products (unit-variance noise block).
class CoupledMomentSystem {
 public:
  static constexpr double kJitterScale = 1e-10;
  static constexpr double kJitterFloor = 1e-30;

  CoupledMomentSystem(const NetSde& sde, const Eigen::VectorXd& u, const UtParams& ut)
      : sde_(sde), u_(u), ut_(ut) {}

  int dim() const { return sde_.state_dim() * (1 + sde_.state_dim()); }
  int theta_dim() const { return sde_.theta_dim(); }

  void eval(const Eigen::VectorXd& y, Eigen::VectorXd& dy) const {
    Work w;
    forward(y, w);
    dy.resize(dim());
    dy.head(w.nx) = w.dm;
    Eigen::MatrixXd dsig = w.T + w.T.transpose() + w.N;
    dsig = 0.5 * (dsig + dsig.transpose());
    dy.tail(w.nx * w.nx) = Eigen::Map<const Eigen::VectorXd>(dsig.data(), w.nx * w.nx);
  }

  void vjp(const Eigen::VectorXd& y, const Eigen::VectorXd& v, Eigen::VectorXd& y_bar,
           Eigen::Ref<Eigen::VectorXd> theta_bar) const {
    Work w;
    forward(y, w);
    const int nx = w.nx, nw = w.nw;
    const Eigen::VectorXd v_m = v.head(nx);
    Eigen::MatrixXd V = Eigen::Map<const Eigen::MatrixXd>(v.data() + nx, nx, nx);
    const Eigen::MatrixXd Vs = 0.5 * (V + V.transpose());

    const Eigen::MatrixXd T_bar = 2.0 * Vs;

    // cross-covariance term over the state-spread columns
    std::vector<Eigen::VectorXd> F_bar(2 * nx + 1, Eigen::VectorXd::Zero(nx));
    Eigen::VectorXd dm_bar = v_m;
    Eigen::MatrixXd L_bar = Eigen::MatrixXd::Zero(nx, nx);
    for (int j = 0; j < nx; ++j) {
      for (int sgn = 0; sgn < 2; ++sgn) {
        const int idx = 1 + sgn * nx + j;  // F list: 0 center, 1..nx plus, nx+1..2nx minus
        const double sign = sgn == 0 ? 1.0 : -1.0;
        const Eigen::VectorXd d = sign * w.scale * w.L.col(j);
        const double c = w.cw_x;
        F_bar[idx] += c * T_bar.transpose() * d;
        dm_bar -= c * T_bar.transpose() * d;
        const Eigen::VectorXd d_bar = c * T_bar * (w.F[idx] - w.dm);
        L_bar.col(j) += sign * w.scale * d_bar;
      }
    }

    // dm = F0 + sum_i w_i (F_i - F0) over the state-spread columns (the
    // noise-column drift parts cancel in +/- pairs and never enter)
    Eigen::VectorXd f0_bar = dm_bar;
    for (int j = 0; j < nx; ++j)
      for (int sgn = 0; sgn < 2; ++sgn) {
        const int idx = 1 + sgn * nx + j;
        F_bar[idx] += w.wm_i * dm_bar;
        f0_bar -= w.wm_i * dm_bar;
      }

    // backprop the drift evaluations
    Eigen::VectorXd m_bar = Eigen::VectorXd::Zero(nx);
    sde_.drift_vjp(w.m, u_, f0_bar, m_bar, theta_bar);
    for (int j = 0; j < nx; ++j)
      for (int sgn = 0; sgn < 2; ++sgn) {
        const int idx = 1 + sgn * nx + j;
        const double sign = sgn == 0 ? 1.0 : -1.0;
        const Eigen::VectorXd xi = w.m + sign * w.scale * w.L.col(j);
        Eigen::VectorXd x_bar = Eigen::VectorXd::Zero(nx);
        sde_.drift_vjp(xi, u_, F_bar[idx], x_bar, theta_bar);
        m_bar += x_bar;
        L_bar.col(j) += sign * w.scale * x_bar;
      }
    // noise term N = sum_j 2 c scale^2 (h col_j)(h col_j)^T
    Eigen::MatrixXd h_bar = Eigen::MatrixXd::Zero(nx, nw);
    for (int j = 0; j < nw; ++j)
      h_bar.col(j) = 4.0 * w.cw_x * w.scale * w.scale * (Vs * w.h.col(j));
    sde_.diffusion_vjp(w.m, u_, h_bar, m_bar, theta_bar);

    // through the Cholesky factor and the jitter
    Eigen::MatrixXd P_eff_bar = cholesky_backward(w.L, L_bar);
    Eigen::MatrixXd P_bar =
        P_eff_bar + (kJitterScale / nx) * P_eff_bar.trace() * Eigen::MatrixXd::Identity(nx, nx);
    P_bar = 0.5 * (P_bar + P_bar.transpose());

    y_bar.head(nx) += m_bar;
    y_bar.tail(nx * nx) += Eigen::Map<const Eigen::VectorXd>(P_bar.data(), nx * nx);
  }

 private:
  struct Work {
    int nx = 0, nw = 0;
    Eigen::VectorXd m;
    Eigen::MatrixXd L;  // chol of jittered P
    Eigen::MatrixXd h;  // diffusion at the mean
    double scale = 0.0, wm_i = 0.0, cw_x = 0.0;
    std::vector<Eigen::VectorXd> F;  // drift-part values: center, +cols, -cols
    Eigen::VectorXd dm;
    Eigen::MatrixXd T, N;
  };

  void forward(const Eigen::VectorXd& y, Work& w) const {
    const int nx = sde_.state_dim();
    const int nw = sde_.noise_dim();
    w.nx = nx;
    w.nw = nw;
    w.m = y.head(nx);
    Eigen::MatrixXd P = Eigen::Map<const Eigen::MatrixXd>(y.data() + nx, nx, nx);
    P = 0.5 * (P + P.transpose());
    const Eigen::MatrixXd P_eff =
        P + ((kJitterScale / nx) * P.trace() + kJitterFloor) * Eigen::MatrixXd::Identity(nx, nx);
    Eigen::LLT<Eigen::MatrixXd> llt(P_eff);
    if (llt.info() != Eigen::Success)
      throw IntegrationError("coupled propagation: covariance lost positive definiteness");
    w.L = llt.matrixL();

    const int na = nx + nw;
    const double lam = ut_.lambda(na);
    if (!(na + lam > 0.0)) throw std::invalid_argument("coupled propagation: n + lambda <= 0");
    w.scale = std::sqrt(na + lam);
    w.wm_i = 1.0 / (2.0 * (na + lam));
    w.cw_x = w.wm_i;

    sde_.diffusion(w.m, u_, w.h);

    w.F.assign(2 * nx + 1, Eigen::VectorXd());
    Eigen::VectorXd f;
    sde_.drift(w.m, u_, f);
    w.F[0] = f;
    for (int j = 0; j < nx; ++j)
      for (int sgn = 0; sgn < 2; ++sgn) {
        const double sign = sgn == 0 ? 1.0 : -1.0;
        sde_.drift(w.m + sign * w.scale * w.L.col(j), u_, f);
        w.F[1 + sgn * nx + j] = f;
      }

    // dm = F0 + sum w_i (F_i - F0); noise-column drift parts cancel in pairs
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(nx);
    for (int j = 0; j < nx; ++j)
      acc += w.wm_i * ((w.F[1 + j] - w.F[0]) + (w.F[1 + nx + j] - w.F[0]));
    w.dm = w.F[0] + acc;

    w.T = Eigen::MatrixXd::Zero(nx, nx);
    for (int j = 0; j < nx; ++j) {
      const Eigen::VectorXd d = w.scale * w.L.col(j);
      w.T.noalias() += w.cw_x * d * (w.F[1 + j] - w.dm).transpose();
      w.T.noalias() -= w.cw_x * d * (w.F[1 + nx + j] - w.dm).transpose();
    }
    w.N = Eigen::MatrixXd::Zero(nx, nx);
    for (int j = 0; j < nw; ++j) {
      const Eigen::VectorXd n = w.scale * w.h.col(j);
      w.N.noalias() += 2.0 * w.cw_x * n * n.transpose();
    }
  }

  const NetSde& sde_;
  const Eigen::VectorXd& u_;
  UtParams ut_;
};

}  // namespace detail

struct CoupledResult {
  MomentPrediction pred;
  IntegrationTape tape;
  bool identity = false;
};

/// Integrates dm/dt and dP/dt with sigma points re-formed from (m(t), P(t)) at
/// every solver step; returns the state block of the augmented moments.
inline CoupledResult propagate_coupled(const NetSde& sde, const SourceMoments& src,
                                       const Eigen::VectorXd& u, double dt,
                                       const PropagationConfig& cfg) {
  const int nx = sde.state_dim();
  CoupledResult res;
  if (dt == 0.0) {
    res.identity = true;
    res.pred.mean = src.mean;
    res.pred.cov = src.cov;
    return res;
  }
  detail::CoupledMomentSystem sys(sde, u, cfg.ut);
  Eigen::VectorXd y0(nx + nx * nx);
  y0.head(nx) = src.mean;
  Eigen::MatrixXd p0 = 0.5 * (src.cov + src.cov.transpose());
  y0.tail(nx * nx) = Eigen::Map<const Eigen::VectorXd>(p0.data(), nx * nx);
  auto [y1, tape] = integrate(sys, y0, dt, cfg.solver);
  res.tape = std::move(tape);
  res.pred.mean = y1.head(nx);
  Eigen::MatrixXd p1 = Eigen::Map<const Eigen::MatrixXd>(y1.data() + nx, nx, nx);
  res.pred.cov = 0.5 * (p1 + p1.transpose());
  return res;
}

inline void propagate_coupled_backward(const NetSde& sde, const Eigen::VectorXd& u,
                                       const PropagationConfig& cfg, const CoupledResult& res,
                                       const Eigen::VectorXd& mean_bar,
                                       const Eigen::MatrixXd& cov_bar,
                                       Eigen::Ref<Eigen::VectorXd> theta_bar) {
  if (res.identity) return;
  const int nx = sde.state_dim();
  Eigen::VectorXd ybar = Eigen::VectorXd::Zero(nx + nx * nx);
  if (mean_bar.size()) ybar.head(nx) = mean_bar;
  if (cov_bar.size()) {
    const Eigen::MatrixXd s = 0.5 * (cov_bar + cov_bar.transpose());
    ybar.tail(nx * nx) = Eigen::Map<const Eigen::VectorXd>(s.data(), nx * nx);
  }
  detail::CoupledMomentSystem sys(sde, u, cfg.ut);
  auto [y0_bar, tb] = backprop_integrate(sys, res.tape, ybar);
  (void)y0_bar;
  theta_bar += tb;
}

namespace detail {

/// Mean-only linearized system dm/dt = f(m).
class LinearMeanSystem {
 public:
  LinearMeanSystem(const NetSde& sde, const Eigen::VectorXd& u) : sde_(sde), u_(u) {}
  int dim() const { return sde_.state_dim(); }
  int theta_dim() const { return sde_.theta_dim(); }
  void eval(const Eigen::VectorXd& y, Eigen::VectorXd& dy) const { sde_.drift(y, u_, dy); }
  void vjp(const Eigen::VectorXd& y, const Eigen::VectorXd& v, Eigen::VectorXd& y_bar,
           Eigen::Ref<Eigen::VectorXd> theta_bar) const {
    sde_.drift_vjp(y, u_, v, y_bar, theta_bar);
  }

 private:
  const NetSde& sde_;
  const Eigen::VectorXd& u_;
};

/// Linearization around the mean: dm/dt = f(m),
/// dP/dt = J(m) P + P J(m)^T + h(m) h(m)^T.
class LinearizedMomentSystem {
 public:
  LinearizedMomentSystem(const NetSde& sde, const Eigen::VectorXd& u) : sde_(sde), u_(u) {}
  int dim() const { return sde_.state_dim() * (1 + sde_.state_dim()); }
  int theta_dim() const { return sde_.theta_dim(); }

  void eval(const Eigen::VectorXd& y, Eigen::VectorXd& dy) const {
    const int nx = sde_.state_dim();
    const Eigen::VectorXd m = y.head(nx);
    Eigen::MatrixXd P = Eigen::Map<const Eigen::MatrixXd>(y.data() + nx, nx, nx);
    P = 0.5 * (P + P.transpose());
    Eigen::VectorXd f;
    Eigen::MatrixXd J, h;
    sde_.drift(m, u_, f);
    sde_.drift_jacobian(m, u_, J);
    sde_.diffusion(m, u_, h);
    Eigen::MatrixXd dP = J * P + P * J.transpose() + h * h.transpose();
    dP = 0.5 * (dP + dP.transpose());
    dy.resize(dim());
    dy.head(nx) = f;
    dy.tail(nx * nx) = Eigen::Map<const Eigen::VectorXd>(dP.data(), nx * nx);
  }

  void vjp(const Eigen::VectorXd& y, const Eigen::VectorXd& v, Eigen::VectorXd& y_bar,
           Eigen::Ref<Eigen::VectorXd> theta_bar) const {
    const int nx = sde_.state_dim();
    const Eigen::VectorXd m = y.head(nx);
    Eigen::MatrixXd P = Eigen::Map<const Eigen::MatrixXd>(y.data() + nx, nx, nx);
    P = 0.5 * (P + P.transpose());
    Eigen::MatrixXd J, h;
    sde_.drift_jacobian(m, u_, J);
    sde_.diffusion(m, u_, h);

    const Eigen::VectorXd v_m = v.head(nx);
    Eigen::MatrixXd V = Eigen::Map<const Eigen::MatrixXd>(v.data() + nx, nx, nx);
    const Eigen::MatrixXd Vs = 0.5 * (V + V.transpose());

    const Eigen::MatrixXd J_bar = 2.0 * Vs * P;
    const Eigen::MatrixXd h_bar = 2.0 * Vs * h;
    Eigen::MatrixXd P_bar = J.transpose() * Vs + Vs * J;

    Eigen::VectorXd m_bar = Eigen::VectorXd::Zero(nx);
    sde_.drift_jacobian_vjp(m, u_, v_m, J_bar, m_bar, theta_bar);
    sde_.diffusion_vjp(m, u_, h_bar, m_bar, theta_bar);

    P_bar = 0.5 * (P_bar + P_bar.transpose());
    y_bar.head(nx) += m_bar;
    y_bar.tail(nx * nx) += Eigen::Map<const Eigen::VectorXd>(P_bar.data(), nx * nx);
  }

 private:
  const NetSde& sde_;
  const Eigen::VectorXd& u_;
};

}  // namespace detail

struct LinearizedResult {
  MomentPrediction pred;
  IntegrationTape tape;
  bool mean_only = false;
  bool identity = false;
};

inline LinearizedResult propagate_linearized(const NetSde& sde, const SourceMoments& src,
                                             const Eigen::VectorXd& u, double dt,
                                             const PropagationConfig& cfg,
                                             bool mean_only = false) {
  const int nx = sde.state_dim();
  LinearizedResult res;
  res.mean_only = mean_only;
  if (dt == 0.0) {
    res.identity = true;
    res.pred.mean = src.mean;
    if (!mean_only) res.pred.cov = src.cov;
    return res;
  }
  if (mean_only) {
    detail::LinearMeanSystem sys(sde, u);
    auto [y1, tape] = integrate(sys, src.mean, dt, cfg.solver);
    res.tape = std::move(tape);
    res.pred.mean = y1;
    return res;
  }
  detail::LinearizedMomentSystem sys(sde, u);
  Eigen::VectorXd y0(nx + nx * nx);
  y0.head(nx) = src.mean;
  Eigen::MatrixXd p0 = 0.5 * (src.cov + src.cov.transpose());
  y0.tail(nx * nx) = Eigen::Map<const Eigen::VectorXd>(p0.data(), nx * nx);
  auto [y1, tape] = integrate(sys, y0, dt, cfg.solver);
  res.tape = std::move(tape);
  res.pred.mean = y1.head(nx);
  Eigen::MatrixXd p1 = Eigen::Map<const Eigen::MatrixXd>(y1.data() + nx, nx, nx);
  res.pred.cov = 0.5 * (p1 + p1.transpose());
  return res;
}

inline void propagate_linearized_backward(const NetSde& sde, const Eigen::VectorXd& u,
                                          const PropagationConfig& cfg,
                                          const LinearizedResult& res,
                                          const Eigen::VectorXd& mean_bar,
                                          const Eigen::MatrixXd& cov_bar,
                                          Eigen::Ref<Eigen::VectorXd> theta_bar) {
  if (res.identity) return;
  const int nx = sde.state_dim();
  if (res.mean_only) {
    detail::LinearMeanSystem sys(sde, u);
    auto [y0_bar, tb] = backprop_integrate(sys, res.tape, mean_bar);
    (void)y0_bar;
    theta_bar += tb;
    return;
  }
  Eigen::VectorXd ybar = Eigen::VectorXd::Zero(nx + nx * nx);
  if (mean_bar.size()) ybar.head(nx) = mean_bar;
  if (cov_bar.size()) {
    const Eigen::MatrixXd s = 0.5 * (cov_bar + cov_bar.transpose());
    ybar.tail(nx * nx) = Eigen::Map<const Eigen::VectorXd>(s.data(), nx * nx);
  }
  detail::LinearizedMomentSystem sys(sde, u);
  auto [y0_bar, tb] = backprop_integrate(sys, res.tape, ybar);
  (void)y0_bar;
  theta_bar += tb;
}

/// Two-moment prediction with the configured method (unscented methods use the
/// decoupled sigma-point route; coupled propagation is available explicitly).
inline MomentPrediction propagate(const NetSde& sde, const SourceMoments& src,
                                  const Eigen::VectorXd& u, double dt,
                                  const PropagationConfig& cfg) {
  if (cfg.method == Propagator::linearization)
    return propagate_linearized(sde, src, u, dt, cfg).pred;
  return propagate_decoupled(sde, src, u, dt, cfg).pred;
}

}  // namespace sdelearn
