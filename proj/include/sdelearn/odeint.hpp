#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sdelearn {

enum class OdeMethod { euler, rk4 };

struct SolverConfig {
  OdeMethod method = OdeMethod::euler;
  int substeps = 1;  // per integration horizon
};

struct IntegrationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Recorded forward states, enough to replay the solver map and run the
/// reverse pass of the exact discrete update.
struct IntegrationTape {
  double horizon = 0.0;
  SolverConfig cfg;
  std::vector<Eigen::VectorXd> states;  // y at the start of each substep
  Eigen::VectorXd y1;
};

namespace detail {
inline void require_finite(const Eigen::VectorXd& y, int step, const char* what) {
  if (!y.allFinite())
    throw IntegrationError(std::string(what) + " produced a non-finite state at substep " +
                           std::to_string(step));
}
}  // namespace detail

// System concept:
//   int dim() const;
//   int theta_dim() const;
//   void eval(const VectorXd& y, VectorXd& dy) const;
//   void vjp(const VectorXd& y, const VectorXd& v,
//            VectorXd& y_bar_accum, VectorXd& theta_bar_accum) const;
// vjp accumulates (d rhs/d y)^T v into y_bar_accum and (d rhs/d theta)^T v
// into theta_bar_accum.

template <class Sys>
std::pair<Eigen::VectorXd, IntegrationTape> integrate(const Sys& sys, const Eigen::VectorXd& y0,
                                                      double horizon, const SolverConfig& cfg) {
  if (cfg.substeps < 1) throw std::invalid_argument("solver substeps must be >= 1");
  IntegrationTape tape;
  tape.horizon = horizon;
  tape.cfg = cfg;
  tape.states.reserve(cfg.substeps);

  Eigen::VectorXd y = y0;
  detail::require_finite(y, 0, "initial state");
  if (horizon == 0.0) {
    tape.y1 = y;
    return {y, tape};
  }
  const double dt = horizon / cfg.substeps;
  Eigen::VectorXd k1(sys.dim()), k2(sys.dim()), k3(sys.dim()), k4(sys.dim()), tmp(sys.dim());
  for (int s = 0; s < cfg.substeps; ++s) {
    tape.states.push_back(y);
    if (cfg.method == OdeMethod::euler) {
      sys.eval(y, k1);
      y += dt * k1;
    } else {
      sys.eval(y, k1);
      tmp = y + 0.5 * dt * k1;
      sys.eval(tmp, k2);
      tmp = y + 0.5 * dt * k2;
      sys.eval(tmp, k3);
      tmp = y + dt * k3;
      sys.eval(tmp, k4);
      y += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    detail::require_finite(y, s + 1, "ode step");
  }
  tape.y1 = y;
  return {y, tape};
}

/// Replays the forward pass from the tape (bit-identical to integrate()).
template <class Sys>
Eigen::VectorXd replay_forward(const Sys& sys, const IntegrationTape& tape) {
  if (tape.states.empty()) return tape.y1;
  return integrate(sys, tape.states.front(), tape.horizon, tape.cfg).first;
}

/// Exact gradient of the discrete solver map: given dL/dy1, returns
/// (dL/dy0, dL/dtheta).
template <class Sys>
std::pair<Eigen::VectorXd, Eigen::VectorXd> backprop_integrate(const Sys& sys,
                                                               const IntegrationTape& tape,
                                                               const Eigen::VectorXd& y1_bar) {
  if (y1_bar.size() != sys.dim())
    throw std::invalid_argument("backprop_integrate: cotangent size mismatch");
  Eigen::VectorXd ybar = y1_bar;
  Eigen::VectorXd theta_bar = Eigen::VectorXd::Zero(sys.theta_dim());
  if (tape.states.empty()) return {ybar, theta_bar};

  const double dt = tape.horizon / tape.cfg.substeps;
  for (int s = static_cast<int>(tape.states.size()) - 1; s >= 0; --s) {
    const Eigen::VectorXd& y = tape.states[s];
    if (tape.cfg.method == OdeMethod::euler) {
      // y' = y + dt f(y)
      Eigen::VectorXd next = ybar;
      sys.vjp(y, dt * ybar, next, theta_bar);
      ybar = std::move(next);
    } else {
      // recompute the stages, then reverse them
      Eigen::VectorXd k1(sys.dim()), k2(sys.dim()), k3(sys.dim());
      sys.eval(y, k1);
      Eigen::VectorXd u2 = y + 0.5 * dt * k1;
      sys.eval(u2, k2);
      Eigen::VectorXd u3 = y + 0.5 * dt * k2;
      sys.eval(u3, k3);
      Eigen::VectorXd u4 = y + dt * k3;

      Eigen::VectorXd k1b = (dt / 6.0) * ybar;
      Eigen::VectorXd k2b = (dt / 3.0) * ybar;
      Eigen::VectorXd k3b = (dt / 3.0) * ybar;
      Eigen::VectorXd k4b = (dt / 6.0) * ybar;
      Eigen::VectorXd next = ybar;

      Eigen::VectorXd u4b = Eigen::VectorXd::Zero(sys.dim());
      sys.vjp(u4, k4b, u4b, theta_bar);
      next += u4b;
      k3b += dt * u4b;

      Eigen::VectorXd u3b = Eigen::VectorXd::Zero(sys.dim());
      sys.vjp(u3, k3b, u3b, theta_bar);
      next += u3b;
      k2b += 0.5 * dt * u3b;

      Eigen::VectorXd u2b = Eigen::VectorXd::Zero(sys.dim());
      sys.vjp(u2, k2b, u2b, theta_bar);
      next += u2b;
      k1b += 0.5 * dt * u2b;

      sys.vjp(y, k1b, next, theta_bar);
      ybar = std::move(next);
    }
  }
  return {ybar, theta_bar};
}

}  // namespace sdelearn
