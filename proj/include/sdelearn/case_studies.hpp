#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "sdelearn/sde.hpp"

namespace sdelearn {

enum class CaseStudyId { colloidal, lotka_volterra, sir };

inline std::string case_name(CaseStudyId id) {
  switch (id) {
    case CaseStudyId::colloidal: return "colloidal";
    case CaseStudyId::lotka_volterra: return "lotka_volterra";
    case CaseStudyId::sir: return "sir";
  }
  return "?";
}

inline CaseStudyId case_from_name(const std::string& s) {
  if (s == "colloidal") return CaseStudyId::colloidal;
  if (s == "lotka_volterra" || s == "lv") return CaseStudyId::lotka_volterra;
  if (s == "sir") return CaseStudyId::sir;
  throw std::invalid_argument("unknown case study: " + s);
}

struct GroundTruthEval {
  Eigen::VectorXd drift;
  Eigen::MatrixXd diffusion;
  Eigen::VectorXd hidden;  // the terms targeted for learning
};

/// One of the three benchmark systems with its printed constants. The hidden
/// slot of eval() returns the learning targets: colloidal (g1, g2), LV
/// (g1_1, g1_2, g2_1, g2_2), SIR (g).
struct GroundTruthModel {
  CaseStudyId id;
  std::map<std::string, double> parameters;
  int state_dim = 0, input_dim = 0, noise_dim = 0;
  int hidden_dim = 0;        // number of hidden-physics outputs
  int hidden_input_dim = 0;  // inputs of the hidden functions
  Eigen::VectorXd domain_lo, domain_hi;  // simulator flagging box
  // data-collection defaults (desk scale)
  Eigen::VectorXd ic_lo, ic_hi;  // initial-condition grid box (state, then input dims)
  double dt = 0.0;
  Eigen::VectorXd eval_lo, eval_hi;  // hidden-physics evaluation box

  GroundTruthEval eval(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const {
    GroundTruthEval r;
    r.drift = drift(x, u);
    r.diffusion = diffusion(x, u);
    r.hidden = hidden(x, u);
    return r;
  }

  Eigen::VectorXd drift(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const {
    switch (id) {
      case CaseStudyId::colloidal: {
        Eigen::VectorXd f(1);
        f[0] = colloidal_g1(x[0], u[0]);
        return f;
      }
      case CaseStudyId::lotka_volterra: {
        Eigen::VectorXd f(2);
        const double k1 = parameters.at("k1"), k2 = parameters.at("k2");
        f[0] = x[0] * (1.0 - x[0] - k1 * x[1]);
        f[1] = x[1] * (1.0 - x[1] - k2 * x[0]);
        return f;
      }
      case CaseStudyId::sir: {
        const double S = x[0], I = x[1], R = x[2];
        const double g = sir_g(S, I);
        Eigen::VectorXd f(3);
        f[0] = parameters.at("b") - parameters.at("d") * S - g + parameters.at("gamma") * R;
        f[1] = g - (parameters.at("d") + parameters.at("mu") + parameters.at("delta")) * I;
        f[2] = parameters.at("mu") * I - (parameters.at("d") + parameters.at("gamma")) * R;
        return f;
      }
    }
    throw std::logic_error("unreachable");
  }

  Eigen::MatrixXd diffusion(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const {
    switch (id) {
      case CaseStudyId::colloidal: {
        Eigen::MatrixXd h(1, 1);
        h(0, 0) = std::sqrt(2.0 * colloidal_g2(x[0], u[0]));
        return h;
      }
      case CaseStudyId::lotka_volterra: {
        Eigen::MatrixXd h = Eigen::MatrixXd::Zero(2, 2);
        h(0, 0) = std::sqrt(std::max(2.0 * x[0] * (x[1] - parameters.at("x2_eq")), 0.0));
        h(1, 1) = std::sqrt(std::max(2.0 * x[1] * (x[0] - parameters.at("x1_eq")), 0.0));
        return h;
      }
      case CaseStudyId::sir: {
        Eigen::MatrixXd h = Eigen::MatrixXd::Zero(3, 3);
        h(0, 0) = parameters.at("sigma1") * x[0];
        h(1, 1) = parameters.at("sigma2") * x[1];
        h(2, 2) = parameters.at("sigma3") * x[2];
        return h;
      }
    }
    throw std::logic_error("unreachable");
  }

  Eigen::VectorXd hidden(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const {
    switch (id) {
      case CaseStudyId::colloidal: {
        Eigen::VectorXd g(2);
        g[0] = colloidal_g1(x[0], u[0]);
        g[1] = colloidal_g2(x[0], u[0]);
        return g;
      }
      case CaseStudyId::lotka_volterra: {
        const double k1 = parameters.at("k1"), k2 = parameters.at("k2");
        Eigen::VectorXd g(4);
        g[0] = x[0] * (1.0 - x[0] - k1 * x[1]);
        g[1] = x[1] * (1.0 - x[1] - k2 * x[0]);
        g[2] = x[0] * (x[1] - parameters.at("x2_eq"));
        g[3] = x[1] * (x[0] - parameters.at("x1_eq"));
        return g;
      }
      case CaseStudyId::sir: {
        Eigen::VectorXd g(1);
        g[0] = sir_g(x[0], x[1]);
        return g;
      }
    }
    throw std::logic_error("unreachable");
  }

  /// Number of noise channels whose diffusion argument is clamped at (x,u).
  int clamp_count(const Eigen::VectorXd& x, const Eigen::VectorXd&) const {
    if (id != CaseStudyId::lotka_volterra) return 0;
    int c = 0;
    if (x[0] * (x[1] - parameters.at("x2_eq")) < 0.0) ++c;
    if (x[1] * (x[0] - parameters.at("x1_eq")) < 0.0) ++c;
    return c;
  }

  SdeModel to_sde() const {
    SdeModel m;
    m.state_dim = state_dim;
    m.input_dim = input_dim;
    m.noise_dim = noise_dim;
    m.domain_lo = domain_lo;
    m.domain_hi = domain_hi;
    GroundTruthModel self = *this;
    m.drift = [self](const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
      return self.drift(x, u);
    };
    m.diffusion = [self](const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
      return self.diffusion(x, u);
    };
    if (id == CaseStudyId::lotka_volterra) {
      m.clamp_probe = [self](const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
        return self.clamp_count(x, u);
      };
    }
    return m;
  }

 private:
  // K_b T = 1: the model only uses F/(K_b T) ratios.
  double colloidal_g2(double x, double u) const {
    const double s = x - parameters.at("x_off") - parameters.at("u_coef") * u;
    return parameters.at("g2_amp") * std::exp(-s * s) + parameters.at("g2_base");
  }
  double colloidal_g1(double x, double u) const {
    const double s = x - parameters.at("x_off") - parameters.at("u_coef") * u;
    const double g2 = parameters.at("g2_amp") * std::exp(-s * s) + parameters.at("g2_base");
    const double dg2 = -2.0 * s * parameters.at("g2_amp") * std::exp(-s * s);
    const double dF = 2.0 * parameters.at("f_amp") * s;  // F = f_amp * s^2, K_b T = 1
    return dg2 - dF * g2;
  }
  double sir_g(double S, double I) const {
    const double hh = parameters.at("h");
    const double num = parameters.at("k") * std::pow(S, hh) * I;
    const double den = std::pow(S, hh) + parameters.at("alpha") * std::pow(I, hh);
    if (std::abs(den) < 1e-300) return 0.0;
    return num / den;
  }
};

inline GroundTruthModel make_colloidal() {
  GroundTruthModel m;
  m.id = CaseStudyId::colloidal;
  m.parameters = {{"g2_amp", 4.5e-3}, {"g2_base", 0.5e-3}, {"x_off", 2.1},
                  {"u_coef", 0.75},   {"f_amp", 10.0},     {"kbt", 1.0}};
  m.state_dim = 1;
  m.input_dim = 1;
  m.noise_dim = 1;
  m.hidden_dim = 2;
  m.hidden_input_dim = 2;  // (x, u)
  m.domain_lo = Eigen::VectorXd::Constant(1, -2.0);
  m.domain_hi = Eigen::VectorXd::Constant(1, 8.0);
  m.ic_lo.resize(2);
  m.ic_hi.resize(2);
  m.ic_lo << 0.5, 0.0;  // x0 range, then u range
  m.ic_hi << 3.5, 1.0;
  m.dt = 1.0;
  m.eval_lo = m.ic_lo;
  m.eval_hi = m.ic_hi;
  return m;
}

inline GroundTruthModel make_lotka_volterra() {
  GroundTruthModel m;
  m.id = CaseStudyId::lotka_volterra;
  const double k1 = 0.4, k2 = 0.5;
  m.parameters = {{"k1", k1},
                  {"k2", k2},
                  {"x1_eq", (1.0 - k1) / (1.0 - k1 * k2)},
                  {"x2_eq", (1.0 - k2) / (1.0 - k1 * k2)}};
  m.state_dim = 2;
  m.input_dim = 0;
  m.noise_dim = 2;
  m.hidden_dim = 4;
  m.hidden_input_dim = 2;
  m.domain_lo = Eigen::VectorXd::Constant(2, -1.0);
  m.domain_hi = Eigen::VectorXd::Constant(2, 5.0);
  m.ic_lo = Eigen::VectorXd::Constant(2, 0.1);
  m.ic_hi = Eigen::VectorXd::Constant(2, 1.2);
  m.dt = 0.2;
  m.eval_lo = m.ic_lo;
  m.eval_hi = m.ic_hi;
  return m;
}

inline GroundTruthModel make_sir() {
  GroundTruthModel m;
  m.id = CaseStudyId::sir;
  m.parameters = {{"b", 1.0},     {"d", 0.1},    {"k", 0.2},      {"alpha", 0.5},
                  {"gamma", 0.01}, {"mu", 0.05}, {"delta", 0.01}, {"h", 2.0},
                  {"sigma1", 0.2}, {"sigma2", 0.2}, {"sigma3", 0.1}};
  m.state_dim = 3;
  m.input_dim = 0;
  m.noise_dim = 3;
  m.hidden_dim = 1;
  m.hidden_input_dim = 2;  // (S, I)
  m.domain_lo = Eigen::VectorXd::Constant(3, -2.0);
  m.domain_hi = Eigen::VectorXd::Constant(3, 50.0);
  m.ic_lo.resize(3);
  m.ic_hi.resize(3);
  m.ic_lo << 0.5, 0.5, 0.0;
  m.ic_hi << 8.0, 6.0, 4.0;
  m.dt = 0.5;
  m.eval_lo.resize(2);
  m.eval_hi.resize(2);
  m.eval_lo << 0.5, 0.5;  // (S, I) surface
  m.eval_hi << 8.0, 6.0;
  return m;
}

inline GroundTruthModel make_case(CaseStudyId id) {
  switch (id) {
    case CaseStudyId::colloidal: return make_colloidal();
    case CaseStudyId::lotka_volterra: return make_lotka_volterra();
    case CaseStudyId::sir: return make_sir();
  }
  throw std::logic_error("unreachable");
}

inline GroundTruthEval ground_truth_eval(const GroundTruthModel& gt, const Eigen::VectorXd& x,
                                         const Eigen::VectorXd& u) {
  return gt.eval(x, u);
}

}  // namespace sdelearn
