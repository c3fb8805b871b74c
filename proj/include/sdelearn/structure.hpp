#pragma once

#include <Eigen/Dense>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "sdelearn/case_studies.hpp"
#include "sdelearn/mlp.hpp"
#include "sdelearn/sde.hpp"

namespace sdelearn {

/// Known SDE structure with embedded neural networks for the hidden terms.
/// All evaluation methods are const and reentrant; gradients accumulate into
/// caller-owned buffers so mini-batch items can run in parallel.
class NetSde {
 public:
  virtual ~NetSde() = default;

  virtual int state_dim() const = 0;
  virtual int input_dim() const = 0;
  virtual int noise_dim() const = 0;
  virtual int theta_dim() const = 0;

  virtual Eigen::VectorXd get_theta() const = 0;
  virtual void set_theta(const Eigen::VectorXd& theta) = 0;
  // [offset, length) of each net's block in the flat theta vector
  virtual std::pair<int, int> drift_theta_span() const = 0;
  virtual std::pair<int, int> diffusion_theta_span() const = 0;

  virtual void drift(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                     Eigen::VectorXd& f) const = 0;
  virtual void drift_vjp(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                         const Eigen::VectorXd& f_bar, Eigen::VectorXd& x_bar,
                         Eigen::Ref<Eigen::VectorXd> theta_bar) const = 0;

  virtual void diffusion(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                         Eigen::MatrixXd& h) const = 0;
  virtual void diffusion_vjp(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                             const Eigen::MatrixXd& h_bar, Eigen::VectorXd& x_bar,
                             Eigen::Ref<Eigen::VectorXd> theta_bar) const = 0;

  // drift Jacobian w.r.t. x (inputs held fixed), and the reverse pass of the
  // joint (f, J) computation -- needed by the linearization propagator.
  virtual void drift_jacobian(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                              Eigen::MatrixXd& jac) const = 0;
  virtual void drift_jacobian_vjp(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                                  const Eigen::VectorXd& f_bar, const Eigen::MatrixXd& jac_bar,
                                  Eigen::VectorXd& x_bar,
                                  Eigen::Ref<Eigen::VectorXd> theta_bar) const = 0;

  virtual const std::vector<Mlp>& nets() const = 0;
  virtual std::vector<Mlp>& nets() = 0;

  /// Simulable model with the current nets plugged in as the hidden physics.
  SdeModel to_sde(const Eigen::VectorXd& domain_lo, const Eigen::VectorXd& domain_hi) const {
    SdeModel m;
    m.state_dim = state_dim();
    m.input_dim = input_dim();
    m.noise_dim = noise_dim();
    m.domain_lo = domain_lo;
    m.domain_hi = domain_hi;
    m.drift = [this](const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
      Eigen::VectorXd f;
      drift(x, u, f);
      return f;
    };
    m.diffusion = [this](const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
      Eigen::MatrixXd h;
      diffusion(x, u, h);
      return h;
    };
    return m;
  }
};

namespace detail {
inline Eigen::VectorXd net_input(const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
  if (u.size() == 0) return x;
  Eigen::VectorXd z(x.size() + u.size());
  z << x, u;
  return z;
}
}  // namespace detail

/// Separable SDE dx = g1(x,u) dt + diag(sqrt(2 g2(x,u))) dw. Covers the
/// colloidal and Lotka-Volterra case studies and the synthetic test systems;
/// the diffusion net may be absent, in which case a fixed diagonal is used.
/// Negative diffusion arguments are clamped at a small floor before the root.
class SeparableNetSde : public NetSde {
 public:
  static constexpr double kDiffusionFloor = 1e-14;

  SeparableNetSde(int state_dim, int input_dim, Mlp drift_net, Mlp diffusion_net)
      : nx_(state_dim), nu_(input_dim) {
    nets_.push_back(std::move(drift_net));
    nets_.push_back(std::move(diffusion_net));
    check();
  }
  SeparableNetSde(int state_dim, int input_dim, Mlp drift_net, Eigen::VectorXd fixed_diffusion)
      : nx_(state_dim), nu_(input_dim), fixed_diffusion_(std::move(fixed_diffusion)) {
    nets_.push_back(std::move(drift_net));
    check();
  }

  int state_dim() const override { return nx_; }
  int input_dim() const override { return nu_; }
  int noise_dim() const override { return nx_; }
  int theta_dim() const override {
    int n = 0;
    for (const auto& net : nets_) n += static_cast<int>(net.params.size());
    return n;
  }

  Eigen::VectorXd get_theta() const override {
    Eigen::VectorXd t(theta_dim());
    int off = 0;
    for (const auto& net : nets_) {
      t.segment(off, net.params.size()) = net.params;
      off += static_cast<int>(net.params.size());
    }
    return t;
  }
  void set_theta(const Eigen::VectorXd& theta) override {
    int off = 0;
    for (auto& net : nets_) {
      net.params = theta.segment(off, net.params.size());
      off += static_cast<int>(net.params.size());
    }
  }
  std::pair<int, int> drift_theta_span() const override {
    return {0, static_cast<int>(nets_[0].params.size())};
  }
  std::pair<int, int> diffusion_theta_span() const override {
    if (nets_.size() < 2) return {static_cast<int>(nets_[0].params.size()), 0};
    return {static_cast<int>(nets_[0].params.size()), static_cast<int>(nets_[1].params.size())};
  }

  void drift(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
             Eigen::VectorXd& f) const override {
    MlpWorkspace ws;
    f = mlp_forward_ws(nets_[0], detail::net_input(x, u), ws);
  }

  void drift_vjp(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                 const Eigen::VectorXd& f_bar, Eigen::VectorXd& x_bar,
                 Eigen::Ref<Eigen::VectorXd> theta_bar) const override {
    MlpWorkspace ws;
    mlp_forward_ws(nets_[0], detail::net_input(x, u), ws);
    auto span = drift_theta_span();
    Eigen::VectorXd zbar = mlp_vjp(nets_[0], ws, f_bar, theta_bar.segment(span.first, span.second));
    x_bar += zbar.head(nx_);
  }

  void diffusion(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                 Eigen::MatrixXd& h) const override {
    h = Eigen::MatrixXd::Zero(nx_, nx_);
    if (nets_.size() < 2) {
      h.diagonal() = fixed_diffusion_;
      return;
    }
    MlpWorkspace ws;
    const Eigen::VectorXd g2 = mlp_forward_ws(nets_[1], detail::net_input(x, u), ws);
    for (int i = 0; i < nx_; ++i)
      h(i, i) = std::sqrt(std::max(2.0 * g2[i], kDiffusionFloor));
  }

  void diffusion_vjp(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                     const Eigen::MatrixXd& h_bar, Eigen::VectorXd& x_bar,
                     Eigen::Ref<Eigen::VectorXd> theta_bar) const override {
    if (nets_.size() < 2) return;  // fixed diffusion: no x or theta dependence
    MlpWorkspace ws;
    const Eigen::VectorXd g2 = mlp_forward_ws(nets_[1], detail::net_input(x, u), ws);
    Eigen::VectorXd g2_bar = Eigen::VectorXd::Zero(nx_);
    for (int i = 0; i < nx_; ++i) {
      const double arg = 2.0 * g2[i];
      if (arg > kDiffusionFloor)
        g2_bar[i] = h_bar(i, i) / std::sqrt(arg);  // d sqrt(2g)/dg = 1/sqrt(2g)
    }
    auto span = diffusion_theta_span();
    Eigen::VectorXd zbar =
        mlp_vjp(nets_[1], ws, g2_bar, theta_bar.segment(span.first, span.second));
    x_bar += zbar.head(nx_);
  }

  void drift_jacobian(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                      Eigen::MatrixXd& jac) const override {
    MlpWorkspace ws;
    mlp_forward_jac(nets_[0], detail::net_input(x, u), ws);
    jac = ws.jac.leftCols(nx_);
  }

  void drift_jacobian_vjp(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                          const Eigen::VectorXd& f_bar, const Eigen::MatrixXd& jac_bar,
                          Eigen::VectorXd& x_bar,
                          Eigen::Ref<Eigen::VectorXd> theta_bar) const override {
    MlpWorkspace ws;
    mlp_forward_jac(nets_[0], detail::net_input(x, u), ws);
    Eigen::MatrixXd full_bar = Eigen::MatrixXd::Zero(nx_, nx_ + nu_);
    full_bar.leftCols(nx_) = jac_bar;
    auto span = drift_theta_span();
    Eigen::VectorXd zbar =
        mlp_vjp_jac(nets_[0], ws, f_bar, full_bar, theta_bar.segment(span.first, span.second));
    x_bar += zbar.head(nx_);
  }

  const std::vector<Mlp>& nets() const override { return nets_; }
  std::vector<Mlp>& nets() override { return nets_; }

 private:
  void check() const {
    const int in = nx_ + nu_;
    if (nets_[0].input_dim() != in || nets_[0].output_dim() != nx_)
      throw std::invalid_argument("drift net shape mismatch");
    if (nets_.size() > 1 && (nets_[1].input_dim() != in || nets_[1].output_dim() != nx_))
      throw std::invalid_argument("diffusion net shape mismatch");
    if (nets_.size() == 1 && fixed_diffusion_.size() != nx_)
      throw std::invalid_argument("fixed diffusion size mismatch");
  }

  int nx_, nu_;
  std::vector<Mlp> nets_;
  Eigen::VectorXd fixed_diffusion_;
};

/// SIR structure: known epidemic balance terms plus an unknown transmission
/// function g(S, I) entering dS negatively and dI positively; diffusion is the
/// known diagonal (sigma1 S, sigma2 I, sigma3 R).
class SirNetSde : public NetSde {
 public:
  SirNetSde(const GroundTruthModel& gt, Mlp g_net) : p_(gt.parameters) {
    nets_.push_back(std::move(g_net));
    if (nets_[0].input_dim() != 2 || nets_[0].output_dim() != 1)
      throw std::invalid_argument("sir transmission net must map (S,I) -> scalar");
    known_jac_ = Eigen::Matrix3d::Zero();
    known_jac_(0, 0) = -p_.at("d");
    known_jac_(0, 2) = p_.at("gamma");
    known_jac_(1, 1) = -(p_.at("d") + p_.at("mu") + p_.at("delta"));
    known_jac_(2, 1) = p_.at("mu");
    known_jac_(2, 2) = -(p_.at("d") + p_.at("gamma"));
  }

  int state_dim() const override { return 3; }
  int input_dim() const override { return 0; }
  int noise_dim() const override { return 3; }
  int theta_dim() const override { return static_cast<int>(nets_[0].params.size()); }

  Eigen::VectorXd get_theta() const override { return nets_[0].params; }
  void set_theta(const Eigen::VectorXd& theta) override { nets_[0].params = theta; }
  std::pair<int, int> drift_theta_span() const override { return {0, theta_dim()}; }
  std::pair<int, int> diffusion_theta_span() const override { return {theta_dim(), 0}; }

  void drift(const Eigen::VectorXd& x, const Eigen::VectorXd&,
             Eigen::VectorXd& f) const override {
    MlpWorkspace ws;
    const double g = mlp_forward_ws(nets_[0], x.head(2), ws)[0];
    f.resize(3);
    f[0] = p_.at("b") - p_.at("d") * x[0] - g + p_.at("gamma") * x[2];
    f[1] = g - (p_.at("d") + p_.at("mu") + p_.at("delta")) * x[1];
    f[2] = p_.at("mu") * x[1] - (p_.at("d") + p_.at("gamma")) * x[2];
  }

  void drift_vjp(const Eigen::VectorXd& x, const Eigen::VectorXd&, const Eigen::VectorXd& f_bar,
                 Eigen::VectorXd& x_bar, Eigen::Ref<Eigen::VectorXd> theta_bar) const override {
    MlpWorkspace ws;
    mlp_forward_ws(nets_[0], x.head(2), ws);
    x_bar += known_jac_.transpose() * f_bar;
    Eigen::VectorXd g_bar(1);
    g_bar[0] = f_bar[1] - f_bar[0];
    Eigen::VectorXd zbar = mlp_vjp(nets_[0], ws, g_bar, theta_bar);
    x_bar.head(2) += zbar;
  }

  void diffusion(const Eigen::VectorXd& x, const Eigen::VectorXd&,
                 Eigen::MatrixXd& h) const override {
    h = Eigen::MatrixXd::Zero(3, 3);
    h(0, 0) = p_.at("sigma1") * x[0];
    h(1, 1) = p_.at("sigma2") * x[1];
    h(2, 2) = p_.at("sigma3") * x[2];
  }

  void diffusion_vjp(const Eigen::VectorXd&, const Eigen::VectorXd&, const Eigen::MatrixXd& h_bar,
                     Eigen::VectorXd& x_bar, Eigen::Ref<Eigen::VectorXd>) const override {
    x_bar[0] += p_.at("sigma1") * h_bar(0, 0);
    x_bar[1] += p_.at("sigma2") * h_bar(1, 1);
    x_bar[2] += p_.at("sigma3") * h_bar(2, 2);
  }

  void drift_jacobian(const Eigen::VectorXd& x, const Eigen::VectorXd&,
                      Eigen::MatrixXd& jac) const override {
    MlpWorkspace ws;
    mlp_forward_jac(nets_[0], x.head(2), ws);
    jac = known_jac_;
    jac.row(0).head(2) -= ws.jac.row(0);
    jac.row(1).head(2) += ws.jac.row(0);
  }

  void drift_jacobian_vjp(const Eigen::VectorXd& x, const Eigen::VectorXd&,
                          const Eigen::VectorXd& f_bar, const Eigen::MatrixXd& jac_bar,
                          Eigen::VectorXd& x_bar,
                          Eigen::Ref<Eigen::VectorXd> theta_bar) const override {
    MlpWorkspace ws;
    mlp_forward_jac(nets_[0], x.head(2), ws);
    x_bar += known_jac_.transpose() * f_bar;
    Eigen::VectorXd g_bar(1);
    g_bar[0] = f_bar[1] - f_bar[0];
    Eigen::MatrixXd gj_bar = (jac_bar.row(1) - jac_bar.row(0)).head(2);
    Eigen::VectorXd zbar = mlp_vjp_jac(nets_[0], ws, g_bar, gj_bar, theta_bar);
    x_bar.head(2) += zbar;
  }

  const std::vector<Mlp>& nets() const override { return nets_; }
  std::vector<Mlp>& nets() override { return nets_; }

 private:
  std::map<std::string, double> p_;
  Eigen::Matrix3d known_jac_;
};

/// Builds the learnable structure for a case study with freshly initialized
/// nets (2 x hidden tanh layers by default; softplus head on diffusion nets).
inline std::unique_ptr<NetSde> make_net_sde(const GroundTruthModel& gt, int hidden_units,
                                            int hidden_layers, std::uint64_t init_seed) {
  auto arch = [&](int in, int out) {
    std::vector<int> sizes{in};
    for (int l = 0; l < hidden_layers; ++l) sizes.push_back(hidden_units);
    sizes.push_back(out);
    return sizes;
  };
  switch (gt.id) {
    case CaseStudyId::colloidal:
    case CaseStudyId::lotka_volterra: {
      const int nx = gt.state_dim, nu = gt.input_dim;
      Mlp g1 = make_mlp(arch(nx + nu, nx), OutputHead::linear);
      g1.params = init_params(g1.layer_sizes, rng::combine(init_seed, 1));
      Mlp g2 = make_mlp(arch(nx + nu, nx), OutputHead::softplus);
      g2.params = init_params(g2.layer_sizes, rng::combine(init_seed, 2));
      return std::make_unique<SeparableNetSde>(nx, nu, std::move(g1), std::move(g2));
    }
    case CaseStudyId::sir: {
      Mlp g = make_mlp(arch(2, 1), OutputHead::linear);
      g.params = init_params(g.layer_sizes, rng::combine(init_seed, 1));
      return std::make_unique<SirNetSde>(gt, std::move(g));
    }
  }
  throw std::logic_error("unreachable");
}

}  // namespace sdelearn
