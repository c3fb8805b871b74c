#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "sdelearn/rng.hpp"

namespace sdelearn {

enum class Activation : std::uint8_t { tanh = 0 };
enum class OutputHead : std::uint8_t { linear = 0, softplus = 1 };

inline double softplus(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}
inline double sigmoid(double z) {
  return z > 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

/// Fully-connected network g(x; theta) with a flat parameter vector.
/// Layout per affine layer: weight matrix row-major, then bias. Inputs are
/// standardized by the stored shift/scale before the first layer.
struct Mlp {
  std::vector<int> layer_sizes;  // input, hidden..., output
  Activation activation = Activation::tanh;
  OutputHead head = OutputHead::linear;
  Eigen::VectorXd input_shift;  // subtracted from raw inputs
  Eigen::VectorXd input_scale;  // divides shifted inputs (entries > 0)
  Eigen::VectorXd params;

  int input_dim() const { return layer_sizes.front(); }
  int output_dim() const { return layer_sizes.back(); }
  int n_layers() const { return static_cast<int>(layer_sizes.size()) - 1; }

  static std::size_t param_count(const std::vector<int>& sizes) {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l)
      n += static_cast<std::size_t>(sizes[l + 1]) * sizes[l] + sizes[l + 1];
    return n;
  }

  // Offset of layer l's weight block in the flat vector.
  std::size_t layer_offset(int l) const {
    std::size_t off = 0;
    for (int k = 0; k < l; ++k)
      off += static_cast<std::size_t>(layer_sizes[k + 1]) * layer_sizes[k] + layer_sizes[k + 1];
    return off;
  }

  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
  weight(int l) const {
    return {params.data() + layer_offset(l), layer_sizes[l + 1], layer_sizes[l]};
  }
  Eigen::Map<const Eigen::VectorXd> bias(int l) const {
    return {params.data() + layer_offset(l) +
                static_cast<std::size_t>(layer_sizes[l + 1]) * layer_sizes[l],
            layer_sizes[l + 1]};
  }
};

inline Mlp make_mlp(std::vector<int> sizes, OutputHead head = OutputHead::linear) {
  Mlp net;
  net.layer_sizes = std::move(sizes);
  net.head = head;
  net.input_shift = Eigen::VectorXd::Zero(net.input_dim());
  net.input_scale = Eigen::VectorXd::Ones(net.input_dim());
  net.params = Eigen::VectorXd::Zero(Mlp::param_count(net.layer_sizes));
  return net;
}

/// Scaled-uniform weights (bound sqrt(6/(n_in+n_out)) per layer), zero biases.
inline Eigen::VectorXd init_params(const std::vector<int>& sizes, std::uint64_t seed) {
  Eigen::VectorXd p = Eigen::VectorXd::Zero(Mlp::param_count(sizes));
  rng::Stream stream(seed);
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const int nin = sizes[l], nout = sizes[l + 1];
    const double bound = std::sqrt(6.0 / (nin + nout));
    for (int i = 0; i < nout * nin; ++i)
      p[off + i] = bound * (2.0 * stream.next_uniform() - 1.0);
    off += static_cast<std::size_t>(nout) * nin + nout;  // biases stay 0
  }
  return p;
}

/// Per-call scratch so forward results can be reused by the backward pass.
struct MlpWorkspace {
  std::vector<Eigen::VectorXd> z;  // post-activation values, z[0] = standardized input
  std::vector<Eigen::VectorXd> a;  // pre-activation per affine layer
  Eigen::VectorXd out;             // final output after head
  // forward-Jacobian extras (filled by mlp_forward_jac)
  std::vector<Eigen::MatrixXd> G;  // dz[l]/dx
  std::vector<Eigen::MatrixXd> H;  // da[l]/dx
  Eigen::MatrixXd jac;             // dout/dx
};

inline void check_input(const Mlp& net, const Eigen::VectorXd& x) {
  if (x.size() != net.input_dim())
    throw std::invalid_argument("mlp input size mismatch: got " + std::to_string(x.size()) +
                                ", expected " + std::to_string(net.input_dim()));
}

inline const Eigen::VectorXd& mlp_forward_ws(const Mlp& net, const Eigen::VectorXd& x,
                                             MlpWorkspace& ws) {
  check_input(net, x);
  const int L = net.n_layers();
  ws.z.resize(L + 1);
  ws.a.resize(L);
  ws.z[0] = (x - net.input_shift).cwiseQuotient(net.input_scale);
  for (int l = 0; l < L; ++l) {
    ws.a[l].noalias() = net.weight(l) * ws.z[l];
    ws.a[l] += net.bias(l);
    if (l + 1 < L)
      ws.z[l + 1] = ws.a[l].array().tanh();
    else
      ws.z[l + 1] = ws.a[l];
  }
  if (net.head == OutputHead::softplus)
    ws.out = ws.z[L].unaryExpr([](double v) { return softplus(v); });
  else
    ws.out = ws.z[L];
  return ws.out;
}

inline Eigen::VectorXd mlp_forward(const Mlp& net, const Eigen::VectorXd& x) {
  MlpWorkspace ws;
  return mlp_forward_ws(net, x, ws);
}

/// Reverse pass for upstream^T * forward(x). Parameter gradients accumulate
/// into grad_params (+=); the gradient w.r.t. the raw input x is returned.
inline Eigen::VectorXd mlp_vjp(const Mlp& net, const MlpWorkspace& ws,
                               const Eigen::VectorXd& upstream,
                               Eigen::Ref<Eigen::VectorXd> grad_params) {
  const int L = net.n_layers();
  Eigen::VectorXd abar;
  if (net.head == OutputHead::softplus)
    abar = upstream.cwiseProduct(ws.a[L - 1].unaryExpr([](double v) { return sigmoid(v); }));
  else
    abar = upstream;

  for (int l = L - 1; l >= 0; --l) {
    const int nin = net.layer_sizes[l], nout = net.layer_sizes[l + 1];
    const std::size_t off = net.layer_offset(l);
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> Wbar(
        grad_params.data() + off, nout, nin);
    Eigen::Map<Eigen::VectorXd> bbar(grad_params.data() + off + static_cast<std::size_t>(nout) * nin,
                                     nout);
    Wbar.noalias() += abar * ws.z[l].transpose();
    bbar += abar;
    Eigen::VectorXd zbar = net.weight(l).transpose() * abar;
    if (l > 0) {
      // z[l] = tanh(a[l-1]); tanh' = 1 - z^2
      abar = zbar.cwiseProduct(Eigen::VectorXd::Ones(ws.z[l].size()) - ws.z[l].cwiseAbs2());
    } else {
      return zbar.cwiseQuotient(net.input_scale);
    }
  }
  return Eigen::VectorXd();  // unreachable
}

/// Forward pass that also carries the Jacobian d out / d x.
inline void mlp_forward_jac(const Mlp& net, const Eigen::VectorXd& x, MlpWorkspace& ws) {
  check_input(net, x);
  const int L = net.n_layers();
  mlp_forward_ws(net, x, ws);
  ws.G.resize(L + 1);
  ws.H.resize(L);
  ws.G[0] = net.input_scale.cwiseInverse().asDiagonal();
  for (int l = 0; l < L; ++l) {
    ws.H[l].noalias() = net.weight(l) * ws.G[l];
    if (l + 1 < L) {
      Eigen::VectorXd tp = Eigen::VectorXd::Ones(ws.z[l + 1].size()) - ws.z[l + 1].cwiseAbs2();
      ws.G[l + 1] = tp.asDiagonal() * ws.H[l];
    } else {
      ws.G[l + 1] = ws.H[l];
    }
  }
  if (net.head == OutputHead::softplus) {
    Eigen::VectorXd d = ws.a[L - 1].unaryExpr([](double v) { return sigmoid(v); });
    ws.jac = d.asDiagonal() * ws.H[L - 1];
  } else {
    ws.jac = ws.H[L - 1];
  }
}

/// Reverse pass of mlp_forward_jac: given cotangents of (out, jac), accumulate
/// parameter gradients and return the raw-input gradient. Needs tanh'' terms,
/// so it is the one place second derivatives of the activation appear.
inline Eigen::VectorXd mlp_vjp_jac(const Mlp& net, const MlpWorkspace& ws,
                                   const Eigen::VectorXd& out_bar,
                                   const Eigen::MatrixXd& jac_bar,
                                   Eigen::Ref<Eigen::VectorXd> grad_params) {
  const int L = net.n_layers();
  Eigen::VectorXd abar;      // cotangent of a[l]
  Eigen::MatrixXd Hbar;      // cotangent of H[l]
  if (net.head == OutputHead::softplus) {
    const Eigen::VectorXd d = ws.a[L - 1].unaryExpr([](double v) { return sigmoid(v); });
    abar = out_bar.cwiseProduct(d);
    // jac = diag(d) * H: dbar_i = sum_j jac_bar(i,j) H(i,j); d' = d(1-d)
    Eigen::VectorXd dbar = (jac_bar.cwiseProduct(ws.H[L - 1])).rowwise().sum();
    abar += dbar.cwiseProduct(d.cwiseProduct(Eigen::VectorXd::Ones(d.size()) - d));
    Hbar = d.asDiagonal() * jac_bar;
  } else {
    abar = out_bar;
    Hbar = jac_bar;
  }

  Eigen::VectorXd zbar;
  Eigen::MatrixXd Gbar;
  for (int l = L - 1; l >= 0; --l) {
    const int nin = net.layer_sizes[l], nout = net.layer_sizes[l + 1];
    const std::size_t off = net.layer_offset(l);
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> Wbar(
        grad_params.data() + off, nout, nin);
    Eigen::Map<Eigen::VectorXd> bbar(grad_params.data() + off + static_cast<std::size_t>(nout) * nin,
                                     nout);
    // a[l] = W z + b ; H[l] = W G[l]
    Wbar.noalias() += abar * ws.z[l].transpose();
    Wbar.noalias() += Hbar * ws.G[l].transpose();
    bbar += abar;
    zbar.noalias() = net.weight(l).transpose() * abar;
    Gbar.noalias() = net.weight(l).transpose() * Hbar;

    if (l > 0) {
      const Eigen::VectorXd& t = ws.z[l];  // tanh(a[l-1])
      Eigen::VectorXd tp = Eigen::VectorXd::Ones(t.size()) - t.cwiseAbs2();
      // G[l] = diag(tp) H[l-1]
      Hbar = tp.asDiagonal() * Gbar;
      Eigen::VectorXd tbar = zbar;
      // tp depends on t: d tp/d t = -2 t
      tbar -= 2.0 * t.cwiseProduct((Gbar.cwiseProduct(ws.H[l - 1])).rowwise().sum());
      abar = tbar.cwiseProduct(tp);
    } else {
      // z[0] = (x - shift)/scale; G[0] is constant
      return zbar.cwiseQuotient(net.input_scale);
    }
  }
  return Eigen::VectorXd();
}

}  // namespace sdelearn
