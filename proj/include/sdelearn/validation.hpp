#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "sdelearn/parallel.hpp"
#include "sdelearn/sde.hpp"

namespace sdelearn {

/// Uniform tensor grid over a box; axis i has res[i] points from lo[i] to hi[i].
struct EvalGrid {
  Eigen::VectorXd lo, hi;
  std::vector<int> res;

  int dims() const { return static_cast<int>(res.size()); }
  std::size_t size() const {
    std::size_t n = 1;
    for (int r : res) n *= r;
    return n;
  }
  Eigen::VectorXd point(std::size_t flat) const {
    Eigen::VectorXd x(dims());
    for (int d = 0; d < dims(); ++d) {
      const int r = res[d];
      const std::size_t i = flat % r;
      flat /= r;
      x[d] = r > 1 ? lo[d] + (hi[d] - lo[d]) * static_cast<double>(i) / (r - 1) : lo[d];
    }
    return x;
  }
};

inline EvalGrid make_grid(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi, int res) {
  EvalGrid g;
  g.lo = lo;
  g.hi = hi;
  g.res.assign(lo.size(), res);
  return g;
}

struct RmseReport {
  Eigen::VectorXd rmse;          // one per hidden-physics output
  double extrapolation_fraction = 0.0;
};

/// Root mean square error between two vector-valued functions over the grid,
/// one value per output. Points outside the hull box (when given) are counted
/// as extrapolation but still evaluated.
inline RmseReport rmse_grid(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& learned,
                            const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& truth,
                            const EvalGrid& grid, const Eigen::VectorXd& hull_lo = {},
                            const Eigen::VectorXd& hull_hi = {}) {
  const std::size_t n = grid.size();
  Eigen::VectorXd sq;
  std::size_t outside = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::VectorXd x = grid.point(i);
    const Eigen::VectorXd t = truth(x);
    const Eigen::VectorXd l = learned(x);
    if (sq.size() == 0) sq = Eigen::VectorXd::Zero(t.size());
    sq += (l - t).cwiseAbs2();
    if (hull_lo.size()) {
      for (int d = 0; d < grid.dims(); ++d)
        if (x[d] < hull_lo[d] || x[d] > hull_hi[d]) {
          ++outside;
          break;
        }
    }
  }
  RmseReport r;
  r.rmse = (sq / static_cast<double>(n)).cwiseSqrt();
  r.extrapolation_fraction = static_cast<double>(outside) / static_cast<double>(n);
  return r;
}

// ---------------------------------------------------------------------------
// kernel density estimation (1-D and 2-D product-Gaussian, binned)

struct KdeEstimate {
  EvalGrid grid;
  Eigen::VectorXd bandwidth;       // Silverman rule per dimension
  std::vector<double> density;     // row-major over grid.point ordering
  double cell_volume = 0.0;

  double integral() const {
    double s = 0.0;
    for (double d : density) s += d;
    return s * cell_volume;
  }
};

namespace detail {

inline Eigen::VectorXd silverman_bandwidth(const Eigen::MatrixXd& samples,
                                           const Eigen::VectorXd& domain_width) {
  const int d = static_cast<int>(samples.rows());
  const double n = static_cast<double>(samples.cols());
  Eigen::VectorXd h(d);
  const double factor = std::pow(4.0 / ((d + 2.0) * n), 1.0 / (d + 4.0));
  for (int i = 0; i < d; ++i) {
    const double mu = samples.row(i).mean();
    const double var = samples.row(i).cwiseAbs2().mean() - mu * mu;
    double sd = std::sqrt(std::max(var, 0.0));
    if (sd <= 0.0) sd = 1e-6 * std::max(domain_width[i], 1e-12);  // degenerate floor
    h[i] = factor * sd;
  }
  return h;
}

// linear (cloud-in-cell) binning followed by a truncated separable Gaussian
// convolution; the discrete kernel is renormalized so the density integrates
// to one on the grid by construction.
inline std::vector<double> binned_kde(const Eigen::MatrixXd& samples, const EvalGrid& grid,
                                      const Eigen::VectorXd& h) {
  const int d = grid.dims();
  const std::size_t g = grid.size();
  std::vector<double> mass(g, 0.0);
  std::vector<double> step(d), inv_step(d);
  for (int i = 0; i < d; ++i) {
    step[i] = (grid.hi[i] - grid.lo[i]) / (grid.res[i] - 1);
    inv_step[i] = 1.0 / step[i];
  }

  const long n = samples.cols();
  for (long s = 0; s < n; ++s) {
    // multilinear splat
    double w[4];  // up to 2 dims x 2 corners
    long idx[2];
    for (int i = 0; i < d; ++i) {
      double p = (samples(i, s) - grid.lo[i]) * inv_step[i];
      if (p < 0.0) p = 0.0;
      if (p > grid.res[i] - 1.0) p = grid.res[i] - 1.0;
      long i0 = static_cast<long>(p);
      if (i0 >= grid.res[i] - 1) i0 = grid.res[i] - 2;
      if (i0 < 0) i0 = 0;
      const double frac = p - i0;
      idx[i] = i0;
      w[2 * i] = 1.0 - frac;
      w[2 * i + 1] = frac;
    }
    if (d == 1) {
      mass[idx[0]] += w[0];
      mass[idx[0] + 1] += w[1];
    } else {
      const long r0 = grid.res[0];
      mass[idx[1] * r0 + idx[0]] += w[0] * w[2];
      mass[idx[1] * r0 + idx[0] + 1] += w[1] * w[2];
      mass[(idx[1] + 1) * r0 + idx[0]] += w[0] * w[3];
      mass[(idx[1] + 1) * r0 + idx[0] + 1] += w[1] * w[3];
    }
  }

  double cell_volume = 1.0;
  for (int i = 0; i < d; ++i) cell_volume *= step[i];
  for (double& m : mass) m /= (static_cast<double>(n) * cell_volume);

  // separable truncated Gaussian smoothing, renormalized per axis
  for (int axis = 0; axis < d; ++axis) {
    const double hw = h[axis] * inv_step[axis];  // bandwidth in cells
    const int half = std::max(1, static_cast<int>(std::ceil(8.0 * hw)));
    std::vector<double> kernel(2 * half + 1);
    double ksum = 0.0;
    for (int k = -half; k <= half; ++k) {
      kernel[k + half] = std::exp(-0.5 * (k / hw) * (k / hw));
      ksum += kernel[k + half];
    }
    for (double& k : kernel) k /= ksum;

    std::vector<double> out(g, 0.0);
    const long r0 = grid.res[0];
    const long lines = d == 1 ? 1 : (axis == 0 ? grid.res[1] : grid.res[0]);
    const long len = grid.res[axis];
    for (long line = 0; line < lines; ++line) {
      auto at = [&](long i) -> std::size_t {
        if (d == 1) return i;
        return axis == 0 ? line * r0 + i : i * r0 + line;
      };
      for (long i = 0; i < len; ++i) {
        const double m = mass[at(i)];
        if (m == 0.0) continue;
        const long k0 = std::max<long>(0, i - half);
        const long k1 = std::min<long>(len - 1, i + half);
        for (long k = k0; k <= k1; ++k) out[at(k)] += m * kernel[k - i + half];
      }
    }
    mass.swap(out);
  }
  return mass;
}

}  // namespace detail

/// Product-Gaussian KDE with per-dimension Silverman bandwidths (1-D or 2-D).
inline KdeEstimate kde(const Eigen::MatrixXd& samples, const EvalGrid& grid) {
  if (samples.cols() < 30) throw std::invalid_argument("kde: need at least 30 samples");
  if (grid.dims() != samples.rows() || grid.dims() > 2)
    throw std::invalid_argument("kde: supports 1-D and 2-D grids matching the sample dimension");
  KdeEstimate est;
  est.grid = grid;
  est.bandwidth = detail::silverman_bandwidth(samples, grid.hi - grid.lo);
  est.density = detail::binned_kde(samples, grid, est.bandwidth);
  est.cell_volume = 1.0;
  for (int i = 0; i < grid.dims(); ++i)
    est.cell_volume *= (grid.hi[i] - grid.lo[i]) / (grid.res[i] - 1);
  return est;
}

/// Discrete KL divergence between two densities on the same grid,
/// sum p log(p/q) * cell_volume with a 1e-12 density floor.
inline double kl_between(const KdeEstimate& p, const KdeEstimate& q) {
  constexpr double kFloor = 1e-12;
  double s = 0.0;
  for (std::size_t i = 0; i < p.density.size(); ++i) {
    const double pi = std::max(p.density[i], kFloor);
    const double qi = std::max(q.density[i], kFloor);
    if (p.density[i] > 0.0) s += p.density[i] * std::log(pi / qi);
  }
  return s * p.cell_volume;
}

namespace detail {

inline Eigen::MatrixXd ensemble_slice(const TrajectoryEnsemble& ens, int k,
                                      const std::vector<int>& dims) {
  Eigen::MatrixXd m(dims.size(), ens.n_replicates);
  for (int n = 0; n < ens.n_replicates; ++n)
    for (std::size_t d = 0; d < dims.size(); ++d) m(d, n) = ens.at(n, k, dims[d]);
  return m;
}

inline double kl_over_steps(const TrajectoryEnsemble& a, const TrajectoryEnsemble& b, int k_v,
                            const std::vector<int>& dims, int grid_res) {
  std::vector<double> per_step(k_v + 1, 0.0);
  parallel_for(static_cast<std::size_t>(k_v + 1), [&](std::size_t k) {
    const Eigen::MatrixXd sa = ensemble_slice(a, static_cast<int>(k), dims);
    const Eigen::MatrixXd sb = ensemble_slice(b, static_cast<int>(k), dims);
    // shared grid: union of both sample ranges padded by 3 bandwidths
    const int d = static_cast<int>(dims.size());
    Eigen::VectorXd lo(d), hi(d);
    for (int i = 0; i < d; ++i) {
      lo[i] = std::min(sa.row(i).minCoeff(), sb.row(i).minCoeff());
      hi[i] = std::max(sa.row(i).maxCoeff(), sb.row(i).maxCoeff());
    }
    Eigen::VectorXd width = hi - lo;
    const Eigen::VectorXd ha = silverman_bandwidth(sa, width);
    const Eigen::VectorXd hb = silverman_bandwidth(sb, width);
    for (int i = 0; i < d; ++i) {
      const double pad = 3.0 * std::max(ha[i], hb[i]) + 1e-12;
      lo[i] -= pad;
      hi[i] += pad;
    }
    EvalGrid grid = make_grid(lo, hi, grid_res);
    per_step[k] = kl_between(kde(sa, grid), kde(sb, grid));
  });
  double total = 0.0;
  for (double v : per_step) total += v;  // ordered
  return total;
}

}  // namespace detail

/// Validation error: sum over k = 0..K_V of the KL divergence between KDEs of
/// the true and learned state distributions simulated from one initial
/// condition. Scalar systems compare the full state; two-state systems use the
/// joint 2-D density; higher dimensions sum the KL of the first two marginals.
inline double kl_validation(const SdeModel& true_model, const SdeModel& learned_model,
                            const Eigen::VectorXd& ic, const Eigen::VectorXd& u, double dt,
                            int k_v, int replicates, std::uint64_t seed,
                            std::uint64_t learned_seed_offset = 0, int grid_res = 256) {
  if (k_v < 1) throw std::invalid_argument("kl_validation: K_V must be >= 1");
  const TrajectoryEnsemble a = simulate_ensemble(true_model, ic, u, dt, k_v, replicates, seed);
  const TrajectoryEnsemble b =
      simulate_ensemble(learned_model, ic, u, dt, k_v, replicates, seed + learned_seed_offset);
  const int d = true_model.state_dim;
  if (d == 1) return detail::kl_over_steps(a, b, k_v, {0}, grid_res);
  if (d == 2) return detail::kl_over_steps(a, b, k_v, {0, 1}, grid_res);
  return detail::kl_over_steps(a, b, k_v, {0}, grid_res) +
         detail::kl_over_steps(a, b, k_v, {1}, grid_res);
}

}  // namespace sdelearn
