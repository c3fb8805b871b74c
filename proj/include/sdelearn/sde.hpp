#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdelearn/parallel.hpp"
#include "sdelearn/rng.hpp"

namespace sdelearn {

struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// SDE dx = f(x,u) dt + h(x,u) dw with immutable callables. The domain box is
/// used by the simulator to flag replicates that escape it; clamp_probe, when
/// set, reports how many noise channels were clamped at (x,u) so the simulator
/// can record a clamp-activation rate.
struct SdeModel {
  int state_dim = 0;
  int input_dim = 0;
  int noise_dim = 0;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&, const Eigen::VectorXd&)> drift;
  std::function<Eigen::MatrixXd(const Eigen::VectorXd&, const Eigen::VectorXd&)> diffusion;
  Eigen::VectorXd domain_lo, domain_hi;
  std::function<int(const Eigen::VectorXd&, const Eigen::VectorXd&)> clamp_probe;

  bool in_domain(const Eigen::VectorXd& x) const {
    if (domain_lo.size() == 0) return true;
    for (int i = 0; i < state_dim; ++i)
      if (x[i] < domain_lo[i] || x[i] > domain_hi[i]) return false;
    return true;
  }
};

inline Eigen::VectorXd em_step(const SdeModel& model, const Eigen::VectorXd& x,
                               const Eigen::VectorXd& u, double dt, const Eigen::VectorXd& dw) {
  if (dt < 0.0) throw std::invalid_argument("em_step: dt must be >= 0");
  if (dw.size() != model.noise_dim)
    throw std::invalid_argument("em_step: noise vector length mismatch");
  if (!x.allFinite() || !u.allFinite() || !dw.allFinite())
    throw DomainError("em_step: non-finite input component");
  Eigen::VectorXd out = x + model.drift(x, u) * dt;
  out.noalias() += model.diffusion(x, u) * dw;
  return out;
}

/// N replicate trajectories from one initial condition, row-major layout
/// states[n][k][dim]. Flagged replicates left the domain box and are frozen at
/// their last in-box state.
struct TrajectoryEnsemble {
  Eigen::VectorXd initial_condition;
  Eigen::VectorXd input;
  double dt = 0.0;
  Eigen::VectorXd times;  // t_0 .. t_K
  int n_replicates = 0;
  int n_steps = 0;  // K
  int state_dim = 0;
  std::uint64_t seed = 0;
  std::vector<double> states;
  std::vector<std::uint8_t> flagged;
  double clamp_rate = 0.0;  // clamped noise-channel evaluations / total

  double at(int n, int k, int d) const {
    return states[(static_cast<std::size_t>(n) * (n_steps + 1) + k) * state_dim + d];
  }
  Eigen::Map<const Eigen::VectorXd> state(int n, int k) const {
    return {states.data() + (static_cast<std::size_t>(n) * (n_steps + 1) + k) * state_dim,
            state_dim};
  }
  std::size_t flagged_count() const {
    std::size_t c = 0;
    for (auto f : flagged) c += f;
    return c;
  }
};

/// Euler-Maruyama ensemble; bit-identical for identical arguments regardless
/// of worker count (per-replicate counter RNG streams keyed by
/// (seed, replicate, step)). Throws if more than 1% of replicates leave the
/// domain box, which signals a mis-scaled dt or domain.
inline TrajectoryEnsemble simulate_ensemble(const SdeModel& model, const Eigen::VectorXd& ic,
                                            const Eigen::VectorXd& u, double dt, int steps,
                                            int replicates, std::uint64_t seed) {
  if (steps < 1 || replicates < 1)
    throw std::invalid_argument("simulate_ensemble: need steps >= 1 and replicates >= 1");
  if (ic.size() != model.state_dim)
    throw std::invalid_argument("simulate_ensemble: initial condition dimension mismatch");

  TrajectoryEnsemble ens;
  ens.initial_condition = ic;
  ens.input = u;
  ens.dt = dt;
  ens.n_replicates = replicates;
  ens.n_steps = steps;
  ens.state_dim = model.state_dim;
  ens.seed = seed;
  ens.times = Eigen::VectorXd::LinSpaced(steps + 1, 0.0, dt * steps);
  ens.states.resize(static_cast<std::size_t>(replicates) * (steps + 1) * model.state_dim);
  ens.flagged.assign(replicates, 0);

  const int nw = model.noise_dim;
  const double sqdt = std::sqrt(dt);
  std::atomic<std::int64_t> clamped{0};
  const bool probe = static_cast<bool>(model.clamp_probe);

  parallel_for(static_cast<std::size_t>(replicates), [&](std::size_t n) {
    Eigen::VectorXd x = ic;
    Eigen::VectorXd dw(nw);
    std::int64_t local_clamped = 0;
    double* base = ens.states.data() + n * (steps + 1) * model.state_dim;
    for (int d = 0; d < model.state_dim; ++d) base[d] = ic[d];
    bool dead = false;
    for (int k = 0; k < steps; ++k) {
      if (!dead) {
        for (int c = 0; c < nw; c += 2) {
          double z0, z1;
          rng::normal_pair(seed, n, k, c / 2, z0, z1);
          dw[c] = z0 * sqdt;
          if (c + 1 < nw) dw[c + 1] = z1 * sqdt;
        }
        if (probe) local_clamped += model.clamp_probe(x, u);
        Eigen::VectorXd next = x + model.drift(x, u) * dt;
        next.noalias() += model.diffusion(x, u) * dw;
        if (!next.allFinite() || !model.in_domain(next)) {
          ens.flagged[n] = 1;
          dead = true;  // freeze at the last in-box state
        } else {
          x = next;
        }
      }
      double* row = base + static_cast<std::size_t>(k + 1) * model.state_dim;
      for (int d = 0; d < model.state_dim; ++d) row[d] = x[d];
    }
    if (local_clamped) clamped += local_clamped;
  });

  if (probe) {
    const double total = static_cast<double>(replicates) * steps * nw;
    ens.clamp_rate = static_cast<double>(clamped.load()) / total;
  }

  const double bad = static_cast<double>(ens.flagged_count()) / replicates;
  if (bad > 0.01)
    throw DomainError("simulate_ensemble: " + std::to_string(100.0 * bad) +
                      "% of replicates left the domain box");
  return ens;
}

}  // namespace sdelearn
