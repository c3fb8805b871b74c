#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdelearn/moments.hpp"
#include "sdelearn/parallel.hpp"
#include "sdelearn/propagate.hpp"
#include "sdelearn/structure.hpp"

namespace sdelearn {

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class LossMode { sequential_mean_then_cov, joint_two_moment, sir_mean_only };

inline std::string loss_mode_name(LossMode m) {
  switch (m) {
    case LossMode::sequential_mean_then_cov: return "sequential_mean_then_cov";
    case LossMode::joint_two_moment: return "joint_two_moment";
    case LossMode::sir_mean_only: return "sir_mean_only";
  }
  return "?";
}

inline LossMode loss_mode_from_name(const std::string& s) {
  if (s == "sequential_mean_then_cov" || s == "sequential") return LossMode::sequential_mean_then_cov;
  if (s == "joint_two_moment" || s == "joint") return LossMode::joint_two_moment;
  if (s == "sir_mean_only" || s == "sir") return LossMode::sir_mean_only;
  throw std::invalid_argument("unknown loss mode: " + s);
}

struct TrainConfig {
  Propagator propagator = Propagator::ut2m;
  int batch_size = 256;
  double lr = 1e-3;
  int max_epochs = 500;
  int patience = 20;
  std::uint64_t split_seed = 20220411;
  std::uint64_t init_seed = 1;
  LossMode loss_mode = LossMode::sequential_mean_then_cov;
  double cov_weight = 1.0;
  UtParams ut;
  SolverConfig solver;
  int hidden_units = 64;
  int hidden_layers = 2;
  unsigned threads = 0;
};

// ---------------------------------------------------------------------------
// losses

/// Sum of squared mean errors plus weighted sum of squared covariance errors.
inline double loss_two_moment(const Eigen::VectorXd& mean_pred, const Eigen::VectorXd& mean_tgt,
                              const Eigen::MatrixXd& cov_pred, const Eigen::MatrixXd& cov_tgt,
                              double weight) {
  return (mean_pred - mean_tgt).squaredNorm() + weight * (cov_pred - cov_tgt).squaredNorm();
}

template <class Preds, class Tgts>
double loss_two_moment(const Preds& preds, const Tgts& tgts, double weight) {
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    s += loss_two_moment(preds[i].mean, tgts[i].mean, preds[i].cov, tgts[i].cov, weight);
  return s;
}

/// SIR loss: squared S-mean and I-mean errors only; R is excluded.
inline double loss_sir_mean(const Eigen::VectorXd& mean_pred, const Eigen::VectorXd& mean_tgt) {
  double s = 0.0;
  for (int i = 0; i < 2; ++i) {
    const double d = mean_pred[i] - mean_tgt[i];
    s += d * d;
  }
  return s;
}

// ---------------------------------------------------------------------------
// optimizer

struct AdamState {
  Eigen::VectorXd m, v;
  long t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit AdamState(int n = 0) : m(Eigen::VectorXd::Zero(n)), v(Eigen::VectorXd::Zero(n)) {}
};

inline void adam_step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grad,
                      AdamState& st, double lr) {
  if (params.size() != grad.size() || params.size() != st.m.size())
    throw std::invalid_argument("adam_step: size mismatch");
  ++st.t;
  st.m = st.beta1 * st.m + (1.0 - st.beta1) * grad;
  st.v = st.beta2 * st.v + (1.0 - st.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(st.beta1, st.t);
  const double c2 = 1.0 - std::pow(st.beta2, st.t);
  const Eigen::VectorXd mhat = st.m / c1;
  const Eigen::VectorXd vhat = st.v / c2;
  params -= lr * mhat.cwiseQuotient(vhat.cwiseSqrt() +
                                    Eigen::VectorXd::Constant(params.size(), st.eps));
}

// ---------------------------------------------------------------------------
// per-transition loss/gradient

enum class TrainStage { mean_stage, cov_stage, joint_stage };

/// Evaluates the stage loss for one transition and optionally accumulates the
/// full-theta gradient. Mean and covariance errors are computed on
/// standardized state scales.
struct LossEvaluator {
  const NetSde* sde = nullptr;
  PropagationConfig pcfg;
  TrainStage stage = TrainStage::mean_stage;
  bool sir_mean = false;  // restrict the mean loss to the S and I components
  double cov_weight = 1.0;
  Eigen::VectorXd state_scale;
  std::atomic<long>* fallback_counter = nullptr;

  double operator()(const Transition& tr, Eigen::VectorXd* theta_bar) const {
    const SourceMoments src = source_from(*tr.src);
    const Eigen::VectorXd& u = *tr.input;
    const int nx = sde->state_dim();

    const bool want_mean = stage != TrainStage::cov_stage;
    const bool want_cov = stage != TrainStage::mean_stage;

    Eigen::VectorXd mean_bar;
    Eigen::MatrixXd cov_bar;
    double loss = 0.0;

    auto mean_terms = [&](const Eigen::VectorXd& mu_hat) {
      mean_bar = Eigen::VectorXd::Zero(nx);
      for (int i = 0; i < nx; ++i) {
        if (sir_mean && i >= 2) continue;
        const double e = (mu_hat[i] - tr.tgt->mean[i]) / state_scale[i];
        loss += e * e;
        mean_bar[i] = 2.0 * e / state_scale[i];
      }
    };
    auto cov_terms = [&](const Eigen::MatrixXd& sig_hat) {
      cov_bar = Eigen::MatrixXd::Zero(nx, nx);
      for (int i = 0; i < nx; ++i)
        for (int j = 0; j < nx; ++j) {
          const double sc = state_scale[i] * state_scale[j];
          const double e = (sig_hat(i, j) - tr.tgt->cov(i, j)) / sc;
          loss += cov_weight * e * e;
          cov_bar(i, j) = 2.0 * cov_weight * e / sc;
        }
    };

    if (stage == TrainStage::joint_stage && pcfg.method != Propagator::linearization) {
      // fully coupled mean/covariance evolution
      CoupledResult res = propagate_coupled(*sde, src, u, tr.dt, pcfg);
      mean_terms(res.pred.mean);
      cov_terms(res.pred.cov);
      if (theta_bar) propagate_coupled_backward(*sde, u, pcfg, res, mean_bar, cov_bar, *theta_bar);
      return loss;
    }

    if (pcfg.method == Propagator::linearization) {
      LinearizedResult res = propagate_linearized(*sde, src, u, tr.dt, pcfg, !want_cov);
      if (want_mean) mean_terms(res.pred.mean);
      if (want_cov) cov_terms(res.pred.cov);
      if (theta_bar)
        propagate_linearized_backward(*sde, u, pcfg, res, mean_bar, cov_bar, *theta_bar);
      return loss;
    }

    DecoupledResult res = propagate_decoupled(*sde, src, u, tr.dt, pcfg, !want_cov);
    if (res.fallback_4m && fallback_counter) fallback_counter->fetch_add(1);
    if (want_mean) mean_terms(res.pred.mean);
    if (want_cov) cov_terms(res.pred.cov);
    if (theta_bar) propagate_decoupled_backward(*sde, u, pcfg, res, mean_bar, cov_bar, *theta_bar);
    return loss;
  }
};

// ---------------------------------------------------------------------------
// training loop

struct HistoryRow {
  int stage = 0;
  int epoch = 0;  // 0 = before any update
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainedModel {
  std::unique_ptr<NetSde> sde;
  Eigen::VectorXd state_scale;
  std::vector<HistoryRow> history;
  double best_val = 0.0;
  int best_epoch = 0;
  long fallback_4m_count = 0;
  TrainConfig config;
};

namespace detail {

inline double mean_loss_over(const LossEvaluator& ev, const std::vector<Transition>& transitions,
                             const std::vector<std::size_t>& idx, unsigned threads) {
  if (idx.empty()) return 0.0;
  std::vector<double> losses(idx.size());
  parallel_for(idx.size(),
               [&](std::size_t i) { losses[i] = ev(transitions[idx[i]], nullptr); }, threads);
  double s = 0.0;
  for (double l : losses) s += l;  // ordered reduction
  return s / static_cast<double>(idx.size());
}

struct StagePlan {
  TrainStage stage;
  int span_begin;  // active theta slice
  int span_len;
  const char* label;
};

}  // namespace detail

/// Runs the configured optimization stages on an existing structure. The
/// structure's nets must already be initialized; input standardization and the
/// state scale are derived from the training split.
inline TrainedModel train_core(std::unique_ptr<NetSde> sde, const MomentDataset& ds,
                               const TrainConfig& cfg) {
  const int nx = sde->state_dim();
  const int nu = sde->input_dim();

  std::vector<Transition> transitions = build_transitions(ds);
  if (cfg.batch_size < 1 || static_cast<std::size_t>(cfg.batch_size) > transitions.size())
    throw std::invalid_argument("train: batch_size must be within [1, #train transitions]");
  SplitIndices split = split_transitions(transitions.size(), cfg.split_seed);
  if (split.train.empty() || split.val.empty())
    throw std::invalid_argument("train: empty train or validation split");

  // standardized state scales from the training split (law of total variance)
  Eigen::VectorXd mean_acc = Eigen::VectorXd::Zero(nx);
  Eigen::VectorXd sq_acc = Eigen::VectorXd::Zero(nx);
  Eigen::VectorXd var_acc = Eigen::VectorXd::Zero(nx);
  Eigen::VectorXd u_acc = Eigen::VectorXd::Zero(nu);
  Eigen::VectorXd u_sq = Eigen::VectorXd::Zero(nu);
  for (std::size_t i : split.train) {
    const Transition& tr = transitions[i];
    mean_acc += tr.tgt->mean;
    sq_acc += tr.tgt->mean.cwiseAbs2();
    var_acc += tr.tgt->cov.diagonal();
    if (nu) {
      u_acc += *tr.input;
      u_sq += tr.input->cwiseAbs2();
    }
  }
  const double n_train = static_cast<double>(split.train.size());
  Eigen::VectorXd state_mean = mean_acc / n_train;
  Eigen::VectorXd state_scale(nx);
  for (int i = 0; i < nx; ++i) {
    const double v = sq_acc[i] / n_train - state_mean[i] * state_mean[i] + var_acc[i] / n_train;
    state_scale[i] = std::sqrt(std::max(v, 1e-12));
  }

  // input standardization stored with the nets
  Eigen::VectorXd in_shift(nx + nu), in_scale(nx + nu);
  in_shift.head(nx) = state_mean;
  in_scale.head(nx) = state_scale;
  for (int i = 0; i < nu; ++i) {
    const double mu = u_acc[i] / n_train;
    const double v = u_sq[i] / n_train - mu * mu;
    in_shift[nx + i] = mu;
    in_scale[nx + i] = std::sqrt(std::max(v, 1e-12));
    if (in_scale[nx + i] < 1e-6) in_scale[nx + i] = 1.0;  // constant input
  }
  for (Mlp& net : sde->nets()) {
    const int in = net.input_dim();
    net.input_shift = in_shift.head(in);
    net.input_scale = in_scale.head(in);
  }

  const int theta_dim = sde->theta_dim();
  std::vector<detail::StagePlan> plan;
  switch (cfg.loss_mode) {
    case LossMode::sequential_mean_then_cov: {
      auto d = sde->drift_theta_span();
      auto h = sde->diffusion_theta_span();
      if (h.second == 0)
        throw std::invalid_argument("sequential training needs a diffusion net");
      plan.push_back({TrainStage::mean_stage, d.first, d.second, "mean"});
      plan.push_back({TrainStage::cov_stage, h.first, h.second, "cov"});
      break;
    }
    case LossMode::joint_two_moment:
      plan.push_back({TrainStage::joint_stage, 0, theta_dim, "joint"});
      break;
    case LossMode::sir_mean_only:
      plan.push_back({TrainStage::mean_stage, 0, theta_dim, "sir_mean"});
      break;
  }

  TrainedModel out;
  out.config = cfg;
  out.state_scale = state_scale;
  std::atomic<long> fallback_count{0};

  LossEvaluator ev;
  ev.pcfg = {cfg.propagator, cfg.ut, cfg.solver};
  ev.sir_mean = cfg.loss_mode == LossMode::sir_mean_only;
  ev.cov_weight = cfg.cov_weight;
  ev.state_scale = state_scale;
  ev.fallback_counter = &fallback_count;
  ev.sde = sde.get();

  int global_epoch = 0;
  for (std::size_t stage_idx = 0; stage_idx < plan.size(); ++stage_idx) {
    const auto& sp = plan[stage_idx];
    ev.stage = sp.stage;

    Eigen::VectorXd theta = sde->get_theta();
    AdamState adam(sp.span_len);
    Eigen::VectorXd best_params = theta.segment(sp.span_begin, sp.span_len);
    double best_val = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    int wait = 0;
    int divergent_streak = 0;

    const double train0 = detail::mean_loss_over(ev, transitions, split.train, cfg.threads);
    const double val0 = detail::mean_loss_over(ev, transitions, split.val, cfg.threads);
    out.history.push_back({static_cast<int>(stage_idx), global_epoch, train0, val0});
    best_val = val0;

    std::vector<std::size_t> order = split.train;
    std::vector<Eigen::VectorXd> item_grads(cfg.batch_size);
    std::vector<double> item_losses(cfg.batch_size);

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
      rng::shuffle(order, rng::word(cfg.split_seed, 0xe70c5, stage_idx, epoch));
      double epoch_loss = 0.0;
      std::size_t seen = 0;
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t bsz = std::min<std::size_t>(cfg.batch_size, order.size() - start);
        parallel_for(bsz, [&](std::size_t b) {
          Eigen::VectorXd g = Eigen::VectorXd::Zero(theta_dim);
          item_losses[b] = ev(transitions[order[start + b]], &g);
          item_grads[b] = std::move(g);
        }, cfg.threads);
        Eigen::VectorXd grad = Eigen::VectorXd::Zero(theta_dim);
        for (std::size_t b = 0; b < bsz; ++b) {  // ordered reduction
          grad += item_grads[b];
          epoch_loss += item_losses[b];
        }
        grad /= static_cast<double>(bsz);
        seen += bsz;

        Eigen::VectorXd gslice = grad.segment(sp.span_begin, sp.span_len);
        if (!gslice.allFinite()) {
          if (++divergent_streak >= 10)
            throw TrainingError("training aborted: 10 consecutive non-finite gradients");
          continue;
        }
        divergent_streak = 0;
        adam_step(theta.segment(sp.span_begin, sp.span_len), gslice, adam, cfg.lr);
        sde->set_theta(theta);
      }

      ++global_epoch;
      const double train_loss = epoch_loss / static_cast<double>(seen);
      const double val_loss = detail::mean_loss_over(ev, transitions, split.val, cfg.threads);
      out.history.push_back({static_cast<int>(stage_idx), global_epoch, train_loss, val_loss});

      if (val_loss < best_val) {
        best_val = val_loss;
        best_epoch = global_epoch;
        best_params = theta.segment(sp.span_begin, sp.span_len);
        wait = 0;
      } else if (++wait >= cfg.patience) {
        break;
      }
    }

    theta.segment(sp.span_begin, sp.span_len) = best_params;
    sde->set_theta(theta);
    out.best_val = best_val;
    out.best_epoch = best_epoch;
  }

  out.fallback_4m_count = fallback_count.load();
  out.sde = std::move(sde);
  return out;
}

/// Builds the case-study structure with freshly initialized nets and trains.
inline TrainedModel train(const MomentDataset& ds, const GroundTruthModel& gt,
                          const TrainConfig& cfg) {
  return train_core(make_net_sde(gt, cfg.hidden_units, cfg.hidden_layers, cfg.init_seed), ds, cfg);
}

}  // namespace sdelearn
