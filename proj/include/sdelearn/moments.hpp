#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "sdelearn/rng.hpp"
#include "sdelearn/sde.hpp"

namespace sdelearn {

/// Estimated moments of one ensemble at one time index. Population (1/N)
/// normalization throughout; skew/kurt are per-component standardized moments
/// and present only when the requested order covers them.
struct MomentRecord {
  int ic_index = 0;
  int k = 0;
  double t = 0.0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  Eigen::VectorXd skew;  // empty unless max_order >= 3
  Eigen::VectorXd kurt;  // empty unless max_order >= 4
  int n_samples = 0;
  bool degenerate_variance = false;
};

struct MomentGroup {
  int ic_index = 0;
  Eigen::VectorXd ic;
  Eigen::VectorXd input;
  double dt = 0.0;
  std::vector<MomentRecord> records;  // k = 0..K contiguous
};

struct MomentDataset {
  std::vector<MomentGroup> groups;
  double dt = 0.0;
  int state_dim = 0;
  int input_dim = 0;
  int max_order = 2;

  std::size_t record_count() const {
    std::size_t n = 0;
    for (const auto& g : groups) n += g.records.size();
    return n;
  }
};

/// Mean/covariance (and optional standardized skew/kurtosis) per time index.
/// Flagged replicates are excluded; n_samples reflects the survivors.
inline MomentGroup estimate_moments(const TrajectoryEnsemble& ens, int max_order = 2,
                                    int ic_index = 0) {
  if (max_order < 2 || max_order > 4)
    throw std::invalid_argument("estimate_moments: max_order must be 2, 3 or 4");

  std::vector<int> keep;
  keep.reserve(ens.n_replicates);
  for (int n = 0; n < ens.n_replicates; ++n)
    if (!ens.flagged[n]) keep.push_back(n);
  const int N = static_cast<int>(keep.size());
  if (N < 2) throw std::invalid_argument("estimate_moments: need at least 2 usable replicates");

  const int d = ens.state_dim;
  MomentGroup group;
  group.ic_index = ic_index;
  group.ic = ens.initial_condition;
  group.input = ens.input;
  group.dt = ens.dt;
  group.records.resize(ens.n_steps + 1);

  for (int k = 0; k <= ens.n_steps; ++k) {
    MomentRecord& rec = group.records[k];
    rec.ic_index = ic_index;
    rec.k = k;
    rec.t = ens.times[k];
    rec.n_samples = N;

    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    for (int n : keep) mean += ens.state(n, k);
    mean /= N;

    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    for (int n : keep) {
      const Eigen::VectorXd dev = ens.state(n, k) - mean;
      cov.noalias() += dev * dev.transpose();
    }
    cov /= N;
    cov = 0.5 * (cov + cov.transpose());

    rec.mean = std::move(mean);
    rec.cov = std::move(cov);

    if (max_order >= 3) {
      rec.skew = Eigen::VectorXd::Zero(d);
      if (max_order >= 4) rec.kurt = Eigen::VectorXd::Zero(d);
      for (int i = 0; i < d; ++i) {
        const double var = rec.cov(i, i);
        if (var <= 0.0) {
          rec.degenerate_variance = true;
          if (max_order >= 4) rec.kurt[i] = 0.0;
          continue;
        }
        const double sd = std::sqrt(var);
        double s3 = 0.0, s4 = 0.0;
        for (int n : keep) {
          const double z = (ens.at(n, k, i) - rec.mean[i]) / sd;
          const double z3 = z * z * z;
          s3 += z3;
          s4 += z3 * z;
        }
        rec.skew[i] = s3 / N;
        if (max_order >= 4) rec.kurt[i] = s4 / N;
      }
    }
  }
  return group;
}

/// One-step-ahead training pair: predict the target record's moments from the
/// source record over one sampling interval.
struct Transition {
  const MomentRecord* src = nullptr;
  const MomentRecord* tgt = nullptr;
  const Eigen::VectorXd* input = nullptr;
  double dt = 0.0;
  int group = 0;
};

inline std::vector<Transition> build_transitions(const MomentDataset& ds) {
  std::vector<Transition> out;
  for (std::size_t g = 0; g < ds.groups.size(); ++g) {
    const MomentGroup& grp = ds.groups[g];
    if (grp.records.size() < 2)
      throw std::invalid_argument("build_transitions: group needs at least 2 records");
    for (std::size_t k = 1; k < grp.records.size(); ++k)
      out.push_back({&grp.records[k - 1], &grp.records[k], &grp.input, grp.dt,
                     static_cast<int>(g)});
  }
  return out;
}

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

/// Seeded random 70/15/15 split over transition indices.
inline SplitIndices split_transitions(std::size_t n, std::uint64_t seed,
                                      double train_frac = 0.70, double val_frac = 0.15) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  rng::shuffle(idx, seed);
  SplitIndices s;
  const std::size_t n_train = static_cast<std::size_t>(train_frac * n);
  const std::size_t n_val = static_cast<std::size_t>(val_frac * n);
  s.train.assign(idx.begin(), idx.begin() + n_train);
  s.val.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
  s.test.assign(idx.begin() + n_train + n_val, idx.end());
  return s;
}

}  // namespace sdelearn
