#pragma once

// Posterior post-processing: kernel density estimates over sample sets,
// proposal priors for sequential refinement, importance-weighted retraining
// rounds, and the averaged log-posterior quality metric.

#include "nfc/common.hpp"
#include "nfc/diffusion.hpp"
#include "nfc/posterior_types.hpp"
#include "nfc/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <utility>
#include <vector>

namespace nfc {

// Product-kernel Gaussian KDE with per-dimension Scott bandwidths
// h_i = std_i * n^(-1/(d+4)).
struct GaussianKde {
  Mat points;     // n x d
  Vec bandwidth;  // d

  static GaussianKde fit(const Mat& samples) {
    require(samples.rows() >= 2, "GaussianKde: need at least 2 points");
    require_finite(samples, "GaussianKde::points");
    GaussianKde kde;
    kde.points = samples;
    const double n = static_cast<double>(samples.rows());
    const double d = static_cast<double>(samples.cols());
    Vec mean = samples.colwise().mean().transpose();
    Mat centered = samples.rowwise() - mean.transpose();
    Vec std = centered.array().square().colwise().mean().sqrt().transpose();
    kde.bandwidth =
        (std.array().max(1e-9) * std::pow(n, -1.0 / (d + 4.0))).matrix();
    return kde;
  }

  Eigen::Index dim() const { return points.cols(); }

  double log_density(const Vec& x) const {
    require(x.size() == dim(), "GaussianKde: dimension mismatch");
    const Eigen::Index n = points.rows();
    const double log_norm =
        -0.5 * double(dim()) * std::log(2.0 * std::numbers::pi) -
        bandwidth.array().log().sum();
    double max_e = -std::numeric_limits<double>::infinity();
    Vec exponents(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      Vec u = ((x - points.row(i).transpose()).array() / bandwidth.array())
                  .matrix();
      exponents[i] = -0.5 * u.squaredNorm();
      max_e = std::max(max_e, exponents[i]);
    }
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) acc += std::exp(exponents[i] - max_e);
    return max_e + std::log(acc) - std::log(double(n)) + log_norm;
  }

  Vec sample(Rng& rng) const {
    Eigen::Index i = rng.uniform_int(static_cast<int>(points.rows()));
    return points.row(i).transpose() +
           (bandwidth.array() * rng.normal_vec(dim()).array()).matrix();
  }
};

// Averaged log-posterior of the hidden truth under a KDE fit to the psi
// slice of a sample set; the value is per-dimension so different simulators
// are comparable. Densities below 1e-300 are floored and flagged.
struct AvgLogPosterior {
  double value = 0.0;
  bool floored = false;
};

inline AvgLogPosterior avg_log_posterior(const PosteriorSampleSet& set,
                                         const Vec& truth) {
  require(set.count() >= 50, "avg_log_posterior: need at least 50 samples");
  const auto& layout = set.layout;
  Vec psi_truth;
  if (truth.size() == layout.psi_dim)
    psi_truth = truth;
  else
    psi_truth = layout.psi_slice(truth);
  GaussianKde kde =
      GaussianKde::fit(set.samples.middleCols(layout.psi_offset(),
                                              layout.psi_dim));
  double ld = kde.log_density(psi_truth);
  AvgLogPosterior out;
  const double floor = std::log(1e-300);
  if (ld < floor) {
    out.floored = true;
    ld = floor;
  }
  out.value = ld / double(layout.psi_dim);
  return out;
}

// Previous-round posterior reused as the next round's proposal. It covers a
// prefix of the target vector (the simulator parameters and, when present,
// the state-space residual); environment-residual labels are regenerated by
// the perception channel rather than proposed.
struct ProposalPrior {
  GaussianKde kde;
  int dims = 0;

  static ProposalPrior from_sample_set(const PosteriorSampleSet& set,
                                       int prefix_dims) {
    require(prefix_dims >= 1 && prefix_dims <= set.layout.total(),
            "ProposalPrior: invalid prefix width");
    ProposalPrior p;
    p.dims = prefix_dims;
    p.kde = GaussianKde::fit(set.samples.leftCols(prefix_dims));
    return p;
  }

  Vec sample(Rng& rng) const { return kde.sample(rng); }
  double log_density(const Vec& x) const { return kde.log_density(x); }
};

using LogDensityFn = std::function<double(const Vec&)>;

// Simulates a fresh training pair for proposal parameters: the full target
// row (parameters plus any regenerated residual labels) and the trajectory.
using SimulateTargetFn =
    std::function<std::pair<Vec, Trajectory>(const Vec& params,
                                             std::uint64_t seed)>;

struct SequentialResult {
  ScoreModel model;
  DsmDataset data;
  Vec weights;
  int clipped = 0;
};

// One sequential refinement round: draw parameters from the proposal,
// simulate, and continue training the score model on the new pairs with
// prior-over-proposal importance weights. Heavy right tails (max over
// median above 1e3) are clipped at the 99th percentile. The observed
// trajectory's own density ratio is a constant across the new pairs and
// drops out of the weighting; it is used here only for shape validation.
inline SequentialResult sequential_update(ScoreModel model,
                                          const ProposalPrior& proposal,
                                          const LogDensityFn& original_log_prior,
                                          const SimulateTargetFn& simulate,
                                          int n_new_sims,
                                          const Trajectory& tau_obs,
                                          const TrainOptions& opt) {
  require(n_new_sims >= 1, "sequential_update: n_new_sims < 1");
  require(tau_obs.states.rows() >= 2, "sequential_update: empty observation");

  SequentialResult out;
  out.data.targets.resize(n_new_sims, model.cfg.layout.total());
  out.data.trajectories.reserve(n_new_sims);
  out.weights.resize(n_new_sims);

  Rng rng(derive_seed(opt.seed, "sequential_draw"));
  for (int j = 0; j < n_new_sims; ++j) {
    Vec params = proposal.sample(rng);
    auto [target, traj] =
        simulate(params, derive_seed(opt.seed, "sequential_sim",
                                     static_cast<uint64_t>(j)));
    require(target.size() == model.cfg.layout.total(),
            "sequential_update: simulated target width mismatch");
    out.data.targets.row(j) = target.transpose();
    out.data.trajectories.push_back(std::move(traj));
    double lw = original_log_prior(params) - proposal.log_density(params);
    out.weights[j] = std::isfinite(lw) ? std::exp(lw) : 0.0;
  }

  // Clip heavy tails: compare max to median, cap at the 99th percentile.
  std::vector<double> sorted(out.weights.data(),
                             out.weights.data() + n_new_sims);
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted[n_new_sims / 2];
  const double max_w = sorted.back();
  if (median <= 0.0 ? max_w > 0.0 : max_w / median > 1e3) {
    const int p99 =
        std::min(n_new_sims - 1,
                 static_cast<int>(std::ceil(0.99 * n_new_sims)) - 1);
    const double cap = std::max(sorted[std::max(p99, 0)], 1e-300);
    for (int j = 0; j < n_new_sims; ++j) {
      if (out.weights[j] > cap) {
        out.weights[j] = cap;
        ++out.clipped;
      }
    }
  }

  TrainOptions topt = opt;
  topt.importance = out.weights;
  dsm_train(model, out.data, topt);
  out.model = std::move(model);
  return out;
}

}  // namespace nfc
