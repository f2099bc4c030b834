#pragma once

// Likelihood-free baselines: rejection ABC and a sequential Monte Carlo
// variant. Both compare simulated and observed trajectories through a
// feature encoding and accept by distance quantile.

#include "nfc/common.hpp"
#include "nfc/posterior_types.hpp"
#include "nfc/rng.hpp"
#include "nfc/sim.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace nfc {

using SimulateFn = std::function<Trajectory(const Vec& params, std::uint64_t)>;
using FeatureFn = std::function<Vec(const Trajectory&)>;

struct AbcOptions {
  int n_sims = 1000;
  double acceptance = 0.01;  // fraction of draws kept, in (0, 1]
  std::uint64_t seed = 0;
  std::string config_hash;

  void validate() const {
    require(n_sims >= 1, "AbcOptions: n_sims < 1");
    require(acceptance > 0.0 && acceptance <= 1.0,
            "AbcOptions: acceptance outside (0, 1]");
  }
};

namespace detail {

inline PosteriorSampleSet make_param_set(const Mat& rows,
                                         const TargetLayout& layout,
                                         const std::string& source,
                                         const std::string& hash) {
  PosteriorSampleSet set;
  set.samples = rows;
  set.layout = layout;
  set.source = source;
  set.config_hash = hash;
  set.finalize();
  return set;
}

}  // namespace detail

// Rejection ABC: draw parameters from the prior, simulate, and keep the
// closest fraction by Euclidean distance between feature encodings. With
// acceptance 1.0 the result is exactly the prior draws.
inline PosteriorSampleSet rejection_abc(const ParamSpace& space,
                                        const Prior& prior,
                                        const SimulateFn& simulate,
                                        const FeatureFn& features,
                                        const Trajectory& tau_obs,
                                        const AbcOptions& opt) {
  opt.validate();
  SampleParamsResult draws = sample_params(space, prior, opt.n_sims,
                                       /*qmc=*/false,
                                       derive_seed(opt.seed, "abc_draws"));
  const Vec obs_feat = features(tau_obs);
  std::vector<double> dist(opt.n_sims);
  for (int i = 0; i < opt.n_sims; ++i) {
    Trajectory traj = simulate(draws.samples[i].values,
                               derive_seed(opt.seed, "abc_sim",
                                           static_cast<uint64_t>(i)));
    Vec f = features(traj);
    require(f.size() == obs_feat.size(), "rejection_abc: feature size mismatch");
    dist[i] = (f - obs_feat).norm();
  }

  const int keep = std::max(1, static_cast<int>(std::floor(
                                   opt.acceptance * opt.n_sims + 0.5)));
  std::vector<int> order(opt.n_sims);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return dist[a] < dist[b]; });

  TargetLayout layout;
  layout.psi_dim = space.dim();
  Mat rows(keep, space.dim());
  for (int j = 0; j < keep; ++j)
    rows.row(j) = draws.samples[order[j]].values.transpose();
  PosteriorSampleSet set =
      detail::make_param_set(rows, layout, "abc", opt.config_hash);
  set.clamp_count = draws.clamp_count;
  return set;
}

struct SmcOptions {
  int particles = 200;
  int rounds = 3;
  double quantile = 0.5;  // per-round acceptance quantile, in (0, 1]
  std::uint64_t seed = 0;
  int max_attempts_factor = 50;  // per-round draw budget, times particles
  std::string config_hash;

  void validate() const {
    require(particles >= 2, "SmcOptions: particles < 2");
    require(rounds >= 1, "SmcOptions: rounds < 1");
    require(quantile > 0.0 && quantile <= 1.0,
            "SmcOptions: quantile outside (0, 1]");
    require(max_attempts_factor >= 1, "SmcOptions: empty draw budget");
  }
};

struct SmcResult {
  PosteriorSampleSet set;
  std::vector<double> epsilons;  // threshold used by each completed round
  int rounds_run = 0;
  bool early_stop = false;
  double final_ess = 0.0;
};

// Sequential Monte Carlo ABC. Round one performs plain rejection at the
// distance quantile; later rounds perturb resampled particles with a
// Gaussian kernel and tighten the threshold. Importance weights follow the
// standard prior-over-mixture form; an effective sample size below 10% of
// the particle count stops refinement early.
inline SmcResult smc_abc(const ParamSpace& space, const Prior& prior,
                         const SimulateFn& simulate, const FeatureFn& features,
                         const Trajectory& tau_obs, const SmcOptions& opt) {
  opt.validate();
  const int N = opt.particles;
  const int d = space.dim();
  const Vec obs_feat = features(tau_obs);
  SmcResult result;

  // Round 1: rejection at the quantile. Oversample so that the kept set has
  // exactly N particles.
  const int pool = std::max(N, static_cast<int>(std::ceil(N / opt.quantile)));
  AbcOptions ropt;
  ropt.n_sims = pool;
  ropt.acceptance = double(N) / double(pool);
  ropt.seed = opt.seed;
  PosteriorSampleSet round0 =
      rejection_abc(space, prior, simulate, features, tau_obs, ropt);
  Mat particles = round0.samples.topRows(N);
  Vec weights = Vec::Constant(N, 1.0 / double(N));

  // Distances of the surviving particles set the next threshold.
  auto distances_of = [&](const Mat& P, std::uint64_t round_tag) {
    Vec dist(P.rows());
    for (Eigen::Index i = 0; i < P.rows(); ++i) {
      Trajectory traj =
          simulate(P.row(i).transpose(),
                   derive_seed(opt.seed, "smc_dist", round_tag,
                               static_cast<uint64_t>(i)));
      dist[i] = (features(traj) - obs_feat).norm();
    }
    return dist;
  };
  auto quantile_of = [&](Vec v) {
    std::sort(v.data(), v.data() + v.size());
    Eigen::Index idx = std::min<Eigen::Index>(
        v.size() - 1,
        static_cast<Eigen::Index>(std::ceil(opt.quantile * v.size())) - 1);
    return v[std::max<Eigen::Index>(idx, 0)];
  };

  Vec dist = distances_of(particles, 0);
  result.epsilons.push_back(quantile_of(dist));
  result.rounds_run = 1;
  result.final_ess = double(N);

  Rng rng(derive_seed(opt.seed, "smc_perturb"));
  for (int r = 1; r < opt.rounds; ++r) {
    const double eps = result.epsilons.back();
    // Perturbation scale: sqrt(2) times the weighted particle std per dim.
    Vec wmean = particles.transpose() * weights;
    Vec wvar = Vec::Zero(d);
    for (int i = 0; i < N; ++i) {
      Vec c = particles.row(i).transpose() - wmean;
      wvar += weights[i] * c.cwiseProduct(c);
    }
    Vec scale = (2.0 * wvar.array()).sqrt().max(1e-9).matrix();

    Mat next(N, d);
    Vec next_dist(N);
    std::vector<int> src(N);
    int filled = 0;
    const long budget = static_cast<long>(opt.max_attempts_factor) * N;
    for (long attempt = 0; attempt < budget && filled < N; ++attempt) {
      // Resample a parent by weight, then perturb.
      double u = rng.uniform();
      int parent = 0;
      double acc = 0.0;
      for (int i = 0; i < N; ++i) {
        acc += weights[i];
        if (u <= acc || i == N - 1) {
          parent = i;
          break;
        }
      }
      Vec cand = particles.row(parent).transpose() +
                 (scale.array() * rng.normal_vec(d).array()).matrix();
      if (!space.contains(cand)) continue;
      Trajectory traj = simulate(
          cand, derive_seed(opt.seed, "smc_sim", static_cast<uint64_t>(r),
                            static_cast<uint64_t>(attempt)));
      double dd = (features(traj) - obs_feat).norm();
      if (dd > eps) continue;
      next.row(filled) = cand.transpose();
      next_dist[filled] = dd;
      src[filled] = parent;
      ++filled;
    }
    if (filled < N) {
      result.early_stop = true;
      break;
    }

    // Importance weights: prior density over the resampling mixture.
    Vec new_w(N);
    for (int i = 0; i < N; ++i) {
      double mix = 0.0;
      Vec x = next.row(i).transpose();
      for (int j = 0; j < N; ++j) {
        Vec u2 = ((x - particles.row(j).transpose()).array() / scale.array())
                     .matrix();
        double logk = -0.5 * u2.squaredNorm() -
                      scale.array().log().sum() -
                      0.5 * d * std::log(2.0 * std::numbers::pi);
        mix += weights[j] * std::exp(logk);
      }
      double pr = std::exp(prior.log_density(space, x));
      new_w[i] = mix > 0.0 ? pr / mix : 0.0;
    }
    double total = new_w.sum();
    if (total <= 0.0) {
      result.early_stop = true;
      break;
    }
    new_w /= total;
    double ess = 1.0 / new_w.squaredNorm();
    particles = next;
    weights = new_w;
    result.epsilons.push_back(quantile_of(next_dist));
    result.rounds_run = r + 1;
    result.final_ess = ess;
    if (ess < 0.1 * N) {
      result.early_stop = true;
      break;
    }
  }

  // Systematic resampling so the returned set is unweighted.
  Mat rows(N, d);
  {
    Rng rrng(derive_seed(opt.seed, "smc_resample"));
    double step = 1.0 / double(N);
    double u = rrng.uniform() * step;
    double acc = weights[0];
    int j = 0;
    for (int i = 0; i < N; ++i) {
      double target = u + i * step;
      while (acc < target && j < N - 1) acc += weights[++j];
      rows.row(i) = particles.row(j);
    }
  }
  TargetLayout layout;
  layout.psi_dim = d;
  result.set = detail::make_param_set(rows, layout, "smc", opt.config_hash);
  return result;
}

}  // namespace nfc
