#pragma once

// Conditional score-based diffusion posterior estimator.
//
// A variance-preserving forward SDE noises the standardized calibration
// target; a small MLP is trained by denoising score matching to predict the
// score of the noised marginal conditioned on features of the observed
// trajectory. Sampling integrates the reverse SDE with Euler-Maruyama from
// the N(0, I) terminal prior down to k_min.

#include "nfc/common.hpp"
#include "nfc/grid.hpp"
#include "nfc/kernels.hpp"
#include "nfc/nn.hpp"
#include "nfc/posterior_types.hpp"
#include "nfc/rng.hpp"
#include "nfc/sim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace nfc {

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

// Variance-preserving schedule with beta linear in diffusion time k in [0,1].
// m(k) is the signal retention factor, sigma(k) the perturbation std; they
// satisfy m^2 + sigma^2 = 1 by construction.
struct NoiseSchedule {
  double beta_min = 0.1;
  double beta_max = 20.0;
  double k_min = 1e-3;

  void validate() const {
    require(beta_min > 0.0 && beta_max > beta_min,
            "NoiseSchedule: need 0 < beta_min < beta_max");
    require(k_min > 0.0 && k_min < 1.0, "NoiseSchedule: k_min outside (0,1)");
  }

  double beta(double k) const { return beta_min + k * (beta_max - beta_min); }

  double log_m(double k) const {
    return -0.25 * k * k * (beta_max - beta_min) - 0.5 * k * beta_min;
  }

  double m(double k) const { return std::exp(log_m(k)); }

  double sigma(double k) const {
    double mk = m(k);
    return std::sqrt(std::max(0.0, 1.0 - mk * mk));
  }
};

// Fixed sinusoidal embedding of the diffusion time fed to the score network.
inline Vec time_embedding(double k) {
  using std::numbers::pi;
  Vec e(8);
  e << k, std::sin(pi * k), std::cos(pi * k), std::sin(2.0 * pi * k),
      std::cos(2.0 * pi * k), std::sin(4.0 * pi * k), std::cos(4.0 * pi * k),
      std::sin(8.0 * pi * k);
  return e;
}

// ---------------------------------------------------------------------------
// Trajectory conditioning
// ---------------------------------------------------------------------------

enum class CondKind { None, Identity, Rff, Fks, Tcn };

inline std::string cond_kind_name(CondKind k) {
  switch (k) {
    case CondKind::None: return "none";
    case CondKind::Identity: return "identity";
    case CondKind::Rff: return "rff";
    case CondKind::Fks: return "fks";
    case CondKind::Tcn: return "tcn";
  }
  return "?";
}

inline CondKind cond_kind_from_name(const std::string& name) {
  if (name == "none") return CondKind::None;
  if (name == "identity") return CondKind::Identity;
  if (name == "rff") return CondKind::Rff;
  if (name == "fks") return CondKind::Fks;
  if (name == "tcn") return CondKind::Tcn;
  throw DomainError("unknown feature encoder '" + name + "'");
}

// Encodes an observed trajectory into the conditioning vector of the score
// network. The temporal encoder is trained jointly with the score net; the
// kernel-feature and identity paths are fixed maps over the standardized
// flattened trajectory. An optional coarse pooled copy of the perceived
// environment is appended so the posterior can depend on terrain context.
struct CondEncoder {
  CondKind kind = CondKind::None;

  // identity / rff / fks path
  Standardizer flat_std;
  RffMap rff;
  FksMap fks;

  // tcn path: rows are [s_t ; a_{t-1}] with a_{-1} = 0, t = 0..H.
  Tcn tcn;
  Standardizer row_std;

  // pooled perceived-environment features (0 disables)
  int env_pool = 0;
  Standardizer env_std;

  int dim() const {
    int base = 0;
    switch (kind) {
      case CondKind::None: return 0;
      case CondKind::Identity: base = static_cast<int>(flat_std.dim()); break;
      case CondKind::Rff: base = 2 * rff.feature_count; break;
      case CondKind::Fks: base = fks.feature_count; break;
      case CondKind::Tcn: base = tcn.cfg.embed_dim; break;
    }
    return base + env_dim_();
  }

  bool trainable() const { return kind == CondKind::Tcn; }

  Vec encode(const Trajectory& traj, Tcn::Cache* cache = nullptr) const {
    Vec base;
    switch (kind) {
      case CondKind::None: return Vec(0);
      case CondKind::Identity:
        base = flat_std.standardize(traj.flatten());
        break;
      case CondKind::Rff:
        base = rff_encode(rff, flat_std.standardize(traj.flatten()));
        break;
      case CondKind::Fks:
        base = fks_encode(fks, flat_std.standardize(traj.flatten()));
        break;
      case CondKind::Tcn: {
        Mat rows = row_std.standardize_rows(trajectory_rows(traj));
        base = tcn.encode(rows, cache);
        break;
      }
    }
    if (env_dim_() == 0) return base;
    Vec env = env_features_(traj.env);
    Vec out(base.size() + env.size());
    out << base, env;
    return out;
  }

  // Propagates conditioning-feature gradients into the temporal encoder.
  // Gradients on the fixed feature slices (and on the pooled environment
  // features, which have no parameters) are dropped.
  void backward(const Tcn::Cache& cache, const Vec& dfeat) {
    require(kind == CondKind::Tcn, "CondEncoder: backward on fixed encoder");
    require(dfeat.size() == dim(), "CondEncoder: gradient size mismatch");
    tcn.backward(cache, dfeat.head(tcn.cfg.embed_dim));
  }

  void collect(std::vector<TensorRef>& out) {
    if (kind == CondKind::Tcn) tcn.collect(out);
  }

  int env_dim_() const { return env_pool > 0 ? env_pool * env_pool : 0; }

  // Coarse terrain summary: average-pooled when the grid is at least pool
  // sized, bilinearly resampled otherwise, then flattened and standardized.
  static Vec pooled_env(const EnvGrid& env, int p) {
    Mat pooled = (env.heights.rows() >= p && env.heights.cols() >= p)
                     ? avg_pool(env.heights, p, p)
                     : resize_bilinear(env, p, p).heights;
    Vec flat(pooled.size());
    Eigen::Index k = 0;
    for (Eigen::Index r = 0; r < pooled.rows(); ++r)
      for (Eigen::Index c = 0; c < pooled.cols(); ++c) flat[k++] = pooled(r, c);
    return flat;
  }

  Vec env_features_(const EnvGrid& env) const {
    return env_std.standardize(pooled_env(env, env_pool));
  }
};

// ---------------------------------------------------------------------------
// Score model
// ---------------------------------------------------------------------------

struct ScoreModelConfig {
  TargetLayout layout;
  NoiseSchedule schedule;
  CondKind cond_kind = CondKind::Tcn;
  TcnConfig tcn;              // in_dim is filled from the data
  int env_pool = 0;           // pooled-environment conditioning (0 = off)
  int feature_dim = 128;      // rff/fks feature count
  double kernel_sigma_scale = 1.0;  // kernel width relative to sqrt(dim)
  std::vector<int> hidden{128, 128};

  void validate() const {
    layout.validate();
    schedule.validate();
    require(feature_dim >= 1, "ScoreModelConfig: feature_dim < 1");
    require(env_pool >= 0, "ScoreModelConfig: env_pool < 0");
    require(kernel_sigma_scale > 0.0, "ScoreModelConfig: sigma scale <= 0");
    for (int h : hidden) require(h >= 1, "ScoreModelConfig: empty hidden layer");
  }
};

// Training corpus: one calibration-target row per simulated trajectory.
struct DsmDataset {
  Mat targets;  // N x layout.total()
  std::vector<Trajectory> trajectories;

  int count() const { return static_cast<int>(targets.rows()); }

  void validate(const TargetLayout& layout) const {
    require(targets.rows() >= 1, "DsmDataset: empty");
    require(targets.cols() == layout.total(),
            "DsmDataset: target width does not match layout");
    require(trajectories.size() == static_cast<size_t>(targets.rows()),
            "DsmDataset: target/trajectory count mismatch");
    require_finite(targets, "DsmDataset::targets");
  }
};

// Score network over the standardized target. The network output is the
// residual on top of the standard normal score, score(x) = -x + net(...),
// so a zero-initialized head starts exactly at the terminal prior's score.
struct ScoreModel {
  ScoreModelConfig cfg;
  CondEncoder cond;
  Standardizer target_std;
  Mlp net;

  Vec score_standardized(const Vec& x, const Vec& cond_feat, double k,
                         Mlp::Cache* cache = nullptr) const {
    require(x.size() == cfg.layout.total(), "ScoreModel: target size mismatch");
    require(cond_feat.size() == cond.dim(), "ScoreModel: cond size mismatch");
    Vec in(x.size() + cond_feat.size() + 8);
    in << x, cond_feat, time_embedding(k);
    return -x + net.forward(in, cache);
  }

  void collect(std::vector<TensorRef>& out) {
    net.collect(out);
    cond.collect(out);
  }
};

inline CondEncoder make_cond_encoder(CondKind kind,
                                     const std::vector<Trajectory>& trajs,
                                     const ScoreModelConfig& cfg,
                                     uint64_t seed) {
  CondEncoder enc;
  enc.kind = kind;
  if (kind == CondKind::None) return enc;
  require(!trajs.empty(), "make_cond_encoder: no trajectories");

  if (kind == CondKind::Tcn) {
    Mat rows0 = trajectory_rows(trajs.front());
    Mat stacked(rows0.rows() * static_cast<Eigen::Index>(trajs.size()),
                rows0.cols());
    for (size_t i = 0; i < trajs.size(); ++i)
      stacked.middleRows(rows0.rows() * static_cast<Eigen::Index>(i),
                         rows0.rows()) = trajectory_rows(trajs[i]);
    enc.row_std = Standardizer::fit(stacked);
    TcnConfig tcfg = cfg.tcn;
    tcfg.in_dim = static_cast<int>(rows0.cols());
    Rng rng(derive_seed(seed, "cond_tcn"));
    enc.tcn.init(tcfg, rng);
  } else {
    Mat flats(static_cast<Eigen::Index>(trajs.size()),
              trajs.front().flatten().size());
    for (size_t i = 0; i < trajs.size(); ++i)
      flats.row(static_cast<Eigen::Index>(i)) = trajs[i].flatten().transpose();
    enc.flat_std = Standardizer::fit(flats);
    const int d = static_cast<int>(flats.cols());
    const double sigma = cfg.kernel_sigma_scale * std::sqrt(double(d));
    if (kind == CondKind::Rff) {
      enc.rff = rff_build(RadialKernelSpec::gaussian(sigma), d, cfg.feature_dim,
                          /*qmc=*/false, derive_seed(seed, "cond_rff"));
    } else if (kind == CondKind::Fks) {
      enc.fks = fks_build(RadialKernelSpec::gaussian(sigma), d, cfg.feature_dim,
                          /*qmc=*/false, derive_seed(seed, "cond_fks"));
    }
  }

  if (cfg.env_pool > 0) {
    enc.env_pool = cfg.env_pool;
    const int p = cfg.env_pool;
    Mat pooled_rows(static_cast<Eigen::Index>(trajs.size()), p * p);
    for (size_t i = 0; i < trajs.size(); ++i)
      pooled_rows.row(static_cast<Eigen::Index>(i)) =
          CondEncoder::pooled_env(trajs[i].env, p).transpose();
    enc.env_std = Standardizer::fit(pooled_rows);
  }
  return enc;
}

inline ScoreModel make_score_model(const ScoreModelConfig& cfg,
                                   const DsmDataset& data, uint64_t seed) {
  cfg.validate();
  data.validate(cfg.layout);
  ScoreModel model;
  model.cfg = cfg;
  model.target_std = Standardizer::fit(data.targets);
  model.cond = make_cond_encoder(cfg.cond_kind, data.trajectories, cfg, seed);

  std::vector<int> sizes;
  sizes.push_back(cfg.layout.total() + model.cond.dim() + 8);
  for (int h : cfg.hidden) sizes.push_back(h);
  sizes.push_back(cfg.layout.total());
  Rng rng(derive_seed(seed, "score_net"));
  model.net.init(sizes, rng, /*zero_last=*/true, Act::Relu);
  return model;
}

// ---------------------------------------------------------------------------
// Denoising score matching
// ---------------------------------------------------------------------------

// Trains the score network (and, jointly, the temporal conditioning encoder)
// by denoising score matching under the variance-preserving schedule. The
// per-sample objective is sigma(k)^2 * || score(x_k) + z / sigma(k) ||^2,
// whose minimizer is the true conditional score.
inline TrainReport dsm_train(ScoreModel& model, const DsmDataset& data,
                             const TrainOptions& opt) {
  data.validate(model.cfg.layout);
  require(opt.epochs >= 0, "dsm_train: negative epochs");
  require(opt.batch >= 1, "dsm_train: batch < 1");
  require(opt.lr > 0.0, "dsm_train: lr <= 0");
  const int n = data.count();
  Vec weights = Vec::Ones(n);
  if (opt.importance.size() > 0) {
    require(opt.importance.size() == n, "dsm_train: weight count mismatch");
    require((opt.importance.array() >= 0.0).all(),
            "dsm_train: negative importance weight");
    double mean_w = opt.importance.mean();
    require(mean_w > 0.0, "dsm_train: all-zero importance weights");
    weights = opt.importance / mean_w;
  }

  TrainReport report;
  if (opt.epochs == 0) return report;

  std::vector<TensorRef> params;
  model.collect(params);
  Adam optimizer(params, opt.lr);

  const auto& sched = model.cfg.schedule;
  const int dim = model.cfg.layout.total();
  Rng rng(derive_seed(opt.seed, "dsm_train"));
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  // Conditioning features of fixed encoders never change; compute them once.
  std::vector<Vec> fixed_cond;
  if (!model.cond.trainable()) {
    fixed_cond.resize(n);
    for (int i = 0; i < n; ++i)
      fixed_cond[i] = model.cond.encode(data.trajectories[i]);
  }

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i)
      std::swap(order[i], order[rng.uniform_int(i + 1)]);
    double epoch_loss = 0.0;
    int epoch_count = 0;
    for (int start = 0; start < n; start += opt.batch) {
      const int bsz = std::min(opt.batch, n - start);
      double batch_loss = 0.0;
      for (int b = 0; b < bsz; ++b) {
        const int i = order[start + b];
        const double w = weights[i];
        const double k = rng.uniform(sched.k_min, 1.0);
        const double mk = sched.m(k);
        const double sk = sched.sigma(k);
        Vec x0 = model.target_std.standardize(data.targets.row(i).transpose());
        Vec z = rng.normal_vec(dim);
        Vec xk = mk * x0 + sk * z;

        Tcn::Cache tcache;
        Vec cond_feat = model.cond.trainable()
                            ? model.cond.encode(data.trajectories[i], &tcache)
                            : fixed_cond[i];
        Mlp::Cache mcache;
        Vec q = model.score_standardized(xk, cond_feat, k, &mcache);
        Vec resid = sk * q + z;  // sigma * (score - true score) when optimal
        const double sample_loss = w * resid.squaredNorm();
        if (!std::isfinite(sample_loss))
          throw NumericalFailure("dsm_train: non-finite loss at epoch " +
                                 std::to_string(epoch) + ", sample " +
                                 std::to_string(i));
        batch_loss += sample_loss;

        Vec dq = (2.0 * w * sk / double(bsz)) * sk * resid;
        Vec din = model.net.backward(mcache, dq);
        if (model.cond.trainable())
          model.cond.backward(tcache, din.segment(dim, model.cond.dim()));
      }
      epoch_loss += batch_loss;
      epoch_count += bsz;
      optimizer.step();
    }
    report.epoch_loss.push_back(epoch_loss / double(epoch_count));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Reverse-SDE sampling
// ---------------------------------------------------------------------------

struct SampleOptions {
  int count = 1000;
  int steps = 200;
  uint64_t seed = 0;
  Vec slice_noise_scale;            // {psi, ds, de} sampler noise multipliers
  const ParamSpace* clamp_space = nullptr;  // clamps the psi slice if set
  std::string config_hash;

  void validate(const TargetLayout& layout) const {
    require(count >= 1, "SampleOptions: count < 1");
    require(steps >= 2, "SampleOptions: steps < 2");
    if (slice_noise_scale.size() > 0) {
      require(slice_noise_scale.size() == 3,
              "SampleOptions: slice_noise_scale must have 3 entries");
      require((slice_noise_scale.array() >= 0.0).all(),
              "SampleOptions: negative noise scale");
    }
    if (clamp_space)
      require(clamp_space->dim() == layout.psi_dim,
              "SampleOptions: clamp space does not match psi slice");
  }
};

// Draws posterior samples by Euler-Maruyama integration of the reverse SDE
// from k = 1 down to k_min. Chains that leave the finite range are restarted
// with a fresh derived seed; more than 10% restarts is a numerical failure.
inline PosteriorSampleSet sample_posterior(const ScoreModel& model,
                                           const Trajectory& tau,
                                           const SampleOptions& opt) {
  opt.validate(model.cfg.layout);
  const auto& sched = model.cfg.schedule;
  const auto& layout = model.cfg.layout;
  const int dim = layout.total();
  const Vec cond_feat = model.cond.encode(tau);

  Vec noise_scale = Vec::Ones(dim);
  if (opt.slice_noise_scale.size() == 3) {
    noise_scale.segment(layout.psi_offset(), layout.psi_dim)
        .setConstant(opt.slice_noise_scale[0]);
    noise_scale.segment(layout.ds_offset(), layout.ds_dim)
        .setConstant(opt.slice_noise_scale[1]);
    noise_scale.segment(layout.de_offset(), layout.de_dim())
        .setConstant(opt.slice_noise_scale[2]);
  }

  PosteriorSampleSet set;
  set.layout = layout;
  set.source = "diffusion";
  set.config_hash = opt.config_hash;
  set.samples.resize(opt.count, dim);

  const double dk = (1.0 - sched.k_min) / double(opt.steps);
  const int max_restarts = opt.count / 10 + 1;
  int restarts = 0;
  for (int c = 0; c < opt.count; ++c) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 0 && ++restarts > max_restarts)
        throw NumericalFailure("sample_posterior: >10% of chains diverged");
      Rng rng(derive_seed(opt.seed, "sample_posterior",
                          static_cast<uint64_t>(c),
                          static_cast<uint64_t>(attempt)));
      Vec x = rng.normal_vec(dim);
      bool ok = true;
      for (int s = 0; s < opt.steps; ++s) {
        const double k = 1.0 - s * dk;
        const double bk = sched.beta(k);
        Vec q = model.score_standardized(x, cond_feat, k);
        Vec z = rng.normal_vec(dim);
        x += dk * (0.5 * bk * x + bk * q) +
             std::sqrt(bk * dk) * (noise_scale.array() * z.array()).matrix();
        if (!x.allFinite() || x.cwiseAbs().maxCoeff() > 1e6) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      Vec raw = model.target_std.destandardize(x);
      if (opt.clamp_space) {
        Vec psi = raw.segment(layout.psi_offset(), layout.psi_dim);
        set.clamp_count += opt.clamp_space->clamp(psi);
        raw.segment(layout.psi_offset(), layout.psi_dim) = psi;
      }
      set.samples.row(c) = raw.transpose();
      break;
    }
  }
  set.restart_count = restarts;
  set.finalize();
  return set;
}

}  // namespace nfc
