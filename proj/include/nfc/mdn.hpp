#pragma once

// Mixture density network baseline: an MLP over conditioning features
// emitting a full-covariance Gaussian mixture over the standardized
// calibration target. Covariances are parametrized by Cholesky factors
// with exponential diagonals; gradients are computed in closed form.

#include "nfc/common.hpp"
#include "nfc/diffusion.hpp"
#include "nfc/posterior_types.hpp"
#include "nfc/rng.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace nfc {

struct MdnConfig {
  TargetLayout layout;
  int components = 5;
  CondKind cond_kind = CondKind::Rff;
  TcnConfig tcn;
  int env_pool = 0;
  int feature_dim = 128;
  double kernel_sigma_scale = 1.0;
  std::vector<int> hidden{64, 64};

  int head_size() const {
    const int t = layout.total();
    return 1 + t + t + t * (t - 1) / 2;
  }

  void validate() const {
    layout.validate();
    require(components >= 1, "MdnConfig: components < 1");
    require(cond_kind != CondKind::None, "MdnConfig: needs conditioning");
    require(feature_dim >= 1, "MdnConfig: feature_dim < 1");
    require(kernel_sigma_scale > 0.0, "MdnConfig: sigma scale <= 0");
    for (int h : hidden) require(h >= 1, "MdnConfig: empty hidden layer");
  }
};

// Mixture parameters unpacked from one network output.
struct MdnMixture {
  Vec log_weights;         // C, normalized
  std::vector<Vec> means;  // C vectors of size T
  std::vector<Mat> chols;  // C lower-triangular T x T factors
  std::vector<bool> floored;
};

struct Mdn {
  MdnConfig cfg;
  CondEncoder cond;
  Standardizer target_std;
  Mlp net;
  mutable long floor_events = 0;

  MdnMixture unpack(const Vec& out) const {
    const int C = cfg.components;
    const int T = cfg.layout.total();
    require(out.size() == static_cast<Eigen::Index>(C) * cfg.head_size(),
            "Mdn: output size mismatch");
    MdnMixture mix;
    mix.log_weights.resize(C);
    mix.means.resize(C);
    mix.chols.resize(C);
    mix.floored.assign(C, false);
    Vec logits(C);
    for (int c = 0; c < C; ++c) {
      const Eigen::Index base = static_cast<Eigen::Index>(c) * cfg.head_size();
      logits[c] = out[base];
      mix.means[c] = out.segment(base + 1, T);
      Mat L = Mat::Zero(T, T);
      for (int i = 0; i < T; ++i)
        L(i, i) = std::exp(std::clamp(out[base + 1 + T + i], -20.0, 10.0));
      Eigen::Index k = base + 1 + 2 * T;
      for (int i = 1; i < T; ++i)
        for (int j = 0; j < i; ++j) L(i, j) = out[k++];
      // Near-singular covariance: floor the eigenvalues and count the event.
      double log_det_sigma = 0.0;
      for (int i = 0; i < T; ++i) log_det_sigma += 2.0 * std::log(L(i, i));
      if (log_det_sigma < std::log(1e-12)) {
        Mat sigma = L * L.transpose();
        Eigen::SelfAdjointEigenSolver<Mat> es(sigma);
        Vec ev = es.eigenvalues().cwiseMax(1e-6);
        Mat fixed = es.eigenvectors() * ev.asDiagonal() *
                    es.eigenvectors().transpose();
        L = Eigen::LLT<Mat>(fixed).matrixL();
        mix.floored[c] = true;
        ++floor_events;
      }
      mix.chols[c] = L;
    }
    double max_l = logits.maxCoeff();
    double lse = max_l + std::log((logits.array() - max_l).exp().sum());
    mix.log_weights = logits.array() - lse;
    return mix;
  }

  // Mixture log density of a raw-space target given a trajectory.
  double log_density(const Trajectory& tau, const Vec& target) const {
    Vec feat = cond.encode(tau);
    MdnMixture mix = unpack(net.forward(feat));
    Vec z = target_std.standardize(target);
    const int T = cfg.layout.total();
    double best = -std::numeric_limits<double>::infinity();
    Vec comp(cfg.components);
    for (int c = 0; c < cfg.components; ++c) {
      Vec u = mix.chols[c]
                  .triangularView<Eigen::Lower>()
                  .solve(z - mix.means[c]);
      double log_n = -0.5 * u.squaredNorm() -
                     mix.chols[c].diagonal().array().log().sum() -
                     0.5 * T * std::log(2.0 * std::numbers::pi);
      comp[c] = mix.log_weights[c] + log_n;
      best = std::max(best, comp[c]);
    }
    double lse = best + std::log((comp.array() - best).exp().sum());
    return lse - target_std.std.array().log().sum();
  }

  void collect(std::vector<TensorRef>& out) {
    net.collect(out);
    cond.collect(out);
  }
};

inline Mdn make_mdn(const MdnConfig& cfg, const DsmDataset& data,
                    std::uint64_t seed) {
  cfg.validate();
  data.validate(cfg.layout);
  Mdn model;
  model.cfg = cfg;
  model.target_std = Standardizer::fit(data.targets);
  ScoreModelConfig scfg;
  scfg.layout = cfg.layout;
  scfg.cond_kind = cfg.cond_kind;
  scfg.tcn = cfg.tcn;
  scfg.env_pool = cfg.env_pool;
  scfg.feature_dim = cfg.feature_dim;
  scfg.kernel_sigma_scale = cfg.kernel_sigma_scale;
  model.cond = make_cond_encoder(cfg.cond_kind, data.trajectories, scfg, seed);

  std::vector<int> sizes;
  sizes.push_back(model.cond.dim());
  for (int h : cfg.hidden) sizes.push_back(h);
  sizes.push_back(cfg.components * cfg.head_size());
  Rng rng(derive_seed(seed, "mdn_net"));
  // Zero-initialized head: uniform weights, zero means, identity factors.
  model.net.init(sizes, rng, /*zero_last=*/true, Act::Relu);
  return model;
}

// Mixture NLL of a standardized target given the raw network output; when
// dout is non-null it receives the closed-form gradient of the NLL with
// respect to every output-head entry.
inline double mdn_nll_from_output(const Mdn& model, const Vec& out,
                                  const Vec& z, Vec* dout = nullptr) {
  const int C = model.cfg.components;
  const int T = model.cfg.layout.total();
  const int head = model.cfg.head_size();
  require(z.size() == T, "mdn_nll_from_output: target size mismatch");
  MdnMixture mix = model.unpack(out);

  Vec comp(C);
  std::vector<Vec> us(C);
  for (int c = 0; c < C; ++c) {
    us[c] =
        mix.chols[c].triangularView<Eigen::Lower>().solve(z - mix.means[c]);
    comp[c] = mix.log_weights[c] - 0.5 * us[c].squaredNorm() -
              mix.chols[c].diagonal().array().log().sum() -
              0.5 * T * std::log(2.0 * std::numbers::pi);
  }
  const double best = comp.maxCoeff();
  const double lse = best + std::log((comp.array() - best).exp().sum());

  if (dout) {
    dout->setZero(out.size());
    for (int c = 0; c < C; ++c) {
      const double gamma = std::exp(comp[c] - lse);
      const double pi_c = std::exp(mix.log_weights[c]);
      const Eigen::Index base = static_cast<Eigen::Index>(c) * head;
      (*dout)[base] = pi_c - gamma;
      // d(-log p)/d mean = -gamma * L^-T u
      Vec ltu =
          mix.chols[c].transpose().triangularView<Eigen::Upper>().solve(us[c]);
      dout->segment(base + 1, T) = -gamma * ltu;
      // d(-log p)/dL = -gamma * (L^-T u u^T - diag(1/L_ii)), lower part;
      // diagonal entries chain through the exp parametrization.
      Mat dl = ltu * us[c].transpose();
      for (int r = 0; r < T; ++r)
        (*dout)[base + 1 + T + r] =
            -gamma * (dl(r, r) - 1.0 / mix.chols[c](r, r)) *
            mix.chols[c](r, r);
      Eigen::Index k = base + 1 + 2 * T;
      for (int r = 1; r < T; ++r)
        for (int col = 0; col < r; ++col) (*dout)[k++] = -gamma * dl(r, col);
    }
  }
  return -lse;
}

// Negative log likelihood training with closed-form mixture gradients.
inline TrainReport mdn_train(Mdn& model, const DsmDataset& data,
                             const TrainOptions& opt) {
  data.validate(model.cfg.layout);
  require(opt.epochs >= 0, "mdn_train: negative epochs");
  require(opt.batch >= 1, "mdn_train: batch < 1");
  const int n = data.count();
  Vec weights = Vec::Ones(n);
  if (opt.importance.size() > 0) {
    require(opt.importance.size() == n, "mdn_train: weight count mismatch");
    weights = opt.importance / opt.importance.mean();
  }
  TrainReport report;
  if (opt.epochs == 0) return report;

  std::vector<TensorRef> params;
  model.collect(params);
  Adam optimizer(params, opt.lr);

  Rng rng(derive_seed(opt.seed, "mdn_train"));
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

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
    for (int start = 0; start < n; start += opt.batch) {
      const int bsz = std::min(opt.batch, n - start);
      for (int b = 0; b < bsz; ++b) {
        const int i = order[start + b];
        const double w = weights[i] / double(bsz);
        Tcn::Cache tcache;
        Vec feat = model.cond.trainable()
                       ? model.cond.encode(data.trajectories[i], &tcache)
                       : fixed_cond[i];
        Mlp::Cache mcache;
        Vec out = model.net.forward(feat, &mcache);
        Vec z = model.target_std.standardize(data.targets.row(i).transpose());
        Vec dout;
        double nll = mdn_nll_from_output(model, out, z, &dout);
        if (!std::isfinite(nll))
          throw NumericalFailure("mdn_train: non-finite loss at epoch " +
                                 std::to_string(epoch) + ", sample " +
                                 std::to_string(i));
        epoch_loss += nll * weights[i];
        Vec dfeat = model.net.backward(mcache, w * dout);
        if (model.cond.trainable()) model.cond.backward(tcache, dfeat);
      }
      optimizer.step();
    }
    report.epoch_loss.push_back(epoch_loss / double(n));
  }
  return report;
}

// Ancestral sampling from the conditional mixture.
inline PosteriorSampleSet mdn_sample(const Mdn& model, const Trajectory& tau,
                                     const SampleOptions& opt) {
  opt.validate(model.cfg.layout);
  Vec feat = model.cond.encode(tau);
  MdnMixture mix = model.unpack(model.net.forward(feat));
  const int T = model.cfg.layout.total();
  Vec pis = mix.log_weights.array().exp();

  PosteriorSampleSet set;
  set.layout = model.cfg.layout;
  set.source = "mdn";
  set.config_hash = opt.config_hash;
  set.samples.resize(opt.count, T);
  Rng rng(derive_seed(opt.seed, "mdn_sample"));
  for (int s = 0; s < opt.count; ++s) {
    double u = rng.uniform();
    int c = 0;
    double acc = 0.0;
    for (int j = 0; j < model.cfg.components; ++j) {
      acc += pis[j];
      if (u <= acc || j == model.cfg.components - 1) {
        c = j;
        break;
      }
    }
    Vec z = mix.means[c] + mix.chols[c] * rng.normal_vec(T);
    Vec raw = model.target_std.destandardize(z);
    if (opt.clamp_space) {
      Vec psi = raw.segment(set.layout.psi_offset(), set.layout.psi_dim);
      set.clamp_count += opt.clamp_space->clamp(psi);
      raw.segment(set.layout.psi_offset(), set.layout.psi_dim) = psi;
    }
    set.samples.row(s) = raw.transpose();
  }
  set.finalize();
  return set;
}

}  // namespace nfc
