#pragma once

// Contrastive trajectory anomaly detection. A causal dilated temporal
// encoder maps windows onto the unit hypersphere; context/target windows of
// nominal behavior are pulled together and injected or out-of-distribution
// windows pushed apart. The detection score is the temperature-scaled
// cosine similarity, with anomalies flagged below a calibrated threshold.

#include "nfc/common.hpp"
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
// Pair similarity and loss
// ---------------------------------------------------------------------------

// Temperature-scaled similarity in (0, 1]: exp((cos(a, b) - 1) / lambda).
inline double pair_similarity(const Vec& a, const Vec& b, double lambda) {
  require(lambda > 0.0, "pair_similarity: lambda must be positive");
  require(a.size() == b.size(), "pair_similarity: size mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  require(na > 0.0 && nb > 0.0, "pair_similarity: zero embedding");
  const double cos = a.dot(b) / (na * nb);
  return std::exp((cos - 1.0) / lambda);
}

// Pairwise contrastive loss. Normal pairs pay -log(similarity), anomalous
// pairs -log(1 - similarity) with the similarity capped at 1 - 1e-6 so the
// loss stays finite for coincident embeddings.
inline double contrastive_loss(const Vec& a, const Vec& b, double lambda,
                               bool anomalous) {
  const double s = pair_similarity(a, b, lambda);
  if (!anomalous) return -std::log(s);
  return -std::log(1.0 - std::min(s, 1.0 - 1e-6));
}

// ---------------------------------------------------------------------------
// Anomaly injection
// ---------------------------------------------------------------------------

enum class AnomalyKind { Global, Contextual, Seasonal, Shapelet, Trend };

inline std::string anomaly_kind_name(AnomalyKind k) {
  switch (k) {
    case AnomalyKind::Global: return "global";
    case AnomalyKind::Contextual: return "contextual";
    case AnomalyKind::Seasonal: return "seasonal";
    case AnomalyKind::Shapelet: return "shapelet";
    case AnomalyKind::Trend: return "trend";
  }
  return "?";
}

// Contiguous state-row range [start, start + length) that an injection may
// modify; every row outside it must be bitwise untouched.
struct AnomalyExtent {
  int start = 0;
  int length = 1;
};

// Injects a synthetic anomaly of the given kind into the state sequence.
// magnitude >= 0 scales the deviation; zero returns the input unchanged.
inline Trajectory inject_anomaly(const Trajectory& traj, AnomalyKind kind,
                                 double magnitude, const AnomalyExtent& extent,
                                 std::uint64_t seed) {
  traj.validate();
  require(magnitude >= 0.0, "inject_anomaly: negative magnitude");
  const int rows = static_cast<int>(traj.states.rows());
  require(extent.start >= 0 && extent.length >= 1 &&
              extent.start + extent.length <= rows,
          "inject_anomaly: extent outside the trajectory");
  Trajectory out = traj;
  if (magnitude == 0.0) return out;

  const int lo = extent.start;
  const int len = extent.length;
  Rng rng(derive_seed(seed, "inject", static_cast<uint64_t>(kind)));

  // Per-dimension deviation scale from the whole window, floored so flat
  // channels still receive a visible disturbance.
  Vec mean = traj.states.colwise().mean().transpose();
  Mat centered = traj.states.rowwise() - mean.transpose();
  Vec scale = centered.array().square().colwise().mean().sqrt().transpose();
  scale = scale.array().max(1e-3).matrix();

  switch (kind) {
    case AnomalyKind::Global: {
      // Point outlier: one spike far outside the global range.
      const int t = lo + rng.uniform_int(len);
      const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
      out.states.row(t) += (sign * magnitude) * scale.transpose();
      break;
    }
    case AnomalyKind::Contextual: {
      // Point outlier relative to the local window: amplify one row's
      // deviation from the extent mean.
      Vec local = traj.states.middleRows(lo, len).colwise().mean().transpose();
      const int t = lo + rng.uniform_int(len);
      out.states.row(t) =
          (local + (1.0 + magnitude) * (traj.states.row(t).transpose() - local))
              .transpose();
      break;
    }
    case AnomalyKind::Seasonal: {
      // Frequency doubling inside the extent, blended in by magnitude.
      const double alpha = std::min(1.0, magnitude);
      Mat warped(len, traj.states.cols());
      for (int i = 0; i < len; ++i)
        warped.row(i) = traj.states.row(lo + (2 * i) % len);
      out.states.middleRows(lo, len) =
          (1.0 - alpha) * traj.states.middleRows(lo, len) + alpha * warped;
      break;
    }
    case AnomalyKind::Shapelet: {
      // Smooth bump: a half-sine shape added across the extent.
      for (int i = 0; i < len; ++i) {
        const double bump =
            std::sin(std::numbers::pi * double(i + 1) / double(len + 1));
        out.states.row(lo + i) += (magnitude * bump) * scale.transpose();
      }
      break;
    }
    case AnomalyKind::Trend: {
      // Linear drift ramping over the extent only.
      for (int i = 0; i < len; ++i) {
        const double ramp = double(i + 1) / double(len);
        out.states.row(lo + i) += (magnitude * ramp) * scale.transpose();
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Detector
// ---------------------------------------------------------------------------

struct AnomalyPair {
  Trajectory context;
  Trajectory target;
  bool anomalous = false;
};

struct DetectionResult {
  double score = 0.0;
  bool anomalous = false;
};

struct ThresholdReport {
  double threshold = 0.5;
  double tpr = 0.0;
  double fpr = 0.0;
  double youden_j = 0.0;
};

struct AnomalyDetector {
  Tcn encoder;
  Standardizer row_std;
  double lambda = 0.33;
  double threshold = 0.5;

  int receptive_field() const { return encoder.cfg.receptive_field(); }
};

// Embeds a trajectory window through the causal encoder; the unit-norm
// embedding of the final step summarizes the whole window, so the window
// must fit inside the encoder's receptive field.
inline Vec encode_trajectory(const AnomalyDetector& det, const Trajectory& traj,
                             Tcn::Cache* cache = nullptr) {
  Mat rows = trajectory_rows(traj);
  require(rows.cols() == det.row_std.dim(),
          "encode_trajectory: row width mismatch");
  require(static_cast<int>(rows.rows()) <= det.receptive_field(),
          "encode_trajectory: window exceeds the encoder receptive field");
  return det.encoder.encode(det.row_std.standardize_rows(rows), cache);
}

inline double pair_score(const AnomalyDetector& det, const Trajectory& context,
                         const Trajectory& target) {
  Vec za = encode_trajectory(det, context);
  Vec zb = encode_trajectory(det, target);
  return pair_similarity(za, zb, det.lambda);
}

// Scores a context/target pair; scores below the calibrated threshold flag
// the target window as anomalous.
inline DetectionResult detect(const AnomalyDetector& det,
                              const Trajectory& context,
                              const Trajectory& target) {
  require(det.threshold > 0.0 && det.threshold <= 1.0,
          "detect: threshold outside (0, 1]");
  DetectionResult r;
  r.score = pair_score(det, context, target);
  r.anomalous = r.score < det.threshold;
  return r;
}

inline AnomalyDetector make_detector(const TcnConfig& base, double lambda,
                                     const std::vector<AnomalyPair>& pairs,
                                     std::uint64_t seed) {
  require(lambda > 0.0, "make_detector: lambda must be positive");
  require(!pairs.empty(), "make_detector: no pairs");
  AnomalyDetector det;
  det.lambda = lambda;

  Mat rows0 = trajectory_rows(pairs.front().context);
  std::vector<Mat> all;
  Eigen::Index total = 0;
  for (const auto& p : pairs) {
    all.push_back(trajectory_rows(p.context));
    all.push_back(trajectory_rows(p.target));
    total += all[all.size() - 2].rows() + all.back().rows();
  }
  Mat stacked(total, rows0.cols());
  Eigen::Index at = 0;
  for (const auto& m : all) {
    stacked.middleRows(at, m.rows()) = m;
    at += m.rows();
  }
  det.row_std = Standardizer::fit(stacked);

  TcnConfig cfg = base;
  cfg.in_dim = static_cast<int>(rows0.cols());
  cfg.unit_norm = true;
  Rng rng(derive_seed(seed, "detector_init"));
  det.encoder.init(cfg, rng);
  return det;
}

// Trains the encoder on labeled context/target pairs with the pairwise
// contrastive objective. A dataset carrying only one label cannot define
// the decision boundary and is rejected outright.
inline TrainReport train_detector(AnomalyDetector& det,
                                  const std::vector<AnomalyPair>& pairs,
                                  const TrainOptions& opt) {
  require(!pairs.empty(), "train_detector: no pairs");
  require(opt.epochs >= 0, "train_detector: negative epochs");
  bool any_pos = false;
  bool any_neg = false;
  for (const auto& p : pairs) (p.anomalous ? any_pos : any_neg) = true;
  if (!any_pos || !any_neg)
    throw DomainError(
        "train_detector: dataset carries a single label; need both normal "
        "and anomalous pairs");

  TrainReport report;
  if (opt.epochs == 0) return report;

  std::vector<TensorRef> params;
  det.encoder.collect(params);
  Adam optimizer(params, opt.lr);
  Rng rng(derive_seed(opt.seed, "train_detector"));
  const int n = static_cast<int>(pairs.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i)
      std::swap(order[i], order[rng.uniform_int(i + 1)]);
    double epoch_loss = 0.0;
    for (int start = 0; start < n; start += opt.batch) {
      const int bsz = std::min(opt.batch, n - start);
      for (int b = 0; b < bsz; ++b) {
        const auto& p = pairs[order[start + b]];
        Tcn::Cache ca, cb;
        Vec za = encode_trajectory(det, p.context, &ca);
        Vec zb = encode_trajectory(det, p.target, &cb);
        const double cos = za.dot(zb);
        const double s = std::exp((cos - 1.0) / det.lambda);
        double loss, dcos;
        if (!p.anomalous) {
          loss = (1.0 - cos) / det.lambda;
          dcos = -1.0 / det.lambda;
        } else if (s >= 1.0 - 1e-6) {
          loss = -std::log(1e-6);
          dcos = 0.0;  // capped region is flat
        } else {
          loss = -std::log(1.0 - s);
          dcos = s / ((1.0 - s) * det.lambda);
        }
        if (!std::isfinite(loss))
          throw NumericalFailure("train_detector: non-finite loss");
        epoch_loss += loss;
        const double g = dcos / double(bsz);
        det.encoder.backward(ca, g * zb);
        det.encoder.backward(cb, g * za);
      }
      optimizer.step();
    }
    report.epoch_loss.push_back(epoch_loss / double(n));
  }
  return report;
}

// Picks the detection threshold maximizing Youden's J = TPR - FPR over the
// validation pair scores; candidates are midpoints between adjacent
// distinct scores so the choice is robust to ties.
inline ThresholdReport calibrate_threshold(AnomalyDetector& det,
                                           const std::vector<AnomalyPair>& pairs) {
  require(!pairs.empty(), "calibrate_threshold: no pairs");
  int n_pos = 0;
  int n_neg = 0;
  std::vector<std::pair<double, bool>> scored;
  scored.reserve(pairs.size());
  for (const auto& p : pairs) {
    scored.emplace_back(pair_score(det, p.context, p.target), p.anomalous);
    (p.anomalous ? n_pos : n_neg) += 1;
  }
  require(n_pos > 0 && n_neg > 0,
          "calibrate_threshold: need both normal and anomalous pairs");

  std::vector<double> svals;
  for (const auto& [s, a] : scored) svals.push_back(s);
  std::sort(svals.begin(), svals.end());
  svals.erase(std::unique(svals.begin(), svals.end()), svals.end());
  std::vector<double> candidates;
  candidates.push_back(std::max(svals.front() * 0.5, 1e-12));
  for (size_t i = 0; i + 1 < svals.size(); ++i)
    candidates.push_back(0.5 * (svals[i] + svals[i + 1]));
  candidates.push_back(std::min(1.0, 0.5 * (svals.back() + 1.0)));

  ThresholdReport best;
  best.youden_j = -2.0;
  for (double t : candidates) {
    int tp = 0;
    int fp = 0;
    for (const auto& [s, a] : scored) {
      if (s < t) (a ? tp : fp) += 1;
    }
    const double tpr = double(tp) / double(n_pos);
    const double fpr = double(fp) / double(n_neg);
    const double j = tpr - fpr;
    if (j > best.youden_j + 1e-12) {
      best = {t, tpr, fpr, j};
    }
  }
  det.threshold = best.threshold;
  return best;
}

}  // namespace nfc
