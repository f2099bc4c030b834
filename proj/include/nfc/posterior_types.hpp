#pragma once

// Shared posterior-estimation types: the calibration target layout, the
// per-dimension standardizer stored with trained models, and the sample
// sets every estimator returns.

#include "nfc/common.hpp"

#include <string>

namespace nfc {

// Layout of the inference target [psi | delta_s | vec(delta_e)]. The named
// slices partition the vector exactly; empty slices are allowed so the
// same machinery covers psi-only calibration and full fidelity inference.
struct TargetLayout {
  int psi_dim = 0;
  int ds_dim = 0;
  int de_rows = 0;
  int de_cols = 0;

  int de_dim() const { return de_rows * de_cols; }
  int total() const { return psi_dim + ds_dim + de_dim(); }
  int psi_offset() const { return 0; }
  int ds_offset() const { return psi_dim; }
  int de_offset() const { return psi_dim + ds_dim; }

  void validate() const {
    require(psi_dim >= 0 && ds_dim >= 0, "TargetLayout: negative dims");
    require(de_rows >= 0 && de_cols >= 0, "TargetLayout: negative grid dims");
    require((de_rows == 0) == (de_cols == 0),
            "TargetLayout: delta_e grid must be fully sized or absent");
    require(total() >= 1, "TargetLayout: target must be non-empty");
  }

  Vec psi_slice(const Vec& x) const {
    require(x.size() == total(), "TargetLayout: vector size mismatch");
    return x.segment(psi_offset(), psi_dim);
  }
  Vec ds_slice(const Vec& x) const {
    require(x.size() == total(), "TargetLayout: vector size mismatch");
    return x.segment(ds_offset(), ds_dim);
  }
  Vec de_slice(const Vec& x) const {
    require(x.size() == total(), "TargetLayout: vector size mismatch");
    return x.segment(de_offset(), de_dim());
  }

  Mat de_grid(const Vec& x) const {
    Vec d = de_slice(x);
    Mat g(de_rows, de_cols);
    Eigen::Index k = 0;
    for (Eigen::Index r = 0; r < de_rows; ++r)
      for (Eigen::Index c = 0; c < de_cols; ++c) g(r, c) = d[k++];
    return g;
  }

  bool operator==(const TargetLayout& o) const {
    return psi_dim == o.psi_dim && ds_dim == o.ds_dim &&
           de_rows == o.de_rows && de_cols == o.de_cols;
  }
};

// Per-dimension affine standardization with statistics frozen at fit time.
struct Standardizer {
  Vec mean;
  Vec std;

  static Standardizer fit(const Mat& rows) {
    require(rows.rows() >= 1, "Standardizer: empty data");
    Standardizer s;
    s.mean = rows.colwise().mean().transpose();
    Mat centered = rows.rowwise() - s.mean.transpose();
    s.std = (centered.array().square().colwise().mean()).sqrt().transpose();
    // Constant dimensions standardize to zero rather than blowing up.
    s.std = s.std.array().max(1e-8).matrix();
    return s;
  }

  static Standardizer identity(Eigen::Index dim) {
    Standardizer s;
    s.mean = Vec::Zero(dim);
    s.std = Vec::Ones(dim);
    return s;
  }

  Eigen::Index dim() const { return mean.size(); }

  Vec standardize(const Vec& x) const {
    require(x.size() == dim(), "Standardizer: dimension mismatch");
    return ((x - mean).array() / std.array()).matrix();
  }

  Vec destandardize(const Vec& z) const {
    require(z.size() == dim(), "Standardizer: dimension mismatch");
    return (z.array() * std.array()).matrix() + mean;
  }

  Mat standardize_rows(const Mat& rows) const {
    require(rows.cols() == dim(), "Standardizer: dimension mismatch");
    return ((rows.rowwise() - mean.transpose()).array().rowwise() /
            std.transpose().array())
        .matrix();
  }
};

// Posterior represented by samples. mean/std are per-dimension statistics
// of the sample matrix and are recomputed by finalize(), never set by hand.
struct PosteriorSampleSet {
  Mat samples;  // N x layout.total()
  Vec mean;
  Vec std;
  TargetLayout layout;
  std::string source;  // diffusion | mdn | abc | smc
  std::string config_hash;
  int clamp_count = 0;
  int restart_count = 0;

  int count() const { return static_cast<int>(samples.rows()); }

  void finalize() {
    require(samples.rows() >= 1, "PosteriorSampleSet: no samples");
    require(samples.cols() == layout.total(),
            "PosteriorSampleSet: sample width does not match layout");
    mean = samples.colwise().mean().transpose();
    Mat centered = samples.rowwise() - mean.transpose();
    std = centered.array().square().colwise().mean().sqrt().transpose();
  }

  void validate() const {
    require(samples.rows() >= 1, "PosteriorSampleSet: no samples");
    require(mean.size() == samples.cols() && std.size() == samples.cols(),
            "PosteriorSampleSet: stats missing");
    Vec m = samples.colwise().mean().transpose();
    require((m - mean).cwiseAbs().maxCoeff() < 1e-9,
            "PosteriorSampleSet: mean inconsistent with samples");
    require((std.array() >= 0.0).all(), "PosteriorSampleSet: negative std");
    require_finite(samples, "PosteriorSampleSet::samples");
  }
};

}  // namespace nfc
