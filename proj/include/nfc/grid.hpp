#pragma once

// Terrain grids: the environment representation shared by the simulators,
// the perception model, and the environment-residual machinery.

#include "nfc/common.hpp"
#include "nfc/rng.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <string>
#include <utility>
#include <vector>

namespace nfc {

// A regular height grid. World coordinates map to the grid through the
// cell resolution and the world position of cell (0, 0): column index
// tracks x, row index tracks y.
struct EnvGrid {
  Mat heights;                       // rows x cols, meters
  double resolution = 0.1;           // meters per cell
  Eigen::Vector2d origin{0.0, 0.0};  // world position of cell (0, 0)

  Eigen::Index rows() const { return heights.rows(); }
  Eigen::Index cols() const { return heights.cols(); }

  void validate() const {
    require(heights.rows() > 0 && heights.cols() > 0,
            "EnvGrid: grid must be non-empty");
    require(resolution > 0.0, "EnvGrid: resolution must be positive");
    require_finite(heights, "EnvGrid::heights");
  }

  // Continuous grid coordinates of a world point, clamped to the grid.
  Eigen::Vector2d to_grid(double x, double y) const {
    double gc = (x - origin[0]) / resolution;
    double gr = (y - origin[1]) / resolution;
    gc = std::clamp(gc, 0.0, static_cast<double>(cols() - 1));
    gr = std::clamp(gr, 0.0, static_cast<double>(rows() - 1));
    return {gr, gc};
  }

  // Bilinear height lookup; out-of-bounds positions clamp to the border.
  double height_at(double x, double y) const {
    Eigen::Vector2d g = to_grid(x, y);
    auto r0 = static_cast<Eigen::Index>(std::floor(g[0]));
    auto c0 = static_cast<Eigen::Index>(std::floor(g[1]));
    r0 = std::min(r0, rows() - 1);
    c0 = std::min(c0, cols() - 1);
    Eigen::Index r1 = std::min(r0 + 1, rows() - 1);
    Eigen::Index c1 = std::min(c0 + 1, cols() - 1);
    double fr = g[0] - static_cast<double>(r0);
    double fc = g[1] - static_cast<double>(c0);
    double top = (1.0 - fc) * heights(r0, c0) + fc * heights(r0, c1);
    double bot = (1.0 - fc) * heights(r1, c0) + fc * heights(r1, c1);
    return (1.0 - fr) * top + fr * bot;
  }

  // Terrain gradient (dh/dx, dh/dy) by central differences of the bilinear
  // surface at half-cell offsets.
  Eigen::Vector2d gradient_at(double x, double y) const {
    double h = 0.5 * resolution;
    double gx = (height_at(x + h, y) - height_at(x - h, y)) / (2.0 * h);
    double gy = (height_at(x, y + h) - height_at(x, y - h)) / (2.0 * h);
    return {gx, gy};
  }

  // Square patch of side `k` cells sampled around a world position, flattened
  // row-major and expressed relative to the center height.
  Vec local_patch(double x, double y, int k = 3) const {
    require(k > 0 && k % 2 == 1, "EnvGrid::local_patch: k must be odd");
    Vec out(k * k);
    double hc = height_at(x, y);
    int half = k / 2;
    int idx = 0;
    for (int dr = -half; dr <= half; ++dr) {
      for (int dc = -half; dc <= half; ++dc) {
        double px = x + dc * resolution;
        double py = y + dr * resolution;
        out[idx++] = height_at(px, py) - hc;
      }
    }
    return out;
  }
};

enum class TerrainKind { Flat, Rough };

inline TerrainKind terrain_kind_from_string(const std::string& s) {
  if (s == "flat") return TerrainKind::Flat;
  if (s == "rough") return TerrainKind::Rough;
  throw DomainError("unknown terrain kind: " + s);
}

// Procedurally generates a terrain grid. "flat" is all zeros. "rough" is
// smoothed white noise rescaled to exactly zero mean and a standard
// deviation equal to `roughness_scale`. The grid is centered on the world
// origin so robots start near the middle.
inline EnvGrid make_terrain(TerrainKind kind, int rows, int cols,
                            double resolution, double roughness_scale,
                            std::uint64_t seed) {
  require(rows > 0 && cols > 0, "make_terrain: grid must be non-empty");
  require(resolution > 0.0, "make_terrain: resolution must be positive");
  require(roughness_scale >= 0.0,
          "make_terrain: roughness_scale must be non-negative");

  EnvGrid g;
  g.resolution = resolution;
  g.origin = {-0.5 * (cols - 1) * resolution, -0.5 * (rows - 1) * resolution};
  g.heights = Mat::Zero(rows, cols);
  if (kind == TerrainKind::Flat || roughness_scale == 0.0) return g;

  Rng rng(derive_seed(seed, "terrain"));
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) g.heights(r, c) = rng.normal();

  // Two passes of a separable 5-tap binomial blur with clamped borders give
  // gently correlated bumps at the cell scale.
  const double k[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  for (int pass = 0; pass < 2; ++pass) {
    Mat tmp = Mat::Zero(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) {
        double s = 0.0;
        for (int j = -2; j <= 2; ++j) {
          Eigen::Index cc = std::clamp<Eigen::Index>(c + j, 0, cols - 1);
          s += k[j + 2] * g.heights(r, cc);
        }
        tmp(r, c) = s;
      }
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int j = -2; j <= 2; ++j) {
          Eigen::Index rr = std::clamp<Eigen::Index>(r + j, 0, rows - 1);
          s += k[j + 2] * tmp(rr, c);
        }
        g.heights(r, c) = s;
      }
  }

  double mean = g.heights.mean();
  g.heights.array() -= mean;
  double sd = std::sqrt(g.heights.array().square().mean());
  if (sd > 0.0) g.heights *= roughness_scale / sd;
  return g;
}

// Depth-sensor noise and process-noise description used by the perception
// model and the simulator step.
struct NoiseSpec {
  Vec process_std;              // per-state-dim process noise, empty = zero
  double depth_base_std = 0.0;  // depth noise at zero range
  double depth_range_coef = 0.0;  // added std per meter of range
  double dropout_rate = 0.0;      // fraction of cells dropped and infilled
  double quantization = 0.0;      // height quantum, 0 disables

  void validate(int state_dim) const {
    if (process_std.size() != 0) {
      require(process_std.size() == state_dim,
              "NoiseSpec: process_std length must match state dim");
      require((process_std.array() >= 0.0).all(),
              "NoiseSpec: process_std must be non-negative");
    }
    require(depth_base_std >= 0.0 && depth_range_coef >= 0.0,
            "NoiseSpec: depth noise terms must be non-negative");
    require(dropout_rate >= 0.0 && dropout_rate < 1.0,
            "NoiseSpec: dropout_rate must lie in [0, 1)");
    require(quantization >= 0.0, "NoiseSpec: quantization must be >= 0");
  }

  bool depth_noise_free() const {
    return depth_base_std == 0.0 && depth_range_coef == 0.0 &&
           dropout_rate == 0.0 && quantization == 0.0;
  }
};

struct PerceiveResult {
  EnvGrid grid;
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> dropout_mask;  // 1 = dropped
  int dropped = 0;
};

// Simulates an onboard depth sensor observing `truth` from `robot_pos`:
// range-dependent Gaussian noise per cell, Bernoulli dropout with
// nearest-neighbor infill (recorded in a mask), then height quantization.
inline PerceiveResult perceive(const EnvGrid& truth, const NoiseSpec& noise,
                               const Eigen::Vector2d& robot_pos,
                               std::uint64_t seed) {
  truth.validate();
  noise.validate(0);
  PerceiveResult out;
  out.grid = truth;
  out.dropout_mask.setZero(truth.rows(), truth.cols());
  if (noise.depth_noise_free()) return out;

  Rng rng(derive_seed(seed, "perceive"));
  Mat& h = out.grid.heights;

  if (noise.depth_base_std > 0.0 || noise.depth_range_coef > 0.0) {
    for (Eigen::Index r = 0; r < h.rows(); ++r)
      for (Eigen::Index c = 0; c < h.cols(); ++c) {
        double cx = truth.origin[0] + c * truth.resolution;
        double cy = truth.origin[1] + r * truth.resolution;
        double dist = std::hypot(cx - robot_pos[0], cy - robot_pos[1]);
        double sd = noise.depth_base_std + noise.depth_range_coef * dist;
        h(r, c) += sd * rng.normal();
      }
  }

  if (noise.dropout_rate > 0.0) {
    std::deque<std::pair<Eigen::Index, Eigen::Index>> frontier;
    for (Eigen::Index r = 0; r < h.rows(); ++r)
      for (Eigen::Index c = 0; c < h.cols(); ++c) {
        if (rng.bernoulli(noise.dropout_rate)) {
          out.dropout_mask(r, c) = 1;
          ++out.dropped;
        } else {
          frontier.emplace_back(r, c);
        }
      }
    if (out.dropped == static_cast<int>(h.size())) {
      // Degenerate draw: nothing survived, keep noisy heights unfilled.
      out.dropout_mask.setOnes();
    } else if (out.dropped > 0) {
      // Multi-source BFS assigns each dropped cell the height of its
      // nearest surviving neighbor (deterministic scan order).
      Mat filled = h;
      auto visited = out.dropout_mask.cast<int>().eval();
      visited = (1 - visited.array()).matrix();  // 1 = has a value
      while (!frontier.empty()) {
        auto [r, c] = frontier.front();
        frontier.pop_front();
        const Eigen::Index dr[4] = {-1, 1, 0, 0};
        const Eigen::Index dc[4] = {0, 0, -1, 1};
        for (int j = 0; j < 4; ++j) {
          Eigen::Index rr = r + dr[j], cc = c + dc[j];
          if (rr < 0 || cc < 0 || rr >= h.rows() || cc >= h.cols()) continue;
          if (visited(rr, cc)) continue;
          visited(rr, cc) = 1;
          filled(rr, cc) = filled(r, c);
          frontier.emplace_back(rr, cc);
        }
      }
      h = filled;
    }
  }

  if (noise.quantization > 0.0) {
    double q = noise.quantization;
    h = (h.array() / q).round() * q;
  }
  return out;
}

// Bilinear resize with corner alignment; a 1-cell dimension broadcasts.
inline EnvGrid resize_bilinear(const EnvGrid& g, Eigen::Index rows,
                               Eigen::Index cols) {
  g.validate();
  require(rows > 0 && cols > 0, "resize_bilinear: target must be non-empty");
  EnvGrid out;
  out.resolution = g.resolution * static_cast<double>(g.rows()) /
                   static_cast<double>(rows);
  out.origin = g.origin;
  out.heights.resize(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    double gr = rows > 1
                    ? static_cast<double>(r) * (g.rows() - 1) / (rows - 1)
                    : 0.0;
    auto r0 = static_cast<Eigen::Index>(std::floor(gr));
    Eigen::Index r1 = std::min(r0 + 1, g.rows() - 1);
    double fr = gr - static_cast<double>(r0);
    for (Eigen::Index c = 0; c < cols; ++c) {
      double gc = cols > 1
                      ? static_cast<double>(c) * (g.cols() - 1) / (cols - 1)
                      : 0.0;
      auto c0 = static_cast<Eigen::Index>(std::floor(gc));
      Eigen::Index c1 = std::min(c0 + 1, g.cols() - 1);
      double fc = gc - static_cast<double>(c0);
      double top = (1 - fc) * g.heights(r0, c0) + fc * g.heights(r0, c1);
      double bot = (1 - fc) * g.heights(r1, c0) + fc * g.heights(r1, c1);
      out.heights(r, c) = (1 - fr) * top + fr * bot;
    }
  }
  return out;
}

// Average pooling to a fixed output shape; block boundaries are evenly
// rounded so all input cells are covered exactly once.
inline Mat avg_pool(const Mat& m, Eigen::Index out_rows, Eigen::Index out_cols) {
  require(m.rows() > 0 && m.cols() > 0, "avg_pool: input must be non-empty");
  require(out_rows > 0 && out_cols > 0, "avg_pool: output must be non-empty");
  require(out_rows <= m.rows() && out_cols <= m.cols(),
          "avg_pool: output must not exceed input shape");
  Mat out(out_rows, out_cols);
  auto edge = [](Eigen::Index i, Eigen::Index n_out, Eigen::Index n_in) {
    return (i * n_in) / n_out;
  };
  for (Eigen::Index r = 0; r < out_rows; ++r) {
    Eigen::Index r0 = edge(r, out_rows, m.rows());
    Eigen::Index r1 = edge(r + 1, out_rows, m.rows());
    for (Eigen::Index c = 0; c < out_cols; ++c) {
      Eigen::Index c0 = edge(c, out_cols, m.cols());
      Eigen::Index c1 = edge(c + 1, out_cols, m.cols());
      out(r, c) = m.block(r0, c0, r1 - r0, c1 - c0).mean();
    }
  }
  return out;
}

}  // namespace nfc
