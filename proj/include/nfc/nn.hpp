#pragma once

// Minimal neural-network toolkit: dense layers, an MLP, a causal dilated
// temporal convolution encoder, and Adam. Everything is explicit
// double-precision Eigen with hand-derived gradients; determinism comes
// from seeded initialization and fixed iteration order.

#include "nfc/common.hpp"
#include "nfc/rng.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace nfc {

// A view of one parameter tensor and its gradient accumulator.
struct TensorRef {
  double* value = nullptr;
  double* grad = nullptr;
  Eigen::Index size = 0;
};

inline void add_tensor(std::vector<TensorRef>& out, Mat& v, Mat& g) {
  out.push_back({v.data(), g.data(), v.size()});
}
inline void add_tensor(std::vector<TensorRef>& out, Vec& v, Vec& g) {
  out.push_back({v.data(), g.data(), v.size()});
}

enum class Act { Tanh, Relu, Identity };

inline double act_apply(Act a, double x) {
  switch (a) {
    case Act::Tanh: return std::tanh(x);
    case Act::Relu: return x > 0.0 ? x : 0.0;
    case Act::Identity: return x;
  }
  return x;
}

// Derivative expressed through the post-activation value.
inline double act_deriv_from_output(Act a, double y) {
  switch (a) {
    case Act::Tanh: return 1.0 - y * y;
    case Act::Relu: return y > 0.0 ? 1.0 : 0.0;
    case Act::Identity: return 1.0;
  }
  return 1.0;
}

struct Dense {
  Mat W;
  Vec b;
  Mat gW;
  Vec gb;

  void init(int in, int out, Rng& rng) {
    double s = std::sqrt(6.0 / static_cast<double>(in + out));
    W.resize(out, in);
    for (Eigen::Index i = 0; i < W.size(); ++i)
      W.data()[i] = rng.uniform(-s, s);
    b = Vec::Zero(out);
    gW = Mat::Zero(out, in);
    gb = Vec::Zero(out);
  }

  void init_zero(int in, int out) {
    W = Mat::Zero(out, in);
    b = Vec::Zero(out);
    gW = Mat::Zero(out, in);
    gb = Vec::Zero(out);
  }

  Vec apply(const Vec& x) const { return W * x + b; }

  // Accumulates parameter gradients for output cotangent `dout` at input
  // `x` and returns the input cotangent.
  Vec backward(const Vec& x, const Vec& dout) {
    gW.noalias() += dout * x.transpose();
    gb += dout;
    return W.transpose() * dout;
  }

  void zero_grads() {
    gW.setZero();
    gb.setZero();
  }

  void collect(std::vector<TensorRef>& out) {
    add_tensor(out, W, gW);
    add_tensor(out, b, gb);
  }
};

// Fully connected network with a shared hidden activation and identity
// output. `zero_last` starts the output layer at exactly zero, which pins
// the initial function to the zero map regardless of seed.
struct Mlp {
  std::vector<Dense> layers;
  Act hidden = Act::Tanh;

  void init(const std::vector<int>& sizes, Rng& rng, bool zero_last = false,
            Act hidden_act = Act::Tanh) {
    require(sizes.size() >= 2, "Mlp: need at least input and output sizes");
    hidden = hidden_act;
    layers.assign(sizes.size() - 1, Dense{});
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
      bool last = (i + 2 == sizes.size());
      if (last && zero_last)
        layers[i].init_zero(sizes[i], sizes[i + 1]);
      else
        layers[i].init(sizes[i], sizes[i + 1], rng);
    }
  }

  int in_dim() const { return static_cast<int>(layers.front().W.cols()); }
  int out_dim() const { return static_cast<int>(layers.back().W.rows()); }

  struct Cache {
    std::vector<Vec> x;  // x[0] = input, x[i+1] = output of layer i
  };

  Vec forward(const Vec& in, Cache* cache = nullptr) const {
    require(in.size() == in_dim(), "Mlp: input dimension mismatch");
    if (cache) {
      cache->x.clear();
      cache->x.push_back(in);
    }
    Vec h = in;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = layers[i].apply(h);
      if (i + 1 < layers.size())
        for (Eigen::Index j = 0; j < h.size(); ++j)
          h[j] = act_apply(hidden, h[j]);
      if (cache) cache->x.push_back(h);
    }
    return h;
  }

  // Accumulates gradients and returns the cotangent w.r.t. the input.
  Vec backward(const Cache& cache, Vec dout) {
    for (std::size_t k = layers.size(); k-- > 0;) {
      if (k + 1 < layers.size()) {
        const Vec& y = cache.x[k + 1];
        for (Eigen::Index j = 0; j < dout.size(); ++j)
          dout[j] *= act_deriv_from_output(hidden, y[j]);
      }
      dout = layers[k].backward(cache.x[k], dout);
    }
    return dout;
  }

  void zero_grads() {
    for (auto& l : layers) l.zero_grads();
  }
  void collect(std::vector<TensorRef>& out) {
    for (auto& l : layers) l.collect(out);
  }
};

// Causal dilated temporal convolution encoder. Sequences are (T x C)
// matrices, one row per step; convolutions pad on the left with zeros so
// the feature at step t depends on inputs at steps <= t only. The readout
// maps the final step's features to a fixed-size embedding, optionally
// normalized onto the unit hypersphere.
struct TcnConfig {
  int in_dim = 0;
  std::vector<int> channels{64, 32, 16, 8};
  int kernel_width = 5;
  int dilation_base = 2;
  int embed_dim = 16;
  bool unit_norm = true;

  void validate() const {
    require(in_dim >= 1, "TcnConfig: in_dim must be >= 1");
    require(!channels.empty(), "TcnConfig: channels must be non-empty");
    for (int c : channels) require(c >= 1, "TcnConfig: channel widths >= 1");
    require(kernel_width >= 1, "TcnConfig: kernel_width must be >= 1");
    require(dilation_base >= 1, "TcnConfig: dilation_base must be >= 1");
    require(embed_dim >= 1, "TcnConfig: embed_dim must be >= 1");
  }

  // Steps of history visible to the final-step feature.
  int receptive_field() const {
    int rf = 1;
    int dil = 1;
    for (std::size_t l = 0; l < channels.size(); ++l) {
      rf += (kernel_width - 1) * dil;
      dil *= dilation_base;
    }
    return rf;
  }
};

struct Tcn {
  TcnConfig cfg;
  std::vector<std::vector<Mat>> W;  // [layer][tap]: C_out x C_in
  std::vector<Vec> b;               // [layer]
  std::vector<std::vector<Mat>> gW;
  std::vector<Vec> gb;
  Dense readout;

  void init(const TcnConfig& config, Rng& rng) {
    config.validate();
    cfg = config;
    const std::size_t L = cfg.channels.size();
    W.assign(L, {});
    gW.assign(L, {});
    b.assign(L, Vec{});
    gb.assign(L, Vec{});
    int c_in = cfg.in_dim;
    for (std::size_t l = 0; l < L; ++l) {
      int c_out = cfg.channels[l];
      double s = std::sqrt(6.0 / static_cast<double>(c_in * cfg.kernel_width +
                                                     c_out));
      W[l].resize(cfg.kernel_width);
      gW[l].resize(cfg.kernel_width);
      for (int j = 0; j < cfg.kernel_width; ++j) {
        W[l][j].resize(c_out, c_in);
        for (Eigen::Index i = 0; i < W[l][j].size(); ++i)
          W[l][j].data()[i] = rng.uniform(-s, s);
        gW[l][j] = Mat::Zero(c_out, c_in);
      }
      b[l] = Vec::Zero(c_out);
      gb[l] = Vec::Zero(c_out);
      c_in = c_out;
    }
    readout.init(c_in, cfg.embed_dim, rng);
  }

  struct Cache {
    std::vector<Mat> acts;  // acts[0] = input, acts[l+1] = post-relu layer l
    Vec raw;                // readout output before normalization
    double inv_norm = 1.0;
    Vec embed;
  };

  // Post-activation feature sequence of the last conv layer (T x C_last).
  Mat features(const Mat& X, Cache* cache = nullptr) const {
    require(X.cols() == cfg.in_dim, "Tcn: input channel mismatch");
    require(X.rows() >= 1, "Tcn: empty sequence");
    if (cache) {
      cache->acts.clear();
      cache->acts.push_back(X);
    }
    const Eigen::Index T = X.rows();
    Mat a = X;
    int dil = 1;
    for (std::size_t l = 0; l < W.size(); ++l) {
      Mat pre = Mat::Zero(T, b[l].size());
      pre.rowwise() += b[l].transpose();
      for (int j = 0; j < cfg.kernel_width; ++j) {
        Eigen::Index off = static_cast<Eigen::Index>(j) * dil;
        if (off >= T) break;
        pre.bottomRows(T - off).noalias() +=
            a.topRows(T - off) * W[l][j].transpose();
      }
      a = pre.cwiseMax(0.0);
      if (cache) cache->acts.push_back(a);
      dil *= cfg.dilation_base;
    }
    return a;
  }

  Vec encode(const Mat& X, Cache* cache = nullptr) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    Mat feats = features(X, &c);
    c.raw = readout.apply(feats.row(feats.rows() - 1).transpose());
    if (cfg.unit_norm) {
      double n = std::max(c.raw.norm(), 1e-12);
      c.inv_norm = 1.0 / n;
      c.embed = c.raw * c.inv_norm;
    } else {
      c.inv_norm = 1.0;
      c.embed = c.raw;
    }
    return c.embed;
  }

  // Accumulates gradients for the embedding cotangent `dembed`.
  void backward(const Cache& cache, const Vec& dembed) {
    Vec draw;
    if (cfg.unit_norm) {
      // d/draw of raw/||raw||: (I - e e^T) / ||raw||.
      draw = (dembed - cache.embed * cache.embed.dot(dembed)) * cache.inv_norm;
    } else {
      draw = dembed;
    }
    const Mat& last = cache.acts.back();
    Vec dfeat_last =
        readout.backward(last.row(last.rows() - 1).transpose(), draw);

    Mat dact = Mat::Zero(last.rows(), last.cols());
    dact.row(last.rows() - 1) = dfeat_last.transpose();

    int dil_last = 1;
    for (std::size_t l = 1; l < W.size(); ++l) dil_last *= cfg.dilation_base;
    int dil = dil_last;
    for (std::size_t l = W.size(); l-- > 0;) {
      const Mat& a_out = cache.acts[l + 1];
      const Mat& a_in = cache.acts[l];
      const Eigen::Index T = a_in.rows();
      Mat dpre =
          ((a_out.array() > 0.0).cast<double>() * dact.array()).matrix();
      gb[l] += dpre.colwise().sum().transpose();
      Mat dprev = Mat::Zero(T, a_in.cols());
      for (int j = 0; j < cfg.kernel_width; ++j) {
        Eigen::Index off = static_cast<Eigen::Index>(j) * dil;
        if (off >= T) break;
        gW[l][j].noalias() +=
            dpre.bottomRows(T - off).transpose() * a_in.topRows(T - off);
        dprev.topRows(T - off).noalias() +=
            dpre.bottomRows(T - off) * W[l][j];
      }
      dact = dprev;
      dil /= cfg.dilation_base;
      if (dil < 1) dil = 1;
    }
  }

  void zero_grads() {
    for (std::size_t l = 0; l < W.size(); ++l) {
      for (auto& g : gW[l]) g.setZero();
      gb[l].setZero();
    }
    readout.zero_grads();
  }

  void collect(std::vector<TensorRef>& out) {
    for (std::size_t l = 0; l < W.size(); ++l) {
      for (int j = 0; j < cfg.kernel_width; ++j)
        add_tensor(out, W[l][j], gW[l][j]);
      add_tensor(out, b[l], gb[l]);
    }
    readout.collect(out);
  }
};

// Shared training knobs for the gradient-trained components.
struct TrainOptions {
  int epochs = 10;
  int batch = 64;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  Vec importance;  // optional per-sample weights (empty = uniform)
};

struct TrainReport {
  std::vector<double> epoch_loss;
};

// Adam over a fixed set of parameter tensors. step() consumes and zeroes
// the accumulated gradients.
class Adam {
 public:
  Adam(std::vector<TensorRef> params, double lr, double clip_norm = 10.0)
      : params_(std::move(params)), lr_(lr), clip_norm_(clip_norm) {
    Eigen::Index total = 0;
    for (const auto& p : params_) total += p.size;
    m_ = Vec::Zero(total);
    v_ = Vec::Zero(total);
  }

  void set_lr(double lr) { lr_ = lr; }

  void step() {
    ++t_;
    double gnorm_sq = 0.0;
    for (const auto& p : params_)
      gnorm_sq += Eigen::Map<const Vec>(p.grad, p.size).squaredNorm();
    double scale = 1.0;
    if (clip_norm_ > 0.0) {
      double gnorm = std::sqrt(gnorm_sq);
      if (gnorm > clip_norm_) scale = clip_norm_ / gnorm;
    }
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    Eigen::Index off = 0;
    for (const auto& p : params_) {
      for (Eigen::Index i = 0; i < p.size; ++i) {
        double g = p.grad[i] * scale;
        double& m = m_[off + i];
        double& v = v_[off + i];
        m = beta1_ * m + (1.0 - beta1_) * g;
        v = beta2_ * v + (1.0 - beta2_) * g * g;
        p.value[i] -= lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_);
        p.grad[i] = 0.0;
      }
      off += p.size;
    }
  }

 private:
  std::vector<TensorRef> params_;
  double lr_;
  double clip_norm_;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  Vec m_, v_;
  int t_ = 0;
};

}  // namespace nfc
