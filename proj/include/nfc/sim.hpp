#pragma once

// Simulation core: parameter spaces and priors, the residual-fidelity
// decomposition of a step, trajectory rollout, and the simulator interface
// implemented by the concrete dynamics models.

#include "nfc/common.hpp"
#include "nfc/grid.hpp"
#include "nfc/qmc.hpp"
#include "nfc/rng.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

namespace nfc {

// Named, box-bounded calibration parameter space.
struct ParamSpace {
  std::vector<std::string> names;
  Vec lower;
  Vec upper;

  int dim() const { return static_cast<int>(names.size()); }

  void validate() const {
    require(!names.empty(), "ParamSpace: must have at least one parameter");
    require(lower.size() == dim() && upper.size() == dim(),
            "ParamSpace: bounds must match the number of names");
    require((lower.array() < upper.array()).all(),
            "ParamSpace: every lower bound must be below its upper bound");
    require_finite(lower, "ParamSpace::lower");
    require_finite(upper, "ParamSpace::upper");
  }

  bool contains(const Vec& v) const {
    require(v.size() == dim(), "ParamSpace::contains: dimension mismatch");
    return (v.array() >= lower.array()).all() &&
           (v.array() <= upper.array()).all();
  }

  // Clamps v into the box; returns the number of clamped coordinates.
  int clamp(Vec& v) const {
    require(v.size() == dim(), "ParamSpace::clamp: dimension mismatch");
    int n = 0;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      double c = std::clamp(v[i], lower[i], upper[i]);
      if (c != v[i]) ++n;
      v[i] = c;
    }
    return n;
  }

  Vec midpoint() const { return 0.5 * (lower + upper); }
  Vec width() const { return upper - lower; }
};

// A point in a simulator's calibration space.
struct SimParams {
  Vec values;
};

enum class PriorKind { Uniform, Gaussian };

// Prior over calibration parameters. Uniform covers the parameter box;
// Gaussian is specified by mean and covariance and samples are clamped
// into the box (clamps are counted, not hidden).
struct Prior {
  PriorKind kind = PriorKind::Uniform;
  Vec mean;  // Gaussian only
  Mat cov;   // Gaussian only

  void validate(const ParamSpace& space) const {
    space.validate();
    if (kind == PriorKind::Gaussian) {
      require(mean.size() == space.dim(), "Prior: mean dim mismatch");
      require(cov.rows() == space.dim() && cov.cols() == space.dim(),
              "Prior: covariance shape mismatch");
      require_finite(mean, "Prior::mean");
      require_finite(cov, "Prior::cov");
      require((cov - cov.transpose()).cwiseAbs().maxCoeff() < 1e-12,
              "Prior: covariance must be symmetric");
    }
  }

  // Cholesky-like factor of the covariance; semidefinite matrices are
  // admitted (zero covariance collapses the prior onto its mean), negative
  // directions are rejected.
  Mat factor(const ParamSpace& space) const {
    validate(space);
    Eigen::SelfAdjointEigenSolver<Mat> es(cov);
    require_domain(es.info() == Eigen::Success,
                   "Prior: eigendecomposition of covariance failed");
    Vec ev = es.eigenvalues();
    double top = std::max(ev.maxCoeff(), 0.0);
    require_domain((ev.array() >= -1e-12 * std::max(top, 1.0)).all(),
                   "Prior: covariance must be positive semidefinite");
    Vec s = ev.array().max(0.0).sqrt();
    return es.eigenvectors() * s.asDiagonal();
  }

  // Log density at v. The Gaussian density is the unclamped one; the box
  // truncation is treated as negligible mass for the scales used here.
  double log_density(const ParamSpace& space, const Vec& v) const {
    validate(space);
    require(v.size() == space.dim(), "Prior::log_density: dim mismatch");
    if (kind == PriorKind::Uniform) {
      if (!space.contains(v)) return -std::numeric_limits<double>::infinity();
      return -space.width().array().log().sum();
    }
    Eigen::LDLT<Mat> ldlt(cov);
    require_domain(ldlt.info() == Eigen::Success && ldlt.isPositive(),
                   "Prior::log_density: covariance must be positive definite");
    Vec d = v - mean;
    double quad = d.dot(ldlt.solve(d));
    double logdet = ldlt.vectorD().array().log().sum();
    return -0.5 * (quad + logdet +
                   space.dim() * std::log(2.0 * std::numbers::pi));
  }
};

struct SampleParamsResult {
  std::vector<SimParams> samples;
  int clamp_count = 0;
};

// Draws n parameter vectors from the prior. With qmc=true a Sobol sequence
// replaces the pseudo-random uniforms (pushed through the inverse normal
// CDF for Gaussian priors).
inline SampleParamsResult sample_params(const ParamSpace& space,
                                        const Prior& prior, int n, bool qmc,
                                        std::uint64_t seed) {
  prior.validate(space);
  require(n > 0, "sample_params: n must be positive");
  SampleParamsResult out;
  out.samples.reserve(static_cast<std::size_t>(n));
  int d = space.dim();

  Rng rng(derive_seed(seed, "sample_params"));
  SobolSequence sobol(d);
  Mat factor;
  if (prior.kind == PriorKind::Gaussian) factor = prior.factor(space);

  for (int i = 0; i < n; ++i) {
    Vec u;
    if (qmc) {
      u = sobol.next();
    } else {
      u = rng.uniform_vec(d);
    }
    Vec v(d);
    if (prior.kind == PriorKind::Uniform) {
      v = space.lower.array() + u.array() * space.width().array();
    } else {
      Vec z(d);
      for (int j = 0; j < d; ++j) {
        double uj = qmc ? u[j] : rng.uniform();
        uj = std::min(std::max(uj, 1e-15), 1.0 - 1e-15);
        z[j] = inverse_normal_cdf(uj);
      }
      v = prior.mean + factor * z;
    }
    out.clamp_count += space.clamp(v);
    out.samples.push_back(SimParams{std::move(v)});
  }
  return out;
}

// Residual fidelity: the structured sim-to-real gap. delta_s is added to
// every simulator step; delta_e corrects the perceived terrain.
struct ResidualFidelity {
  Vec delta_s;   // per-step state-space residual, empty = zero
  Mat delta_e;   // terrain residual grid, empty = zero

  static ResidualFidelity zero() { return {}; }

  bool has_delta_s() const { return delta_s.size() > 0; }
  bool has_delta_e() const { return delta_e.size() > 0; }

  void validate(int state_dim) const {
    if (has_delta_s()) {
      require(delta_s.size() == state_dim,
              "ResidualFidelity: delta_s must match state dim");
      require_finite(delta_s, "ResidualFidelity::delta_s");
    }
    if (has_delta_e()) require_finite(delta_e, "ResidualFidelity::delta_e");
  }
};

// An executed episode: states s_0..s_H, actions a_0..a_{H-1}, and the
// terrain the policy perceived while acting.
struct Trajectory {
  Mat states;   // (H+1) x state_dim, row t = s_t
  Mat actions;  // H x action_dim, row t = a_t
  EnvGrid env;  // perceived terrain recorded with the episode
  std::uint64_t seed = 0;
  int clamp_warnings = 0;  // out-of-range action commands clamped in-flight

  int window() const { return static_cast<int>(actions.rows()); }
  int state_dim() const { return static_cast<int>(states.cols()); }
  int action_dim() const { return static_cast<int>(actions.cols()); }

  void validate() const {
    require(states.rows() >= 2, "Trajectory: needs at least one step");
    require(states.rows() == actions.rows() + 1,
            "Trajectory: states must outnumber actions by exactly one");
    require_finite(states, "Trajectory::states");
    require_finite(actions, "Trajectory::actions");
    env.validate();
  }

  // Flattened [states; actions] vector used by kernel featurizers.
  Vec flatten() const {
    Vec out(states.size() + actions.size());
    Eigen::Index k = 0;
    for (Eigen::Index r = 0; r < states.rows(); ++r)
      for (Eigen::Index c = 0; c < states.cols(); ++c)
        out[k++] = states(r, c);
    for (Eigen::Index r = 0; r < actions.rows(); ++r)
      for (Eigen::Index c = 0; c < actions.cols(); ++c)
        out[k++] = actions(r, c);
    return out;
  }
};

// Time-major [s_t ; a_{t-1}] rows, one per state, with a_{-1} = 0. This is
// the shared input layout for temporal encoders, so the final state always
// contributes a row.
inline Mat trajectory_rows(const Trajectory& traj) {
  const Eigen::Index H = traj.actions.rows();
  const Eigen::Index n = traj.states.cols();
  const Eigen::Index m = traj.actions.cols();
  Mat rows(H + 1, n + m);
  for (Eigen::Index t = 0; t <= H; ++t) {
    rows.row(t).head(n) = traj.states.row(t);
    if (t == 0)
      rows.row(t).tail(m).setZero();
    else
      rows.row(t).tail(m) = traj.actions.row(t - 1);
  }
  return rows;
}

// Control policy as a pure function of state and the local terrain patch.
// Commands must land in [-1, 1]^m; out-of-range values are clamped and
// counted on the resulting trajectory.
using PolicyFn = std::function<Vec(const Vec& state, const Vec& patch)>;

inline PolicyFn zero_policy(int action_dim) {
  return [action_dim](const Vec&, const Vec&) {
    return Vec(Vec::Zero(action_dim));
  };
}

// Calibratable simulator interface. step() composes the calibrated model
// f_psi with the residual g_phi and additive process noise; concrete
// classes implement the calibrated part only.
class Simulator {
 public:
  virtual ~Simulator() = default;

  virtual const std::string& id() const = 0;
  virtual int state_dim() const = 0;
  virtual int action_dim() const = 0;
  virtual double dt() const = 0;
  virtual int default_window() const = 0;
  virtual const ParamSpace& param_space() const = 0;
  virtual Vec nominal_params() const = 0;
  virtual Vec initial_state() const { return Vec::Zero(state_dim()); }

  // Pure calibrated dynamics s' = f_psi(s, a | e).
  virtual Vec calibrated_step(const Vec& psi, const Vec& state,
                              const Vec& action, const EnvGrid& env) const = 0;

  // Full decomposed step s' = f_psi(s, a | e) + delta_s + eps.
  Vec step(const Vec& psi, const ResidualFidelity& phi, const Vec& state,
           const Vec& action, const EnvGrid& env, const NoiseSpec& noise,
           Rng& rng) const {
    check_inputs(psi, state, action);
    phi.validate(state_dim());
    noise.validate(state_dim());
    Vec next = calibrated_step(psi, state, action, env);
    if (!next.allFinite())
      throw NumericalFailure(id() + ": calibrated step produced non-finite state");
    if (phi.has_delta_s()) next += phi.delta_s;
    if (noise.process_std.size() > 0) {
      for (Eigen::Index i = 0; i < next.size(); ++i)
        if (noise.process_std[i] > 0.0)
          next[i] += noise.process_std[i] * rng.normal();
    }
    return next;
  }

 protected:
  void check_inputs(const Vec& psi, const Vec& state, const Vec& action) const {
    require(psi.size() == param_space().dim(),
            id() + ": psi dimension mismatch");
    require(state.size() == state_dim(), id() + ": state dimension mismatch");
    require(action.size() == action_dim(),
            id() + ": action dimension mismatch");
    require_finite(psi, id() + ": psi");
    require_finite(state, id() + ": state");
    require_finite(action, id() + ": action");
    require_domain(param_space().contains(psi),
                   id() + ": psi outside the parameter space");
  }
};

// Executes a policy for `window` steps. Dynamics run on `env_dynamics`
// while the policy observes (and the trajectory records) `env_perceived`;
// pass the same grid for both when simulating an idealized world.
inline Trajectory rollout(const Simulator& sim, const PolicyFn& policy,
                          const Vec& psi, const ResidualFidelity& phi,
                          const EnvGrid& env_dynamics,
                          const EnvGrid& env_perceived, int window,
                          const NoiseSpec& noise, std::uint64_t seed) {
  require(window > 0, "rollout: window must be positive");
  env_dynamics.validate();
  env_perceived.validate();
  Rng rng(derive_seed(seed, "rollout"));

  Trajectory traj;
  traj.seed = seed;
  traj.env = env_perceived;
  traj.states.resize(window + 1, sim.state_dim());
  traj.actions.resize(window, sim.action_dim());

  Vec s = sim.initial_state();
  traj.states.row(0) = s.transpose();
  for (int t = 0; t < window; ++t) {
    Vec patch = env_perceived.local_patch(s.size() >= 2 ? s[0] : 0.0,
                                          s.size() >= 2 ? s[1] : 0.0);
    Vec a = policy(s, patch);
    require(a.size() == sim.action_dim(),
            "rollout: policy returned wrong action dimension");
    require_finite(a, "rollout: policy action");
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      if (a[i] < -1.0 || a[i] > 1.0) {
        a[i] = std::clamp(a[i], -1.0, 1.0);
        ++traj.clamp_warnings;
      }
    }
    s = sim.step(psi, phi, s, a, env_dynamics, noise, rng);
    traj.actions.row(t) = a.transpose();
    traj.states.row(t + 1) = s.transpose();
  }
  return traj;
}

inline Trajectory rollout(const Simulator& sim, const PolicyFn& policy,
                          const Vec& psi, const ResidualFidelity& phi,
                          const EnvGrid& env, int window,
                          const NoiseSpec& noise, std::uint64_t seed) {
  return rollout(sim, policy, psi, phi, env, env, window, noise, seed);
}

}  // namespace nfc
