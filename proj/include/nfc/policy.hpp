#pragma once

// Control-side building blocks for the adaptation loop: a reward
// specification for goal-reaching missions, a tanh-squashed Gaussian policy
// over wheel commands, the hallucination policy that emits posterior
// levers, an episode runner that records what the policy-gradient update
// needs, and the mission metrics reported after a run.

#include "nfc/common.hpp"
#include "nfc/grid.hpp"
#include "nfc/nn.hpp"
#include "nfc/rng.hpp"
#include "nfc/sim.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace nfc {

// ---------------------------------------------------------------------------
// Reward
// ---------------------------------------------------------------------------

// Goal-reaching shaping: progress toward the goal, heading alignment, and an
// action-smoothness penalty, discounted by gamma over a fixed horizon.
struct RewardSpec {
  Eigen::Vector2d goal{3.0, 0.0};
  double progress_weight = 1.0;
  double heading_weight = 0.1;
  double smoothness_weight = 0.05;
  double gamma = 0.99;
  int horizon = 50;
  double goal_tolerance = 0.3;  // success radius, meters

  void validate() const {
    require(gamma >= 0.0 && gamma < 1.0, "RewardSpec: gamma outside [0, 1)");
    require(progress_weight >= 0.0 && heading_weight >= 0.0 &&
                smoothness_weight >= 0.0,
            "RewardSpec: weights must be non-negative");
    require(horizon >= 1, "RewardSpec: horizon < 1");
    require(goal_tolerance > 0.0, "RewardSpec: goal tolerance <= 0");
  }
};

// Single-step reward. States carry planar position in the first two
// dimensions and, when present, heading in the third.
inline double step_reward(const RewardSpec& spec, const Vec& s,
                          const Vec& s_next, const Vec& a,
                          const Vec& a_prev) {
  require(s.size() >= 2 && s_next.size() >= 2,
          "step_reward: state needs a planar position");
  Eigen::Vector2d p(s[0], s[1]);
  Eigen::Vector2d pn(s_next[0], s_next[1]);
  double r = spec.progress_weight *
             ((spec.goal - p).norm() - (spec.goal - pn).norm());
  if (s.size() >= 3 && spec.heading_weight > 0.0) {
    Eigen::Vector2d to_goal = spec.goal - p;
    if (to_goal.norm() > 1e-9) {
      double bearing = std::atan2(to_goal[1], to_goal[0]);
      r += spec.heading_weight * std::cos(bearing - s[2]);
    }
  }
  r -= spec.smoothness_weight * (a - a_prev).squaredNorm();
  return r;
}

// Discounted return of an executed trajectory under the same shaping.
inline double episode_return(const RewardSpec& spec, const Trajectory& traj) {
  const int steps = traj.window();
  double ret = 0.0;
  double g = 1.0;
  Vec a_prev = Vec::Zero(traj.actions.cols());
  for (int t = 0; t < steps; ++t) {
    Vec a = traj.actions.row(t).transpose();
    ret += g * step_reward(spec, traj.states.row(t).transpose(),
                           traj.states.row(t + 1).transpose(), a, a_prev);
    a_prev = a;
    g *= spec.gamma;
  }
  return ret;
}

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

namespace detail {

// Shared tanh-squashed Gaussian head: actions are tanh(u) with
// u ~ N(mean(x), exp(log_std)^2). The exploration std is held fixed; only
// the mean network trains, which keeps the surrogate update simple.
struct SquashedGaussian {
  Mlp net;
  Vec log_std;
  int in_dim = 0;
  int out_dim = 0;

  Vec mean_u(const Vec& in, Mlp::Cache* cache = nullptr) const {
    require(in.size() == in_dim, "policy: input size mismatch");
    return net.forward(in, cache);
  }

  Vec sample_u(const Vec& in, Rng& rng) const {
    return mean_u(in) +
           (log_std.array().exp() * rng.normal_vec(out_dim).array()).matrix();
  }

  // Log density of a pre-squash sample under the current mean.
  double log_prob_u(const Vec& in, const Vec& u) const {
    Vec m = mean_u(in);
    double lp = 0.0;
    for (int d = 0; d < out_dim; ++d) {
      double sd = std::exp(log_std[d]);
      double z = (u[d] - m[d]) / sd;
      lp += -0.5 * z * z - log_std[d] - 0.5 * std::log(2.0 * std::numbers::pi);
    }
    return lp;
  }

  void init(int in, int out, const std::vector<int>& hidden, double log_std0,
            std::uint64_t seed) {
    in_dim = in;
    out_dim = out;
    std::vector<int> sizes;
    sizes.push_back(in);
    for (int h : hidden) sizes.push_back(h);
    sizes.push_back(out);
    Rng rng(derive_seed(seed, "policy_init"));
    // Zero-initialized head: the squashed output starts exactly at zero.
    net.init(sizes, rng, /*zero_last=*/true, Act::Tanh);
    log_std = Vec::Constant(out, log_std0);
  }

  void collect(std::vector<TensorRef>& out) { net.collect(out); }
};

}  // namespace detail

// Driving policy: state plus the 3x3 local terrain patch in, bounded wheel
// commands out.
struct Policy {
  detail::SquashedGaussian head;
  int state_dim = 0;
  int action_dim = 0;
  int patch_dim = 9;
  int version = 0;

  Vec assemble_input(const Vec& state, const Vec& patch) const {
    require(state.size() == state_dim, "Policy: state size mismatch");
    require(patch.size() == patch_dim, "Policy: patch size mismatch");
    Vec in(state_dim + patch_dim);
    in << state, patch;
    return in;
  }

  // Deterministic action used for evaluation and mission execution.
  Vec act(const Vec& state, const Vec& patch) const {
    return head.mean_u(assemble_input(state, patch)).array().tanh().matrix();
  }

  PolicyFn as_policy_fn() const {
    return [this](const Vec& state, const Vec& patch) {
      return act(state, patch);
    };
  }
};

inline Policy make_policy(int state_dim, int action_dim,
                          const std::vector<int>& hidden, std::uint64_t seed) {
  require(state_dim >= 1 && action_dim >= 1, "make_policy: empty dimensions");
  Policy p;
  p.state_dim = state_dim;
  p.action_dim = action_dim;
  p.head.init(state_dim + p.patch_dim, action_dim, hidden, -0.7, seed);
  return p;
}

// Hallucination policy: emits the bounded lever vector eta for the
// posterior dimensions (psi and delta_s) plus one scalar lever for the
// environment-residual sampling noise. Conditions on state only.
struct HallucinationPolicy {
  detail::SquashedGaussian head;
  int state_dim = 0;
  int lever_dim = 0;

  // Deterministic levers in [-1, 1].
  Vec levers(const Vec& state) const {
    return head.mean_u(state).array().tanh().matrix();
  }

  Vec levers_from_u(const Vec& u) const { return u.array().tanh().matrix(); }
};

inline HallucinationPolicy make_hallucination_policy(
    int state_dim, int lever_dim, const std::vector<int>& hidden,
    std::uint64_t seed) {
  require(state_dim >= 1 && lever_dim >= 1,
          "make_hallucination_policy: empty dimensions");
  HallucinationPolicy p;
  p.state_dim = state_dim;
  p.lever_dim = lever_dim;
  p.head.init(state_dim, lever_dim, hidden, -0.5, seed);
  return p;
}

// ---------------------------------------------------------------------------
// Episode runner
// ---------------------------------------------------------------------------

// True when the planar position is inside the grid's coverage. Computed
// from raw (unclamped) grid coordinates.
inline bool grid_covers(const EnvGrid& g, double x, double y) {
  double gc = (x - g.origin[0]) / g.resolution;
  double gr = (y - g.origin[1]) / g.resolution;
  return gc >= 0.0 && gc <= double(g.cols() - 1) && gr >= 0.0 &&
         gr <= double(g.rows() - 1);
}

// One policy episode with everything the surrogate update needs: the
// trajectory itself, per-step network inputs, pre-squash action samples,
// and rewards. Leaving the terrain or producing a non-finite state is a
// failure and terminates the episode early.
struct EpisodeRollout {
  Trajectory traj;
  Mat inputs;   // steps x (state_dim + patch_dim)
  Mat us;       // steps x action_dim, pre-squash
  Vec rewards;  // steps
  int steps = 0;
  double ret = 0.0;  // discounted
  bool failed = false;
};

inline EpisodeRollout run_policy_episode(const Simulator& sim, const Vec& psi,
                                         const ResidualFidelity& phi,
                                         const EnvGrid& env,
                                         const Policy& policy,
                                         const RewardSpec& reward,
                                         const NoiseSpec& noise,
                                         std::uint64_t seed, bool stochastic) {
  reward.validate();
  env.validate();
  require(policy.state_dim == sim.state_dim(),
          "run_policy_episode: policy state width mismatch");
  require(policy.action_dim == sim.action_dim(),
          "run_policy_episode: policy action width mismatch");
  Rng rng(derive_seed(seed, "policy_episode"));

  const int T = reward.horizon;
  EpisodeRollout ep;
  ep.traj.seed = seed;
  ep.traj.env = env;
  ep.traj.states.resize(T + 1, sim.state_dim());
  ep.traj.actions.resize(T, sim.action_dim());
  ep.inputs.resize(T, policy.state_dim + policy.patch_dim);
  ep.us.resize(T, policy.action_dim);
  ep.rewards.resize(T);

  Vec s = sim.initial_state();
  ep.traj.states.row(0) = s.transpose();
  Vec a_prev = Vec::Zero(sim.action_dim());
  double g = 1.0;
  for (int t = 0; t < T; ++t) {
    Vec patch = env.local_patch(s[0], s[1]);
    Vec in = policy.assemble_input(s, patch);
    Vec u = stochastic ? policy.head.sample_u(in, rng) : policy.head.mean_u(in);
    Vec a = u.array().tanh().matrix();
    Vec s_next = sim.step(psi, phi, s, a, env, noise, rng);

    ep.inputs.row(t) = in.transpose();
    ep.us.row(t) = u.transpose();
    ep.traj.actions.row(t) = a.transpose();
    ep.traj.states.row(t + 1) = s_next.transpose();

    if (!s_next.allFinite() || !grid_covers(env, s_next[0], s_next[1])) {
      ep.failed = true;
      ep.rewards[t] = 0.0;
      ep.steps = t + 1;
      break;
    }
    double r = step_reward(reward, s, s_next, a, a_prev);
    ep.rewards[t] = r;
    ep.ret += g * r;
    g *= reward.gamma;
    a_prev = a;
    s = s_next;
    ep.steps = t + 1;
  }
  // Trim to the executed prefix so the trajectory stays valid.
  ep.traj.states.conservativeResize(ep.steps + 1, Eigen::NoChange);
  ep.traj.actions.conservativeResize(ep.steps, Eigen::NoChange);
  ep.inputs.conservativeResize(ep.steps, Eigen::NoChange);
  ep.us.conservativeResize(ep.steps, Eigen::NoChange);
  ep.rewards.conservativeResize(ep.steps);
  return ep;
}

// ---------------------------------------------------------------------------
// Clipped-surrogate update
// ---------------------------------------------------------------------------

// One record per step across the collected batch.
struct SurrogateBatch {
  Mat inputs;      // n x in_dim
  Mat us;          // n x out_dim
  Vec advantages;  // n, episode advantage broadcast to its steps
  Vec old_logp;    // n

  int size() const { return static_cast<int>(inputs.rows()); }
};

// A few epochs of clipped-surrogate gradient ascent on the head's mean
// network. Returns the final surrogate value (for diagnostics).
inline double clipped_surrogate_update(detail::SquashedGaussian& head,
                                       const SurrogateBatch& batch,
                                       double clip, double lr, int epochs,
                                       std::uint64_t seed) {
  require(batch.size() >= 1, "clipped_surrogate_update: empty batch");
  require(clip > 0.0 && clip < 1.0,
          "clipped_surrogate_update: clip outside (0, 1)");
  const int n = batch.size();

  std::vector<TensorRef> params;
  head.collect(params);
  Adam optimizer(params, lr);
  Rng rng(derive_seed(seed, "surrogate"));

  Vec inv_var = (-2.0 * head.log_std.array()).exp().matrix();
  double last_objective = 0.0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    double objective = 0.0;
    for (int i = 0; i < n; ++i) {
      Vec in = batch.inputs.row(i).transpose();
      Vec u = batch.us.row(i).transpose();
      Mlp::Cache cache;
      Vec m = head.net.forward(in, &cache);
      double logp = 0.0;
      for (int d = 0; d < head.out_dim; ++d) {
        double sd = std::exp(head.log_std[d]);
        double z = (u[d] - m[d]) / sd;
        logp += -0.5 * z * z - head.log_std[d] -
                0.5 * std::log(2.0 * std::numbers::pi);
      }
      double ratio = std::exp(logp - batch.old_logp[i]);
      double adv = batch.advantages[i];
      double unclipped = ratio * adv;
      double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip) * adv;
      objective += std::min(unclipped, clipped);

      // Gradient flows only where the unclipped branch is active.
      bool active = unclipped <= clipped + 1e-300;
      if (active) {
        // d(objective)/d(mean) = adv * ratio * (u - mean) / sd^2; ascend.
        Vec dm = (adv * ratio / double(n)) *
                 ((u - m).array() * inv_var.array()).matrix();
        head.net.backward(cache, -dm);  // optimizer minimizes
      }
    }
    optimizer.step();
    last_objective = objective / double(n);
    if (!std::isfinite(last_objective))
      throw NumericalFailure("clipped_surrogate_update: non-finite objective");
  }
  (void)rng;
  return last_objective;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// Mission metrics in the executed world: success, path efficiency, and the
// finite-difference jerk measures of ride quality.
struct MissionMetrics {
  bool success = false;
  double trajectory_ratio = 0.0;   // path length over straight-line distance
  double orientation_jerk = 0.0;   // mean |d2 omega / dt2|
  double position_jerk = 0.0;      // mean |d a / dt|
  double final_distance = 0.0;     // closest approach to the goal
};

inline MissionMetrics mission_metrics(const Trajectory& traj,
                                      const RewardSpec& reward, double dt) {
  require(traj.states.cols() >= 2, "mission_metrics: planar states required");
  require(dt > 0.0, "mission_metrics: dt <= 0");
  const int n = static_cast<int>(traj.states.rows());
  require(n >= 2, "mission_metrics: trajectory too short");

  MissionMetrics m;
  double path = 0.0;
  double closest = std::numeric_limits<double>::infinity();
  for (int t = 0; t < n; ++t) {
    Eigen::Vector2d p(traj.states(t, 0), traj.states(t, 1));
    closest = std::min(closest, (reward.goal - p).norm());
    if (t > 0) {
      Eigen::Vector2d q(traj.states(t - 1, 0), traj.states(t - 1, 1));
      path += (p - q).norm();
    }
  }
  m.final_distance = closest;
  m.success = closest <= reward.goal_tolerance;
  Eigen::Vector2d start(traj.states(0, 0), traj.states(0, 1));
  double straight = (reward.goal - start).norm();
  m.trajectory_ratio = straight > 1e-9 ? path / straight : 1.0;

  // Angular rate: the fifth state dimension when present (body rate),
  // otherwise finite differences of the heading column.
  std::vector<double> omega;
  if (traj.states.cols() >= 5) {
    for (int t = 0; t < n; ++t) omega.push_back(traj.states(t, 4));
  } else if (traj.states.cols() >= 3) {
    for (int t = 0; t + 1 < n; ++t)
      omega.push_back((traj.states(t + 1, 2) - traj.states(t, 2)) / dt);
  }
  if (omega.size() >= 3) {
    double acc = 0.0;
    int cnt = 0;
    for (std::size_t t = 1; t + 1 < omega.size(); ++t) {
      acc += std::abs(omega[t + 1] - 2.0 * omega[t] + omega[t - 1]) / (dt * dt);
      ++cnt;
    }
    m.orientation_jerk = acc / double(cnt);
  }

  if (n >= 4) {
    // Velocity and acceleration of the planar position by differences.
    std::vector<Eigen::Vector2d> accel;
    for (int t = 0; t + 2 < n; ++t) {
      Eigen::Vector2d p0(traj.states(t, 0), traj.states(t, 1));
      Eigen::Vector2d p1(traj.states(t + 1, 0), traj.states(t + 1, 1));
      Eigen::Vector2d p2(traj.states(t + 2, 0), traj.states(t + 2, 1));
      accel.push_back((p2 - 2.0 * p1 + p0) / (dt * dt));
    }
    double acc = 0.0;
    int cnt = 0;
    for (std::size_t t = 0; t + 1 < accel.size(); ++t) {
      acc += (accel[t + 1] - accel[t]).norm() / dt;
      ++cnt;
    }
    if (cnt > 0) m.position_jerk = acc / double(cnt);
  }
  return m;
}

// Min-max normalization of returns over a pooled run set. Degenerate pools
// (all values equal) map to 0.5 and are flagged instead of dividing by zero.
struct NormalizedReturns {
  Vec values;
  bool degenerate = false;
};

inline NormalizedReturns normalized_return(const Vec& raw) {
  require(raw.size() >= 1, "normalized_return: empty input");
  require_finite(raw, "normalized_return: input");
  NormalizedReturns out;
  double lo = raw.minCoeff();
  double hi = raw.maxCoeff();
  if (hi - lo < 1e-12) {
    out.values = Vec::Constant(raw.size(), 0.5);
    out.degenerate = true;
    return out;
  }
  out.values = ((raw.array() - lo) / (hi - lo)).matrix();
  return out;
}

}  // namespace nfc
