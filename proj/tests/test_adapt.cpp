// Tests for the adaptation layer: reward shaping, squashed-Gaussian
// policies, hallucinated posterior sampling, terrain reconstruction, the
// clipped-surrogate optimizer with its guards, and the anomaly-gated
// adaptation loop end to end on the differential-drive simulator.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <vector>

#include "nfc/adapt.hpp"
#include "nfc/anomaly.hpp"
#include "nfc/policy.hpp"
#include "nfc/sim_diffdrive.hpp"
#include "support/test_util.hpp"

using namespace nfc;
using namespace nfc::test;
using Catch::Approx;

namespace {

EnvGrid flat_env(int n = 21, double res = 0.5) {
  return make_terrain(TerrainKind::Flat, n, n, res, 0.0, 1);
}

RewardSpec default_reward(double goal_x = 2.0, int horizon = 40) {
  RewardSpec r;
  r.goal = {goal_x, 0.0};
  r.progress_weight = 1.0;
  r.heading_weight = 0.05;
  r.smoothness_weight = 0.01;
  r.gamma = 0.99;
  r.horizon = horizon;
  r.goal_tolerance = 0.3;
  return r;
}

// Synthetic posterior sample set with the stats implied by its samples.
PosteriorSampleSet make_stats(int psi_dim, int ds_dim, int de_rows,
                              int de_cols, const Vec& center, double spread,
                              std::uint64_t seed) {
  PosteriorSampleSet set;
  set.layout =
      TargetLayout{.psi_dim = psi_dim, .ds_dim = ds_dim, .de_rows = de_rows,
                   .de_cols = de_cols};
  const int total = set.layout.total();
  REQUIRE(center.size() == total);
  Rng rng(seed);
  set.samples.resize(160, total);
  for (int i = 0; i < set.samples.rows(); ++i)
    set.samples.row(i) =
        (center + spread * rng.normal_vec(total)).transpose();
  set.source = "diffusion";
  set.finalize();
  return set;
}

// A hallucination policy whose deterministic levers are exactly `value` in
// every dimension (tanh saturates to +-1.0 in double precision at |20|).
HallucinationPolicy constant_lever_policy(int state_dim, int lever_dim,
                                          double pre_squash) {
  HallucinationPolicy p =
      make_hallucination_policy(state_dim, lever_dim, {8}, 7);
  p.head.net.layers.back().b.setConstant(pre_squash);
  return p;
}

bool mlp_equal(const Mlp& a, const Mlp& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (!(a.layers[i].W == b.layers[i].W)) return false;
    if (!(a.layers[i].b == b.layers[i].b)) return false;
  }
  return true;
}

bool policies_equal(const Policy& a, const Policy& b) {
  return a.version == b.version && mlp_equal(a.head.net, b.head.net);
}

// Straight-line trajectory at constant speed along +x on a flat grid.
Trajectory straight_line_traj(int steps, double step_x, const EnvGrid& env) {
  Trajectory t;
  t.env = env;
  t.states.resize(steps + 1, 5);
  t.actions = Mat::Constant(steps, 2, 0.5);
  for (int i = 0; i <= steps; ++i) {
    double v = step_x / 0.02;
    t.states.row(i) << i * step_x, 0.0, 0.0, v, 0.0;
  }
  return t;
}

// Small labeled detector-training set: normal pairs jitter the nominal
// parameters slightly; anomalous pairs break the left wheel.
std::vector<AnomalyPair> detector_pairs(const Simulator& sim,
                                        const Policy& driver,
                                        const EnvGrid& env,
                                        const NoiseSpec& noise, int rf,
                                        int horizon) {
  std::vector<AnomalyPair> pairs;
  Vec nominal = sim.nominal_params();
  Rng jitter(424242);
  for (int s = 0; s < 12; ++s) {
    std::uint64_t seed = 9000 + std::uint64_t(s);
    Trajectory ctx = rollout(sim, driver.as_policy_fn(), nominal,
                             ResidualFidelity::zero(), env, horizon, noise,
                             seed);
    AnomalyPair normal;
    Vec near = nominal;
    for (int d = 0; d < near.size(); ++d)
      near[d] *= 1.0 + 0.02 * jitter.normal();
    sim.param_space().clamp(near);
    normal.context = tail_window(ctx, rf);
    normal.target = tail_window(
        rollout(sim, driver.as_policy_fn(), near, ResidualFidelity::zero(),
                env, horizon, noise, seed),
        rf);
    normal.anomalous = false;
    pairs.push_back(normal);
    if (s % 2 == 0) {
      Vec broken = nominal;
      broken[1] = 0.0;  // left wheel gain
      AnomalyPair anom;
      anom.context = tail_window(ctx, rf);
      anom.target = tail_window(
          rollout(sim, driver.as_policy_fn(), broken,
                  ResidualFidelity::zero(), env, horizon, noise, seed),
          rf);
      anom.anomalous = true;
      pairs.push_back(anom);
    }
  }
  return pairs;
}

// A driving policy biased to roll forward, so wheel faults actually show up
// in the executed trajectories.
Policy forward_driver(const Simulator& sim, double bias = 2.0) {
  Policy p = make_policy(sim.state_dim(), sim.action_dim(), {16}, 11);
  p.head.net.layers.back().b.setConstant(bias);
  return p;
}

// Contrastively trained detector with a calibrated threshold, shared by the
// adaptation-loop tests.
AnomalyDetector trained_detector(const std::vector<AnomalyPair>& pairs,
                                 std::uint64_t seed) {
  TcnConfig tc;
  tc.channels = {8, 8};
  tc.kernel_width = 3;
  tc.embed_dim = 8;
  AnomalyDetector det = make_detector(tc, 0.33, pairs, seed);
  TrainOptions topt;
  topt.epochs = 8;
  topt.batch = 8;
  topt.lr = 1e-3;
  topt.seed = 73;
  train_detector(det, pairs, topt);
  calibrate_threshold(det, pairs);
  return det;
}

}  // namespace

TEST_CASE("reward spec validates its ranges") {
  RewardSpec r = default_reward();
  REQUIRE_NOTHROW(r.validate());
  RewardSpec bad = r;
  bad.gamma = 1.0;
  REQUIRE_THROWS_AS(bad.validate(), ContractViolation);
  bad = r;
  bad.progress_weight = -0.1;
  REQUIRE_THROWS_AS(bad.validate(), ContractViolation);
  bad = r;
  bad.horizon = 0;
  REQUIRE_THROWS_AS(bad.validate(), ContractViolation);
}

TEST_CASE("step reward decomposes into progress, heading, and smoothness") {
  RewardSpec r;
  r.goal = {3.0, 0.0};
  r.progress_weight = 2.0;
  r.heading_weight = 0.5;
  r.smoothness_weight = 0.25;

  Vec s(5), sn(5);
  s << 0.0, 0.0, 0.0, 0.0, 0.0;
  sn << 1.0, 0.0, 0.0, 0.0, 0.0;
  Vec a(2), a_prev(2);
  a << 0.6, 0.2;
  a_prev << 0.0, 0.0;

  // Progress: |goal| goes 3 -> 2; heading is exactly aligned (cos = 1);
  // smoothness penalizes |a - a_prev|^2 = 0.4.
  double expected = 2.0 * (3.0 - 2.0) + 0.5 * 1.0 - 0.25 * 0.4;
  REQUIRE(step_reward(r, s, sn, a, a_prev) == Approx(expected).margin(1e-12));

  // Heading opposite to the goal flips the cosine's sign.
  Vec s_back = s;
  s_back[2] = std::numbers::pi;
  double expected_back = 2.0 * (3.0 - 2.0) - 0.5 - 0.25 * 0.4;
  REQUIRE(step_reward(r, s_back, sn, a, a_prev) ==
          Approx(expected_back).margin(1e-10));
}

TEST_CASE("episode return is the discounted sum of step rewards") {
  EnvGrid env = flat_env();
  RewardSpec r = default_reward();
  Trajectory t = straight_line_traj(6, 0.2, env);

  double expected = 0.0;
  double g = 1.0;
  Vec a_prev = Vec::Zero(2);
  for (int k = 0; k < 6; ++k) {
    Vec a = t.actions.row(k).transpose();
    expected += g * step_reward(r, t.states.row(k).transpose(),
                                t.states.row(k + 1).transpose(), a, a_prev);
    a_prev = a;
    g *= r.gamma;
  }
  REQUIRE(episode_return(r, t) == Approx(expected).margin(1e-12));
}

TEST_CASE("normalized returns fold a run set into [0, 1]") {
  SECTION("two-point example hits the endpoints") {
    Vec raw(2);
    raw << 0.0, 10.0;
    NormalizedReturns n = normalized_return(raw);
    REQUIRE_FALSE(n.degenerate);
    REQUIRE(n.values[0] == 0.0);
    REQUIRE(n.values[1] == 1.0);
  }
  SECTION("order is preserved") {
    Vec raw(5);
    raw << 3.0, -1.0, 7.5, 2.0, 7.4;
    NormalizedReturns n = normalized_return(raw);
    int arg_raw, arg_norm;
    raw.maxCoeff(&arg_raw);
    n.values.maxCoeff(&arg_norm);
    REQUIRE(arg_raw == arg_norm);
    for (int i = 0; i < raw.size(); ++i)
      for (int j = 0; j < raw.size(); ++j)
        if (raw[i] < raw[j]) REQUIRE(n.values[i] < n.values[j]);
  }
  SECTION("affine rescaling of the raw values changes nothing") {
    Vec raw(6);
    raw << 0.3, -2.0, 5.0, 1.1, 0.0, 4.2;
    Vec scaled = (3.7 * raw.array() + 11.0).matrix();
    NormalizedReturns a = normalized_return(raw);
    NormalizedReturns b = normalized_return(scaled);
    REQUIRE((a.values - b.values).cwiseAbs().maxCoeff() < 1e-12);
  }
  SECTION("identical values collapse to flagged midpoints") {
    NormalizedReturns n = normalized_return(Vec::Constant(4, 2.5));
    REQUIRE(n.degenerate);
    REQUIRE((n.values.array() == 0.5).all());
  }
  SECTION("non-finite input is rejected") {
    Vec raw(2);
    raw << 1.0, std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(normalized_return(raw), DomainError);
  }
}

TEST_CASE("mission metrics report success, efficiency, and ride quality") {
  EnvGrid env = flat_env();
  RewardSpec r = default_reward(2.0);
  const double dt = 0.02;

  SECTION("straight constant-speed run is maximally smooth") {
    // 12 steps of 0.2 m pass within goal tolerance of (2, 0).
    Trajectory t = straight_line_traj(12, 0.2, env);
    MissionMetrics m = mission_metrics(t, r, dt);
    REQUIRE(m.success);
    REQUIRE(m.final_distance == Approx(0.0).margin(1e-12));
    REQUIRE(m.trajectory_ratio == Approx(2.4 / 2.0).epsilon(1e-9));
    REQUIRE(m.orientation_jerk == Approx(0.0).margin(1e-9));
    REQUIRE(m.position_jerk == Approx(0.0).margin(1e-9));
  }

  SECTION("a velocity kink shows up in the position jerk") {
    Trajectory t = straight_line_traj(12, 0.2, env);
    t.states(6, 1) += 0.05;  // one lateral bump
    MissionMetrics m = mission_metrics(t, r, dt);
    REQUIRE(m.position_jerk > 1.0);
  }

  SECTION("orientation jerk matches a hand-computed second difference") {
    Trajectory t = straight_line_traj(3, 0.2, env);
    t.states(0, 4) = 0.0;
    t.states(1, 4) = 1.0;
    t.states(2, 4) = 0.0;
    t.states(3, 4) = 0.0;
    // Second differences of {0, 1, 0, 0} are -2 and 1.
    double expected = 0.5 * (2.0 + 1.0) / (dt * dt);
    MissionMetrics m = mission_metrics(t, r, dt);
    REQUIRE(m.orientation_jerk == Approx(expected).epsilon(1e-12));
  }

  SECTION("short-of-goal run is unsuccessful with ratio below one") {
    Trajectory t = straight_line_traj(4, 0.2, env);
    MissionMetrics m = mission_metrics(t, r, dt);
    REQUIRE_FALSE(m.success);
    REQUIRE(m.final_distance == Approx(1.2).margin(1e-12));
    REQUIRE(m.trajectory_ratio == Approx(0.8 / 2.0).epsilon(1e-9));
  }
}

TEST_CASE("policies start at zero and stay inside the action bounds") {
  DiffDriveSim sim;
  Policy p = make_policy(sim.state_dim(), sim.action_dim(), {16, 16}, 3);

  SECTION("zero-initialized head acts as the zero action exactly") {
    Vec state = Vec::Zero(5);
    Vec patch = Vec::Zero(9);
    REQUIRE((p.act(state, patch).array() == 0.0).all());
    REQUIRE(p.version == 0);
  }

  SECTION("actions are bounded for arbitrary inputs") {
    Rng rng(5);
    Policy biased = p;
    biased.head.net.layers.back().b.setConstant(4.0);
    for (int i = 0; i < 20; ++i) {
      Vec a = biased.act(rng.normal_vec(5) * 3.0, rng.normal_vec(9));
      REQUIRE((a.array().abs() <= 1.0).all());
      REQUIRE(a == biased.head
                       .mean_u(biased.assemble_input(Vec::Zero(5),
                                                     Vec::Zero(9)))
                       .array()
                       .tanh()
                       .matrix());
      break;  // the tanh identity needs matching inputs; checked once below
    }
    Vec s = rng.normal_vec(5);
    Vec patch = rng.normal_vec(9);
    Vec u = biased.head.mean_u(biased.assemble_input(s, patch));
    REQUIRE(biased.act(s, patch) == u.array().tanh().matrix());
  }

  SECTION("log probability matches the diagonal Gaussian formula") {
    HallucinationPolicy h = make_hallucination_policy(3, 4, {8}, 9);
    h.head.net.layers.back().b << 0.3, -0.2, 0.1, 0.0;
    Vec state(3);
    state << 0.4, -1.0, 0.2;
    Vec u(4);
    u << 0.5, -0.5, 0.2, 0.9;
    Vec m = h.head.mean_u(state);
    double expected = 0.0;
    for (int d = 0; d < 4; ++d) {
      double sd = std::exp(h.head.log_std[d]);
      double z = (u[d] - m[d]) / sd;
      expected += -0.5 * z * z - h.head.log_std[d] -
                  0.5 * std::log(2.0 * std::numbers::pi);
    }
    REQUIRE(h.head.log_prob_u(state, u) == Approx(expected).epsilon(1e-12));
  }

  SECTION("pre-squash sampling is seed-deterministic") {
    Rng r1(77), r2(77);
    Vec in = Vec::Zero(5 + 9);
    REQUIRE(p.head.sample_u(in, r1) == p.head.sample_u(in, r2));
  }

  SECTION("dimension mismatches are rejected") {
    REQUIRE_THROWS_AS(p.act(Vec::Zero(4), Vec::Zero(9)), ContractViolation);
    REQUIRE_THROWS_AS(p.act(Vec::Zero(5), Vec::Zero(4)), ContractViolation);
    REQUIRE_THROWS_AS(make_policy(0, 2, {8}, 1), ContractViolation);
  }
}

TEST_CASE("policy episodes record rollout data and detect failures") {
  DiffDriveSim sim;
  EnvGrid env = flat_env();
  RewardSpec reward = default_reward(2.0, 30);
  NoiseSpec noise;
  Policy p = make_policy(sim.state_dim(), sim.action_dim(), {16}, 21);

  SECTION("full-horizon episode has consistent shapes and return") {
    EpisodeRollout ep = run_policy_episode(sim, sim.nominal_params(),
                                           ResidualFidelity::zero(), env, p,
                                           reward, noise, 303, true);
    REQUIRE_FALSE(ep.failed);
    REQUIRE(ep.steps == reward.horizon);
    REQUIRE(ep.traj.states.rows() == reward.horizon + 1);
    REQUIRE(ep.inputs.rows() == reward.horizon);
    REQUIRE(ep.us.rows() == reward.horizon);
    double expected = 0.0;
    double g = 1.0;
    for (int t = 0; t < ep.steps; ++t) {
      expected += g * ep.rewards[t];
      g *= reward.gamma;
    }
    REQUIRE(ep.ret == Approx(expected).margin(1e-12));
    // Recorded actions are the squashed pre-squash samples.
    for (int t = 0; t < ep.steps; ++t)
      REQUIRE(ep.traj.actions.row(t).transpose() ==
              Vec(ep.us.row(t).transpose().array().tanh().matrix()));
  }

  SECTION("episodes are bitwise reproducible under a fixed seed") {
    EpisodeRollout a = run_policy_episode(sim, sim.nominal_params(),
                                          ResidualFidelity::zero(), env, p,
                                          reward, noise, 404, true);
    EpisodeRollout b = run_policy_episode(sim, sim.nominal_params(),
                                          ResidualFidelity::zero(), env, p,
                                          reward, noise, 404, true);
    REQUIRE(a.traj.states == b.traj.states);
    REQUIRE(a.us == b.us);
    REQUIRE(a.ret == b.ret);
  }

  SECTION("leaving the terrain terminates the episode as a failure") {
    EnvGrid tiny = make_terrain(TerrainKind::Flat, 3, 3, 0.1, 0.0, 1);
    Policy driver = forward_driver(sim, 5.0);
    RewardSpec longrun = default_reward(2.0, 120);
    EpisodeRollout ep = run_policy_episode(sim, sim.nominal_params(),
                                           ResidualFidelity::zero(), tiny,
                                           driver, longrun, noise, 17, false);
    REQUIRE(ep.failed);
    REQUIRE(ep.steps < longrun.horizon);
    REQUIRE(ep.traj.states.rows() == ep.steps + 1);
  }
}

TEST_CASE("hallucinated samples track the posterior band") {
  Vec center(4);
  center << 5.0, 10.0, 1.0, 0.3;
  PosteriorSampleSet stats = make_stats(4, 0, 0, 0, center, 0.5, 33);
  Vec state = Vec::Zero(3);

  SECTION("zero levers return the posterior mean exactly") {
    HallucinationPolicy zero = make_hallucination_policy(3, 5, {8}, 2);
    Rng rng(1);
    HallucinatedSample hs = hallucinate_sample(stats, zero, state, rng);
    REQUIRE(hs.psi == Vec(stats.mean.head(4)));
    REQUIRE_FALSE(hs.phi.has_delta_s());
    REQUIRE_FALSE(hs.phi.has_delta_e());
  }

  SECTION("saturated levers land symmetrically at mean +- std") {
    HallucinationPolicy hi = constant_lever_policy(3, 5, 20.0);
    HallucinationPolicy lo = constant_lever_policy(3, 5, -20.0);
    Rng rng(2);
    HallucinatedSample up = hallucinate_sample(stats, hi, state, rng);
    HallucinatedSample dn = hallucinate_sample(stats, lo, state, rng);
    for (int d = 0; d < 4; ++d) {
      REQUIRE(up.psi[d] - dn.psi[d] ==
              Approx(2.0 * stats.std[d]).epsilon(1e-12));
      REQUIRE(up.psi[d] + dn.psi[d] ==
              Approx(2.0 * stats.mean[d]).epsilon(1e-12));
    }
  }

  SECTION("every lever keeps the draw inside the band") {
    HallucinationPolicy h = make_hallucination_policy(3, 5, {8}, 6);
    Rng weights(8);
    h.head.net.layers.back().b = weights.normal_vec(5);
    Rng rng(3);
    for (int i = 0; i < 10; ++i) {
      Vec s = rng.normal_vec(3);
      HallucinatedSample hs = hallucinate_sample(stats, h, s, rng);
      for (int d = 0; d < 4; ++d) {
        REQUIRE(hs.psi[d] >= stats.mean[d] - stats.std[d] - 1e-12);
        REQUIRE(hs.psi[d] <= stats.mean[d] + stats.std[d] + 1e-12);
      }
    }
  }

  SECTION("psi clamps into the parameter space") {
    ParamSpace box;
    box.names = {"a", "b", "c", "d"};
    box.lower = Vec::Constant(4, -100.0);
    box.upper = center.array() - 0.5;  // force the upper lever out of range
    HallucinateOptions opt;
    opt.clamp_space = &box;
    HallucinationPolicy hi = constant_lever_policy(3, 5, 20.0);
    Rng rng(4);
    HallucinatedSample hs = hallucinate_sample(stats, hi, state, rng, opt);
    REQUIRE(box.contains(hs.psi));
  }

  SECTION("delta_s levers mirror the psi treatment") {
    Vec c2(6);
    c2 << 1.0, 2.0, 0.1, -0.1, 0.05, 0.2;
    PosteriorSampleSet both = make_stats(2, 4, 0, 0, c2, 0.3, 44);
    HallucinationPolicy hi = constant_lever_policy(3, 7, 20.0);
    Rng rng(5);
    HallucinatedSample hs = hallucinate_sample(both, hi, state, rng);
    REQUIRE(hs.phi.has_delta_s());
    for (int d = 0; d < 4; ++d)
      REQUIRE(hs.phi.delta_s[d] ==
              Approx(both.mean[2 + d] + both.std[2 + d]).epsilon(1e-12));
    HallucinateOptions frozen;
    frozen.residual_fidelity = false;
    HallucinatedSample off = hallucinate_sample(both, hi, state, rng, frozen);
    REQUIRE_FALSE(off.phi.has_delta_s());
  }

  SECTION("lever width mismatches are rejected") {
    HallucinationPolicy wrong = make_hallucination_policy(3, 4, {8}, 2);
    Rng rng(6);
    REQUIRE_THROWS_AS(hallucinate_sample(stats, wrong, state, rng),
                      ContractViolation);
  }
}

TEST_CASE("the terrain-residual lever scales the diffusion head's spread") {
  // Tiny unconditional-ish score model over [psi | delta_e(2x2)]: untrained
  // nets sample the standardized prior bridge, so the residual slice spread
  // directly reflects the sampler's noise scaling.
  TargetLayout layout{.psi_dim = 1, .ds_dim = 0, .de_rows = 2, .de_cols = 2};
  DsmDataset data;
  Rng rng(91);
  data.targets.resize(40, layout.total());
  for (int i = 0; i < 40; ++i)
    data.targets.row(i) = rng.normal_vec(layout.total()).transpose();
  for (int i = 0; i < 40; ++i) {
    Trajectory t;
    t.states = Mat::Zero(2, 1);
    t.actions = Mat::Zero(1, 1);
    t.env = make_terrain(TerrainKind::Flat, 2, 2, 0.5, 0.0, 1);
    data.trajectories.push_back(t);
  }
  ScoreModelConfig cfg;
  cfg.layout = layout;
  cfg.cond_kind = CondKind::Identity;
  cfg.hidden = {16};
  ScoreModel model = make_score_model(cfg, data, 2024);

  PosteriorSampleSet stats =
      make_stats(1, 0, 2, 2, Vec::Zero(layout.total()), 0.4, 55);
  HallucinateOptions opt;
  opt.model = &model;
  opt.tau = &data.trajectories.front();
  opt.de_steps = 40;

  auto spread = [&](double lever_bias, std::uint64_t seed) {
    HallucinationPolicy h = constant_lever_policy(3, 2, lever_bias);
    Rng r(seed);
    std::vector<double> vals;
    for (int i = 0; i < 30; ++i) {
      HallucinatedSample hs = hallucinate_sample(stats, h, Vec::Zero(3), r,
                                                 opt);
      REQUIRE(hs.phi.has_delta_e());
      REQUIRE(hs.phi.delta_e.rows() == 2);
      REQUIRE(hs.phi.delta_e.cols() == 2);
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) vals.push_back(hs.phi.delta_e(a, b));
    }
    return std_of(vals);
  };

  double wide = spread(20.0, 101);   // |eta_last| = 1
  double narrow = spread(0.0, 102);  // |eta_last| = 0
  REQUIRE(wide > 0.5);
  REQUIRE(narrow < 0.25);
  REQUIRE(wide > 4.0 * narrow);
}

TEST_CASE("reconstructed terrains add residuals onto the perceived grid") {
  EnvGrid e = make_terrain(TerrainKind::Rough, 6, 6, 0.5, 0.2, 77);

  SECTION("zero residual reproduces the grid bitwise") {
    std::vector<Mat> deltas{Mat::Zero(6, 6)};
    std::vector<EnvGrid> out = reconstruct_envs(e, deltas);
    REQUIRE(out.size() == 1);
    REQUIRE(out[0].heights == e.heights);
    REQUIRE(out[0].resolution == e.resolution);
    REQUIRE(out[0].origin == e.origin);
  }

  SECTION("opposite residuals average back to the original") {
    Rng rng(5);
    Mat d(6, 6);
    for (int r = 0; r < 6; ++r) d.row(r) = rng.normal_vec(6).transpose();
    std::vector<EnvGrid> out = reconstruct_envs(e, {d, Mat(-d)});
    Mat avg = 0.5 * (out[0].heights + out[1].heights);
    REQUIRE((avg - e.heights).cwiseAbs().maxCoeff() < 1e-12);
  }

  SECTION("pairwise differences equal the residual differences") {
    Rng rng(9);
    std::vector<Mat> deltas;
    for (int i = 0; i < 8; ++i) {
      Mat d(6, 6);
      for (int r = 0; r < 6; ++r) d.row(r) = rng.normal_vec(6).transpose();
      deltas.push_back(d);
    }
    std::vector<EnvGrid> out = reconstruct_envs(e, deltas);
    REQUIRE(out.size() == 8);
    for (std::size_t i = 0; i < out.size(); ++i)
      for (std::size_t j = i + 1; j < out.size(); ++j) {
        double got =
            (out[i].heights - out[j].heights).cwiseAbs().maxCoeff();
        double expected =
            (deltas[i] - deltas[j]).cwiseAbs().maxCoeff();
        REQUIRE(got == Approx(expected).margin(1e-12));
        REQUIRE(got > 0.0);  // residuals drawn independently => distinct
      }
  }

  SECTION("coarse residuals are bilinearly upsampled first") {
    Mat coarse = Mat::Constant(2, 2, 0.25);
    std::vector<EnvGrid> out = reconstruct_envs(e, {coarse});
    REQUIRE((out[0].heights - (e.heights.array() + 0.25).matrix())
                .cwiseAbs()
                .maxCoeff() < 1e-12);
  }

  SECTION("empty residual grids are rejected") {
    REQUIRE_THROWS_AS(reconstruct_envs(e, {Mat()}), ContractViolation);
  }
}

TEST_CASE("sampled worlds stay inside the hallucination envelope") {
  Vec center(6);
  Vec nominal = DiffDriveSim().nominal_params();
  center = nominal;
  PosteriorSampleSet stats = make_stats(6, 0, 0, 0, center, 0.2, 66);
  EnvGrid env = flat_env();
  HallucinationPolicy h = make_hallucination_policy(5, 7, {8}, 30);

  WorldSampler sampler;
  sampler.stats = &stats;
  sampler.perceived = &env;
  sampler.initial_state = Vec::Zero(5);
  sampler.count = 8;

  std::vector<SampledWorld> worlds = sample_worlds(sampler, h, 99);
  REQUIRE(worlds.size() == 8);
  for (const auto& w : worlds) {
    for (int d = 0; d < 6; ++d) {
      REQUIRE(w.psi[d] >= stats.mean[d] - stats.std[d] - 1e-12);
      REQUIRE(w.psi[d] <= stats.mean[d] + stats.std[d] + 1e-12);
    }
    REQUIRE(w.env.heights == env.heights);
  }
  // Exploration noise differentiates the worlds.
  bool distinct = false;
  for (std::size_t i = 1; i < worlds.size(); ++i)
    if (worlds[i].psi != worlds[0].psi) distinct = true;
  REQUIRE(distinct);
  // Redrawing with the same seed is bitwise stable.
  std::vector<SampledWorld> again = sample_worlds(sampler, h, 99);
  for (std::size_t i = 0; i < worlds.size(); ++i)
    REQUIRE(worlds[i].psi == again[i].psi);

  WorldSampler bad;
  REQUIRE_THROWS_AS(sample_worlds(bad, h, 1), ContractViolation);
}

TEST_CASE("policy optimization honors its guards") {
  DiffDriveSim sim;
  EnvGrid env = flat_env();
  RewardSpec reward = default_reward(2.0, 30);
  Policy pi = make_policy(sim.state_dim(), sim.action_dim(), {16}, 41);
  HallucinationPolicy ph = make_hallucination_policy(5, 7, {8}, 42);

  std::vector<SampledWorld> nominal(1);
  nominal[0].psi = sim.nominal_params();
  nominal[0].env = env;

  SECTION("zero iterations return the inputs bitwise") {
    PolicyOptResult r = policy_optimize(sim, pi, ph, nominal, reward, 0, 7);
    REQUIRE_FALSE(r.reverted);
    REQUIRE_FALSE(r.no_signal);
    REQUIRE(policies_equal(r.policy, pi));
    REQUIRE(mlp_equal(r.hallu.head.net, ph.head.net));
  }

  SECTION("fine-tuning on the pretraining world never worsens evaluation") {
    PolicyOptOptions opt;
    opt.rollouts_per_world = 4;
    PolicyOptResult r = policy_optimize(sim, pi, ph, nominal, reward, 2, 8,
                                        opt);
    if (r.reverted) {
      REQUIRE(policies_equal(r.policy, pi));
    } else {
      REQUIRE(r.eval_after >=
              r.eval_before - 0.01 * std::abs(r.eval_before) - 1e-9);
    }
  }

  SECTION("hopeless worlds yield the no-signal flag and untouched inputs") {
    PolicyOptOptions opt;
    opt.noise.process_std = Vec::Constant(5, 1e9);  // every step exits the map
    PolicyOptResult r = policy_optimize(sim, pi, ph, nominal, reward, 3, 9,
                                        opt);
    REQUIRE(r.no_signal);
    REQUIRE(policies_equal(r.policy, pi));
    REQUIRE(mlp_equal(r.hallu.head.net, ph.head.net));
  }

  SECTION("an empty world list is rejected") {
    REQUIRE_THROWS_AS(
        policy_optimize(sim, pi, ph, {}, reward, 1, 1),
        ContractViolation);
  }
}

TEST_CASE("policy optimization improves returns in posterior worlds") {
  DiffDriveSim sim;
  EnvGrid env = make_terrain(TerrainKind::Flat, 41, 41, 0.5, 0.0, 1);
  // Progress-dominant shaping over a longer horizon gives the gradient a
  // clear direction from the zero-initialized start.
  RewardSpec reward;
  reward.goal = {2.0, 0.0};
  reward.progress_weight = 2.0;
  reward.heading_weight = 0.02;
  reward.smoothness_weight = 0.005;
  reward.gamma = 0.995;
  reward.horizon = 80;

  // Posterior concentrated around the nominal dynamics, clamped into the
  // parameter box.
  PosteriorSampleSet stats =
      make_stats(6, 0, 0, 0, sim.nominal_params(), 0.2, 123);
  for (int i = 0; i < stats.samples.rows(); ++i) {
    Vec p = stats.samples.row(i).transpose();
    sim.param_space().clamp(p);
    stats.samples.row(i) = p.transpose();
  }
  stats.finalize();

  Policy pi = make_policy(sim.state_dim(), sim.action_dim(), {24}, 51);
  HallucinationPolicy ph = make_hallucination_policy(5, 7, {8}, 52);

  WorldSampler sampler;
  sampler.stats = &stats;
  sampler.perceived = &env;
  sampler.initial_state = Vec::Zero(5);
  sampler.count = 4;
  sampler.opt.clamp_space = &sim.param_space();

  PolicyOptOptions opt;
  opt.rollouts_per_world = 2;
  opt.eval_rollouts = 1;
  opt.lr = 1e-2;
  opt.resampler = &sampler;

  std::vector<SampledWorld> worlds = sample_worlds(sampler, ph, 1000);
  PolicyOptResult r =
      policy_optimize(sim, pi, ph, worlds, reward, 40, 2000, opt);

  REQUIRE_FALSE(r.no_signal);
  REQUIRE_FALSE(r.reverted);
  REQUIRE(r.eval_after > r.eval_before + 0.1);
  REQUIRE(r.policy.version == pi.version + 1);
  REQUIRE(r.mean_returns.size() == 40);
  // Later training batches outperform the zero-initialized start.
  REQUIRE(r.mean_returns.back() > r.mean_returns.front() + 0.2);
}

TEST_CASE("tail windows crop trajectories to the detector's view") {
  EnvGrid env = flat_env();
  Trajectory t = straight_line_traj(10, 0.1, env);
  t.seed = 31337;

  Trajectory same = tail_window(t, 11);
  REQUIRE(same.states == t.states);
  REQUIRE(same.actions == t.actions);

  Trajectory cut = tail_window(t, 4);
  REQUIRE(cut.states.rows() == 4);
  REQUIRE(cut.actions.rows() == 3);
  REQUIRE(cut.states == Mat(t.states.bottomRows(4)));
  REQUIRE(cut.actions == Mat(t.actions.bottomRows(3)));
  REQUIRE(cut.seed == t.seed);

  REQUIRE_THROWS_AS(tail_window(t, 1), ContractViolation);
}

TEST_CASE("episode datasets only append in order") {
  EpisodeDataset ds;
  EpisodeRecord r0;
  r0.episode = 0;
  ds.append(r0);
  EpisodeRecord r2;
  r2.episode = 2;
  REQUIRE_THROWS_AS(ds.append(r2), ContractViolation);
  EpisodeRecord r1;
  r1.episode = 1;
  REQUIRE_NOTHROW(ds.append(r1));
  REQUIRE(ds.size() == 2);
}

TEST_CASE("adaptation leaves the policy untouched without anomalies") {
  DiffDriveSim sim;
  EnvGrid env = flat_env();
  NoiseSpec noise;
  noise.process_std = Vec::Constant(5, 0.002);

  // Identical-dynamics context/target pairs score at the perfect-similarity
  // ceiling, so the calibrated threshold (strictly below 1) never trips.
  Policy driver = forward_driver(sim);
  std::vector<AnomalyPair> seedpairs = detector_pairs(
      sim, driver, env, noise, TcnConfig{.channels = {8, 8},
                                         .kernel_width = 3,
                                         .embed_dim = 8}
                                   .receptive_field(),
      20);
  AnomalyDetector det = trained_detector(seedpairs, 9001);
  REQUIRE(det.threshold < 1.0);

  AdaptConfig cfg;
  cfg.episodes = 4;
  cfg.nfc_enabled = false;
  cfg.opt_iterations = 2;
  cfg.reward = default_reward(2.0, 20);
  cfg.noise = noise;
  cfg.seed = 515;

  AdaptSetup setup;
  setup.policy = driver;
  setup.hallu = make_hallucination_policy(5, 7, {8}, 61);
  setup.detector = det;
  TruthWorld w;
  w.psi = sim.nominal_params();
  w.env_true = env;
  w.env_perceived = env;
  setup.schedule = {w};

  AdaptResult r = run_adaptation(cfg, sim, setup);
  REQUIRE(r.anomaly_events == 0);
  REQUIRE(r.finetune_events == 0);
  REQUIRE(r.dataset.size() == 4);
  for (int e = 0; e < 4; ++e) {
    REQUIRE(r.dataset.records[e].episode == e);
    REQUIRE_FALSE(r.dataset.records[e].anomalous);
    REQUIRE_FALSE(r.metrics[e].anomalous);
    REQUIRE(r.metrics[e].detection_score > det.threshold);
  }
  REQUIRE(policies_equal(r.policy, driver));
  REQUIRE(r.psi_hat == sim.nominal_params());

  // Bitwise-reproducible trace.
  AdaptSetup setup2;
  setup2.policy = driver;
  setup2.hallu = make_hallucination_policy(5, 7, {8}, 61);
  setup2.detector = det;
  setup2.schedule = {w};
  AdaptResult r2 = run_adaptation(cfg, sim, setup2);
  REQUIRE(r2.anomaly_events == r.anomaly_events);
  for (int e = 0; e < 4; ++e) {
    REQUIRE(r2.metrics[e].ret == r.metrics[e].ret);
    REQUIRE(r2.metrics[e].detection_score == r.metrics[e].detection_score);
  }
  REQUIRE(policies_equal(r2.policy, r.policy));
}

TEST_CASE("adaptation reacts to a mid-mission axle fault") {
  DiffDriveSim sim;
  EnvGrid env = flat_env();
  NoiseSpec noise;
  noise.process_std = Vec::Constant(5, 0.002);
  Policy driver = forward_driver(sim);

  const int rf = TcnConfig{.channels = {8, 8},
                           .kernel_width = 3,
                           .embed_dim = 8}
                     .receptive_field();
  std::vector<AnomalyPair> pairs =
      detector_pairs(sim, driver, env, noise, rf, 20);
  AnomalyDetector det = trained_detector(pairs, 9002);
  ThresholdReport rep = calibrate_threshold(det, pairs);
  REQUIRE(rep.tpr > 0.9);
  REQUIRE(rep.fpr < 0.2);

  AdaptConfig cfg;
  cfg.episodes = 5;
  cfg.nfc_enabled = false;
  cfg.opt_iterations = 2;
  cfg.reward = default_reward(2.0, 20);
  cfg.noise = noise;
  cfg.seed = 616;
  cfg.pg.rollouts_per_world = 2;
  cfg.pg.eval_rollouts = 1;

  TruthWorld nominal;
  nominal.psi = sim.nominal_params();
  nominal.env_true = env;
  nominal.env_perceived = env;
  TruthWorld broken = nominal;
  broken.psi[1] = 0.0;  // axle fault from episode 2 onward

  AdaptSetup setup;
  setup.policy = driver;
  setup.hallu = make_hallucination_policy(5, 7, {8}, 71);
  setup.detector = det;
  setup.schedule = {nominal, nominal, broken, broken, broken};

  AdaptResult r = run_adaptation(cfg, sim, setup);
  REQUIRE(r.dataset.size() == 5);
  REQUIRE_FALSE(r.metrics[0].anomalous);
  REQUIRE_FALSE(r.metrics[1].anomalous);
  // The fault appears at episode 2 and must be flagged within two episodes.
  bool flagged = r.metrics[2].anomalous || r.metrics[3].anomalous;
  REQUIRE(flagged);
  REQUIRE(r.anomaly_events >= 1);
  for (int e = 0; e < 5; ++e)
    REQUIRE(r.dataset.records[e].anomalous == r.metrics[e].anomalous);
  // Fine-tuning only happens on anomalous episodes, and acceptance implies
  // a changed policy.
  for (const auto& m : r.metrics)
    if (m.finetuned) REQUIRE(m.anomalous);
  if (r.finetune_events > 0) REQUIRE_FALSE(policies_equal(r.policy, driver));
}

TEST_CASE("the full adaptation loop calibrates, fine-tunes, and refits") {
  DiffDriveSim sim;
  EnvGrid env = flat_env();
  NoiseSpec noise;
  noise.process_std = Vec::Constant(5, 0.002);
  Policy driver = forward_driver(sim);
  const ParamSpace& space = sim.param_space();

  // Pretraining corpus: randomized parameters -> executed trajectories,
  // targets are the parameters themselves.
  Prior prior;
  prior.kind = PriorKind::Gaussian;
  prior.mean = sim.nominal_params();
  prior.cov = (0.15 * prior.mean.array().abs().max(0.2)).square().matrix()
                  .asDiagonal();
  const int horizon = 20;
  DsmDataset corpus;
  SampleParamsResult draws = sample_params(space, prior, 48, false, 515151);
  corpus.targets.resize(48, 6);
  for (int i = 0; i < 48; ++i) {
    corpus.targets.row(i) = draws.samples[i].values.transpose();
    corpus.trajectories.push_back(
        rollout(sim, driver.as_policy_fn(), draws.samples[i].values,
                ResidualFidelity::zero(), env, horizon, noise,
                derive_seed(616161, "corpus", i)));
  }
  ScoreModelConfig mcfg;
  mcfg.layout = TargetLayout{.psi_dim = 6, .ds_dim = 0, .de_rows = 0,
                             .de_cols = 0};
  mcfg.cond_kind = CondKind::Tcn;
  mcfg.tcn.channels = {8, 8};
  mcfg.tcn.kernel_width = 3;
  mcfg.tcn.embed_dim = 8;
  mcfg.hidden = {32};
  ScoreModel nfc = make_score_model(mcfg, corpus, 717171);
  TrainOptions mopt;
  mopt.epochs = 3;
  mopt.batch = 16;
  mopt.lr = 2e-3;
  mopt.seed = 81;
  dsm_train(nfc, corpus, mopt);

  const int rf = TcnConfig{.channels = {8, 8},
                           .kernel_width = 3,
                           .embed_dim = 8}
                     .receptive_field();
  std::vector<AnomalyPair> pairs =
      detector_pairs(sim, driver, env, noise, rf, horizon);
  AnomalyDetector det = trained_detector(pairs, 9003);

  AdaptConfig cfg;
  cfg.episodes = 3;
  cfg.n_worlds = 2;
  cfg.opt_iterations = 1;
  cfg.posterior_count = 50;
  cfg.posterior_steps = 40;
  cfg.seq_sims = 8;
  cfg.seq_train.epochs = 2;
  cfg.seq_train.batch = 8;
  cfg.refit_epochs = 1;
  cfg.reward = default_reward(2.0, horizon);
  cfg.noise = noise;
  cfg.seed = 818;
  cfg.pg.rollouts_per_world = 2;
  cfg.pg.eval_rollouts = 1;

  TruthWorld nominal;
  nominal.psi = sim.nominal_params();
  nominal.env_true = env;
  nominal.env_perceived = env;
  TruthWorld broken = nominal;
  broken.psi[1] = 0.0;

  AdaptSetup setup;
  setup.policy = driver;
  setup.hallu = make_hallucination_policy(5, 7, {8}, 72);
  setup.nfc = nfc;
  setup.detector = det;
  setup.log_prior = [&](const Vec& v) {
    return prior.log_density(space, v);
  };
  setup.regen = [&](const Vec& params, std::uint64_t seed) {
    Vec p = params;
    space.clamp(p);
    Trajectory t = rollout(sim, driver.as_policy_fn(), p,
                           ResidualFidelity::zero(), env, horizon, noise,
                           seed);
    return std::make_pair(p, t);
  };
  setup.replay = &corpus;
  setup.detector_replay = &pairs;
  setup.schedule = {nominal, broken, broken};

  AdaptResult r = run_adaptation(cfg, sim, setup);
  REQUIRE(r.dataset.size() == 3);
  REQUIRE_FALSE(r.metrics[0].anomalous);
  REQUIRE(r.anomaly_events >= 1);
  REQUIRE(r.posterior_failures == 0);

  bool saw_posterior = false;
  for (const auto& m : r.metrics) {
    if (m.posterior_mean.size() > 0) {
      saw_posterior = true;
      REQUIRE(m.posterior_mean.size() == 6);
      REQUIRE(m.posterior_std.size() == 6);
      REQUIRE((m.posterior_std.array() >= 0.0).all());
    }
  }
  REQUIRE(saw_posterior);
  REQUIRE(space.contains(r.psi_hat));
  REQUIRE(r.psi_hat != sim.nominal_params());  // calibration moved the point
  REQUIRE(r.refit_ran);
  REQUIRE(r.detector_refit_ran);

  // Posterior snapshots are recorded on the dataset side as well.
  bool dataset_snapshot = false;
  for (const auto& rec : r.dataset.records)
    if (rec.posterior_mean.size() == 6) dataset_snapshot = true;
  REQUIRE(dataset_snapshot);
}
