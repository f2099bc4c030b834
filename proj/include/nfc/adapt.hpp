#pragma once

// Anomaly-gated adaptation loop: hallucinated sampling from the calibrated
// posterior, terrain reconstruction from environment residuals, policy
// fine-tuning inside the recalibrated simulator, sequential refits of the
// calibration model, and the bookkeeping (dataset, metrics) the reporting
// layer consumes.

#include "nfc/anomaly.hpp"
#include "nfc/common.hpp"
#include "nfc/diffusion.hpp"
#include "nfc/grid.hpp"
#include "nfc/policy.hpp"
#include "nfc/posterior.hpp"
#include "nfc/rng.hpp"
#include "nfc/sim.hpp"

#include <algorithm>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace nfc {

// ---------------------------------------------------------------------------
// Hallucinated sampling
// ---------------------------------------------------------------------------

// Optional machinery for the environment-residual head and for parameter
// clamping; the posterior sample set itself does not carry either.
struct HallucinateOptions {
  const ParamSpace* clamp_space = nullptr;  // psi bounds
  const ScoreModel* model = nullptr;        // delta_e head (optional)
  const Trajectory* tau = nullptr;          // observation conditioning delta_e
  int de_steps = 100;
  bool residual_fidelity = true;  // false freezes both residual heads at zero
};

struct HallucinatedSample {
  Vec psi;
  ResidualFidelity phi;
  Vec eta;  // levers actually applied
};

// Core lever application: (psi, delta_s) = mean + std ⊙ eta on their slices;
// delta_e is one draw from the diffusion head with its per-slice sampler
// noise scaled by |eta_last|.
inline HallucinatedSample hallucinate_from_levers(
    const PosteriorSampleSet& stats, const Vec& eta, Rng& rng,
    const HallucinateOptions& opt = {}) {
  const TargetLayout& layout = stats.layout;
  const int prefix = layout.psi_dim + layout.ds_dim;
  require(eta.size() == prefix + 1,
          "hallucinate: lever width must cover psi, delta_s, and one "
          "delta_e scale");
  require((eta.array().abs() <= 1.0 + 1e-12).all(),
          "hallucinate: levers outside [-1, 1]");
  require(stats.mean.size() == layout.total() &&
              stats.std.size() == layout.total(),
          "hallucinate: posterior stats incomplete");

  HallucinatedSample out;
  out.eta = eta;
  Vec value = stats.mean.head(prefix) +
              (stats.std.head(prefix).array() * eta.head(prefix).array())
                  .matrix();

  out.psi = value.head(layout.psi_dim);
  if (opt.clamp_space) {
    require(opt.clamp_space->dim() == layout.psi_dim,
            "hallucinate: clamp space width mismatch");
    opt.clamp_space->clamp(out.psi);
  }

  if (opt.residual_fidelity && layout.ds_dim > 0)
    out.phi.delta_s = value.segment(layout.psi_dim, layout.ds_dim);

  if (opt.residual_fidelity && layout.de_dim() > 0 && opt.model && opt.tau) {
    SampleOptions so;
    so.count = 1;
    so.steps = opt.de_steps;
    so.seed = rng.next_u64();
    so.slice_noise_scale = Vec(3);
    so.slice_noise_scale << 1.0, 1.0, std::abs(eta[prefix]);
    Vec row = sample_posterior(*opt.model, *opt.tau, so)
                  .samples.row(0)
                  .transpose();
    out.phi.delta_e = Eigen::Map<const Mat>(
        row.data() + layout.de_offset(), layout.de_rows, layout.de_cols);
  }
  return out;
}

// Hallucinated world parameters for one state: the lever vector comes from
// the hallucination policy evaluated at that state.
inline HallucinatedSample hallucinate_sample(const PosteriorSampleSet& stats,
                                             const HallucinationPolicy& pi_h,
                                             const Vec& state, Rng& rng,
                                             const HallucinateOptions& opt = {}) {
  const int prefix = stats.layout.psi_dim + stats.layout.ds_dim;
  require(pi_h.lever_dim == prefix + 1,
          "hallucinate_sample: hallucination policy lever width mismatch");
  return hallucinate_from_levers(stats, pi_h.levers(state), rng, opt);
}

// ---------------------------------------------------------------------------
// Environment reconstruction
// ---------------------------------------------------------------------------

// Applies each residual grid to the perceived terrain: e_hat = e + delta_e.
// Residual grids at a different resolution are bilinearly resampled onto the
// perceived grid first.
inline std::vector<EnvGrid> reconstruct_envs(const EnvGrid& perceived,
                                             const std::vector<Mat>& deltas) {
  perceived.validate();
  std::vector<EnvGrid> out;
  out.reserve(deltas.size());
  for (const Mat& d : deltas) {
    Mat delta = d;
    if (delta.rows() != perceived.rows() || delta.cols() != perceived.cols()) {
      require(delta.rows() > 0 && delta.cols() > 0,
              "reconstruct_envs: residual grid is empty");
      EnvGrid tmp;
      tmp.heights = delta;
      tmp.resolution = perceived.resolution *
                       static_cast<double>(perceived.rows()) /
                       static_cast<double>(delta.rows());
      tmp.origin = perceived.origin;
      delta = resize_bilinear(tmp, perceived.rows(), perceived.cols()).heights;
    }
    require(delta.rows() == perceived.rows() &&
                delta.cols() == perceived.cols(),
            "reconstruct_envs: residual shape mismatch after resampling");
    EnvGrid e = perceived;
    e.heights += delta;
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampled worlds
// ---------------------------------------------------------------------------

// One recalibrated training world: parameters, residuals, reconstructed
// terrain, plus the lever sample that produced it (kept for the
// hallucination policy's own gradient step).
struct SampledWorld {
  Vec psi;
  ResidualFidelity phi;
  EnvGrid env;
  Vec eta;  // applied levers (empty for hand-built worlds)
  Vec u;    // pre-squash lever sample (empty for hand-built worlds)
};

// Everything needed to draw fresh worlds through the hallucination policy.
struct WorldSampler {
  const PosteriorSampleSet* stats = nullptr;
  const EnvGrid* perceived = nullptr;
  Vec initial_state;
  HallucinateOptions opt;
  int count = 8;

  void validate() const {
    require(stats != nullptr && perceived != nullptr,
            "WorldSampler: posterior stats and perceived terrain required");
    require(count >= 1, "WorldSampler: count < 1");
    require(initial_state.size() > 0, "WorldSampler: initial state required");
  }
};

// Draws `count` worlds. Diversity comes from the hallucination policy's
// exploration noise on the pre-squash levers (squashing keeps every lever
// inside [-1, 1], so all worlds stay within the posterior's mean ± std band)
// and from the stochastic environment-residual head.
inline std::vector<SampledWorld> sample_worlds(const WorldSampler& sampler,
                                               const HallucinationPolicy& pi_h,
                                               std::uint64_t seed) {
  sampler.validate();
  const int prefix = sampler.stats->layout.psi_dim + sampler.stats->layout.ds_dim;
  require(pi_h.lever_dim == prefix + 1,
          "sample_worlds: hallucination policy lever width mismatch");
  std::vector<SampledWorld> out;
  out.reserve(static_cast<std::size_t>(sampler.count));
  for (int i = 0; i < sampler.count; ++i) {
    Rng rng(derive_seed(seed, "world", static_cast<std::uint64_t>(i)));
    Vec u = pi_h.head.sample_u(sampler.initial_state, rng);
    HallucinatedSample hs = hallucinate_from_levers(
        *sampler.stats, pi_h.levers_from_u(u), rng, sampler.opt);
    SampledWorld w;
    w.psi = std::move(hs.psi);
    w.phi = std::move(hs.phi);
    w.eta = std::move(hs.eta);
    w.u = std::move(u);
    if (w.phi.has_delta_e()) {
      w.env = reconstruct_envs(*sampler.perceived, {w.phi.delta_e}).front();
      w.phi.delta_e.resize(0, 0);  // terrain residual now lives in the grid
    } else {
      w.env = *sampler.perceived;
    }
    out.push_back(std::move(w));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Policy optimization
// ---------------------------------------------------------------------------

struct PolicyOptOptions {
  int rollouts_per_world = 2;
  int eval_rollouts = 2;  // evaluation episodes per world, fixed seed set
  int inner_epochs = 4;
  double clip = 0.2;
  double lr = 3e-3;
  double lr_hallu = 1e-2;
  NoiseSpec noise;
  // When set, worlds are redrawn through the current hallucination policy
  // each iteration and the hallucination policy trains jointly.
  const WorldSampler* resampler = nullptr;

  void validate() const {
    require(rollouts_per_world >= 1 && eval_rollouts >= 1 && inner_epochs >= 1,
            "PolicyOptOptions: counts must be >= 1");
    require(clip > 0.0 && clip < 1.0, "PolicyOptOptions: clip outside (0, 1)");
    require(lr > 0.0 && lr_hallu > 0.0, "PolicyOptOptions: lr <= 0");
  }
};

struct PolicyOptResult {
  Policy policy;
  HallucinationPolicy hallu;
  bool reverted = false;   // no-worsening guard fired; inputs returned
  bool no_signal = false;  // every rollout failed; inputs returned
  double eval_before = 0.0;
  double eval_after = 0.0;
  std::vector<double> mean_returns;  // per-iteration training return
};

namespace detail {

// Mean return of the deterministic policy over a fixed evaluation seed-set.
inline double evaluate_policy(const Simulator& sim, const Policy& policy,
                              const std::vector<SampledWorld>& worlds,
                              const RewardSpec& reward, const NoiseSpec& noise,
                              int rollouts, std::uint64_t seed) {
  double total = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < worlds.size(); ++i) {
    for (int r = 0; r < rollouts; ++r) {
      EpisodeRollout ep = run_policy_episode(
          sim, worlds[i].psi, worlds[i].phi, worlds[i].env, policy, reward,
          noise, derive_seed(seed, "eval", i, r), /*stochastic=*/false);
      total += ep.ret;
      ++n;
    }
  }
  return total / double(n);
}

}  // namespace detail

// Jointly fine-tunes the driving policy and (when a resampler is supplied)
// the hallucination policy with a clipped-surrogate policy gradient over
// rollouts in the sampled worlds. A fixed evaluation seed-set guards
// against regressions: if the tuned policy evaluates more than 1% below the
// input policy, the inputs are returned with the `reverted` flag.
inline PolicyOptResult policy_optimize(const Simulator& sim, const Policy& pi0,
                                       const HallucinationPolicy& ph0,
                                       const std::vector<SampledWorld>& worlds0,
                                       const RewardSpec& reward, int iterations,
                                       std::uint64_t seed,
                                       const PolicyOptOptions& opt = {}) {
  reward.validate();
  opt.validate();
  require(!worlds0.empty(), "policy_optimize: need at least one world");
  require(iterations >= 0, "policy_optimize: negative iterations");

  PolicyOptResult res;
  res.policy = pi0;
  res.hallu = ph0;
  if (iterations == 0) return res;

  res.eval_before = detail::evaluate_policy(sim, pi0, worlds0, reward,
                                            opt.noise, opt.eval_rollouts,
                                            derive_seed(seed, "eval_set"));

  Policy pi = pi0;
  HallucinationPolicy ph = ph0;
  std::vector<SampledWorld> worlds = worlds0;
  for (int it = 0; it < iterations; ++it) {
    if (opt.resampler)
      worlds = sample_worlds(*opt.resampler, ph,
                             derive_seed(seed, "resample", it));

    // Collect stochastic rollouts, one advantage per episode.
    std::vector<EpisodeRollout> eps;
    std::vector<int> world_of;
    bool any_ok = false;
    for (std::size_t i = 0; i < worlds.size(); ++i) {
      for (int r = 0; r < opt.rollouts_per_world; ++r) {
        eps.push_back(run_policy_episode(
            sim, worlds[i].psi, worlds[i].phi, worlds[i].env, pi, reward,
            opt.noise, derive_seed(seed, "pg", it, i, r),
            /*stochastic=*/true));
        world_of.push_back(static_cast<int>(i));
        any_ok = any_ok || !eps.back().failed;
      }
    }
    if (!any_ok) {
      PolicyOptResult bail;
      bail.policy = pi0;
      bail.hallu = ph0;
      bail.no_signal = true;
      bail.eval_before = res.eval_before;
      bail.eval_after = res.eval_before;
      bail.mean_returns = res.mean_returns;
      return bail;
    }

    double baseline = 0.0;
    for (const auto& ep : eps) baseline += ep.ret;
    baseline /= double(eps.size());
    res.mean_returns.push_back(baseline);

    // Driving-policy batch: episode advantage broadcast to its steps.
    int total_steps = 0;
    for (const auto& ep : eps) total_steps += ep.steps;
    SurrogateBatch batch;
    batch.inputs.resize(total_steps, pi.state_dim + pi.patch_dim);
    batch.us.resize(total_steps, pi.action_dim);
    batch.advantages.resize(total_steps);
    batch.old_logp.resize(total_steps);
    int row = 0;
    for (const auto& ep : eps) {
      double adv = ep.ret - baseline;
      for (int t = 0; t < ep.steps; ++t, ++row) {
        batch.inputs.row(row) = ep.inputs.row(t);
        batch.us.row(row) = ep.us.row(t);
        batch.advantages[row] = adv;
        batch.old_logp[row] = pi.head.log_prob_u(
            ep.inputs.row(t).transpose(), ep.us.row(t).transpose());
      }
    }
    clipped_surrogate_update(pi.head, batch, opt.clip, opt.lr,
                             opt.inner_epochs, derive_seed(seed, "pi", it));

    // Hallucination-policy batch: one record per world, advantage = the
    // world's mean rollout return against the shared baseline.
    if (opt.resampler) {
      const int nw = static_cast<int>(worlds.size());
      Vec wret = Vec::Zero(nw);
      Vec wcnt = Vec::Zero(nw);
      for (std::size_t k = 0; k < eps.size(); ++k) {
        wret[world_of[k]] += eps[k].ret;
        wcnt[world_of[k]] += 1.0;
      }
      SurrogateBatch wb;
      wb.inputs.resize(nw, ph.state_dim);
      wb.us.resize(nw, ph.lever_dim);
      wb.advantages.resize(nw);
      wb.old_logp.resize(nw);
      for (int i = 0; i < nw; ++i) {
        wb.inputs.row(i) = opt.resampler->initial_state.transpose();
        wb.us.row(i) = worlds[i].u.transpose();
        wb.advantages[i] = wret[i] / wcnt[i] - baseline;
        wb.old_logp[i] = ph.head.log_prob_u(opt.resampler->initial_state,
                                            worlds[i].u);
      }
      clipped_surrogate_update(ph.head, wb, opt.clip, opt.lr_hallu,
                               opt.inner_epochs, derive_seed(seed, "ph", it));
    }
  }

  res.eval_after = detail::evaluate_policy(sim, pi, worlds0, reward, opt.noise,
                                           opt.eval_rollouts,
                                           derive_seed(seed, "eval_set"));
  if (res.eval_after < res.eval_before - 0.01 * std::abs(res.eval_before) -
                           1e-12) {
    res.reverted = true;  // keep the inputs already stored in res
    return res;
  }
  pi.version += 1;
  res.policy = std::move(pi);
  res.hallu = std::move(ph);
  return res;
}

// ---------------------------------------------------------------------------
// Episode dataset and metrics
// ---------------------------------------------------------------------------

struct EpisodeRecord {
  int episode = 0;
  Trajectory traj;
  bool anomalous = false;
  Vec posterior_mean;  // psi slice at this episode, empty if never sampled
  Vec posterior_std;
};

// Append-only dataset with monotone episode indices.
struct EpisodeDataset {
  std::vector<EpisodeRecord> records;

  int size() const { return static_cast<int>(records.size()); }

  void append(EpisodeRecord rec) {
    require(rec.episode == size(),
            "EpisodeDataset: episode indices must be appended in order");
    records.push_back(std::move(rec));
  }
};

struct EpisodeMetrics {
  int episode = 0;
  double ret = 0.0;  // discounted return of the executed episode
  double detection_score = 1.0;
  bool anomalous = false;
  bool finetuned = false;
  bool posterior_failed = false;
  bool reverted = false;
  bool no_signal = false;
  Vec posterior_mean;  // psi slice, empty when not sampled this episode
  Vec posterior_std;
  MissionMetrics mission;
};

// ---------------------------------------------------------------------------
// run_adaptation
// ---------------------------------------------------------------------------

// Hidden truth the agent faces during one episode: true parameters and
// residuals drive the dynamics while the policy only sees perceived terrain.
struct TruthWorld {
  Vec psi;
  ResidualFidelity phi;
  EnvGrid env_true;
  EnvGrid env_perceived;
};

struct AdaptConfig {
  int episodes = 8;
  int n_worlds = 8;
  int opt_iterations = 3;
  int posterior_count = 128;
  int posterior_steps = 120;
  int de_steps = 60;
  int seq_sims = 32;
  TrainOptions seq_train{.epochs = 6, .batch = 16, .lr = 5e-4, .seed = 0};
  int refit_epochs = 2;  // post-mission continuation budget
  bool nfc_enabled = true;
  bool residual_fidelity = true;
  RewardSpec reward;
  NoiseSpec noise;
  PolicyOptOptions pg;
  std::uint64_t seed = 0;

  void validate() const {
    reward.validate();
    require(episodes >= 1, "AdaptConfig: episodes < 1");
    require(n_worlds >= 1, "AdaptConfig: n_worlds < 1");
    require(opt_iterations >= 0, "AdaptConfig: negative opt_iterations");
    require(posterior_count >= 50, "AdaptConfig: posterior_count < 50");
    require(seq_sims >= 1, "AdaptConfig: seq_sims < 1");
    require(refit_epochs >= 0, "AdaptConfig: negative refit_epochs");
  }
};

// Pretrained components plus the data hooks the loop needs.
struct AdaptSetup {
  Policy policy;
  HallucinationPolicy hallu;
  ScoreModel nfc;  // used only when cfg.nfc_enabled
  AnomalyDetector detector;
  LogDensityFn log_prior;   // randomization prior over the (psi, ds) prefix
  SimulateTargetFn regen;   // labeled resimulation for sequential refits
  const DsmDataset* replay = nullptr;  // pretraining mix-in for final refit
  const std::vector<AnomalyPair>* detector_replay = nullptr;
  std::vector<TruthWorld> schedule;  // per-episode truth; last entry repeats
};

struct AdaptResult {
  Policy policy;
  HallucinationPolicy hallu;
  ScoreModel nfc;
  AnomalyDetector detector;
  EpisodeDataset dataset;
  std::vector<EpisodeMetrics> metrics;
  Vec psi_hat;  // current calibrated parameter estimate
  int anomaly_events = 0;
  int finetune_events = 0;
  int posterior_failures = 0;
  bool refit_ran = false;
  bool detector_refit_ran = false;
};

// Crops a trajectory to its last `max_rows` states (and matching actions) so
// detection windows fit the encoder's receptive field.
inline Trajectory tail_window(const Trajectory& traj, int max_rows) {
  require(max_rows >= 2, "tail_window: need at least two rows");
  const int n = static_cast<int>(traj.states.rows());
  if (n <= max_rows) return traj;
  Trajectory out;
  out.states = traj.states.bottomRows(max_rows);
  out.actions = traj.actions.bottomRows(max_rows - 1);
  out.env = traj.env;
  out.seed = traj.seed;
  out.clamp_warnings = traj.clamp_warnings;
  return out;
}

inline AdaptResult run_adaptation(const AdaptConfig& cfg, const Simulator& sim,
                                  AdaptSetup setup) {
  cfg.validate();
  require(!setup.schedule.empty(), "run_adaptation: empty truth schedule");
  require(setup.policy.state_dim == sim.state_dim(),
          "run_adaptation: policy state width mismatch");
  const ParamSpace& space = sim.param_space();
  const TargetLayout layout =
      cfg.nfc_enabled ? setup.nfc.cfg.layout : TargetLayout{};
  if (cfg.nfc_enabled) {
    require(layout.psi_dim == space.dim(),
            "run_adaptation: calibration model psi width mismatch");
    require(setup.hallu.lever_dim == layout.psi_dim + layout.ds_dim + 1,
            "run_adaptation: hallucination lever width mismatch");
    require(!cfg.residual_fidelity || layout.ds_dim == 0 ||
                layout.ds_dim == sim.state_dim(),
            "run_adaptation: delta_s head width must match the state");
    require(static_cast<bool>(setup.log_prior) &&
                static_cast<bool>(setup.regen),
            "run_adaptation: sequential refit hooks required with the "
            "calibration model enabled");
  }

  AdaptResult out;
  out.policy = std::move(setup.policy);
  out.hallu = std::move(setup.hallu);
  out.nfc = std::move(setup.nfc);
  out.detector = std::move(setup.detector);
  out.psi_hat = sim.nominal_params();
  ResidualFidelity phi_hat;  // zero until the first calibration
  DsmDataset recent;         // labeled rows accumulated by sequential refits
  const int rf = out.detector.receptive_field();

  for (int e = 0; e < cfg.episodes; ++e) {
    const TruthWorld& w =
        setup.schedule[std::min<std::size_t>(e, setup.schedule.size() - 1)];
    const std::uint64_t ep_seed = derive_seed(cfg.seed, "episode", e);

    // Execute the mission episode in the hidden-truth world, then replay the
    // same commands' expectation in the current calibrated simulator to form
    // the detector's context window.
    Trajectory target =
        rollout(sim, out.policy.as_policy_fn(), w.psi, w.phi, w.env_true,
                w.env_perceived, cfg.reward.horizon, cfg.noise, ep_seed);
    Trajectory context =
        rollout(sim, out.policy.as_policy_fn(), out.psi_hat, phi_hat,
                w.env_perceived, w.env_perceived, cfg.reward.horizon,
                cfg.noise, ep_seed);
    DetectionResult det =
        detect(out.detector, tail_window(context, rf), tail_window(target, rf));

    EpisodeMetrics m;
    m.episode = e;
    m.ret = episode_return(cfg.reward, target);
    m.detection_score = det.score;
    m.anomalous = det.anomalous;
    m.mission = mission_metrics(target, cfg.reward, sim.dt());

    EpisodeRecord rec;
    rec.episode = e;
    rec.traj = target;
    rec.anomalous = det.anomalous;

    if (det.anomalous) {
      ++out.anomaly_events;
      if (cfg.nfc_enabled) {
        std::optional<PosteriorSampleSet> stats;
        try {
          SampleOptions so;
          so.count = cfg.posterior_count;
          so.steps = cfg.posterior_steps;
          so.seed = derive_seed(ep_seed, "posterior");
          so.clamp_space = &space;
          stats = sample_posterior(out.nfc, target, so);
        } catch (const NumericalFailure&) {
          m.posterior_failed = true;
          ++out.posterior_failures;
        }
        if (stats) {
          m.posterior_mean = stats->mean.head(layout.psi_dim);
          m.posterior_std = stats->std.head(layout.psi_dim);
          rec.posterior_mean = m.posterior_mean;
          rec.posterior_std = m.posterior_std;

          // Recalibrate the point estimate used for context simulation.
          out.psi_hat = m.posterior_mean;
          space.clamp(out.psi_hat);
          if (cfg.residual_fidelity && layout.ds_dim > 0)
            phi_hat.delta_s =
                stats->mean.segment(layout.psi_dim, layout.ds_dim);

          WorldSampler sampler;
          sampler.stats = &*stats;
          sampler.perceived = &w.env_perceived;
          sampler.initial_state = target.states.row(0).transpose();
          sampler.count = cfg.n_worlds;
          sampler.opt.clamp_space = &space;
          sampler.opt.residual_fidelity = cfg.residual_fidelity;
          sampler.opt.de_steps = cfg.de_steps;
          if (cfg.residual_fidelity && layout.de_dim() > 0) {
            sampler.opt.model = &out.nfc;
            sampler.opt.tau = &target;
          }
          std::vector<SampledWorld> worlds =
              sample_worlds(sampler, out.hallu, derive_seed(ep_seed, "worlds"));

          PolicyOptOptions po = cfg.pg;
          po.noise = cfg.noise;
          po.resampler = &sampler;
          PolicyOptResult opt = policy_optimize(
              sim, out.policy, out.hallu, worlds, cfg.reward,
              cfg.opt_iterations, derive_seed(ep_seed, "opt"), po);
          m.reverted = opt.reverted;
          m.no_signal = opt.no_signal;
          if (!opt.reverted && !opt.no_signal && cfg.opt_iterations > 0) {
            out.policy = std::move(opt.policy);
            out.hallu = std::move(opt.hallu);
            ++out.finetune_events;
            m.finetuned = true;
          }

          // Sequential refit of the calibration model on fresh simulations
          // importance-weighted back to the randomization prior.
          try {
            TrainOptions st = cfg.seq_train;
            st.seed = derive_seed(ep_seed, "seq");
            SequentialResult seq = sequential_update(
                out.nfc,
                ProposalPrior::from_sample_set(*stats,
                                               layout.psi_dim + layout.ds_dim),
                setup.log_prior, setup.regen, cfg.seq_sims, target, st);
            out.nfc = std::move(seq.model);
            const int base = static_cast<int>(recent.targets.rows());
            recent.targets.conservativeResize(base + seq.data.targets.rows(),
                                              layout.total());
            recent.targets.bottomRows(seq.data.targets.rows()) =
                seq.data.targets;
            for (auto& t : seq.data.trajectories)
              recent.trajectories.push_back(std::move(t));
          } catch (const NumericalFailure&) {
            m.posterior_failed = true;
            ++out.posterior_failures;
          }
        }
      } else {
        // Ablation without the calibration model: fine-tune only against
        // the executed mission's world estimate.
        std::vector<SampledWorld> worlds(1);
        worlds[0].psi = out.psi_hat;
        worlds[0].phi = phi_hat;
        worlds[0].env = w.env_perceived;
        PolicyOptOptions po = cfg.pg;
        po.noise = cfg.noise;
        po.resampler = nullptr;
        PolicyOptResult opt = policy_optimize(
            sim, out.policy, out.hallu, worlds, cfg.reward,
            cfg.opt_iterations, derive_seed(ep_seed, "opt"), po);
        m.reverted = opt.reverted;
        m.no_signal = opt.no_signal;
        if (!opt.reverted && !opt.no_signal && cfg.opt_iterations > 0) {
          out.policy = std::move(opt.policy);
          ++out.finetune_events;
          m.finetuned = true;
        }
      }
    }

    out.dataset.append(std::move(rec));
    out.metrics.push_back(std::move(m));
  }

  // Post-mission refits on the gathered dataset, mixed 1:1 with replayed
  // pretraining data to avoid forgetting the randomization regime.
  if (cfg.refit_epochs > 0) {
    if (cfg.nfc_enabled && setup.replay && recent.targets.rows() > 0) {
      const int k = std::min<int>(static_cast<int>(recent.targets.rows()),
                                  static_cast<int>(setup.replay->targets.rows()));
      DsmDataset mix;
      mix.targets.resize(recent.targets.rows() + k, layout.total());
      mix.targets.topRows(recent.targets.rows()) = recent.targets;
      mix.targets.bottomRows(k) = setup.replay->targets.topRows(k);
      mix.trajectories = recent.trajectories;
      for (int i = 0; i < k; ++i)
        mix.trajectories.push_back(setup.replay->trajectories[i]);
      TrainOptions ro;
      ro.epochs = cfg.refit_epochs;
      ro.batch = 16;
      ro.lr = 3e-4;
      ro.seed = derive_seed(cfg.seed, "refit_nfc");
      try {
        dsm_train(out.nfc, mix, ro);
        out.refit_ran = true;
      } catch (const NumericalFailure&) {
        ++out.posterior_failures;
      }
    }
    if (setup.detector_replay && !setup.detector_replay->empty()) {
      // Pairs from the mission dataset: context re-simulated under the final
      // calibrated estimate, target as executed, label from the detector.
      std::vector<AnomalyPair> pairs;
      for (const auto& r : out.dataset.records) {
        AnomalyPair p;
        p.target = tail_window(r.traj, rf);
        Trajectory ctx = rollout(sim, out.policy.as_policy_fn(), out.psi_hat,
                                 phi_hat, r.traj.env, r.traj.env,
                                 cfg.reward.horizon, cfg.noise, r.traj.seed);
        p.context = tail_window(ctx, rf);
        p.anomalous = r.anomalous;
        pairs.push_back(std::move(p));
      }
      const std::size_t k =
          std::min(pairs.size(), setup.detector_replay->size());
      for (std::size_t i = 0; i < k; ++i)
        pairs.push_back((*setup.detector_replay)[i]);
      bool any_pos = false;
      bool any_neg = false;
      for (const auto& p : pairs) (p.anomalous ? any_pos : any_neg) = true;
      if (any_pos && any_neg) {
        TrainOptions ro;
        ro.epochs = cfg.refit_epochs;
        ro.batch = 8;
        ro.lr = 3e-4;
        ro.seed = derive_seed(cfg.seed, "refit_detector");
        train_detector(out.detector, pairs, ro);
        calibrate_threshold(out.detector, pairs);
        out.detector_refit_ran = true;
      }
    }
  }
  return out;
}

}  // namespace nfc
