#pragma once

// Model checkpoints built on the named-tensor serialization layer: each
// trained component round-trips through a <stem>.json / <stem>.bin pair.
// Values pass through the float32 blob, so reloading a checkpoint and
// saving it again is byte-stable after the first rounding.

#include "nfc/anomaly.hpp"
#include "nfc/diffusion.hpp"
#include "nfc/mdn.hpp"
#include "nfc/policy.hpp"
#include "nfc/serialize.hpp"

#include <string>
#include <vector>

namespace nfc {

// ---------------------------------------------------------------------------
// Enum <-> string names used in checkpoint metadata and config files
// ---------------------------------------------------------------------------

inline std::string act_name(Act a) {
  switch (a) {
    case Act::Tanh: return "tanh";
    case Act::Relu: return "relu";
    case Act::Identity: return "identity";
  }
  throw DomainError("act_name: unknown activation");
}

inline Act act_from_name(const std::string& s) {
  if (s == "tanh") return Act::Tanh;
  if (s == "relu") return Act::Relu;
  if (s == "identity") return Act::Identity;
  throw DomainError("unknown activation name: " + s);
}

inline std::string cond_kind_name(CondKind k) {
  switch (k) {
    case CondKind::None: return "none";
    case CondKind::Identity: return "identity";
    case CondKind::Rff: return "rff";
    case CondKind::Fks: return "fks";
    case CondKind::Tcn: return "tcn";
  }
  throw DomainError("cond_kind_name: unknown kind");
}

inline CondKind cond_kind_from_name(const std::string& s) {
  if (s == "none") return CondKind::None;
  if (s == "identity") return CondKind::Identity;
  if (s == "rff") return CondKind::Rff;
  if (s == "fks") return CondKind::Fks;
  if (s == "tcn") return CondKind::Tcn;
  throw DomainError("unknown conditioning feature name: " + s);
}

// ---------------------------------------------------------------------------
// Plain-struct JSON helpers
// ---------------------------------------------------------------------------

inline Json layout_to_json(const TargetLayout& l) {
  return Json{{"psi_dim", l.psi_dim},
              {"ds_dim", l.ds_dim},
              {"de_rows", l.de_rows},
              {"de_cols", l.de_cols}};
}

inline TargetLayout layout_from_json(const Json& j) {
  TargetLayout l;
  l.psi_dim = j.at("psi_dim").get<int>();
  l.ds_dim = j.at("ds_dim").get<int>();
  l.de_rows = j.at("de_rows").get<int>();
  l.de_cols = j.at("de_cols").get<int>();
  return l;
}

inline Json tcn_config_to_json(const TcnConfig& c) {
  return Json{{"in_dim", c.in_dim},         {"channels", c.channels},
              {"kernel_width", c.kernel_width}, {"dilation_base", c.dilation_base},
              {"embed_dim", c.embed_dim},   {"unit_norm", c.unit_norm}};
}

inline TcnConfig tcn_config_from_json(const Json& j) {
  TcnConfig c;
  c.in_dim = j.at("in_dim").get<int>();
  c.channels = j.at("channels").get<std::vector<int>>();
  c.kernel_width = j.at("kernel_width").get<int>();
  c.dilation_base = j.at("dilation_base").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.unit_norm = j.at("unit_norm").get<bool>();
  return c;
}

inline Json schedule_to_json(const NoiseSchedule& s) {
  return Json{{"beta_min", s.beta_min},
              {"beta_max", s.beta_max},
              {"k_min", s.k_min}};
}

inline NoiseSchedule schedule_from_json(const Json& j) {
  NoiseSchedule s;
  s.beta_min = j.at("beta_min").get<double>();
  s.beta_max = j.at("beta_max").get<double>();
  s.k_min = j.at("k_min").get<double>();
  return s;
}

// ---------------------------------------------------------------------------
// Component writers/readers (tensors namespaced by a prefix)
// ---------------------------------------------------------------------------

inline void save_standardizer(CheckpointWriter& w, const std::string& prefix,
                              const Standardizer& s) {
  w.add(prefix + ".mean", s.mean);
  w.add(prefix + ".std", s.std);
}

inline Standardizer load_standardizer(const CheckpointReader& r,
                                      const std::string& prefix) {
  Standardizer s;
  s.mean = r.vec(prefix + ".mean");
  s.std = r.vec(prefix + ".std");
  return s;
}

inline void save_mlp(CheckpointWriter& w, const std::string& prefix,
                     const Mlp& m) {
  w.set(prefix + ".meta", Json{{"layers", m.layers.size()},
                               {"act", act_name(m.hidden)}});
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    w.add(prefix + ".W" + std::to_string(i), m.layers[i].W);
    w.add(prefix + ".b" + std::to_string(i), m.layers[i].b);
  }
}

inline Mlp load_mlp(const CheckpointReader& r, const std::string& prefix) {
  const Json& meta = r.meta().at(prefix + ".meta");
  Mlp m;
  m.hidden = act_from_name(meta.at("act").get<std::string>());
  const auto n = meta.at("layers").get<std::size_t>();
  m.layers.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Dense& d = m.layers[i];
    d.W = r.mat(prefix + ".W" + std::to_string(i));
    d.b = r.vec(prefix + ".b" + std::to_string(i));
    d.gW = Mat::Zero(d.W.rows(), d.W.cols());
    d.gb = Vec::Zero(d.b.size());
  }
  return m;
}

inline void save_tcn(CheckpointWriter& w, const std::string& prefix,
                     const Tcn& t) {
  w.set(prefix + ".meta", tcn_config_to_json(t.cfg));
  for (std::size_t l = 0; l < t.W.size(); ++l) {
    for (int j = 0; j < t.cfg.kernel_width; ++j)
      w.add(prefix + ".W" + std::to_string(l) + "_" + std::to_string(j),
            t.W[l][j]);
    w.add(prefix + ".b" + std::to_string(l), t.b[l]);
  }
  w.add(prefix + ".ro.W", t.readout.W);
  w.add(prefix + ".ro.b", t.readout.b);
}

inline Tcn load_tcn(const CheckpointReader& r, const std::string& prefix) {
  Tcn t;
  t.cfg = tcn_config_from_json(r.meta().at(prefix + ".meta"));
  const std::size_t L = t.cfg.channels.size();
  t.W.assign(L, {});
  t.gW.assign(L, {});
  t.b.assign(L, Vec{});
  t.gb.assign(L, Vec{});
  for (std::size_t l = 0; l < L; ++l) {
    t.W[l].resize(t.cfg.kernel_width);
    t.gW[l].resize(t.cfg.kernel_width);
    for (int j = 0; j < t.cfg.kernel_width; ++j) {
      t.W[l][j] =
          r.mat(prefix + ".W" + std::to_string(l) + "_" + std::to_string(j));
      t.gW[l][j] = Mat::Zero(t.W[l][j].rows(), t.W[l][j].cols());
    }
    t.b[l] = r.vec(prefix + ".b" + std::to_string(l));
    t.gb[l] = Vec::Zero(t.b[l].size());
  }
  t.readout.W = r.mat(prefix + ".ro.W");
  t.readout.b = r.vec(prefix + ".ro.b");
  t.readout.gW = Mat::Zero(t.readout.W.rows(), t.readout.W.cols());
  t.readout.gb = Vec::Zero(t.readout.b.size());
  return t;
}

inline void save_cond_encoder(CheckpointWriter& w, const std::string& prefix,
                              const CondEncoder& enc) {
  Json meta{{"kind", cond_kind_name(enc.kind)}, {"env_pool", enc.env_pool}};
  if (enc.kind == CondKind::Rff) {
    meta["feature_count"] = enc.rff.feature_count;
    meta["qmc"] = enc.rff.qmc;
  } else if (enc.kind == CondKind::Fks) {
    meta["feature_count"] = enc.fks.feature_count;
    meta["qmc"] = enc.fks.qmc;
    meta["basis_effective_n"] = enc.fks.basis.effective_n;
    meta["basis_dim"] = enc.fks.basis.dim;
  }
  w.set(prefix + ".meta", meta);

  switch (enc.kind) {
    case CondKind::None:
      break;
    case CondKind::Identity:
      save_standardizer(w, prefix + ".flat_std", enc.flat_std);
      break;
    case CondKind::Rff:
      save_standardizer(w, prefix + ".flat_std", enc.flat_std);
      w.add(prefix + ".rff.directions", enc.rff.directions);
      w.add(prefix + ".rff.phases", enc.rff.phases);
      break;
    case CondKind::Fks:
      save_standardizer(w, prefix + ".flat_std", enc.flat_std);
      w.add(prefix + ".fks.directions", enc.fks.directions);
      w.add(prefix + ".fks.weights", enc.fks.weights);
      w.add(prefix + ".fks.coeffs", enc.fks.basis.coeffs);
      break;
    case CondKind::Tcn:
      save_standardizer(w, prefix + ".row_std", enc.row_std);
      save_tcn(w, prefix + ".tcn", enc.tcn);
      break;
  }
  if (enc.env_pool > 0) save_standardizer(w, prefix + ".env_std", enc.env_std);
}

inline CondEncoder load_cond_encoder(const CheckpointReader& r,
                                     const std::string& prefix) {
  const Json& meta = r.meta().at(prefix + ".meta");
  CondEncoder enc;
  enc.kind = cond_kind_from_name(meta.at("kind").get<std::string>());
  enc.env_pool = meta.at("env_pool").get<int>();

  switch (enc.kind) {
    case CondKind::None:
      break;
    case CondKind::Identity:
      enc.flat_std = load_standardizer(r, prefix + ".flat_std");
      break;
    case CondKind::Rff:
      enc.flat_std = load_standardizer(r, prefix + ".flat_std");
      enc.rff.directions = r.mat(prefix + ".rff.directions");
      enc.rff.phases = r.vec(prefix + ".rff.phases");
      enc.rff.feature_count = meta.at("feature_count").get<int>();
      enc.rff.qmc = meta.at("qmc").get<bool>();
      break;
    case CondKind::Fks:
      enc.flat_std = load_standardizer(r, prefix + ".flat_std");
      enc.fks.directions = r.mat(prefix + ".fks.directions");
      enc.fks.weights = r.vec(prefix + ".fks.weights");
      enc.fks.basis.coeffs = r.vec(prefix + ".fks.coeffs");
      enc.fks.basis.effective_n = meta.at("basis_effective_n").get<int>();
      enc.fks.basis.dim = meta.at("basis_dim").get<int>();
      enc.fks.feature_count = meta.at("feature_count").get<int>();
      enc.fks.qmc = meta.at("qmc").get<bool>();
      break;
    case CondKind::Tcn:
      enc.row_std = load_standardizer(r, prefix + ".row_std");
      enc.tcn = load_tcn(r, prefix + ".tcn");
      break;
  }
  if (enc.env_pool > 0) enc.env_std = load_standardizer(r, prefix + ".env_std");
  return enc;
}

// ---------------------------------------------------------------------------
// Whole-model checkpoints
// ---------------------------------------------------------------------------

inline Json score_model_config_to_json(const ScoreModelConfig& c) {
  return Json{{"layout", layout_to_json(c.layout)},
              {"schedule", schedule_to_json(c.schedule)},
              {"cond_kind", cond_kind_name(c.cond_kind)},
              {"tcn", tcn_config_to_json(c.tcn)},
              {"env_pool", c.env_pool},
              {"feature_dim", c.feature_dim},
              {"kernel_sigma_scale", c.kernel_sigma_scale},
              {"hidden", c.hidden}};
}

inline ScoreModelConfig score_model_config_from_json(const Json& j) {
  ScoreModelConfig c;
  c.layout = layout_from_json(j.at("layout"));
  c.schedule = schedule_from_json(j.at("schedule"));
  c.cond_kind = cond_kind_from_name(j.at("cond_kind").get<std::string>());
  c.tcn = tcn_config_from_json(j.at("tcn"));
  c.env_pool = j.at("env_pool").get<int>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.kernel_sigma_scale = j.at("kernel_sigma_scale").get<double>();
  c.hidden = j.at("hidden").get<std::vector<int>>();
  return c;
}

inline void save_score_model(const std::filesystem::path& dir,
                             const std::string& stem, const ScoreModel& m,
                             const Json& extra_meta) {
  CheckpointWriter w(dir, stem);
  w.set("kind", "score_model");
  w.set("config", score_model_config_to_json(m.cfg));
  for (auto it = extra_meta.begin(); it != extra_meta.end(); ++it)
    w.set(it.key(), it.value());
  save_standardizer(w, "target_std", m.target_std);
  save_cond_encoder(w, "cond", m.cond);
  save_mlp(w, "net", m.net);
  w.finish();
}

inline ScoreModel load_score_model(const std::filesystem::path& dir,
                                   const std::string& stem,
                                   Json* meta_out = nullptr) {
  CheckpointReader r(dir, stem);
  require(r.meta().at("kind").get<std::string>() == "score_model",
          "checkpoint " + stem + " is not a score model");
  ScoreModel m;
  m.cfg = score_model_config_from_json(r.meta().at("config"));
  m.target_std = load_standardizer(r, "target_std");
  m.cond = load_cond_encoder(r, "cond");
  m.net = load_mlp(r, "net");
  if (meta_out) *meta_out = r.meta();
  return m;
}

inline Json mdn_config_to_json(const MdnConfig& c) {
  return Json{{"layout", layout_to_json(c.layout)},
              {"components", c.components},
              {"cond_kind", cond_kind_name(c.cond_kind)},
              {"tcn", tcn_config_to_json(c.tcn)},
              {"env_pool", c.env_pool},
              {"feature_dim", c.feature_dim},
              {"kernel_sigma_scale", c.kernel_sigma_scale},
              {"hidden", c.hidden}};
}

inline MdnConfig mdn_config_from_json(const Json& j) {
  MdnConfig c;
  c.layout = layout_from_json(j.at("layout"));
  c.components = j.at("components").get<int>();
  c.cond_kind = cond_kind_from_name(j.at("cond_kind").get<std::string>());
  c.tcn = tcn_config_from_json(j.at("tcn"));
  c.env_pool = j.at("env_pool").get<int>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.kernel_sigma_scale = j.at("kernel_sigma_scale").get<double>();
  c.hidden = j.at("hidden").get<std::vector<int>>();
  return c;
}

inline void save_mdn(const std::filesystem::path& dir, const std::string& stem,
                     const Mdn& m, const Json& extra_meta) {
  CheckpointWriter w(dir, stem);
  w.set("kind", "mdn");
  w.set("config", mdn_config_to_json(m.cfg));
  for (auto it = extra_meta.begin(); it != extra_meta.end(); ++it)
    w.set(it.key(), it.value());
  save_standardizer(w, "target_std", m.target_std);
  save_cond_encoder(w, "cond", m.cond);
  save_mlp(w, "net", m.net);
  w.finish();
}

inline Mdn load_mdn(const std::filesystem::path& dir, const std::string& stem,
                    Json* meta_out = nullptr) {
  CheckpointReader r(dir, stem);
  require(r.meta().at("kind").get<std::string>() == "mdn",
          "checkpoint " + stem + " is not a mixture density model");
  Mdn m;
  m.cfg = mdn_config_from_json(r.meta().at("config"));
  m.target_std = load_standardizer(r, "target_std");
  m.cond = load_cond_encoder(r, "cond");
  m.net = load_mlp(r, "net");
  if (meta_out) *meta_out = r.meta();
  return m;
}

inline void save_detector(const std::filesystem::path& dir,
                          const std::string& stem, const AnomalyDetector& d,
                          const Json& extra_meta) {
  CheckpointWriter w(dir, stem);
  w.set("kind", "detector");
  w.set("lambda", d.lambda);
  w.set("threshold", d.threshold);
  for (auto it = extra_meta.begin(); it != extra_meta.end(); ++it)
    w.set(it.key(), it.value());
  save_standardizer(w, "row_std", d.row_std);
  save_tcn(w, "encoder", d.encoder);
  w.finish();
}

inline AnomalyDetector load_detector(const std::filesystem::path& dir,
                                     const std::string& stem,
                                     Json* meta_out = nullptr) {
  CheckpointReader r(dir, stem);
  require(r.meta().at("kind").get<std::string>() == "detector",
          "checkpoint " + stem + " is not a detector");
  AnomalyDetector d;
  d.lambda = r.meta().at("lambda").get<double>();
  d.threshold = r.meta().at("threshold").get<double>();
  d.row_std = load_standardizer(r, "row_std");
  d.encoder = load_tcn(r, "encoder");
  if (meta_out) *meta_out = r.meta();
  return d;
}

// The driving policy and the hallucination policy ship in one checkpoint;
// they are trained and deployed together.
inline void save_policies(const std::filesystem::path& dir,
                          const std::string& stem, const Policy& pi,
                          const HallucinationPolicy& ph,
                          const Json& extra_meta) {
  CheckpointWriter w(dir, stem);
  w.set("kind", "policy");
  w.set("pi.dims", Json{{"state_dim", pi.state_dim},
                        {"action_dim", pi.action_dim},
                        {"patch_dim", pi.patch_dim},
                        {"version", pi.version}});
  w.set("ph.dims",
        Json{{"state_dim", ph.state_dim}, {"lever_dim", ph.lever_dim}});
  for (auto it = extra_meta.begin(); it != extra_meta.end(); ++it)
    w.set(it.key(), it.value());
  w.add("pi.log_std", pi.head.log_std);
  save_mlp(w, "pi.net", pi.head.net);
  w.add("ph.log_std", ph.head.log_std);
  save_mlp(w, "ph.net", ph.head.net);
  w.finish();
}

inline std::pair<Policy, HallucinationPolicy> load_policies(
    const std::filesystem::path& dir, const std::string& stem,
    Json* meta_out = nullptr) {
  CheckpointReader r(dir, stem);
  require(r.meta().at("kind").get<std::string>() == "policy",
          "checkpoint " + stem + " is not a policy");
  const Json& pd = r.meta().at("pi.dims");
  Policy pi;
  pi.state_dim = pd.at("state_dim").get<int>();
  pi.action_dim = pd.at("action_dim").get<int>();
  pi.patch_dim = pd.at("patch_dim").get<int>();
  pi.version = pd.at("version").get<int>();
  pi.head.net = load_mlp(r, "pi.net");
  pi.head.log_std = r.vec("pi.log_std");
  pi.head.in_dim = pi.state_dim + pi.patch_dim;
  pi.head.out_dim = pi.action_dim;

  const Json& hd = r.meta().at("ph.dims");
  HallucinationPolicy ph;
  ph.state_dim = hd.at("state_dim").get<int>();
  ph.lever_dim = hd.at("lever_dim").get<int>();
  ph.head.net = load_mlp(r, "ph.net");
  ph.head.log_std = r.vec("ph.log_std");
  ph.head.in_dim = ph.state_dim;
  ph.head.out_dim = ph.lever_dim;
  if (meta_out) *meta_out = r.meta();
  return {std::move(pi), std::move(ph)};
}

// Posterior sample sets persist through the same machinery: samples as one
// tensor plus summary statistics in the metadata.
inline void save_sample_set(const std::filesystem::path& dir,
                            const std::string& stem,
                            const PosteriorSampleSet& set,
                            const Json& extra_meta) {
  CheckpointWriter w(dir, stem);
  w.set("kind", "sample_set");
  w.set("layout", layout_to_json(set.layout));
  w.set("source", set.source);
  w.set("config_hash", set.config_hash);
  w.set("clamp_count", set.clamp_count);
  w.set("restart_count", set.restart_count);
  for (auto it = extra_meta.begin(); it != extra_meta.end(); ++it)
    w.set(it.key(), it.value());
  w.add("samples", set.samples);
  w.add("mean", set.mean);
  w.add("std", set.std);
  w.finish();
}

inline PosteriorSampleSet load_sample_set(const std::filesystem::path& dir,
                                          const std::string& stem,
                                          Json* meta_out = nullptr) {
  CheckpointReader r(dir, stem);
  require(r.meta().at("kind").get<std::string>() == "sample_set",
          "checkpoint " + stem + " is not a posterior sample set");
  PosteriorSampleSet set;
  set.layout = layout_from_json(r.meta().at("layout"));
  set.source = r.meta().at("source").get<std::string>();
  set.config_hash = r.meta().at("config_hash").get<std::string>();
  set.clamp_count = r.meta().at("clamp_count").get<int>();
  set.restart_count = r.meta().at("restart_count").get<int>();
  set.samples = r.mat("samples");
  set.finalize();
  if (meta_out) *meta_out = r.meta();
  return set;
}

}  // namespace nfc
