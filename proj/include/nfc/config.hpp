#pragma once

// Experiment configuration: a single human-readable key = value file with
// [section] headers (a TOML subset), validated against a full schema.
// Unknown keys are rejected, every key has a printable default, and two
// hashes derive from the canonical key=value dump:
//   - the experiment hash over all keys except run.seed / run.out / run.jobs,
//     recorded in report rows so aggregation can refuse mixed configs;
//   - per-stage hashes over the key subsets each pipeline stage depends on,
//     recorded in stage artifacts (together with the seed) so reruns can
//     reuse artifacts exactly when they would be regenerated bit-identically.

#include "nfc/common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace nfc {

enum class ConfigType { Bool, Int, Float, Str, IntList, FloatList };

struct ConfigValue {
  ConfigType type = ConfigType::Str;
  bool b = false;
  std::int64_t i = 0;
  double f = 0.0;
  std::string s;
  std::vector<std::int64_t> ilist;
  std::vector<double> flist;
};

namespace detail {

struct SchemaEntry {
  const char* key;
  ConfigType type;
  const char* default_text;  // rendered exactly as it would appear in a file
};

// The full schema in print order. Defaults are the desk-scale budgets; the
// tiny configs used by tests and the smoke pipeline override the counts.
inline const std::vector<SchemaEntry>& config_schema() {
  static const std::vector<SchemaEntry> schema = {
      {"run.simulator", ConfigType::Str, "\"lingauss\""},
      {"run.lingauss_dim", ConfigType::Int, "3"},
      {"run.seed", ConfigType::Int, "0"},
      {"run.jobs", ConfigType::Int, "1"},
      {"run.out", ConfigType::Str, "\"runs/out\""},

      {"terrain.kind", ConfigType::Str, "\"flat\""},
      {"terrain.rows", ConfigType::Int, "33"},
      {"terrain.cols", ConfigType::Int, "33"},
      {"terrain.resolution", ConfigType::Float, "0.25"},
      {"terrain.roughness", ConfigType::Float, "0.05"},

      {"noise.process_std", ConfigType::Float, "0.005"},
      {"noise.depth_base_std", ConfigType::Float, "0.01"},
      {"noise.depth_range_coef", ConfigType::Float, "0.005"},
      {"noise.dropout_rate", ConfigType::Float, "0.02"},
      {"noise.quantization", ConfigType::Float, "0.0"},

      {"prior.kind", ConfigType::Str, "\"gaussian\""},
      {"prior.scale", ConfigType::Float, "0.15"},
      {"prior.floor", ConfigType::Float, "0.2"},

      {"fidelity.delta_s", ConfigType::Bool, "true"},
      {"fidelity.ds_scale", ConfigType::Float, "0.02"},
      {"fidelity.de_pool", ConfigType::Int, "0"},
      {"fidelity.de_scale", ConfigType::Float, "0.05"},

      {"pretrain.episodes", ConfigType::Int, "10000"},
      {"pretrain.window", ConfigType::Int, "32"},
      {"pretrain.policy_iterations", ConfigType::Int, "20"},
      {"pretrain.policy_worlds", ConfigType::Int, "8"},
      {"pretrain.policy_rollouts", ConfigType::Int, "2"},
      {"pretrain.policy_hidden", ConfigType::IntList, "[32]"},
      {"pretrain.policy_lr", ConfigType::Float, "0.01"},
      {"pretrain.hallu_hidden", ConfigType::IntList, "[16]"},

      {"estimator.kind", ConfigType::Str, "\"diffusion\""},
      {"estimator.features", ConfigType::Str, "\"tcn\""},
      {"estimator.hidden", ConfigType::IntList, "[128, 128]"},
      {"estimator.feature_dim", ConfigType::Int, "128"},
      {"estimator.sigma_scale", ConfigType::Float, "1.0"},
      {"estimator.env_pool", ConfigType::Int, "0"},
      {"estimator.components", ConfigType::Int, "5"},
      {"estimator.epochs", ConfigType::Int, "30"},
      {"estimator.batch", ConfigType::Int, "64"},
      {"estimator.lr", ConfigType::Float, "0.001"},
      {"estimator.samples", ConfigType::Int, "2000"},
      {"estimator.steps", ConfigType::Int, "200"},
      {"estimator.tcn_channels", ConfigType::IntList, "[64, 32, 16, 8]"},
      {"estimator.tcn_kernel", ConfigType::Int, "5"},
      {"estimator.tcn_embed", ConfigType::Int, "16"},
      {"estimator.abc_sims", ConfigType::Int, "1000"},
      {"estimator.abc_acceptance", ConfigType::Float, "0.01"},
      {"estimator.smc_particles", ConfigType::Int, "200"},
      {"estimator.smc_rounds", ConfigType::Int, "3"},
      {"estimator.smc_quantile", ConfigType::Float, "0.5"},

      {"detector.lambda", ConfigType::Float, "0.33"},
      {"detector.channels", ConfigType::IntList, "[64, 32, 16, 8]"},
      {"detector.kernel_width", ConfigType::Int, "5"},
      {"detector.embed_dim", ConfigType::Int, "16"},
      {"detector.epochs", ConfigType::Int, "10"},
      {"detector.batch", ConfigType::Int, "32"},
      {"detector.lr", ConfigType::Float, "0.001"},
      {"detector.injection_magnitude", ConfigType::Float, "2.0"},
      {"detector.anomaly_threshold", ConfigType::Float, "0.0"},

      {"reward.goal_x", ConfigType::Float, "3.0"},
      {"reward.goal_y", ConfigType::Float, "0.0"},
      {"reward.progress", ConfigType::Float, "1.0"},
      {"reward.heading", ConfigType::Float, "0.1"},
      {"reward.smoothness", ConfigType::Float, "0.05"},
      {"reward.gamma", ConfigType::Float, "0.99"},
      {"reward.horizon", ConfigType::Int, "50"},
      {"reward.tolerance", ConfigType::Float, "0.3"},

      {"adapt.episodes", ConfigType::Int, "50"},
      {"adapt.worlds", ConfigType::Int, "8"},
      {"adapt.iterations", ConfigType::Int, "3"},
      {"adapt.posterior_samples", ConfigType::Int, "2000"},
      {"adapt.posterior_steps", ConfigType::Int, "120"},
      {"adapt.de_steps", ConfigType::Int, "60"},
      {"adapt.seq_sims", ConfigType::Int, "32"},
      {"adapt.seq_epochs", ConfigType::Int, "6"},
      {"adapt.seq_batch", ConfigType::Int, "16"},
      {"adapt.seq_lr", ConfigType::Float, "0.0005"},
      {"adapt.refit_epochs", ConfigType::Int, "2"},
      {"adapt.scenario", ConfigType::Str, "\"nominal\""},
      {"adapt.fault_episode", ConfigType::Int, "2"},
      {"adapt.fault_param", ConfigType::Str, "\"\""},
      {"adapt.fault_value", ConfigType::Float, "0.0"},
      {"adapt.truth_ds", ConfigType::FloatList, "[]"},
      {"adapt.rollouts", ConfigType::Int, "2"},
      {"adapt.eval_rollouts", ConfigType::Int, "2"},
      {"adapt.inner_epochs", ConfigType::Int, "4"},
      {"adapt.clip", ConfigType::Float, "0.2"},
      {"adapt.lr", ConfigType::Float, "0.003"},
      {"adapt.lr_hallu", ConfigType::Float, "0.01"},
      {"adapt.nfc", ConfigType::Bool, "true"},
      {"adapt.residual_fidelity", ConfigType::Bool, "true"},
      {"adapt.eval_episodes", ConfigType::Int, "4"},
  };
  return schema;
}

inline std::string trim(std::string_view s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string_view::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return std::string(s.substr(a, b - a + 1));
}

inline ConfigError config_error_at(int line, const std::string& msg) {
  return ConfigError("config line " + std::to_string(line) + ": " + msg);
}

inline std::int64_t parse_int(const std::string& text, int line) {
  std::int64_t v = 0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [p, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || p != last)
    throw config_error_at(line, "expected an integer, got '" + text + "'");
  return v;
}

inline double parse_float(const std::string& text, int line) {
  try {
    std::size_t used = 0;
    double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw config_error_at(line, "expected a number, got '" + text + "'");
  }
}

inline std::string parse_string(const std::string& text, int line) {
  if (text.size() < 2 || text.front() != '"' || text.back() != '"')
    throw config_error_at(line, "expected a quoted string, got '" + text + "'");
  std::string out;
  for (std::size_t i = 1; i + 1 < text.size(); ++i) {
    char c = text[i];
    if (c == '\\') {
      ++i;
      if (i + 1 >= text.size() + 1 || i >= text.size() - 0)
        throw config_error_at(line, "dangling escape in string");
      char e = text[i];
      if (e == '"' || e == '\\') out += e;
      else throw config_error_at(line, "unsupported escape in string");
    } else if (c == '"') {
      throw config_error_at(line, "unescaped quote inside string");
    } else {
      out += c;
    }
  }
  return out;
}

template <typename T, typename ParseOne>
std::vector<T> parse_list(const std::string& text, int line, ParseOne one) {
  if (text.size() < 2 || text.front() != '[' || text.back() != ']')
    throw config_error_at(line, "expected a [list], got '" + text + "'");
  std::vector<T> out;
  std::string inner = trim(std::string_view(text).substr(1, text.size() - 2));
  if (inner.empty()) return out;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = inner.find(',', start);
    std::string item = trim(std::string_view(inner).substr(
        start, comma == std::string::npos ? std::string::npos : comma - start));
    if (item.empty()) throw config_error_at(line, "empty list element");
    out.push_back(one(item, line));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline ConfigValue parse_value(ConfigType type, const std::string& text,
                               int line) {
  ConfigValue v;
  v.type = type;
  switch (type) {
    case ConfigType::Bool:
      if (text == "true") v.b = true;
      else if (text == "false") v.b = false;
      else throw config_error_at(line, "expected true or false, got '" + text + "'");
      break;
    case ConfigType::Int:
      v.i = parse_int(text, line);
      break;
    case ConfigType::Float:
      v.f = parse_float(text, line);
      break;
    case ConfigType::Str:
      v.s = parse_string(text, line);
      break;
    case ConfigType::IntList:
      v.ilist = parse_list<std::int64_t>(text, line, parse_int);
      break;
    case ConfigType::FloatList:
      v.flist = parse_list<double>(text, line, parse_float);
      break;
  }
  return v;
}

inline std::string render_value(const ConfigValue& v) {
  using Json = nlohmann::json;
  std::ostringstream out;
  switch (v.type) {
    case ConfigType::Bool: return v.b ? "true" : "false";
    case ConfigType::Int: return std::to_string(v.i);
    case ConfigType::Float: return Json(v.f).dump();
    case ConfigType::Str: return Json(v.s).dump();
    case ConfigType::IntList: {
      out << "[";
      for (std::size_t i = 0; i < v.ilist.size(); ++i)
        out << (i ? ", " : "") << v.ilist[i];
      out << "]";
      return out.str();
    }
    case ConfigType::FloatList: {
      out << "[";
      for (std::size_t i = 0; i < v.flist.size(); ++i)
        out << (i ? ", " : "") << Json(v.flist[i]).dump();
      out << "]";
      return out.str();
    }
  }
  throw ContractViolation("render_value: unknown type");
}

}  // namespace detail

// Validated experiment configuration: the full schema with defaults overlaid
// by an optional config file and then by command-line flags.
class ExperimentConfig {
 public:
  static ExperimentConfig defaults() {
    ExperimentConfig cfg;
    for (const auto& entry : detail::config_schema())
      cfg.values_[entry.key] =
          detail::parse_value(entry.type, entry.default_text, 0);
    return cfg;
  }

  // Parses TOML-style text on top of the defaults. Unknown keys, type
  // mismatches, bare keys outside a section, and duplicates are rejected.
  static ExperimentConfig from_text(const std::string& text) {
    ExperimentConfig cfg = defaults();
    std::istringstream in(text);
    std::string raw;
    std::string section;
    std::map<std::string, int> seen;
    int line_no = 0;
    while (std::getline(in, raw)) {
      ++line_no;
      std::string line = strip_comment(raw, line_no);
      line = detail::trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw detail::config_error_at(line_no, "unterminated [section]");
        section = detail::trim(
            std::string_view(line).substr(1, line.size() - 2));
        if (section.empty())
          throw detail::config_error_at(line_no, "empty section name");
        continue;
      }
      std::size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw detail::config_error_at(line_no, "expected key = value");
      std::string key = detail::trim(std::string_view(line).substr(0, eq));
      std::string value = detail::trim(std::string_view(line).substr(eq + 1));
      if (key.empty())
        throw detail::config_error_at(line_no, "missing key before '='");
      if (section.empty())
        throw detail::config_error_at(
            line_no, "key '" + key + "' appears outside a [section]");
      std::string full = section + "." + key;
      const detail::SchemaEntry* entry = find_schema(full);
      if (!entry)
        throw detail::config_error_at(line_no, "unknown key '" + full + "'");
      if (auto it = seen.find(full); it != seen.end())
        throw detail::config_error_at(
            line_no, "duplicate key '" + full + "' (first set on line " +
                         std::to_string(it->second) + ")");
      seen[full] = line_no;
      cfg.values_[full] = detail::parse_value(entry->type, value, line_no);
    }
    return cfg;
  }

  // Typed getters; a type mismatch here is a programming error, not a user
  // error, because the schema fixed the type at parse time.
  bool get_bool(const std::string& key) const {
    return at(key, ConfigType::Bool).b;
  }
  std::int64_t get_int(const std::string& key) const {
    return at(key, ConfigType::Int).i;
  }
  double get_float(const std::string& key) const {
    const ConfigValue& v = values_.at(checked(key));
    if (v.type == ConfigType::Int) return static_cast<double>(v.i);
    require(v.type == ConfigType::Float, "config key " + key + ": not a float");
    return v.f;
  }
  const std::string& get_str(const std::string& key) const {
    return at(key, ConfigType::Str).s;
  }
  std::vector<int> get_int_list(const std::string& key) const {
    const auto& raw = at(key, ConfigType::IntList).ilist;
    std::vector<int> out;
    out.reserve(raw.size());
    for (auto v : raw) out.push_back(static_cast<int>(v));
    return out;
  }
  const std::vector<double>& get_float_list(const std::string& key) const {
    return at(key, ConfigType::FloatList).flist;
  }

  std::uint64_t seed() const {
    std::int64_t s = get_int("run.seed");
    if (s < 0) throw ConfigError("run.seed must be non-negative");
    return static_cast<std::uint64_t>(s);
  }
  int jobs() const { return static_cast<int>(get_int("run.jobs")); }
  std::string out_dir() const { return get_str("run.out"); }

  // Typed setters used by the command-line flag overrides.
  void set_int(const std::string& key, std::int64_t v) {
    mutate(key, ConfigType::Int).i = v;
  }
  void set_float(const std::string& key, double v) {
    mutate(key, ConfigType::Float).f = v;
  }
  void set_str(const std::string& key, const std::string& v) {
    mutate(key, ConfigType::Str).s = v;
  }
  void set_bool(const std::string& key, bool v) {
    mutate(key, ConfigType::Bool).b = v;
  }

  // Semantic validation beyond per-key types.
  void validate() const {
    check_choice("run.simulator", {"lingauss", "diffdrive"});
    check_choice("terrain.kind", {"flat", "rough"});
    check_choice("prior.kind", {"uniform", "gaussian"});
    check_choice("estimator.kind", {"diffusion", "mdn", "abc", "smc"});
    check_choice("estimator.features", {"tcn", "rff", "fks", "identity"});
    check_choice("adapt.scenario", {"nominal", "broken_axle"});
    check_positive_int({"run.lingauss_dim", "run.jobs", "terrain.rows",
                        "terrain.cols", "pretrain.episodes", "pretrain.window",
                        "pretrain.policy_worlds", "pretrain.policy_rollouts",
                        "estimator.feature_dim", "estimator.components",
                        "estimator.batch", "estimator.samples",
                        "estimator.steps", "estimator.tcn_kernel",
                        "estimator.tcn_embed", "estimator.abc_sims",
                        "estimator.smc_particles", "estimator.smc_rounds",
                        "detector.kernel_width", "detector.embed_dim",
                        "detector.batch", "adapt.episodes", "adapt.worlds",
                        "adapt.posterior_samples", "adapt.posterior_steps",
                        "adapt.de_steps", "adapt.seq_sims", "adapt.seq_batch",
                        "reward.horizon", "adapt.rollouts",
                        "adapt.eval_rollouts", "adapt.inner_epochs",
                        "adapt.eval_episodes"});
    check_non_negative_int({"run.seed", "pretrain.policy_iterations",
                            "estimator.epochs", "detector.epochs",
                            "adapt.iterations", "adapt.seq_epochs",
                            "adapt.refit_epochs", "adapt.fault_episode",
                            "fidelity.de_pool", "estimator.env_pool"});
    check_positive_float({"terrain.resolution", "prior.scale", "prior.floor",
                          "fidelity.ds_scale", "fidelity.de_scale",
                          "estimator.sigma_scale", "estimator.lr",
                          "detector.lambda", "detector.lr", "adapt.seq_lr",
                          "adapt.clip", "adapt.lr", "adapt.lr_hallu",
                          "pretrain.policy_lr"});
    check_non_negative_float({"terrain.roughness", "noise.process_std",
                              "noise.depth_base_std", "noise.depth_range_coef",
                              "noise.dropout_rate", "noise.quantization",
                              "detector.injection_magnitude",
                              "detector.anomaly_threshold",
                              "reward.progress", "reward.heading",
                              "reward.smoothness"});
    for (const char* key :
         {"estimator.hidden", "estimator.tcn_channels", "detector.channels",
          "pretrain.policy_hidden", "pretrain.hallu_hidden"}) {
      auto list = get_int_list(key);
      if (list.empty())
        throw ConfigError(std::string(key) + " must not be empty");
      for (int v : list)
        if (v < 1)
          throw ConfigError(std::string(key) + " entries must be >= 1");
    }
    if (get_int("estimator.samples") < 50)
      throw ConfigError("estimator.samples must be >= 50");
    if (get_int("adapt.posterior_samples") < 50)
      throw ConfigError("adapt.posterior_samples must be >= 50");
    if (get_int("estimator.steps") < 2)
      throw ConfigError("estimator.steps must be >= 2");
    if (get_int("adapt.posterior_steps") < 2 || get_int("adapt.de_steps") < 2)
      throw ConfigError("adapt sampler step counts must be >= 2");
    double acc = get_float("estimator.abc_acceptance");
    if (acc <= 0.0 || acc > 1.0)
      throw ConfigError("estimator.abc_acceptance must lie in (0, 1]");
    double q = get_float("estimator.smc_quantile");
    if (q <= 0.0 || q > 1.0)
      throw ConfigError("estimator.smc_quantile must lie in (0, 1]");
    double g = get_float("reward.gamma");
    if (g < 0.0 || g >= 1.0)
      throw ConfigError("reward.gamma must lie in [0, 1)");
    double thr = get_float("detector.anomaly_threshold");
    if (thr > 1.0)
      throw ConfigError("detector.anomaly_threshold must lie in [0, 1]");
    double clip = get_float("adapt.clip");
    if (clip >= 1.0) throw ConfigError("adapt.clip must lie in (0, 1)");
    double drop = get_float("noise.dropout_rate");
    if (drop >= 1.0) throw ConfigError("noise.dropout_rate must lie in [0, 1)");
  }

  // Renders every key grouped by section in schema order; this is what
  // --print-config emits and what the config snapshot stores. The output
  // parses back to an identical configuration.
  std::string print() const {
    std::ostringstream out;
    std::string section;
    for (const auto& entry : detail::config_schema()) {
      std::string key = entry.key;
      std::string sec = key.substr(0, key.find('.'));
      std::string name = key.substr(key.find('.') + 1);
      if (sec != section) {
        if (!section.empty()) out << "\n";
        out << "[" << sec << "]\n";
        section = sec;
      }
      out << name << " = " << detail::render_value(values_.at(key)) << "\n";
    }
    return out.str();
  }

  // Canonical "key = value" dump of the keys selected by `prefixes`
  // (section names or full keys), minus the execution-identity keys.
  std::string canonical(const std::vector<std::string>& prefixes) const {
    std::ostringstream out;
    for (const auto& entry : detail::config_schema()) {
      std::string key = entry.key;
      if (key == "run.seed" || key == "run.out" || key == "run.jobs") continue;
      bool keep = false;
      for (const auto& p : prefixes) {
        if (key == p || key.rfind(p + ".", 0) == 0) {
          keep = true;
          break;
        }
      }
      if (!keep) continue;
      out << key << " = " << detail::render_value(values_.at(key)) << "\n";
    }
    return out.str();
  }

  // Experiment identity: everything that defines the experiment, excluding
  // the seed and the execution knobs.
  std::string experiment_hash() const {
    return hash_hex(canonical({"run", "terrain", "noise", "prior", "fidelity",
                               "pretrain", "estimator", "detector", "reward",
                               "adapt"}));
  }

  // Stage identities for artifact reuse. Stages hash only the keys whose
  // change would alter the artifact.
  std::string stage_hash(const std::string& stage) const {
    const std::vector<std::string> dataset = {
        "run.simulator", "run.lingauss_dim", "terrain", "noise",
        "prior",         "fidelity",         "pretrain.episodes",
        "pretrain.window"};
    std::vector<std::string> keys = dataset;
    if (stage == "dataset") {
    } else if (stage == "nfc") {
      keys.push_back("estimator");
    } else if (stage == "detector") {
      keys.push_back("detector.lambda");
      keys.push_back("detector.channels");
      keys.push_back("detector.kernel_width");
      keys.push_back("detector.embed_dim");
      keys.push_back("detector.epochs");
      keys.push_back("detector.batch");
      keys.push_back("detector.lr");
      keys.push_back("detector.injection_magnitude");
    } else if (stage == "policy") {
      keys.push_back("reward");
      keys.push_back("pretrain.policy_iterations");
      keys.push_back("pretrain.policy_worlds");
      keys.push_back("pretrain.policy_rollouts");
      keys.push_back("pretrain.policy_hidden");
      keys.push_back("pretrain.policy_lr");
      keys.push_back("pretrain.hallu_hidden");
      keys.push_back("estimator.kind");  // fixes the hallucination lever width
      keys.push_back("estimator.features");
    } else {
      throw ContractViolation("stage_hash: unknown stage '" + stage + "'");
    }
    return hash_hex(canonical(keys));
  }

 private:
  static std::string strip_comment(const std::string& line, int line_no) {
    bool in_string = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      char c = line[i];
      if (c == '"' && (i == 0 || line[i - 1] != '\\')) in_string = !in_string;
      if (c == '#' && !in_string) return line.substr(0, i);
    }
    if (in_string)
      throw detail::config_error_at(line_no, "unterminated string");
    return line;
  }

  static const detail::SchemaEntry* find_schema(const std::string& key) {
    for (const auto& entry : detail::config_schema())
      if (key == entry.key) return &entry;
    return nullptr;
  }

  static std::string hash_hex(const std::string& text) {
    std::uint64_t h = fnv1a64(text);
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << h;
    return out.str();
  }

  const std::string& checked(const std::string& key) const {
    require(find_schema(key) != nullptr, "config key not in schema: " + key);
    return key;
  }

  const ConfigValue& at(const std::string& key, ConfigType type) const {
    const ConfigValue& v = values_.at(checked(key));
    require(v.type == type, "config key " + key + ": type mismatch");
    return v;
  }

  ConfigValue& mutate(const std::string& key, ConfigType type) {
    ConfigValue& v = values_.at(checked(key));
    if (v.type != type)
      throw ConfigError("flag override for " + key + " has the wrong type");
    return v;
  }

  void check_choice(const std::string& key,
                    const std::vector<std::string>& allowed) const {
    const std::string& v = get_str(key);
    if (std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
      std::string opts;
      for (const auto& a : allowed) opts += (opts.empty() ? "" : ", ") + a;
      throw ConfigError(key + " must be one of {" + opts + "}, got '" + v +
                        "'");
    }
  }

  void check_positive_int(const std::vector<std::string>& keys) const {
    for (const auto& k : keys)
      if (get_int(k) < 1) throw ConfigError(k + " must be >= 1");
  }
  void check_non_negative_int(const std::vector<std::string>& keys) const {
    for (const auto& k : keys)
      if (get_int(k) < 0) throw ConfigError(k + " must be >= 0");
  }
  void check_positive_float(const std::vector<std::string>& keys) const {
    for (const auto& k : keys)
      if (get_float(k) <= 0.0) throw ConfigError(k + " must be > 0");
  }
  void check_non_negative_float(const std::vector<std::string>& keys) const {
    for (const auto& k : keys)
      if (get_float(k) < 0.0) throw ConfigError(k + " must be >= 0");
  }

  std::map<std::string, ConfigValue> values_;
};

}  // namespace nfc
