#pragma once

// Flat key = value experiment configuration. Every field has a stable key
// used by config files, command-line flags and the run record.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dlmlab/corpus.hpp"
#include "dlmlab/decoder.hpp"
#include "dlmlab/masking.hpp"
#include "dlmlab/model.hpp"

namespace dlmlab {

struct ExperimentConfig {
  std::string run_id = "run";
  std::uint64_t seed = 1;
  std::string out_dir = "runs";

  ModelConfig model;

  // Data: synthetic tasks, or a plain-text corpus when corpus_path is set.
  std::vector<TaskKind> tasks{TaskKind::copy, TaskKind::modular_add};
  SyntheticOptions synth;
  SequenceShape shape{16, 8};
  std::string corpus_path;
  int corpus_seq_len = 32;

  // Conversion objective.
  AttentionKind attention = AttentionKind::block_clean;
  int train_block_size = 4;
  MaskSchedule schedule;
  CleanPattern clean = CleanPattern::block_causal;

  // Optimization.
  int batch = 16;
  int ar_steps = 1000;
  OptimConfig ar_optim{.lr = 2e-3, .lr_min = 2e-4, .warmup = 50};
  int steps = 1000;
  OptimConfig optim{.lr = 1e-3, .lr_min = 3e-4, .warmup = 0};
  int log_every = 50;

  // Evaluation.
  std::vector<int> eval_block_sizes{4, 8};
  std::vector<std::optional<double>> thresholds{std::nullopt, 0.9, 0.7, 0.5, 0.0};
  int eval_instances = 200;
  int mc_instances = 100;
  int mc_samples = 8;
  int profile_samples = 200;
  std::vector<int> sweep_train_block_sizes{2, 4, 8};
  std::vector<std::string> sweep_schedules{"uniform", "right_to_left", "position_dependent:0.25",
                                           "position_dependent:0.1", "position_dependent:0.05"};

  int seq_len() const { return corpus_path.empty() ? shape.length() : corpus_seq_len; }
  void validate() const;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw std::invalid_argument("expected boolean, got: " + s);
}

template <class T, class F>
std::string join(const std::vector<T>& v, F f) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
  return out;
}

}  // namespace detail

struct ConfigKey {
  std::string key;
  std::string help;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

// The registry of config keys, in file order.
inline const std::vector<ConfigKey>& config_keys() {
  using E = ExperimentConfig;
  using detail::fmt_double;
  auto int_key = [](std::string k, std::string h, int E::*f) {
    return ConfigKey{k, h, [f](E& c, const std::string& v) { c.*f = std::stoi(v); },
                     [f](const E& c) { return std::to_string(c.*f); }};
  };
  auto model_int = [](std::string k, std::string h, int ModelConfig::*f) {
    return ConfigKey{k, h, [f](E& c, const std::string& v) { c.model.*f = std::stoi(v); },
                     [f](const E& c) { return std::to_string(c.model.*f); }};
  };
  auto synth_int = [](std::string k, std::string h, int SyntheticOptions::*f) {
    return ConfigKey{k, h, [f](E& c, const std::string& v) { c.synth.*f = std::stoi(v); },
                     [f](const E& c) { return std::to_string(c.synth.*f); }};
  };
  auto optim = [](std::string prefix, OptimConfig E::*o) {
    std::vector<ConfigKey> keys;
    auto dbl = [&](std::string k, std::string h, double OptimConfig::*f) {
      keys.push_back({prefix + k, h, [o, f](E& c, const std::string& v) { (c.*o).*f = std::stod(v); },
                      [o, f](const E& c) { return fmt_double((c.*o).*f); }});
    };
    dbl("lr", "peak learning rate", &OptimConfig::lr);
    dbl("lr_min", "final learning rate of the cosine schedule", &OptimConfig::lr_min);
    dbl("weight_decay", "decoupled weight decay", &OptimConfig::weight_decay);
    dbl("beta1", "first-moment decay", &OptimConfig::beta1);
    dbl("beta2", "second-moment decay", &OptimConfig::beta2);
    dbl("grad_clip", "global gradient-norm clip (0 disables)", &OptimConfig::grad_clip);
    keys.push_back({prefix + "warmup", "linear warmup steps",
                    [o](E& c, const std::string& v) { (c.*o).warmup = std::stoi(v); },
                    [o](const E& c) { return std::to_string((c.*o).warmup); }});
    return keys;
  };

  static const std::vector<ConfigKey> keys = [&] {
    std::vector<ConfigKey> k;
    k.push_back({"run_id", "run identifier (output subdirectory)", [](E& c, const std::string& v) { c.run_id = v; },
                 [](const E& c) { return c.run_id; }});
    k.push_back({"seed", "master seed", [](E& c, const std::string& v) { c.seed = std::stoull(v); },
                 [](const E& c) { return std::to_string(c.seed); }});
    k.push_back({"out_dir", "output root", [](E& c, const std::string& v) { c.out_dir = v; },
                 [](const E& c) { return c.out_dir; }});
    k.push_back(model_int("model.d_model", "model width", &ModelConfig::d_model));
    k.push_back(model_int("model.n_heads", "attention heads", &ModelConfig::n_heads));
    k.push_back(model_int("model.n_layers", "transformer layers", &ModelConfig::n_layers));
    k.push_back(model_int("model.d_ffn", "feed-forward width", &ModelConfig::d_ffn));
    k.push_back(model_int("model.max_positions", "largest position index", &ModelConfig::max_positions));
    k.push_back({"model.token_shift", "read the prediction for position i from row i-1",
                 [](E& c, const std::string& v) { c.model.token_shift = detail::parse_bool(v); },
                 [](const E& c) { return std::string(c.model.token_shift ? "true" : "false"); }});
    k.push_back({"model.init_std", "initialization scale",
                 [](E& c, const std::string& v) { c.model.init_std = std::stod(v); },
                 [](const E& c) { return fmt_double(c.model.init_std); }});
    k.push_back({"tasks", "comma-separated synthetic task kinds",
                 [](E& c, const std::string& v) {
                   c.tasks.clear();
                   for (const auto& s : detail::split(v)) c.tasks.push_back(parse_task_kind(s));
                 },
                 [](const E& c) { return detail::join(c.tasks, [](TaskKind t) { return to_string(t); }); }});
    k.push_back(synth_int("synth.min_len", "shortest copy/reverse string", &SyntheticOptions::min_len));
    k.push_back(synth_int("synth.max_len", "longest copy/reverse string", &SyntheticOptions::max_len));
    k.push_back(synth_int("synth.alphabet", "letters used by copy/reverse", &SyntheticOptions::alphabet));
    k.push_back(synth_int("synth.max_operand", "largest modular_add operand", &SyntheticOptions::max_operand));
    k.push_back(synth_int("synth.min_modulus", "smallest modulus", &SyntheticOptions::min_modulus));
    k.push_back(synth_int("synth.max_modulus", "largest modulus", &SyntheticOptions::max_modulus));
    k.push_back(synth_int("synth.min_digits", "fewest digits for sorted_digits", &SyntheticOptions::min_digits));
    k.push_back(synth_int("synth.max_digits", "most digits for sorted_digits", &SyntheticOptions::max_digits));
    k.push_back({"prompt_region", "left-padded prompt length",
                 [](E& c, const std::string& v) { c.shape.prompt_region = std::stoi(v); },
                 [](const E& c) { return std::to_string(c.shape.prompt_region); }});
    k.push_back({"target_region", "eos-filled target length",
                 [](E& c, const std::string& v) { c.shape.target_region = std::stoi(v); },
                 [](const E& c) { return std::to_string(c.shape.target_region); }});
    k.push_back({"corpus_path", "plain-text corpus (replaces synthetic tasks)",
                 [](E& c, const std::string& v) { c.corpus_path = v; }, [](const E& c) { return c.corpus_path; }});
    k.push_back(int_key("corpus_seq_len", "sequence length for corpus streams", &E::corpus_seq_len));
    k.push_back({"attention", "bidirectional | block_noisy | block_clean",
                 [](E& c, const std::string& v) { c.attention = parse_attention_kind(v); },
                 [](const E& c) { return to_string(c.attention); }});
    k.push_back(int_key("train_block_size", "training block size", &E::train_block_size));
    k.push_back({"mask.mode", "uniform | position_dependent | right_to_left",
                 [](E& c, const std::string& v) { c.schedule.mode = parse_mask_mode(v); },
                 [](const E& c) { return to_string(c.schedule.mode); }});
    k.push_back({"mask.half_life", "half-life ratio (inf for uniform)",
                 [](E& c, const std::string& v) {
                   c.schedule.half_life_ratio = (v == "inf") ? kInfiniteHalfLife : std::stod(v);
                 },
                 [](const E& c) {
                   return std::isinf(c.schedule.half_life_ratio) ? std::string("inf")
                                                                 : fmt_double(c.schedule.half_life_ratio);
                 }});
    k.push_back({"mask.per_block_t", "draw a noise level per block",
                 [](E& c, const std::string& v) { c.schedule.per_block_t = detail::parse_bool(v); },
                 [](const E& c) { return std::string(c.schedule.per_block_t ? "true" : "false"); }});
    k.push_back({"clean_pattern", "block_causal | token_causal",
                 [](E& c, const std::string& v) { c.clean = parse_clean_pattern(v); },
                 [](const E& c) { return to_string(c.clean); }});
    k.push_back(int_key("batch", "sequences per step", &E::batch));
    k.push_back(int_key("ar.steps", "autoregressive pretraining steps", &E::ar_steps));
    for (auto& x : optim("ar.", &E::ar_optim)) k.push_back(std::move(x));
    k.push_back(int_key("steps", "conversion steps", &E::steps));
    for (auto& x : optim("optim.", &E::optim)) k.push_back(std::move(x));
    k.push_back(int_key("log_every", "training log interval", &E::log_every));
    k.push_back({"eval.block_sizes", "comma-separated evaluation block sizes",
                 [](E& c, const std::string& v) {
                   c.eval_block_sizes.clear();
                   for (const auto& s : detail::split(v)) c.eval_block_sizes.push_back(std::stoi(s));
                 },
                 [](const E& c) { return detail::join(c.eval_block_sizes, [](int x) { return std::to_string(x); }); }});
    k.push_back({"eval.thresholds", "comma-separated confidence thresholds ('off' for one token per step)",
                 [](E& c, const std::string& v) {
                   c.thresholds.clear();
                   for (const auto& s : detail::split(v)) c.thresholds.push_back(parse_threshold(s));
                 },
                 [](const E& c) { return detail::join(c.thresholds, [](const auto& t) { return threshold_label(t); }); }});
    k.push_back(int_key("eval.instances", "generation instances per task", &E::eval_instances));
    k.push_back(int_key("eval.mc_instances", "multiple-choice instances", &E::mc_instances));
    k.push_back(int_key("eval.mc_samples", "noise draws per likelihood estimate", &E::mc_samples));
    k.push_back(int_key("eval.profile_samples", "sequences for loss profiles", &E::profile_samples));
    k.push_back({"sweep.train_block_sizes", "training block sizes for the block sweep",
                 [](E& c, const std::string& v) {
                   c.sweep_train_block_sizes.clear();
                   for (const auto& s : detail::split(v)) c.sweep_train_block_sizes.push_back(std::stoi(s));
                 },
                 [](const E& c) {
                   return detail::join(c.sweep_train_block_sizes, [](int x) { return std::to_string(x); });
                 }});
    k.push_back({"sweep.schedules", "masking schedules: uniform, right_to_left, position_dependent:<half-life>",
                 [](E& c, const std::string& v) { c.sweep_schedules = detail::split(v); },
                 [](const E& c) { return detail::join(c.sweep_schedules, [](const std::string& s) { return s; }); }});
    return k;
  }();
  return keys;
}

inline const ConfigKey& find_config_key(const std::string& key) {
  for (const auto& k : config_keys())
    if (k.key == key) return k;
  throw std::invalid_argument("unknown config key: " + key);
}

inline void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  const auto& k = find_config_key(key);
  try {
    k.set(cfg, value);
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument("config key " + key + ": " + e.what());
  } catch (const std::out_of_range&) {
    throw std::invalid_argument("config key " + key + ": value out of range");
  }
}

// Parses "key = value" lines; '#' starts a comment.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig cfg = {}) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) { return parse_config(read_file(path)); }

inline std::string dump_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& k : config_keys()) out += k.key + " = " + k.get(cfg) + "\n";
  return out;
}

// Output root: DLMLAB_OUT overrides the configured directory.
inline std::string output_root(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv("DLMLAB_OUT"); env && *env) return env;
  return cfg.out_dir;
}

inline MaskSchedule parse_schedule(const std::string& s) {
  MaskSchedule m;
  const auto colon = s.find(':');
  m.mode = parse_mask_mode(s.substr(0, colon));
  if (m.mode == MaskMode::position_dependent) {
    if (colon == std::string::npos) throw std::invalid_argument("position_dependent schedule needs :<half-life>");
    m.half_life_ratio = std::stod(s.substr(colon + 1));
    half_life_to_beta(m.half_life_ratio, 1);  // validates
  }
  return m;
}

inline std::string schedule_label(const MaskSchedule& m) {
  if (m.mode == MaskMode::position_dependent) return "position_dependent:" + detail::fmt_double(m.half_life_ratio);
  return to_string(m.mode);
}

inline void ExperimentConfig::validate() const {
  model.validate();
  if (batch < 1 || steps < 0 || ar_steps < 0) throw std::invalid_argument("config: batch/steps must be positive");
  if (corpus_path.empty()) {
    if (tasks.empty()) throw std::invalid_argument("config: no tasks");
    const bool has_copy = std::find(tasks.begin(), tasks.end(), TaskKind::copy) != tasks.end();
    const bool has_rev = std::find(tasks.begin(), tasks.end(), TaskKind::reverse) != tasks.end();
    if (has_copy && has_rev)
      throw std::invalid_argument("config: copy and reverse share a prompt format and cannot be mixed");
  }
  auto check_bs = [&](int bs, const char* what) {
    if (bs < 1 || seq_len() % bs != 0)
      throw std::invalid_argument(std::string("config: ") + what + " " + std::to_string(bs) +
                                  " does not divide the sequence length");
  };
  check_bs(train_block_size, "train_block_size");
  for (int bs : eval_block_sizes) {
    if (bs < 1 || shape.target_region % bs != 0)
      throw std::invalid_argument("config: eval block size " + std::to_string(bs) + " does not divide the target region");
  }
  for (int bs : sweep_train_block_sizes) check_bs(bs, "sweep block size");
  for (const auto& t : thresholds)
    if (t && !(*t >= 0.0 && *t <= 1.0)) throw std::invalid_argument("config: thresholds must lie in [0,1] or be off");
  if (2 * seq_len() > model.max_positions)
    throw std::invalid_argument("config: max_positions must be at least twice the sequence length");
}

}  // namespace dlmlab
