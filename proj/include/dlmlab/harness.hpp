#pragma once

// Experiment drivers: AR pretraining, conversion, evaluation, sweeps and the
// metrics records they emit. Every record is a flat JSON object carrying
// "schema", "run_id" and "kind"; report tables map kinds to CSV columns.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dlmlab/checkpoint.hpp"
#include "dlmlab/config.hpp"
#include "dlmlab/decoder.hpp"
#include "dlmlab/stats.hpp"

namespace dlmlab {

inline constexpr int kMetricsSchema = 1;

// Evaluation instances do not depend on the run seed, so every run is scored
// on the same items.
inline constexpr std::uint64_t kEvalSeed = 0x6576616c5eedULL;

namespace tag {
inline constexpr std::uint64_t init = 0x696e6974ULL;
inline constexpr std::uint64_t ar_data = 0x61726461ULL;
inline constexpr std::uint64_t ar_rng = 0x6172726eULL;
inline constexpr std::uint64_t cv_data = 0x63766461ULL;
inline constexpr std::uint64_t cv_rng = 0x6376726eULL;
inline constexpr std::uint64_t profile = 0x70726f66ULL;
inline constexpr std::uint64_t mc = 0x6d63ULL;
inline constexpr std::uint64_t decode = 0x6465636fULL;
}  // namespace tag

// ---------------------------------------------------------------------------
// Metrics sink

class MetricsLog {
 public:
  MetricsLog() = default;
  // Records go to `path` (truncated on open); an empty path keeps them in memory only.
  MetricsLog(std::filesystem::path path, std::string run_id) : path_(std::move(path)), run_id_(std::move(run_id)) {
    if (!path_.empty()) {
      if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
      std::ofstream f(path_, std::ios::trunc);
      if (!f) throw std::runtime_error("cannot open metrics file: " + path_.string());
    }
  }

  void write(const std::string& kind, const nlohmann::json& fields) {
    nlohmann::json rec = {{"schema", kMetricsSchema}, {"run_id", run_id_}, {"kind", kind}};
    rec.update(fields);
    std::string line = rec.dump();
    if (!path_.empty()) {
      std::ofstream f(path_, std::ios::app);
      f << line << '\n';
    }
    lines_.push_back(std::move(line));
  }

  const std::vector<std::string>& lines() const { return lines_; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::string run_id_;
  std::vector<std::string> lines_;
};

struct RunContext {
  std::filesystem::path dir;  // empty: no files are written
  MetricsLog log;
  std::ostream* progress = nullptr;

  // <output root>/<run_id>/, with the resolved config and <records>.jsonl.
  static RunContext open(const ExperimentConfig& cfg, const std::string& records) {
    RunContext ctx;
    ctx.dir = std::filesystem::path(output_root(cfg)) / cfg.run_id;
    std::filesystem::create_directories(ctx.dir);
    std::ofstream(ctx.dir / "config.conf", std::ios::trunc) << dump_config(cfg);
    ctx.log = MetricsLog(ctx.dir / (records + ".jsonl"), cfg.run_id);
    return ctx;
  }

  static RunContext in_memory(const std::string& run_id) {
    RunContext ctx;
    ctx.log = MetricsLog({}, run_id);
    return ctx;
  }

  bool on_disk() const { return !dir.empty(); }
};

// ---------------------------------------------------------------------------
// Data

// Bidirectional conversion treats the whole sequence as one block.
inline int conversion_block_size(const ExperimentConfig& cfg) {
  return cfg.attention == AttentionKind::bidirectional ? cfg.seq_len() : cfg.train_block_size;
}

inline BatchStream training_stream(const ExperimentConfig& cfg, int block_size, std::uint64_t stream) {
  const std::uint64_t seed = derive_seed(cfg.seed, stream);
  if (!cfg.corpus_path.empty())
    return BatchStream(CorpusSource{cfg.corpus_path}, cfg.seq_len(), cfg.batch, seed, block_size);
  return BatchStream(SyntheticSource{cfg.tasks, cfg.synth, cfg.shape}, cfg.seq_len(), cfg.batch, seed, block_size);
}

inline std::vector<TaskKind> mc_tasks(const ExperimentConfig& cfg) {
  std::vector<TaskKind> out;
  for (TaskKind k : cfg.tasks)
    if (k == TaskKind::modular_add || k == TaskKind::sorted_digits) out.push_back(k);
  if (out.empty()) out.push_back(TaskKind::modular_add);
  return out;
}

// ---------------------------------------------------------------------------
// Training

namespace detail {

// Logs the mean loss over each `every`-step window and the final step.
class StepLogger {
 public:
  StepLogger(RunContext& ctx, std::string phase, std::string tag, int every, int total)
      : ctx_(ctx), phase_(std::move(phase)), tag_(std::move(tag)), every_(std::max(1, every)), total_(total) {}

  void add(long step, const StepMetrics& m) {
    sum_ += m.loss;
    skipped_ += m.skipped ? 1 : 0;
    ++n_;
    if (step % every_ != 0 && step != total_) return;
    const double loss = sum_ / n_;
    ctx_.log.write("train", {{"phase", phase_}, {"tag", tag_}, {"step", step}, {"loss", loss},
                             {"grad_norm", m.grad_norm}, {"lr", m.lr}, {"skipped", skipped_}});
    if (ctx_.progress)
      *ctx_.progress << phase_ << ' ' << tag_ << " step " << step << '/' << total_ << " loss " << loss << '\n';
    sum_ = 0;
    n_ = 0;
    skipped_ = 0;
  }

 private:
  RunContext& ctx_;
  std::string phase_, tag_;
  int every_, total_;
  double sum_ = 0;
  int n_ = 0, skipped_ = 0;
};

}  // namespace detail

inline TrainState<float> run_pretrain_ar(const ExperimentConfig& cfg, RunContext& ctx) {
  cfg.validate();
  auto st = TrainState<float>::fresh(ModelParams<float>::init(cfg.model, derive_seed(cfg.seed, tag::init)),
                                     derive_seed(cfg.seed, tag::ar_rng));
  const BatchStream data = training_stream(cfg, 1, tag::ar_data);
  TrainObjective obj;
  obj.loss = LossKind::ar;
  OptimConfig opt = cfg.ar_optim;
  opt.total_steps = cfg.ar_steps;
  detail::StepLogger logger(ctx, "pretrain_ar", "ar", cfg.log_every, cfg.ar_steps);
  for (int s = 0; s < cfg.ar_steps; ++s)
    logger.add(s + 1, train_step(st, data.batch_at(static_cast<std::uint64_t>(s)), obj, opt));
  if (ctx.on_disk()) {
    const auto path = ctx.dir / "ar.ckpt";
    save_checkpoint(st, path.string());
    ctx.log.write("checkpoint", {{"tag", "ar"}, {"step", st.step}, {"path", path.string()}});
  }
  return st;
}

// Steps at which conversion snapshots are taken: S/16, S/8, S/4, S/2, S.
inline std::vector<long> checkpoint_schedule(long total) {
  std::set<long> s;
  for (long d : {16L, 8L, 4L, 2L, 1L})
    if (total / d > 0) s.insert(total / d);
  return {s.begin(), s.end()};
}

struct ConvertOptions {
  std::string tag = "convert";
  bool keep_snapshots = false;
  bool save_checkpoints = true;
};

struct Snapshot {
  long step = 0;
  ModelParams<float> params;
};

struct ConversionResult {
  TrainState<float> state;
  std::vector<Snapshot> snapshots;
  DriftReport drift;
};

// Continues training from AR weights under the dLM objective. Optimizer
// moments and the step counter start fresh; the architecture is the AR
// checkpoint's, with token_shift taken from the config.
inline ConversionResult run_convert(const ExperimentConfig& cfg, const ModelParams<float>& ar, RunContext& ctx,
                                    const ConvertOptions& o = {}) {
  cfg.validate();
  ModelParams<float> init = ar;
  init.config.token_shift = cfg.model.token_shift;
  ConversionResult res;
  res.state = TrainState<float>::fresh(std::move(init), derive_seed(cfg.seed, tag::cv_rng));
  const int bs = conversion_block_size(cfg);
  const BatchStream data = training_stream(cfg, bs, tag::cv_data);
  TrainObjective obj{LossKind::dlm, cfg.attention, cfg.schedule, cfg.clean};
  OptimConfig opt = cfg.optim;
  opt.total_steps = cfg.steps;
  const auto schedule = checkpoint_schedule(cfg.steps);
  detail::StepLogger logger(ctx, "convert", o.tag, cfg.log_every, cfg.steps);
  for (int s = 0; s < cfg.steps; ++s) {
    logger.add(s + 1, train_step(res.state, data.batch_at(static_cast<std::uint64_t>(s)), obj, opt));
    const long step = s + 1;
    if (!std::binary_search(schedule.begin(), schedule.end(), step)) continue;
    if (o.keep_snapshots) res.snapshots.push_back({step, res.state.params});
    if (ctx.on_disk() && o.save_checkpoints) {
      const auto path = ctx.dir / (o.tag + "_step" + std::to_string(step) + ".ckpt");
      save_checkpoint(res.state, path.string());
      ctx.log.write("checkpoint", {{"tag", o.tag}, {"step", step}, {"path", path.string()}});
    }
  }
  res.drift = weight_drift(ar, res.state.params);
  for (const auto& t : res.drift.tensors)
    ctx.log.write("drift", {{"tag", o.tag}, {"tensor", t.name}, {"relative_change", t.relative_change}});
  ctx.log.write("drift", {{"tag", o.tag}, {"tensor", "mean:attention"}, {"relative_change", res.drift.attention_mean}});
  ctx.log.write("drift", {{"tag", o.tag}, {"tensor", "mean:ffn"}, {"relative_change", res.drift.ffn_mean}});
  return res;
}

// ---------------------------------------------------------------------------
// Generation

struct GenerationPoint {
  TaskKind task = TaskKind::copy;
  int eval_block_size = 0;
  std::optional<double> tau;
  int n = 0;
  int correct = 0;
  long nfe = 0;
  long decoded = 0;

  double accuracy() const { return n ? static_cast<double>(correct) / n : 0.0; }
  double mean_nfe() const { return n ? static_cast<double>(nfe) / n : 0.0; }
  double tpf() const { return nfe ? static_cast<double>(decoded) / static_cast<double>(nfe) : 0.0; }
};

inline nlohmann::json to_json(const GenerationPoint& g) {
  return {{"task", to_string(g.task)},     {"eval_block_size", g.eval_block_size}, {"tau", threshold_label(g.tau)},
          {"n", g.n},                      {"accuracy", g.accuracy()},             {"mean_nfe", g.mean_nfe()},
          {"tpf", g.tpf()}};
}

inline DecodeConfig decode_config(const ExperimentConfig& cfg, int eval_block_size, std::optional<double> tau) {
  DecodeConfig dc;
  dc.eval_block_size = eval_block_size;
  dc.confidence_threshold = tau;
  dc.max_new_tokens = cfg.shape.target_region;
  dc.clean = cfg.clean;
  dc.seed = derive_seed(cfg.seed, tag::decode);
  return dc;
}

template <class T>
GenerationPoint eval_generation_point(const ModelParams<T>& p, const ExperimentConfig& cfg, TaskKind kind,
                                      int eval_block_size, std::optional<double> tau, int n,
                                      std::vector<DecodeTrace>* traces = nullptr) {
  GenerationPoint g{kind, eval_block_size, tau};
  const DecodeConfig dc = decode_config(cfg, eval_block_size, tau);
  for (int i = 0; i < n; ++i) {
    const TaskInstance inst = make_instance(kind, kEvalSeed, static_cast<std::uint64_t>(i), cfg.synth);
    const GenerateResult r = generate(p, format_prompt(inst.prompt, cfg.shape.prompt_region), dc);
    g.correct += check_completion(inst, detokenize(r.tokens)) ? 1 : 0;
    g.nfe += r.trace.nfe;
    g.decoded += r.trace.decoded_tokens;
    ++g.n;
    if (traces) traces->push_back(r.trace);
  }
  return g;
}

// The model's conversion setup, attached to evaluation records.
inline nlohmann::json setup_fields(const ExperimentConfig& cfg) {
  return {{"attention", to_string(cfg.attention)},
          {"train_block_size", conversion_block_size(cfg)},
          {"schedule", schedule_label(cfg.schedule)},
          {"token_shift", cfg.model.token_shift}};
}

// Every task x eval block size x threshold of the config.
template <class T>
std::vector<GenerationPoint> eval_generation(const ModelParams<T>& p, const ExperimentConfig& cfg, RunContext& ctx,
                                             const std::string& tag, long ckpt_step) {
  std::vector<GenerationPoint> out;
  for (TaskKind k : cfg.tasks)
    for (int bs : cfg.eval_block_sizes)
      for (const auto& tau : cfg.thresholds) {
        out.push_back(eval_generation_point(p, cfg, k, bs, tau, cfg.eval_instances));
        nlohmann::json rec = to_json(out.back());
        rec.update(setup_fields(cfg));
        rec["tag"] = tag;
        rec["ckpt_step"] = ckpt_step;
        ctx.log.write("generation", rec);
      }
  return out;
}

// Mean accuracy over tasks and the given thresholds at one eval block size.
inline double mix_accuracy(const std::vector<GenerationPoint>& pts, int eval_block_size,
                           const std::vector<std::optional<double>>& taus) {
  double s = 0;
  int n = 0;
  for (const auto& g : pts) {
    if (g.eval_block_size != eval_block_size) continue;
    if (std::find(taus.begin(), taus.end(), g.tau) == taus.end()) continue;
    s += g.accuracy();
    ++n;
  }
  if (!n) throw std::invalid_argument("mix_accuracy: no matching points");
  return s / n;
}

// ---------------------------------------------------------------------------
// Likelihood

// Monte Carlo negative ELBO: mean over draws of sum_masked NLL / t, with t
// uniform and uniform masking inside each trainable block.
template <class T>
double negative_elbo(const ModelParams<T>& p, const TokenSequence& seq, AttentionKind kind, CleanPattern clean,
                     int samples, std::uint64_t seed) {
  if (samples < 1) throw std::invalid_argument("negative_elbo: need at least one sample");
  double total = 0;
  for (int s = 0; s < samples; ++s) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(s)));
    const double t = sample_noise_level(rng);
    const NoiseInstance noise = corrupt(seq, MaskSchedule{}, t, rng);
    const LossResult r = dlm_loss<T>(p, seq, noise, kind, nullptr, clean);
    total += r.loss * r.count;
  }
  return total / samples;
}

struct LikelihoodPoint {
  TaskKind task = TaskKind::modular_add;
  int n = 0;
  int correct = 0;
  int samples = 0;
  bool shared_noise = true;

  double accuracy() const { return n ? static_cast<double>(correct) / n : 0.0; }
};

// Picks the choice with the lowest negative ELBO. With shared_noise every
// choice of an instance sees the same (t, mask) draws.
template <class T>
LikelihoodPoint eval_likelihood(const ModelParams<T>& p, const ExperimentConfig& cfg, TaskKind kind, int n,
                                int samples, bool shared_noise = true) {
  LikelihoodPoint lp{kind, 0, 0, samples, shared_noise};
  const int bs = conversion_block_size(cfg);
  for (int i = 0; i < n; ++i) {
    const TaskInstance inst = make_instance(kind, kEvalSeed, static_cast<std::uint64_t>(i), cfg.synth);
    if (!inst.is_multiple_choice()) throw std::invalid_argument("eval_likelihood: task has no choices");
    int best = -1;
    double best_v = std::numeric_limits<double>::infinity();
    for (size_t c = 0; c < inst.choices.size(); ++c) {
      const std::uint64_t base = derive_seed(kEvalSeed, tag::mc, static_cast<std::uint64_t>(i));
      const std::uint64_t seed = shared_noise ? base : derive_seed(base, 0x63ULL, c);
      const TokenSequence seq = format_instance(inst.prompt, inst.choices[c], cfg.shape, bs);
      const double v = negative_elbo(p, seq, cfg.attention, cfg.clean, samples, seed);
      if (v < best_v) {
        best_v = v;
        best = static_cast<int>(c);
      }
    }
    lp.correct += best == inst.correct_choice ? 1 : 0;
    ++lp.n;
  }
  return lp;
}

template <class T>
std::vector<LikelihoodPoint> eval_likelihood_all(const ModelParams<T>& p, const ExperimentConfig& cfg,
                                                 RunContext& ctx, const std::string& tag, long ckpt_step) {
  std::vector<LikelihoodPoint> out;
  for (TaskKind k : mc_tasks(cfg)) {
    out.push_back(eval_likelihood(p, cfg, k, cfg.mc_instances, cfg.mc_samples, true));
    nlohmann::json rec = {{"tag", tag},
                          {"ckpt_step", ckpt_step},
                          {"task", to_string(k)},
                          {"n", out.back().n},
                          {"samples", out.back().samples},
                          {"shared_noise", true},
                          {"accuracy", out.back().accuracy()}};
    rec.update(setup_fields(cfg));
    ctx.log.write("likelihood", rec);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Positional profiles

struct LossProfile {
  int block_size = 0;
  std::vector<double> in_block;     // mean NLL per in-block position
  std::vector<double> by_position;  // mean NLL per absolute position (NaN if never masked)
  std::vector<long> in_block_count, position_count;
};

// Raw (unweighted) NLL of masked positions under uniform corruption, on
// held-out items from the training distribution.
template <class T>
LossProfile loss_profile(const ModelParams<T>& p, const ExperimentConfig& cfg, int samples) {
  LossProfile prof;
  const int bs = conversion_block_size(cfg);
  const int L = cfg.seq_len();
  prof.block_size = bs;
  std::vector<double> ib(static_cast<size_t>(bs), 0.0), bp(static_cast<size_t>(L), 0.0);
  prof.in_block_count.assign(static_cast<size_t>(bs), 0);
  prof.position_count.assign(static_cast<size_t>(L), 0);
  const BatchStream data = training_stream(cfg, bs, tag::profile);
  for (int s = 0; s < samples; ++s) {
    const TokenSequence seq = data.item(static_cast<std::uint64_t>(s));
    Rng rng(derive_seed(cfg.seed, tag::profile, static_cast<std::uint64_t>(s)));
    const double t = sample_noise_level(rng);
    const NoiseInstance noise = corrupt(seq, MaskSchedule{}, t, rng);
    const LossResult r = dlm_loss<T>(p, seq, noise, cfg.attention, nullptr, cfg.clean);
    for (const auto& pl : r.per_position) {
      ib[static_cast<size_t>(pl.position % bs)] += pl.nll;
      ++prof.in_block_count[static_cast<size_t>(pl.position % bs)];
      bp[static_cast<size_t>(pl.position)] += pl.nll;
      ++prof.position_count[static_cast<size_t>(pl.position)];
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (size_t i = 0; i < ib.size(); ++i)
    prof.in_block.push_back(prof.in_block_count[i] ? ib[i] / static_cast<double>(prof.in_block_count[i]) : nan);
  for (size_t i = 0; i < bp.size(); ++i)
    prof.by_position.push_back(prof.position_count[i] ? bp[i] / static_cast<double>(prof.position_count[i]) : nan);
  return prof;
}

// Mean in-block decode step per position for one task, eval block size and
// threshold. NaN where no instance emitted that position.
template <class T>
std::vector<double> decode_step_profile(const ModelParams<T>& p, const ExperimentConfig& cfg, TaskKind kind,
                                        int eval_block_size, std::optional<double> tau, int n) {
  std::vector<DecodeTrace> traces;
  eval_generation_point(p, cfg, kind, eval_block_size, tau, n, &traces);
  return trace_position_steps(traces);
}

template <class T>
void analyze_profiles(const ModelParams<T>& p, const ExperimentConfig& cfg, RunContext& ctx, const std::string& tag) {
  const LossProfile prof = loss_profile(p, cfg, cfg.profile_samples);
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  for (size_t i = 0; i < prof.in_block.size(); ++i)
    ctx.log.write("position_loss", {{"tag", tag}, {"scope", "in_block"}, {"position", i},
                                    {"mean_nll", num(prof.in_block[i])}, {"count", prof.in_block_count[i]}});
  for (size_t i = 0; i < prof.by_position.size(); ++i)
    ctx.log.write("position_loss", {{"tag", tag}, {"scope", "sequence"}, {"position", i},
                                    {"mean_nll", num(prof.by_position[i])}, {"count", prof.position_count[i]}});
  if (!cfg.corpus_path.empty()) return;
  for (TaskKind k : cfg.tasks)
    for (int bs : cfg.eval_block_sizes)
      for (const auto& tau : cfg.thresholds) {
        const auto steps = decode_step_profile(p, cfg, k, bs, tau, cfg.profile_samples);
        for (size_t i = 0; i < steps.size(); ++i)
          ctx.log.write("position_steps", {{"tag", tag}, {"task", to_string(k)}, {"eval_block_size", bs},
                                           {"tau", threshold_label(tau)}, {"position", i},
                                           {"mean_step", num(steps[i])}});
      }
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepEntry {
  std::string label;
  ExperimentConfig cfg;
  std::vector<GenerationPoint> points;
  DriftReport drift;
};

inline SweepEntry run_variant(const ExperimentConfig& cfg, const ModelParams<float>& ar, RunContext& ctx,
                              const std::string& label) {
  SweepEntry e;
  e.label = label;
  e.cfg = cfg;
  ConvertOptions o;
  o.tag = label;
  o.save_checkpoints = false;
  const ConversionResult conv = run_convert(cfg, ar, ctx, o);
  e.points = eval_generation(conv.state.params, cfg, ctx, label, conv.state.step);
  e.drift = conv.drift;
  return e;
}

// One conversion per train block size; each is evaluated at every eval block size.
inline std::vector<SweepEntry> sweep_block_sizes(const ExperimentConfig& cfg, const ModelParams<float>& ar,
                                                 RunContext& ctx) {
  std::vector<SweepEntry> out;
  for (int bs : cfg.sweep_train_block_sizes) {
    ExperimentConfig c = cfg;
    c.train_block_size = bs;
    out.push_back(run_variant(c, ar, ctx, "blocks_" + std::to_string(bs)));
  }
  return out;
}

inline std::vector<SweepEntry> sweep_masking(const ExperimentConfig& cfg, const ModelParams<float>& ar,
                                             RunContext& ctx) {
  std::vector<SweepEntry> out;
  for (const auto& s : cfg.sweep_schedules) {
    ExperimentConfig c = cfg;
    c.schedule = parse_schedule(s);
    c.schedule.per_block_t = cfg.schedule.per_block_t;
    out.push_back(run_variant(c, ar, ctx, "mask_" + schedule_label(c.schedule)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report

struct ReportTable {
  std::string kind;
  std::string file;
  std::vector<std::string> columns;
};

// CSV layout per record kind. Bump kMetricsSchema when a column changes.
inline const std::vector<ReportTable>& report_tables() {
  static const std::vector<ReportTable> t = {
      {"train", "train.csv", {"run_id", "phase", "tag", "step", "loss", "grad_norm", "lr", "skipped"}},
      {"checkpoint", "checkpoints.csv", {"run_id", "tag", "step", "path"}},
      {"drift", "drift.csv", {"run_id", "tag", "tensor", "relative_change"}},
      {"generation",
       "generation.csv",
       {"run_id", "tag", "ckpt_step", "attention", "train_block_size", "schedule", "token_shift", "task",
        "eval_block_size", "tau", "n", "accuracy", "mean_nfe", "tpf"}},
      {"likelihood",
       "likelihood.csv",
       {"run_id", "tag", "ckpt_step", "attention", "train_block_size", "schedule", "token_shift", "task", "n",
        "samples", "shared_noise", "accuracy"}},
      {"position_loss", "position_loss.csv", {"run_id", "tag", "scope", "position", "mean_nll", "count"}},
      {"position_steps", "position_steps.csv", {"run_id", "tag", "task", "eval_block_size", "tau", "position", "mean_step"}},
  };
  return t;
}

namespace detail {

inline std::string csv_cell(const nlohmann::json& v) {
  if (v.is_null()) return "";
  std::string s = v.is_string() ? v.get<std::string>() : v.dump();
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

}  // namespace detail

// Gathers every *.jsonl record file under `dir` and writes one CSV per record
// kind into `dir`. Returns the files written.
inline std::vector<std::filesystem::path> emit_report(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> inputs;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".jsonl") inputs.push_back(e.path());
  std::sort(inputs.begin(), inputs.end());
  std::map<std::string, std::vector<nlohmann::json>> by_kind;
  for (const auto& in : inputs) {
    std::ifstream f(in);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json rec;
      try {
        rec = nlohmann::json::parse(line);
      } catch (const std::exception& e) {
        throw std::runtime_error(in.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
      if (rec.value("schema", 0) != kMetricsSchema)
        throw std::runtime_error(in.string() + ":" + std::to_string(lineno) + ": unsupported metrics schema");
      by_kind[rec.value("kind", "")].push_back(std::move(rec));
    }
  }
  std::vector<std::filesystem::path> written;
  for (const auto& t : report_tables()) {
    const auto it = by_kind.find(t.kind);
    if (it == by_kind.end()) continue;
    const auto path = dir / t.file;
    std::ofstream out(path, std::ios::trunc);
    out << "# dlmlab metrics schema " << kMetricsSchema << '\n';
    for (size_t c = 0; c < t.columns.size(); ++c) out << (c ? "," : "") << t.columns[c];
    out << '\n';
    for (const auto& rec : it->second) {
      for (size_t c = 0; c < t.columns.size(); ++c) {
        const auto f = rec.find(t.columns[c]);
        out << (c ? "," : "") << (f == rec.end() ? std::string() : detail::csv_cell(*f));
      }
      out << '\n';
    }
    written.push_back(path);
  }
  return written;
}

}  // namespace dlmlab
