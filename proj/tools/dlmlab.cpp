// dlmlab: command-line driver for AR pretraining, conversion, decoding and
// the evaluation/sweep harness.
//
// Every config key is also a flag (--model.d_model 64, --attention block_noisy).
// Flags override --config. Outputs go to $DLMLAB_OUT/<run_id>/ (or out_dir).

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "dlmlab/attention.hpp"
#include "dlmlab/checkpoint.hpp"
#include "dlmlab/config.hpp"
#include "dlmlab/decoder.hpp"
#include "dlmlab/harness.hpp"

namespace fs = std::filesystem;
using namespace dlmlab;

namespace {

struct ConfigFlags {
  std::string file;
  std::map<std::string, std::string> overrides;
  std::string dump_layout;  // "", "ascii" or "pgm"

  void attach(CLI::App* app) {
    app->add_option("--config", file, "flat key = value config file")->check(CLI::ExistingFile);
    app->add_option("--dump-layout", dump_layout, "print the training attention layout (ascii|pgm) first")
        ->check(CLI::IsMember({"ascii", "pgm"}));
    for (const auto& k : config_keys()) {
      app->add_option_function<std::string>(
             "--" + k.key, [this, key = k.key](const std::string& v) { overrides[key] = v; }, k.help)
          ->group("Config");
    }
  }

  ExperimentConfig resolve() const {
    ExperimentConfig cfg = file.empty() ? ExperimentConfig{} : load_config(file);
    for (const auto& [k, v] : overrides) set_config_value(cfg, k, v);
    cfg.validate();
    return cfg;
  }
};

AttentionLayout training_layout(const ExperimentConfig& cfg) {
  const int L = cfg.seq_len();
  switch (cfg.attention) {
    case AttentionKind::bidirectional: return bidirectional_layout(L);
    case AttentionKind::block_noisy: return block_noisy_layout(L, cfg.train_block_size);
    case AttentionKind::block_clean: return block_clean_layout(L, cfg.train_block_size, cfg.clean);
  }
  throw std::logic_error("unreachable");
}

void maybe_dump_layout(const ConfigFlags& f, const ExperimentConfig& cfg) {
  if (f.dump_layout.empty()) return;
  const AttentionLayout layout = training_layout(cfg);
  std::cout << (f.dump_layout == "pgm" ? to_pgm(layout) : to_ascii(layout));
}

std::string run_file(const ExperimentConfig& cfg, const std::string& name) {
  return (fs::path(output_root(cfg)) / cfg.run_id / name).string();
}

std::string last_convert_checkpoint(const ExperimentConfig& cfg) {
  return run_file(cfg, "convert_step" + std::to_string(cfg.steps) + ".ckpt");
}

ModelParams<float> load_params(const std::string& path) {
  return load_checkpoint<float>(path).params;
}

long load_step(const std::string& path) { return load_checkpoint<float>(path).step; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dlmlab: convert small autoregressive models into block diffusion models"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "no progress output");

  std::map<std::string, ConfigFlags> flags;
  auto sub = [&](const std::string& name, const std::string& help) {
    CLI::App* s = app.add_subcommand(name, help);
    flags[name].attach(s);
    return s;
  };

  std::string ckpt, prompt, trace_out;
  int eval_bs = 0;
  std::string tau = "off";
  bool independent_noise = false;
  std::string report_dir;

  auto* pre = sub("pretrain-ar", "train the autoregressive base model");
  auto* conv = sub("convert", "continue training an AR checkpoint under the block diffusion objective");
  conv->add_option("--from", ckpt, "AR checkpoint (default <run>/ar.ckpt)");
  auto* dec = sub("decode", "decode one prompt and print its trace");
  dec->add_option("--checkpoint", ckpt, "model checkpoint (default: last conversion checkpoint)");
  dec->add_option("--prompt", prompt, "prompt text")->required();
  dec->add_option("--eval-block-size", eval_bs, "decode block size (default: first of eval.block_sizes)");
  dec->add_option("--threshold", tau, "confidence threshold or 'off'");
  auto* gen = sub("eval-gen", "generation accuracy, NFE and TPF over tasks, block sizes and thresholds");
  gen->add_option("--checkpoint", ckpt, "model checkpoint (default: last conversion checkpoint)");
  gen->add_option("--traces", trace_out, "write one JSON decode trace per sequence to this file");
  auto* mc = sub("eval-mc", "multiple-choice accuracy by Monte Carlo likelihood");
  mc->add_option("--checkpoint", ckpt, "model checkpoint (default: last conversion checkpoint)");
  mc->add_flag("--independent-noise", independent_noise, "draw noise independently per choice");
  auto* sb = sub("sweep-blocks", "convert and evaluate once per training block size");
  sb->add_option("--from", ckpt, "AR checkpoint (default <run>/ar.ckpt)");
  auto* sm = sub("sweep-masking", "convert and evaluate once per masking schedule");
  sm->add_option("--from", ckpt, "AR checkpoint (default <run>/ar.ckpt)");
  auto* an = sub("analyze", "per-position loss and decode-step profiles");
  an->add_option("--checkpoint", ckpt, "model checkpoint (default: last conversion checkpoint)");
  auto* rep = sub("report", "collect metrics records of a run into CSV tables");
  rep->add_option("--dir", report_dir, "run directory (default <out>/<run_id>)");

  CLI11_PARSE(app, argc, argv);

  try {
    CLI::App* chosen = app.get_subcommands().front();
    const std::string name = chosen->get_name();
    const ExperimentConfig cfg = flags[name].resolve();
    maybe_dump_layout(flags[name], cfg);
    std::ostream* progress = quiet ? nullptr : &std::cerr;

    if (chosen == pre) {
      RunContext ctx = RunContext::open(cfg, "pretrain_ar");
      ctx.progress = progress;
      run_pretrain_ar(cfg, ctx);
      std::cout << run_file(cfg, "ar.ckpt") << '\n';
    } else if (chosen == conv) {
      const std::string from = ckpt.empty() ? run_file(cfg, "ar.ckpt") : ckpt;
      RunContext ctx = RunContext::open(cfg, "convert");
      ctx.progress = progress;
      const auto res = run_convert(cfg, load_params(from), ctx);
      std::cout << "attention drift " << res.drift.attention_mean << " ffn drift " << res.drift.ffn_mean << '\n';
    } else if (chosen == dec) {
      const std::string path = ckpt.empty() ? last_convert_checkpoint(cfg) : ckpt;
      const auto p = load_params(path);
      const int bs = eval_bs > 0 ? eval_bs : cfg.eval_block_sizes.front();
      const auto r = generate(p, format_prompt(prompt, cfg.shape.prompt_region), decode_config(cfg, bs, parse_threshold(tau)));
      nlohmann::json out = to_json(r.trace);
      out["prompt"] = prompt;
      out["completion"] = detokenize(r.tokens);
      out["hit_eos"] = r.hit_eos;
      std::cout << out.dump() << '\n';
    } else if (chosen == gen) {
      const std::string path = ckpt.empty() ? last_convert_checkpoint(cfg) : ckpt;
      const auto p = load_params(path);
      RunContext ctx = RunContext::open(cfg, "eval_gen");
      if (!trace_out.empty()) {
        std::ofstream tf(trace_out, std::ios::trunc);
        for (TaskKind k : cfg.tasks)
          for (int bs : cfg.eval_block_sizes)
            for (const auto& t : cfg.thresholds) {
              std::vector<DecodeTrace> traces;
              eval_generation_point(p, cfg, k, bs, t, cfg.eval_instances, &traces);
              for (size_t i = 0; i < traces.size(); ++i) {
                nlohmann::json j = to_json(traces[i]);
                j["task"] = to_string(k);
                j["instance"] = i;
                j["tau"] = threshold_label(t);
                tf << j.dump() << '\n';
              }
            }
      }
      for (const auto& g : eval_generation(p, cfg, ctx, "eval", load_step(path)))
        std::cout << to_json(g).dump() << '\n';
    } else if (chosen == mc) {
      const std::string path = ckpt.empty() ? last_convert_checkpoint(cfg) : ckpt;
      const auto p = load_params(path);
      RunContext ctx = RunContext::open(cfg, "eval_mc");
      for (TaskKind k : mc_tasks(cfg)) {
        const auto lp = eval_likelihood(p, cfg, k, cfg.mc_instances, cfg.mc_samples, !independent_noise);
        nlohmann::json rec = {{"tag", "eval"},          {"ckpt_step", load_step(path)},
                              {"task", to_string(k)},   {"n", lp.n},
                              {"samples", lp.samples},  {"shared_noise", lp.shared_noise},
                              {"accuracy", lp.accuracy()}};
        rec.update(setup_fields(cfg));
        ctx.log.write("likelihood", rec);
        std::cout << rec.dump() << '\n';
      }
    } else if (chosen == sb || chosen == sm) {
      const std::string from = ckpt.empty() ? run_file(cfg, "ar.ckpt") : ckpt;
      RunContext ctx = RunContext::open(cfg, chosen == sb ? "sweep_blocks" : "sweep_masking");
      ctx.progress = progress;
      const auto ar = load_params(from);
      const auto entries = chosen == sb ? sweep_block_sizes(cfg, ar, ctx) : sweep_masking(cfg, ar, ctx);
      for (const auto& e : entries)
        for (const auto& g : e.points) {
          nlohmann::json j = to_json(g);
          j["variant"] = e.label;
          std::cout << j.dump() << '\n';
        }
    } else if (chosen == an) {
      const std::string path = ckpt.empty() ? last_convert_checkpoint(cfg) : ckpt;
      RunContext ctx = RunContext::open(cfg, "analyze");
      analyze_profiles(load_params(path), cfg, ctx, "analyze");
      std::cout << ctx.log.path().string() << '\n';
    } else if (chosen == rep) {
      const fs::path dir = report_dir.empty() ? fs::path(output_root(cfg)) / cfg.run_id : fs::path(report_dir);
      for (const auto& f : emit_report(dir)) std::cout << f.string() << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "dlmlab: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
