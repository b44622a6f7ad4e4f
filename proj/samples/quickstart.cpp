// Pretrain a tiny AR model on copy, convert it to a block diffusion model and
// decode one prompt. Runs in well under a minute; nothing is written to disk.

#include <iostream>

#include "dlmlab/harness.hpp"

using namespace dlmlab;

int main() {
  ExperimentConfig cfg;
  cfg.model.d_model = 32;
  cfg.model.n_heads = 2;
  cfg.model.n_layers = 2;
  cfg.model.d_ffn = 64;
  cfg.tasks = {TaskKind::copy};
  cfg.synth.max_len = 4;
  cfg.ar_steps = 4000;
  cfg.ar_optim.lr = 3e-3;
  cfg.steps = 2000;
  cfg.log_every = 1000;
  cfg.eval_block_sizes = {4};
  cfg.thresholds = {std::nullopt, 0.7};
  cfg.eval_instances = 50;

  auto ctx = RunContext::in_memory("quickstart");
  ctx.progress = &std::cerr;
  const auto ar = run_pretrain_ar(cfg, ctx);
  const auto conv = run_convert(cfg, ar.params, ctx);

  for (const auto& g : eval_generation(conv.state.params, cfg, ctx, "quickstart", conv.state.step))
    std::cout << to_json(g).dump() << '\n';

  const auto r = generate(conv.state.params, format_prompt("dcab|", cfg.shape.prompt_region),
                          decode_config(cfg, 4, 0.7));
  std::cout << "dcab| -> " << detokenize(r.tokens) << '\n' << to_json(r.trace).dump() << '\n';
}
