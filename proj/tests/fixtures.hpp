#pragma once

#include "dlmlab/model.hpp"

namespace fixture {

// Small random model. A large init scale keeps attention and predictions far
// from uniform so that equivalence tests are not vacuous.
template <class T>
dlmlab::ModelParams<T> tiny_model(std::uint64_t seed, bool token_shift = false, int vocab = 259, int layers = 2,
                                  int d = 16, double init_std = 0.3) {
  dlmlab::ModelConfig c;
  c.vocab = vocab;
  c.d_model = d;
  c.n_heads = 2;
  c.n_layers = layers;
  c.d_ffn = 2 * d;
  c.max_positions = 128;
  c.token_shift = token_shift;
  c.init_std = init_std;
  auto p = dlmlab::ModelParams<double>::init(c, seed);
  // Non-trivial norm gains.
  dlmlab::Rng rng(seed + 1);
  for (auto& t : p.tensors)
    if (t.name.find("norm") != std::string::npos)
      for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = 1.0 + 0.2 * rng.normal();
  return p.template cast<T>();
}

}  // namespace fixture
