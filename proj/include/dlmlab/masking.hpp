#pragma once

// Corruption process for block diffusion training: noise-level draws, the
// per-block mask count, position-dependent masking weights and Gumbel-top-k
// selection of masked positions.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "dlmlab/corpus.hpp"
#include "dlmlab/rng.hpp"

namespace dlmlab {

enum class MaskMode { uniform, position_dependent, right_to_left };

inline std::string to_string(MaskMode m) {
  switch (m) {
    case MaskMode::uniform: return "uniform";
    case MaskMode::position_dependent: return "position_dependent";
    case MaskMode::right_to_left: return "right_to_left";
  }
  return "?";
}

inline MaskMode parse_mask_mode(std::string_view s) {
  if (s == "uniform") return MaskMode::uniform;
  if (s == "position_dependent") return MaskMode::position_dependent;
  if (s == "right_to_left") return MaskMode::right_to_left;
  throw std::invalid_argument("unknown mask mode: " + std::string(s));
}

// Half-life ratio of infinity stands for the uniform limit.
inline constexpr double kInfiniteHalfLife = std::numeric_limits<double>::infinity();

struct MaskSchedule {
  MaskMode mode = MaskMode::uniform;
  double half_life_ratio = kInfiniteHalfLife;
  // Redraw t independently for every block instead of once per sequence.
  bool per_block_t = false;
};

struct NoiseInstance {
  double t = 1.0;
  // Noise level used for each block (all equal unless per_block_t).
  std::vector<double> block_t;
  // Per block, sorted 0-based offsets inside the block that were masked.
  std::vector<std::vector<int>> masked;
  Tokens corrupted;
  int block_size = 1;

  std::vector<int> masked_positions() const {
    std::vector<int> out;
    for (size_t b = 0; b < masked.size(); ++b)
      for (int i : masked[b]) out.push_back(static_cast<int>(b) * block_size + i);
    return out;
  }
  int masked_count() const {
    int n = 0;
    for (const auto& m : masked) n += static_cast<int>(m.size());
    return n;
  }
};

inline double sample_noise_level(Rng& rng) {
  // (0, 1]: the 53-bit grid is shifted up by one step so 0 never occurs.
  return rng.uniform_left_open();
}

// k = round-half-away-from-zero(t * L'), clamped to [1, L'].
inline int mask_count(double t, int block_len) {
  if (block_len < 1) throw std::invalid_argument("mask_count: block length must be >= 1");
  const long k = std::lround(t * static_cast<double>(block_len));
  return static_cast<int>(std::clamp<long>(k, 1, block_len));
}

// beta = ln2 / (lambda * L'); an infinite half-life maps to beta = 0.
inline double half_life_to_beta(double half_life_ratio, int block_len) {
  if (std::isinf(half_life_ratio) && half_life_ratio > 0) return 0.0;
  if (!(half_life_ratio > 0.0))
    throw std::invalid_argument("half_life_to_beta: half-life ratio must be positive");
  return std::log(2.0) / (half_life_ratio * static_cast<double>(block_len));
}

// w_i = exp(beta * (1 - t) * i) for i = 1..L' (element j holds i = j + 1).
inline std::vector<double> position_weights(double t, double beta, int block_len) {
  std::vector<double> w(static_cast<size_t>(block_len));
  for (int j = 0; j < block_len; ++j) w[static_cast<size_t>(j)] = std::exp(beta * (1.0 - t) * (j + 1));
  return w;
}

// Indices of the k largest log(w_i) + g_i with g_i standard Gumbel, returned
// in ascending order. Equivalent to sequential sampling without replacement
// proportional to w.
inline std::vector<int> gumbel_top_k(const std::vector<double>& weights, int k, Rng& rng) {
  const int n = static_cast<int>(weights.size());
  if (k > n) throw std::invalid_argument("gumbel_top_k: k exceeds number of eligible positions");
  if (k < 0) throw std::invalid_argument("gumbel_top_k: negative k");
  std::vector<std::pair<double, int>> keys(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (!(weights[static_cast<size_t>(i)] > 0.0))
      throw std::invalid_argument("gumbel_top_k: weights must be positive");
    keys[static_cast<size_t>(i)] = {std::log(weights[static_cast<size_t>(i)]) + rng.gumbel(), i};
  }
  std::partial_sort(keys.begin(), keys.begin() + k, keys.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<int> out(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) out[static_cast<size_t>(i)] = keys[static_cast<size_t>(i)].second;
  std::sort(out.begin(), out.end());
  return out;
}

namespace detail {

// Blocks that lie entirely in the prompt, or entirely in trailing padding,
// are outside the trainable region and are skipped.
inline bool block_in_trainable_region(const TokenSequence& seq, int b, const Vocabulary& vocab) {
  const int begin = b * seq.block_size;
  const int end = begin + seq.block_size;
  if (end <= seq.prompt_len) return false;
  int last_non_pad = -1;
  for (int i = seq.length() - 1; i >= 0; --i)
    if (seq.tokens[static_cast<size_t>(i)] != vocab.pad_id) {
      last_non_pad = i;
      break;
    }
  return begin <= last_non_pad;
}

}  // namespace detail

// Corrupts every trainable block of `seq` independently. Within a block the
// eligible positions are those outside the prompt that are not pad; the mask
// count is computed against the eligible count, which equals L' for full
// blocks.
inline NoiseInstance corrupt(const TokenSequence& seq, const MaskSchedule& schedule, double t,
                             Rng& rng, const Vocabulary& vocab = default_vocab()) {
  const int L = seq.length();
  const int bs = seq.block_size;
  if (bs < 1 || L % bs != 0) throw std::invalid_argument("corrupt: sequence is not block aligned");
  if (!(t > 0.0 && t <= 1.0)) throw std::invalid_argument("corrupt: t must lie in (0, 1]");
  NoiseInstance noise;
  noise.t = t;
  noise.block_size = bs;
  noise.corrupted = seq.tokens;
  const int nb = L / bs;
  noise.masked.resize(static_cast<size_t>(nb));
  noise.block_t.assign(static_cast<size_t>(nb), t);
  bool first = true;
  for (int b = 0; b < nb; ++b) {
    if (!detail::block_in_trainable_region(seq, b, vocab)) continue;
    std::vector<int> eligible;
    for (int i = 0; i < bs; ++i) {
      const int pos = b * bs + i;
      if (pos < seq.prompt_len) continue;
      const TokenId tok = seq.tokens[static_cast<size_t>(pos)];
      if (tok == vocab.pad_id) continue;
      if (tok == vocab.mask_id) throw std::invalid_argument("corrupt: raw sequence contains mask token");
      eligible.push_back(i);
    }
    if (eligible.empty())
      throw std::invalid_argument("corrupt: block " + std::to_string(b) + " has no eligible positions");
    // per_block_t: the first trainable block keeps t, later ones redraw.
    const double tb = schedule.per_block_t && !first ? sample_noise_level(rng) : t;
    first = false;
    noise.block_t[static_cast<size_t>(b)] = tb;
    const int k = mask_count(tb, static_cast<int>(eligible.size()));
    std::vector<int> chosen;
    if (schedule.mode == MaskMode::right_to_left) {
      chosen.assign(eligible.end() - k, eligible.end());
    } else {
      const double beta = schedule.mode == MaskMode::uniform
                              ? 0.0
                              : half_life_to_beta(schedule.half_life_ratio, bs);
      const auto all_w = position_weights(tb, beta, bs);
      std::vector<double> w;
      w.reserve(eligible.size());
      for (int i : eligible) w.push_back(all_w[static_cast<size_t>(i)]);
      for (int idx : gumbel_top_k(w, k, rng)) chosen.push_back(eligible[static_cast<size_t>(idx)]);
    }
    for (int i : chosen) noise.corrupted[static_cast<size_t>(b * bs + i)] = vocab.mask_id;
    noise.masked[static_cast<size_t>(b)] = std::move(chosen);
  }
  return noise;
}

}  // namespace dlmlab
