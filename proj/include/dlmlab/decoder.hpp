#pragma once

// Block-wise generation with a key/value cache and confidence-threshold
// parallel decoding.
//
// The prompt is prefilled once as clean context. Each block starts fully
// masked; every denoising forward commits all masked positions whose top-1
// probability reaches the threshold (at least the single most confident
// one). A completed block is run once more as clean rows to append its keys
// and values to the cache. Cache refreshes are counted separately from NFE.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dlmlab/attention.hpp"
#include "dlmlab/corpus.hpp"
#include "dlmlab/model.hpp"

namespace dlmlab {

struct DecodeConfig {
  int eval_block_size = 8;
  // nullopt: thresholding off, one token per forward.
  std::optional<double> confidence_threshold;
  int max_new_tokens = 8;
  double temperature = 0.0;
  CleanPattern clean = CleanPattern::block_causal;
  std::uint64_t seed = 0;

  int rounded_new_tokens() const {
    return (max_new_tokens + eval_block_size - 1) / eval_block_size * eval_block_size;
  }

  void validate() const {
    if (eval_block_size < 1) throw std::invalid_argument("decode: eval block size must be >= 1");
    if (max_new_tokens < 1) throw std::invalid_argument("decode: max_new_tokens must be >= 1");
    if (confidence_threshold && !(*confidence_threshold >= 0.0 && *confidence_threshold <= 1.0))
      throw std::invalid_argument("decode: confidence threshold must lie in [0, 1]");
  }
};

inline std::string threshold_label(const std::optional<double>& tau) {
  if (!tau) return "off";
  std::string s = std::to_string(*tau);
  while (s.size() > 1 && s.back() == '0') s.pop_back();
  if (s.back() == '.') s.pop_back();
  return s;
}

inline std::optional<double> parse_threshold(std::string_view s) {
  if (s == "off" || s == "none") return std::nullopt;
  return std::stod(std::string(s));
}

struct DecodeTrace {
  int block_size = 0;
  int prompt_len = 0;
  // One entry per emitted position (relative to the prompt end), up to and
  // including the first eos.
  std::vector<int> positions;
  std::vector<int> steps;        // NFE count at commit
  std::vector<int> block_steps;  // step index within its block, from 1
  std::vector<double> confidences;
  int nfe = 0;
  int refresh_forwards = 0;
  int decoded_tokens = 0;
  double tpf() const { return nfe ? static_cast<double>(decoded_tokens) / nfe : 0.0; }
};

inline nlohmann::json to_json(const DecodeTrace& t) {
  return {{"block_size", t.block_size}, {"prompt_len", t.prompt_len},     {"positions", t.positions},
          {"steps", t.steps},           {"block_steps", t.block_steps},   {"confidences", t.confidences},
          {"nfe", t.nfe},               {"refresh_forwards", t.refresh_forwards},
          {"decoded_tokens", t.decoded_tokens}, {"tpf", t.tpf()}};
}

template <class T>
struct DecodeState {
  DecodeConfig cfg;
  int prompt_len = 0;
  KvCache<T> cache;
  Tokens committed;      // finished blocks
  Tokens block;          // in-flight block, mask holes
  int block_start = 0;   // absolute position of block[0]
  int block_first_nfe = 0;
  std::vector<int> decoded_step;  // per generated position, -1 until committed
  std::vector<double> commit_confidence;
  std::vector<char> ruled;        // committed by the decision rule (not an eos fill)
  std::vector<double> last_confidence;  // per in-block position, last forward
  Matrix<T> last_clean_logits;          // prediction row preceding the block
  int nfe = 0;
  int refresh_forwards = 0;
  int decoded_tokens = 0;
  bool finished = false;
  Rng rng{0};

  bool block_complete(TokenId mask_id) const {
    return std::find(block.begin(), block.end(), mask_id) == block.end();
  }
};

namespace detail {

// Clean-stream chunk id: prompt positions are grouped in chunks of the block
// size from position 0, then each generated block is its own chunk.
inline int clean_chunk(int pos, int prompt_len, int block_size) {
  if (pos < prompt_len) return pos / block_size;
  const int prompt_chunks = (prompt_len + block_size - 1) / block_size;
  return prompt_chunks + (pos - prompt_len) / block_size;
}

inline bool clean_allows(int q, int k, int prompt_len, int block_size, CleanPattern pattern) {
  if (pattern == CleanPattern::token_causal) return k <= q;
  return clean_chunk(k, prompt_len, block_size) <= clean_chunk(q, prompt_len, block_size);
}

struct StepDecision {
  std::vector<int> commit;  // in-block offsets
  std::vector<TokenId> token;
  std::vector<double> confidence;  // per in-block offset; NaN for non-masked
  std::vector<TokenId> argmax;     // per in-block offset
};

// `pred` row j predicts in-block offset j.
template <class T>
StepDecision decide_commits(const Matrix<T>& pred, const Tokens& block, const DecodeConfig& cfg, TokenId mask_id,
                            Rng& rng) {
  const int n = static_cast<int>(block.size());
  StepDecision d;
  d.confidence.assign(static_cast<size_t>(n), std::numeric_limits<double>::quiet_NaN());
  d.argmax.assign(static_cast<size_t>(n), mask_id);
  int best = -1;
  for (int j = 0; j < n; ++j) {
    if (block[static_cast<size_t>(j)] != mask_id) continue;
    // The mask id is never a valid output: drop it from the distribution.
    std::vector<double> row(static_cast<size_t>(pred.cols()));
    for (Eigen::Index v = 0; v < pred.cols(); ++v) row[static_cast<size_t>(v)] = static_cast<double>(pred(j, v));
    row[static_cast<size_t>(mask_id)] = -std::numeric_limits<double>::infinity();
    const auto top = std::max_element(row.begin(), row.end());
    const double mx = *top;
    double sum = 0;
    for (double x : row) sum += std::exp(x - mx);
    TokenId tok = static_cast<TokenId>(top - row.begin());
    double conf = 1.0 / sum;
    if (cfg.temperature > 0) {
      double z = 0;
      std::vector<double> pr(row.size());
      for (size_t v = 0; v < row.size(); ++v) {
        pr[v] = std::exp((row[v] - mx) / cfg.temperature);
        z += pr[v];
      }
      double u = rng.uniform() * z;
      for (size_t v = 0; v < row.size(); ++v) {
        if (v == static_cast<size_t>(mask_id)) continue;
        u -= pr[v];
        if (u <= 0 || v + 1 == row.size()) {
          tok = static_cast<TokenId>(v);
          conf = std::exp(row[v] - mx) / sum;
          break;
        }
      }
    }
    d.confidence[static_cast<size_t>(j)] = conf;
    d.argmax[static_cast<size_t>(j)] = tok;
    if (best < 0 || conf > d.confidence[static_cast<size_t>(best)]) best = j;
  }
  if (best < 0) throw std::logic_error("decode: no masked position left in block");
  for (int j = 0; j < n; ++j) {
    const double c = d.confidence[static_cast<size_t>(j)];
    if (std::isnan(c)) continue;
    const bool pass = cfg.confidence_threshold ? c >= *cfg.confidence_threshold : false;
    if (pass || j == best) {
      d.commit.push_back(j);
      d.token.push_back(d.argmax[static_cast<size_t>(j)]);
    }
  }
  return d;
}

// Applies a decision to a state-like record: commits, then fills masks after
// the first committed eos with this step's argmaxes.
template <class T>
void apply_decision(DecodeState<T>& st, const StepDecision& d, const Vocabulary& vocab) {
  ++st.nfe;
  const int rel0 = st.block_start - st.prompt_len;
  for (size_t i = 0; i < d.commit.size(); ++i) {
    const int j = d.commit[i];
    st.block[static_cast<size_t>(j)] = d.token[i];
    st.decoded_step[static_cast<size_t>(rel0 + j)] = st.nfe;
    st.commit_confidence[static_cast<size_t>(rel0 + j)] = d.confidence[static_cast<size_t>(j)];
    st.ruled[static_cast<size_t>(rel0 + j)] = 1;
  }
  st.decoded_tokens += static_cast<int>(d.commit.size());
  st.last_confidence = d.confidence;
  const auto eos = std::find(st.block.begin(), st.block.end(), vocab.eos_id);
  if (eos != st.block.end()) {
    for (auto it = eos + 1; it != st.block.end(); ++it) {
      if (*it != vocab.mask_id) continue;
      const auto j = static_cast<size_t>(it - st.block.begin());
      *it = d.argmax[j];
      st.decoded_step[static_cast<size_t>(rel0) + j] = st.nfe;
      st.commit_confidence[static_cast<size_t>(rel0) + j] = d.confidence[j];
    }
  }
}

// Prediction rows for the in-flight block given its logits and the logits of
// the row preceding it (used only with token shift).
template <class T>
Matrix<T> block_predictions(const Matrix<T>& block_logits, const Matrix<T>& prev_logits, bool token_shift) {
  if (!token_shift) return block_logits;
  Matrix<T> pred(block_logits.rows(), block_logits.cols());
  pred.row(0) = prev_logits.row(0);
  if (block_logits.rows() > 1) pred.bottomRows(block_logits.rows() - 1) = block_logits.topRows(block_logits.rows() - 1);
  return pred;
}

template <class T>
void open_block(DecodeState<T>& st, const Vocabulary& vocab) {
  st.block.assign(static_cast<size_t>(st.cfg.eval_block_size), vocab.mask_id);
  st.block_first_nfe = st.nfe;
}

template <class T>
void init_state(DecodeState<T>& st, const ModelParams<T>& p, const Tokens& prompt, const DecodeConfig& cfg) {
  cfg.validate();
  if (prompt.empty()) throw std::invalid_argument("decode: empty prompt");
  if (static_cast<int>(prompt.size()) + cfg.rounded_new_tokens() > p.config.max_positions)
    throw std::invalid_argument("decode: prompt plus new tokens exceeds max_positions");
  st.cfg = cfg;
  st.prompt_len = static_cast<int>(prompt.size());
  st.block_start = st.prompt_len;
  const auto total = static_cast<size_t>(cfg.rounded_new_tokens());
  st.decoded_step.assign(total, -1);
  st.commit_confidence.assign(total, std::numeric_limits<double>::quiet_NaN());
  st.ruled.assign(total, 0);
  st.rng = Rng(derive_seed(cfg.seed, 0x6465636fULL));
}

}  // namespace detail

// Prefills the cache with the prompt as clean context and opens the first
// block. The prefill pass is not counted in NFE.
template <class T>
DecodeState<T> start(const ModelParams<T>& p, const Tokens& prompt, const DecodeConfig& cfg,
                     const Vocabulary& vocab = default_vocab()) {
  DecodeState<T> st;
  detail::init_state(st, p, prompt, cfg);
  const int P = st.prompt_len;
  AttentionLayout layout = detail::empty_layout(P, P, RowRole::clean);
  for (int q = 0; q < P; ++q)
    for (int k = 0; k < P; ++k) layout.set(q, k, detail::clean_allows(q, k, P, cfg.eval_block_size, cfg.clean));
  const std::vector<int> last{P - 1};
  st.last_clean_logits = forward<T>(p, prompt, layout, last, nullptr, nullptr, &st.cache);
  detail::open_block(st, vocab);
  return st;
}

template <class T>
void denoise_step(const ModelParams<T>& p, DecodeState<T>& st, const Vocabulary& vocab = default_vocab()) {
  if (st.finished) throw std::logic_error("denoise_step: decoding already finished");
  if (st.block_complete(vocab.mask_id)) throw std::logic_error("denoise_step: block has no masks");
  const int n = st.cfg.eval_block_size;
  const AttentionLayout layout = decode_layout(st.cache.length(), n);
  const Matrix<T> logits = forward<T>(p, st.block, layout, layout.loss_rows, nullptr, &st.cache);
  const Matrix<T> pred = detail::block_predictions<T>(logits, st.last_clean_logits, p.config.token_shift);
  const auto d = detail::decide_commits<T>(pred, st.block, st.cfg, vocab.mask_id, st.rng);
  detail::apply_decision(st, d, vocab);
}

template <class T>
void finalize_block(const ModelParams<T>& p, DecodeState<T>& st, const Vocabulary& vocab = default_vocab()) {
  if (!st.block_complete(vocab.mask_id)) throw std::logic_error("finalize_block: block still has masks");
  const int n = st.cfg.eval_block_size;
  const int cached = st.cache.length();
  AttentionLayout layout = detail::empty_layout(n, cached + n, RowRole::clean);
  for (int q = 0; q < n; ++q) {
    layout.pos_index[static_cast<size_t>(q)] = st.block_start + q;
    for (int k = 0; k < cached; ++k) layout.set(q, k, true);
    for (int k = 0; k < n; ++k)
      layout.set(q, cached + k, st.cfg.clean == CleanPattern::block_causal || k <= q);
  }
  KvCache<T> kv;
  const std::vector<int> last{n - 1};
  st.last_clean_logits = forward<T>(p, st.block, layout, last, nullptr, &st.cache, &kv);
  st.cache.append(kv);
  ++st.refresh_forwards;
  const bool eos = std::find(st.block.begin(), st.block.end(), vocab.eos_id) != st.block.end();
  st.committed.insert(st.committed.end(), st.block.begin(), st.block.end());
  st.block_start += n;
  if (eos || static_cast<int>(st.committed.size()) >= st.cfg.rounded_new_tokens()) {
    st.finished = true;
    st.block.clear();
  } else {
    detail::open_block(st, vocab);
  }
}

struct GenerateResult {
  Tokens tokens;  // generated tokens before the first eos, at most max_new_tokens
  bool hit_eos = false;
  DecodeTrace trace;
};

namespace detail {

template <class T>
GenerateResult collect(const DecodeState<T>& st, const Tokens& all, const Vocabulary& vocab) {
  GenerateResult r;
  r.trace.block_size = st.cfg.eval_block_size;
  r.trace.prompt_len = st.prompt_len;
  r.trace.nfe = st.nfe;
  r.trace.refresh_forwards = st.refresh_forwards;
  r.trace.decoded_tokens = st.decoded_tokens;
  const int limit = std::min<int>(static_cast<int>(all.size()), st.cfg.max_new_tokens);
  int end = static_cast<int>(all.size());
  for (int i = 0; i < static_cast<int>(all.size()); ++i)
    if (all[static_cast<size_t>(i)] == vocab.eos_id) {
      end = i;
      r.hit_eos = true;
      break;
    }
  const int emitted = r.hit_eos ? end + 1 : static_cast<int>(all.size());
  for (int i = 0; i < emitted; ++i) {
    const int step = st.decoded_step[static_cast<size_t>(i)];
    if (step < 0) continue;
    r.trace.positions.push_back(i);
    r.trace.steps.push_back(step);
    r.trace.confidences.push_back(st.commit_confidence[static_cast<size_t>(i)]);
  }
  r.tokens.assign(all.begin(), all.begin() + std::min(end, limit));
  return r;
}

}  // namespace detail

template <class T>
GenerateResult generate(const ModelParams<T>& p, const Tokens& prompt, const DecodeConfig& cfg,
                        const Vocabulary& vocab = default_vocab()) {
  DecodeState<T> st = start(p, prompt, cfg, vocab);
  std::vector<int> block_first;  // NFE before each block's first step
  while (!st.finished) {
    block_first.push_back(st.nfe);
    while (!st.block_complete(vocab.mask_id)) denoise_step(p, st, vocab);
    finalize_block(p, st, vocab);
  }
  GenerateResult r = detail::collect(st, st.committed, vocab);
  for (size_t i = 0; i < r.trace.positions.size(); ++i) {
    const int b = r.trace.positions[i] / cfg.eval_block_size;
    r.trace.block_steps.push_back(r.trace.steps[i] - block_first[static_cast<size_t>(b)]);
  }
  return r;
}

// Oracle decoder: no cache, every denoising step recomputes the full input
// (clean prompt and committed blocks followed by the noisy in-flight block)
// from scratch with the training forward pass.
template <class T>
GenerateResult generate_reference(const ModelParams<T>& p, const Tokens& prompt, const DecodeConfig& cfg,
                                  const Vocabulary& vocab = default_vocab()) {
  DecodeState<T> st;
  detail::init_state(st, p, prompt, cfg);
  const int P = st.prompt_len;
  const int n = cfg.eval_block_size;
  std::vector<int> block_first;
  while (!st.finished) {
    detail::open_block(st, vocab);
    block_first.push_back(st.nfe);
    while (!st.block_complete(vocab.mask_id)) {
      Tokens clean = prompt;
      clean.insert(clean.end(), st.committed.begin(), st.committed.end());
      const int C = static_cast<int>(clean.size());
      AttentionLayout layout = detail::empty_layout(C + n, C + n, RowRole::clean);
      for (int q = 0; q < C; ++q)
        for (int k = 0; k < C; ++k) layout.set(q, k, detail::clean_allows(q, k, P, n, cfg.clean));
      for (int j = 0; j < n; ++j) {
        layout.row_role[static_cast<size_t>(C + j)] = RowRole::noisy;
        layout.pos_index[static_cast<size_t>(C + j)] = C + j;
        for (int k = 0; k < C + n; ++k) layout.set(C + j, k, true);
      }
      Tokens rows = clean;
      rows.insert(rows.end(), st.block.begin(), st.block.end());
      std::vector<int> out;
      out.push_back(C - 1);
      for (int j = 0; j < n; ++j) out.push_back(C + j);
      const Matrix<T> logits = forward<T>(p, rows, layout, out);
      const Matrix<T> pred = detail::block_predictions<T>(logits.bottomRows(n), logits.topRows(1), p.config.token_shift);
      const auto d = detail::decide_commits<T>(pred, st.block, st.cfg, vocab.mask_id, st.rng);
      detail::apply_decision(st, d, vocab);
    }
    ++st.refresh_forwards;
    const bool eos = std::find(st.block.begin(), st.block.end(), vocab.eos_id) != st.block.end();
    st.committed.insert(st.committed.end(), st.block.begin(), st.block.end());
    st.block_start += n;
    if (eos || static_cast<int>(st.committed.size()) >= cfg.rounded_new_tokens()) st.finished = true;
  }
  GenerateResult r = detail::collect(st, st.committed, vocab);
  for (size_t i = 0; i < r.trace.positions.size(); ++i) {
    const int b = r.trace.positions[i] / n;
    r.trace.block_steps.push_back(r.trace.steps[i] - block_first[static_cast<size_t>(b)]);
  }
  return r;
}

// Mean in-block decode step per relative position, over all traces.
inline std::vector<double> trace_position_steps(const std::vector<DecodeTrace>& traces) {
  if (traces.empty()) throw std::invalid_argument("trace_position_steps: no traces");
  const int n = traces.front().block_size;
  std::vector<double> sum(static_cast<size_t>(n), 0.0);
  std::vector<int> cnt(static_cast<size_t>(n), 0);
  for (const auto& t : traces) {
    if (t.block_size != n) throw std::invalid_argument("trace_position_steps: mixed block sizes");
    for (size_t i = 0; i < t.positions.size(); ++i) {
      const auto j = static_cast<size_t>(t.positions[i] % n);
      sum[j] += t.block_steps[i];
      ++cnt[j];
    }
  }
  for (size_t j = 0; j < sum.size(); ++j) sum[j] = cnt[j] ? sum[j] / cnt[j] : std::numeric_limits<double>::quiet_NaN();
  return sum;
}

}  // namespace dlmlab
