#pragma once

// A small pre-norm transformer that runs over arbitrary attention layouts,
// with hand-written reverse-mode gradients for the autoregressive and block
// diffusion losses.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dlmlab/attention.hpp"
#include "dlmlab/corpus.hpp"
#include "dlmlab/masking.hpp"
#include "dlmlab/rng.hpp"

namespace dlmlab {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct ModelConfig {
  int vocab = 259;
  int d_model = 128;
  int n_heads = 4;
  int n_layers = 4;
  int d_ffn = 512;
  int max_positions = 512;
  bool token_shift = false;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  double init_std = 0.02;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (vocab < 1 || d_model < 1 || n_heads < 1 || n_layers < 1 || d_ffn < 1 || max_positions < 1)
      throw std::invalid_argument("model config: sizes must be positive");
    if (d_model % n_heads != 0) throw std::invalid_argument("model config: d_model % n_heads != 0");
    if (head_dim() % 2 != 0) throw std::invalid_argument("model config: head_dim must be even for rotary phases");
  }

  bool operator==(const ModelConfig&) const = default;
};

enum class LayerSlot : int { attn_norm = 0, wq, wk, wv, wo, ffn_norm, w1, w2, count };

inline constexpr int kSlotsPerLayer = static_cast<int>(LayerSlot::count);

inline const char* slot_name(LayerSlot s) {
  switch (s) {
    case LayerSlot::attn_norm: return "attn_norm";
    case LayerSlot::wq: return "attn.wq";
    case LayerSlot::wk: return "attn.wk";
    case LayerSlot::wv: return "attn.wv";
    case LayerSlot::wo: return "attn.wo";
    case LayerSlot::ffn_norm: return "ffn_norm";
    case LayerSlot::w1: return "ffn.w1";
    case LayerSlot::w2: return "ffn.w2";
    default: return "?";
  }
}

template <class T>
struct NamedTensor {
  std::string name;
  Matrix<T> value;
};

// Flat, ordered list of named tensors. The same container type holds
// parameters, gradients and optimizer moments.
template <class T>
struct ModelParams {
  ModelConfig config;
  std::vector<NamedTensor<T>> tensors;

  static ModelParams zeros(const ModelConfig& c) {
    c.validate();
    ModelParams p;
    p.config = c;
    const int d = c.d_model;
    auto add = [&](std::string name, int r, int cols) {
      p.tensors.push_back({std::move(name), Matrix<T>::Zero(r, cols)});
    };
    add("tok_embed", c.vocab, d);
    for (int l = 0; l < c.n_layers; ++l) {
      const std::string pre = "layers." + std::to_string(l) + ".";
      add(pre + slot_name(LayerSlot::attn_norm), 1, d);
      add(pre + slot_name(LayerSlot::wq), d, d);
      add(pre + slot_name(LayerSlot::wk), d, d);
      add(pre + slot_name(LayerSlot::wv), d, d);
      add(pre + slot_name(LayerSlot::wo), d, d);
      add(pre + slot_name(LayerSlot::ffn_norm), 1, d);
      add(pre + slot_name(LayerSlot::w1), d, c.d_ffn);
      add(pre + slot_name(LayerSlot::w2), c.d_ffn, d);
    }
    add("final_norm", 1, d);
    add("head", d, c.vocab);
    return p;
  }

  static ModelParams init(const ModelConfig& c, std::uint64_t seed) {
    ModelParams p = zeros(c);
    Rng rng(derive_seed(seed, 0x696e6974ULL));
    const double out_std = c.init_std / std::sqrt(2.0 * c.n_layers);
    for (auto& t : p.tensors) {
      if (t.name.find("norm") != std::string::npos) {
        t.value.setOnes();
        continue;
      }
      const bool residual_out = t.name.ends_with("attn.wo") || t.name.ends_with("ffn.w2");
      const double s = residual_out ? out_std : c.init_std;
      for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = static_cast<T>(s * rng.normal());
    }
    return p;
  }

  Matrix<T>& embed() { return tensors[0].value; }
  const Matrix<T>& embed() const { return tensors[0].value; }
  Matrix<T>& layer(int l, LayerSlot s) { return tensors[static_cast<size_t>(1 + l * kSlotsPerLayer + static_cast<int>(s))].value; }
  const Matrix<T>& layer(int l, LayerSlot s) const {
    return tensors[static_cast<size_t>(1 + l * kSlotsPerLayer + static_cast<int>(s))].value;
  }
  Matrix<T>& final_norm() { return tensors[tensors.size() - 2].value; }
  const Matrix<T>& final_norm() const { return tensors[tensors.size() - 2].value; }
  Matrix<T>& head() { return tensors.back().value; }
  const Matrix<T>& head() const { return tensors.back().value; }

  const NamedTensor<T>* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  void set_zero() {
    for (auto& t : tensors) t.value.setZero();
  }

  double squared_norm() const {
    double s = 0;
    for (const auto& t : tensors) s += static_cast<double>(t.value.squaredNorm());
    return s;
  }

  bool all_finite() const {
    for (const auto& t : tensors)
      if (!t.value.allFinite()) return false;
    return true;
  }

  size_t parameter_count() const {
    size_t n = 0;
    for (const auto& t : tensors) n += static_cast<size_t>(t.value.size());
    return n;
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.config = config;
    for (const auto& t : tensors) out.tensors.push_back({t.name, t.value.template cast<U>()});
    return out;
  }

  bool same_architecture(const ModelParams& o) const {
    if (tensors.size() != o.tensors.size()) return false;
    for (size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i].name != o.tensors[i].name || tensors[i].value.rows() != o.tensors[i].value.rows() ||
          tensors[i].value.cols() != o.tensors[i].value.cols())
        return false;
    }
    return true;
  }
};

// Keys after rotary phases and values, per layer, for already-processed rows.
template <class T>
struct KvCache {
  std::vector<Matrix<T>> keys;
  std::vector<Matrix<T>> values;

  int length() const { return keys.empty() ? 0 : static_cast<int>(keys[0].rows()); }

  void append(const KvCache& extra) {
    if (keys.empty()) {
      *this = extra;
      return;
    }
    for (size_t l = 0; l < keys.size(); ++l) {
      Matrix<T> k(keys[l].rows() + extra.keys[l].rows(), keys[l].cols());
      k << keys[l], extra.keys[l];
      keys[l] = std::move(k);
      Matrix<T> v(values[l].rows() + extra.values[l].rows(), values[l].cols());
      v << values[l], extra.values[l];
      values[l] = std::move(v);
    }
  }
};

template <class T>
struct LayerActivations {
  Matrix<T> x_in, h1, q, k, v, attn, x_mid, h2, a, u, tanh_inner;
  Vector<T> rms1, rms2;
  std::vector<Matrix<T>> probs;  // per head, rows x keys
};

template <class T>
struct ForwardRecord {
  std::vector<TokenId> tokens;
  std::vector<int> pos_index;
  std::vector<int> out_rows;
  std::vector<LayerActivations<T>> layers;
  Matrix<T> x_final, h_final;
  Vector<T> rms_final;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <class T>
void rms_norm(const Matrix<T>& x, const Matrix<T>& gain, double eps, Matrix<T>& y, Vector<T>& rms) {
  const auto d = static_cast<T>(x.cols());
  rms = ((x.array().square().rowwise().sum() / d) + static_cast<T>(eps)).sqrt();
  y = (x.array().colwise() / rms.array()).rowwise() * gain.row(0).array();
}

// Returns dx; accumulates into dgain.
template <class T>
Matrix<T> rms_norm_backward(const Matrix<T>& x, const Matrix<T>& gain, const Vector<T>& rms,
                            const Matrix<T>& dy, Matrix<T>* dgain) {
  const auto d = static_cast<T>(x.cols());
  Matrix<T> xhat = x.array().colwise() / rms.array();
  if (dgain) dgain->row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  Matrix<T> g = dy.array().rowwise() * gain.row(0).array();
  Vector<T> dot = (g.array() * xhat.array()).rowwise().sum();
  Matrix<T> dx = (g.array() - xhat.array().colwise() * (dot.array() / d)).colwise() / rms.array();
  return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

// tanh-approximated GELU. Returns the activation and keeps the inner tanh for
// the backward pass.
template <class T>
Matrix<T> gelu(const Matrix<T>& a, Matrix<T>& th) {
  const T c = static_cast<T>(kGeluC), k = static_cast<T>(kGeluA);
  th = (c * (a.array() + k * a.array().cube())).tanh().matrix();
  return (static_cast<T>(0.5) * a.array() * (static_cast<T>(1) + th.array())).matrix();
}

template <class T>
Matrix<T> gelu_grad(const Matrix<T>& a, const Matrix<T>& th) {
  const T c = static_cast<T>(kGeluC), k3 = static_cast<T>(3 * kGeluA);
  const auto one = static_cast<T>(1), half = static_cast<T>(0.5);
  return (half * (one + th.array()) +
          half * a.array() * (one - th.array().square()) * c * (one + k3 * a.array().square()))
      .matrix();
}

// cos/sin of pos * base^(-2i/head_dim), indexed [pos * half + i].
struct RotaryTable {
  int head_dim = 0;
  double base = 0;
  std::vector<double> cos, sin;

  void ensure(int hd, double b, int max_pos) {
    const int half = hd / 2;
    if (hd == head_dim && b == base && static_cast<int>(cos.size()) >= max_pos * half) return;
    if (hd != head_dim || b != base) cos.clear(), sin.clear();
    head_dim = hd;
    base = b;
    const int have = half ? static_cast<int>(cos.size()) / half : 0;
    for (int p = have; p < max_pos; ++p)
      for (int i = 0; i < half; ++i) {
        const double ang = p * std::pow(base, -2.0 * i / hd);
        cos.push_back(std::cos(ang));
        sin.push_back(std::sin(ang));
      }
  }
};

// Rotates consecutive pairs inside each head by their position phase.
// `sign` = -1 applies the inverse rotation (used for gradients).
template <class T>
void apply_rotary(Matrix<T>& m, std::span<const int> pos, int n_heads, double base, int sign = 1) {
  thread_local RotaryTable table;
  const int hd = static_cast<int>(m.cols()) / n_heads;
  const int half = hd / 2;
  int max_pos = 0;
  for (int p : pos) max_pos = std::max(max_pos, p + 1);
  table.ensure(hd, base, max_pos);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const size_t off = static_cast<size_t>(pos[static_cast<size_t>(r)]) * static_cast<size_t>(half);
    for (int i = 0; i < half; ++i) {
      const T c = static_cast<T>(table.cos[off + static_cast<size_t>(i)]);
      const T s = static_cast<T>(sign * table.sin[off + static_cast<size_t>(i)]);
      for (int h = 0; h < n_heads; ++h) {
        const int j = h * hd + 2 * i;
        const T x0 = m(r, j), x1 = m(r, j + 1);
        m(r, j) = x0 * c - x1 * s;
        m(r, j + 1) = x0 * s + x1 * c;
      }
    }
  }
}

}  // namespace detail

// Runs the model over `tokens` (one per layout row) and returns logits for
// `out_rows`. With a prefix cache, the first `prefix->length()` layout keys
// refer to cached entries. When `record` is set, activations are kept for
// backward(); when `new_kv` is set, the rows' keys/values are returned.
template <class T>
Matrix<T> forward(const ModelParams<T>& p, std::span<const TokenId> tokens, const AttentionLayout& layout,
                  std::span<const int> out_rows, ForwardRecord<T>* record = nullptr,
                  const KvCache<T>* prefix = nullptr, KvCache<T>* new_kv = nullptr) {
  const ModelConfig& c = p.config;
  const int R = layout.rows;
  const int cached = prefix ? prefix->length() : 0;
  if (static_cast<int>(tokens.size()) != R) throw std::invalid_argument("forward: token count does not match layout rows");
  if (layout.keys != cached + R) throw std::invalid_argument("forward: layout keys do not match cache + rows");
  if (record && prefix && cached > 0) throw std::invalid_argument("forward: recording with a prefix cache is unsupported");
  for (int pi : layout.pos_index)
    if (pi < 0 || pi >= c.max_positions) throw std::invalid_argument("forward: position index exceeds max_positions");
  const int d = c.d_model, H = c.n_heads, hd = c.head_dim();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  Matrix<T> x(R, d);
  for (int r = 0; r < R; ++r) {
    const TokenId tok = tokens[static_cast<size_t>(r)];
    if (tok < 0 || tok >= c.vocab) throw std::invalid_argument("forward: token id out of range");
    x.row(r) = p.embed().row(tok);
  }
  if (record) {
    record->tokens.assign(tokens.begin(), tokens.end());
    record->pos_index = layout.pos_index;
    record->out_rows.assign(out_rows.begin(), out_rows.end());
    record->layers.assign(static_cast<size_t>(c.n_layers), {});
  }
  if (new_kv) {
    new_kv->keys.assign(static_cast<size_t>(c.n_layers), {});
    new_kv->values.assign(static_cast<size_t>(c.n_layers), {});
  }

  Matrix<T> h1, h2, q, k, v, attn(R, d), scores, probs;
  Vector<T> rms1, rms2;
  for (int l = 0; l < c.n_layers; ++l) {
    LayerActivations<T>* act = record ? &record->layers[static_cast<size_t>(l)] : nullptr;
    if (act) act->x_in = x;
    detail::rms_norm(x, p.layer(l, LayerSlot::attn_norm), c.norm_eps, h1, rms1);
    q.noalias() = h1 * p.layer(l, LayerSlot::wq);
    k.noalias() = h1 * p.layer(l, LayerSlot::wk);
    v.noalias() = h1 * p.layer(l, LayerSlot::wv);
    detail::apply_rotary(q, layout.pos_index, H, c.rope_base);
    detail::apply_rotary(k, layout.pos_index, H, c.rope_base);
    if (new_kv) {
      new_kv->keys[static_cast<size_t>(l)] = k;
      new_kv->values[static_cast<size_t>(l)] = v;
    }
    const Matrix<T>* kall = &k;
    const Matrix<T>* vall = &v;
    Matrix<T> kcat, vcat;
    if (cached > 0) {
      kcat.resize(cached + R, d);
      kcat << prefix->keys[static_cast<size_t>(l)], k;
      vcat.resize(cached + R, d);
      vcat << prefix->values[static_cast<size_t>(l)], v;
      kall = &kcat;
      vall = &vcat;
    }
    if (act) act->probs.assign(static_cast<size_t>(H), {});
    for (int h = 0; h < H; ++h) {
      scores.noalias() = q.middleCols(h * hd, hd) * kall->middleCols(h * hd, hd).transpose();
      scores *= scale;
      for (int r = 0; r < R; ++r) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < layout.keys; ++j)
          if (layout.allows(r, j)) mx = std::max(mx, scores(r, j));
        T sum = 0;
        for (int j = 0; j < layout.keys; ++j) {
          const T e = layout.allows(r, j) ? std::exp(scores(r, j) - mx) : T(0);
          scores(r, j) = e;
          sum += e;
        }
        if (!(sum > 0)) throw std::invalid_argument("forward: query row has no allowed keys");
        scores.row(r) /= sum;
      }
      attn.middleCols(h * hd, hd).noalias() = scores * vall->middleCols(h * hd, hd);
      if (act) act->probs[static_cast<size_t>(h)] = scores;
    }
    if (act) {
      act->h1 = h1;
      act->rms1 = rms1;
      act->q = q;
      act->k = k;
      act->v = v;
      act->attn = attn;
    }
    x.noalias() += attn * p.layer(l, LayerSlot::wo);
    if (act) act->x_mid = x;
    detail::rms_norm(x, p.layer(l, LayerSlot::ffn_norm), c.norm_eps, h2, rms2);
    Matrix<T> a = h2 * p.layer(l, LayerSlot::w1);
    Matrix<T> th;
    Matrix<T> u = detail::gelu(a, th);
    x.noalias() += u * p.layer(l, LayerSlot::w2);
    if (act) {
      act->h2 = h2;
      act->rms2 = rms2;
      act->a = std::move(a);
      act->u = std::move(u);
      act->tanh_inner = std::move(th);
    }
    if (!x.allFinite())
      throw NonFiniteError("forward: non-finite activations after layers." + std::to_string(l));
  }
  Matrix<T> hf;
  Vector<T> rmsf;
  detail::rms_norm(x, p.final_norm(), c.norm_eps, hf, rmsf);
  Matrix<T> sel(static_cast<Eigen::Index>(out_rows.size()), d);
  for (size_t i = 0; i < out_rows.size(); ++i) sel.row(static_cast<Eigen::Index>(i)) = hf.row(out_rows[i]);
  Matrix<T> logits = sel * p.head();
  if (!logits.allFinite()) throw NonFiniteError("forward: non-finite logits at head");
  if (record) {
    record->x_final = std::move(x);
    record->h_final = std::move(hf);
    record->rms_final = std::move(rmsf);
  }
  return logits;
}

// Accumulates parameter gradients into `grads` given d(loss)/d(logits) for
// the recorded output rows.
template <class T>
void backward(const ModelParams<T>& p, const AttentionLayout& layout, const ForwardRecord<T>& rec,
              const Matrix<T>& dlogits, ModelParams<T>& grads) {
  const ModelConfig& c = p.config;
  const int R = layout.rows, d = c.d_model, H = c.n_heads, hd = c.head_dim();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  Matrix<T> dhf = Matrix<T>::Zero(R, d);
  for (size_t i = 0; i < rec.out_rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    grads.head().noalias() += rec.h_final.row(rec.out_rows[i]).transpose() * dlogits.row(r);
    dhf.row(rec.out_rows[i]) += dlogits.row(r) * p.head().transpose();
  }
  Matrix<T> dx = detail::rms_norm_backward(rec.x_final, p.final_norm(), rec.rms_final, dhf, &grads.final_norm());

  Matrix<T> dq(R, d), dk(R, d), dv(R, d), dP, dS;
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const LayerActivations<T>& act = rec.layers[static_cast<size_t>(l)];
    // feed-forward
    grads.layer(l, LayerSlot::w2).noalias() += act.u.transpose() * dx;
    Matrix<T> du = dx * p.layer(l, LayerSlot::w2).transpose();
    Matrix<T> da = du.array() * detail::gelu_grad(act.a, act.tanh_inner).array();
    grads.layer(l, LayerSlot::w1).noalias() += act.h2.transpose() * da;
    Matrix<T> dh2 = da * p.layer(l, LayerSlot::w1).transpose();
    dx += detail::rms_norm_backward(act.x_mid, p.layer(l, LayerSlot::ffn_norm), act.rms2, dh2,
                                    &grads.layer(l, LayerSlot::ffn_norm));
    // attention
    grads.layer(l, LayerSlot::wo).noalias() += act.attn.transpose() * dx;
    Matrix<T> dattn = dx * p.layer(l, LayerSlot::wo).transpose();
    for (int h = 0; h < H; ++h) {
      const Matrix<T>& P = act.probs[static_cast<size_t>(h)];
      auto dO = dattn.middleCols(h * hd, hd);
      dP.noalias() = dO * act.v.middleCols(h * hd, hd).transpose();
      dv.middleCols(h * hd, hd).noalias() = P.transpose() * dO;
      Vector<T> rowdot = (dP.array() * P.array()).rowwise().sum();
      dS = (P.array() * (dP.array().colwise() - rowdot.array())) * scale;
      dq.middleCols(h * hd, hd).noalias() = dS * act.k.middleCols(h * hd, hd);
      dk.middleCols(h * hd, hd).noalias() = dS.transpose() * act.q.middleCols(h * hd, hd);
    }
    detail::apply_rotary(dq, rec.pos_index, H, c.rope_base, -1);
    detail::apply_rotary(dk, rec.pos_index, H, c.rope_base, -1);
    grads.layer(l, LayerSlot::wq).noalias() += act.h1.transpose() * dq;
    grads.layer(l, LayerSlot::wk).noalias() += act.h1.transpose() * dk;
    grads.layer(l, LayerSlot::wv).noalias() += act.h1.transpose() * dv;
    Matrix<T> dh1 = dq * p.layer(l, LayerSlot::wq).transpose();
    dh1.noalias() += dk * p.layer(l, LayerSlot::wk).transpose();
    dh1.noalias() += dv * p.layer(l, LayerSlot::wv).transpose();
    dx += detail::rms_norm_backward(act.x_in, p.layer(l, LayerSlot::attn_norm), act.rms1, dh1,
                                    &grads.layer(l, LayerSlot::attn_norm));
  }
  for (int r = 0; r < R; ++r) grads.embed().row(rec.tokens[static_cast<size_t>(r)]) += dx.row(r);
}

// ---------------------------------------------------------------------------
// Losses

enum class AttentionKind { bidirectional, block_noisy, block_clean };

inline std::string to_string(AttentionKind k) {
  switch (k) {
    case AttentionKind::bidirectional: return "bidirectional";
    case AttentionKind::block_noisy: return "block_noisy";
    case AttentionKind::block_clean: return "block_clean";
  }
  return "?";
}

inline AttentionKind parse_attention_kind(std::string_view s) {
  if (s == "bidirectional") return AttentionKind::bidirectional;
  if (s == "block_noisy") return AttentionKind::block_noisy;
  if (s == "block_clean") return AttentionKind::block_clean;
  throw std::invalid_argument("unknown attention kind: " + std::string(s));
}

struct PositionLoss {
  int position = 0;
  double nll = 0;
};

struct LossResult {
  double loss = 0;
  int count = 0;    // positions contributing to the loss
  int skipped = 0;  // masked positions with no predicting row (token shift at row 0)
  std::vector<PositionLoss> per_position;
};

namespace detail {

// Cross-entropy at each output row with per-row weights. Writes
// d(loss)/d(logits) when `dlogits` is given.
template <class T>
double weighted_nll(const Matrix<T>& logits, std::span<const TokenId> targets, std::span<const double> weights,
                    std::vector<double>* nll_out, Matrix<T>* dlogits) {
  double total = 0;
  if (dlogits) dlogits->resize(logits.rows(), logits.cols());
  if (nll_out) nll_out->resize(static_cast<size_t>(logits.rows()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const T mx = logits.row(r).maxCoeff();
    const auto e = (logits.row(r).array() - mx).exp();
    const T sum = e.sum();
    const T logz = mx + std::log(sum);
    const TokenId tgt = targets[static_cast<size_t>(r)];
    const double nll = static_cast<double>(logz - logits(r, tgt));
    const double w = weights[static_cast<size_t>(r)];
    total += w * nll;
    if (nll_out) (*nll_out)[static_cast<size_t>(r)] = nll;
    if (dlogits) {
      dlogits->row(r) = (e / sum).matrix() * static_cast<T>(w);
      (*dlogits)(r, tgt) -= static_cast<T>(w);
    }
  }
  return total;
}

}  // namespace detail

// Mean next-token NLL over non-pad targets under a causal layout.
template <class T>
LossResult ar_loss(const ModelParams<T>& p, const TokenSequence& seq, ModelParams<T>* grads = nullptr,
                   const Vocabulary& vocab = default_vocab(), bool mask_inputs_after_prompt = false) {
  const int L = seq.length();
  if (L < 1) throw std::invalid_argument("ar_loss: empty sequence");
  std::vector<int> rows;
  std::vector<TokenId> targets;
  for (int r = 0; r + 1 < L; ++r) {
    const TokenId tgt = seq.tokens[static_cast<size_t>(r + 1)];
    if (tgt == vocab.pad_id) continue;
    rows.push_back(r);
    targets.push_back(tgt);
  }
  if (rows.empty()) throw std::invalid_argument("ar_loss: sequence has no non-pad targets");
  const AttentionLayout layout = causal_layout(L);
  Tokens inputs = seq.tokens;
  if (mask_inputs_after_prompt)
    for (int i = seq.prompt_len; i < L; ++i) inputs[static_cast<size_t>(i)] = vocab.mask_id;
  std::vector<double> w(rows.size(), 1.0 / static_cast<double>(rows.size()));
  ForwardRecord<T> rec;
  Matrix<T> logits = forward<T>(p, inputs, layout, rows, grads ? &rec : nullptr);
  Matrix<T> dlogits;
  std::vector<double> nll;
  LossResult res;
  res.loss = detail::weighted_nll<T>(logits, targets, w, &nll, grads ? &dlogits : nullptr);
  res.count = static_cast<int>(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) res.per_position.push_back({rows[i] + 1, nll[i]});
  if (grads) backward<T>(p, layout, rec, dlogits, *grads);
  return res;
}

struct DlmInput {
  Tokens tokens;
  AttentionLayout layout;
};

// Builds the model input rows for one corruption draw.
inline DlmInput build_dlm_input(const TokenSequence& seq, const NoiseInstance& noise, AttentionKind kind,
                                CleanPattern clean = CleanPattern::block_causal) {
  const int L = seq.length();
  if (static_cast<int>(noise.corrupted.size()) != L)
    throw std::invalid_argument("dlm input: noise does not match sequence length");
  DlmInput in;
  switch (kind) {
    case AttentionKind::bidirectional:
      in.layout = bidirectional_layout(L);
      in.tokens = noise.corrupted;
      break;
    case AttentionKind::block_noisy:
      in.layout = block_noisy_layout(L, noise.block_size);
      in.tokens = noise.corrupted;
      break;
    case AttentionKind::block_clean:
      in.layout = block_clean_layout(L, noise.block_size, clean);
      in.tokens = noise.corrupted;
      in.tokens.insert(in.tokens.end(), seq.tokens.begin(), seq.tokens.end());
      break;
  }
  return in;
}

// Row whose output predicts sequence position `pos`, or -1 when none exists.
inline int predicting_row(int pos, int L, int block_size, AttentionKind kind, bool token_shift) {
  if (!token_shift) return pos;
  if (pos == 0) return -1;
  // The first position of a block reads from the clean copy of the previous
  // position, which is the only row that sees the full preceding context.
  if (kind == AttentionKind::block_clean && pos % block_size == 0) return L + pos - 1;
  return pos - 1;
}

// (1/t)-weighted mean NLL over masked positions.
template <class T>
LossResult dlm_loss(const ModelParams<T>& p, const TokenSequence& seq, const NoiseInstance& noise,
                    AttentionKind kind, ModelParams<T>* grads = nullptr,
                    CleanPattern clean = CleanPattern::block_causal) {
  const int L = seq.length();
  const bool shift = p.config.token_shift;
  DlmInput in = build_dlm_input(seq, noise, kind, clean);
  std::vector<int> rows, positions;
  std::vector<TokenId> targets;
  std::vector<double> inv_t;
  LossResult res;
  for (size_t b = 0; b < noise.masked.size(); ++b) {
    for (int i : noise.masked[b]) {
      const int pos = static_cast<int>(b) * noise.block_size + i;
      const int row = predicting_row(pos, L, noise.block_size, kind, shift);
      if (row < 0) {
        ++res.skipped;
        continue;
      }
      rows.push_back(row);
      positions.push_back(pos);
      targets.push_back(seq.tokens[static_cast<size_t>(pos)]);
      inv_t.push_back(1.0 / noise.block_t[b]);
    }
  }
  if (rows.empty()) throw std::invalid_argument("dlm_loss: masked set is empty");
  in.layout.loss_rows = rows;
  const double m = static_cast<double>(rows.size());
  std::vector<double> w(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) w[i] = inv_t[i] / m;
  ForwardRecord<T> rec;
  Matrix<T> logits = forward<T>(p, in.tokens, in.layout, rows, grads ? &rec : nullptr);
  Matrix<T> dlogits;
  std::vector<double> nll;
  res.loss = detail::weighted_nll<T>(logits, targets, w, &nll, grads ? &dlogits : nullptr);
  res.count = static_cast<int>(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) res.per_position.push_back({positions[i], nll[i]});
  if (grads) backward<T>(p, in.layout, rec, dlogits, *grads);
  return res;
}

// ---------------------------------------------------------------------------
// Optimizer and training

struct OptimConfig {
  double lr = 1e-3;
  double lr_min = 3e-4;
  int warmup = 0;
  int total_steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
};

// Linear warmup then cosine decay from lr to lr_min.
inline double learning_rate(const OptimConfig& o, long step) {
  if (o.warmup > 0 && step < o.warmup) return o.lr * static_cast<double>(step + 1) / o.warmup;
  const double span = std::max(1, o.total_steps - o.warmup);
  const double prog = std::clamp(static_cast<double>(step - o.warmup) / span, 0.0, 1.0);
  return o.lr_min + 0.5 * (o.lr - o.lr_min) * (1.0 + std::cos(3.14159265358979323846 * prog));
}

template <class T>
struct TrainState {
  ModelParams<T> params;
  ModelParams<T> m;
  ModelParams<T> v;
  long step = 0;
  Rng rng{0};

  static TrainState fresh(ModelParams<T> p, std::uint64_t seed) {
    TrainState s;
    s.m = ModelParams<T>::zeros(p.config);
    s.v = ModelParams<T>::zeros(p.config);
    s.params = std::move(p);
    s.rng = Rng(derive_seed(seed, 0x747261696eULL));
    return s;
  }
};

enum class LossKind { ar, dlm };

struct TrainObjective {
  LossKind loss = LossKind::dlm;
  AttentionKind attention = AttentionKind::block_clean;
  MaskSchedule schedule;
  CleanPattern clean = CleanPattern::block_causal;
};

struct StepMetrics {
  double loss = 0;
  double grad_norm = 0;
  double lr = 0;
  bool skipped = false;
};

// One AdamW update on the mean loss over the batch. Non-finite activations
// or gradients leave the parameters untouched and report skipped = true.
template <class T>
StepMetrics train_step(TrainState<T>& state, const std::vector<TokenSequence>& batch, const TrainObjective& obj,
                       const OptimConfig& opt) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  ModelParams<T> grads = ModelParams<T>::zeros(state.params.config);
  StepMetrics m;
  double total = 0;
  bool blew_up = false;
  for (const auto& seq : batch) {
    try {
      if (obj.loss == LossKind::ar) {
        total += ar_loss<T>(state.params, seq, &grads).loss;
      } else {
        const double t = sample_noise_level(state.rng);
        const NoiseInstance noise = corrupt(seq, obj.schedule, t, state.rng);
        total += dlm_loss<T>(state.params, seq, noise, obj.attention, &grads, obj.clean).loss;
      }
    } catch (const NonFiniteError&) {
      blew_up = true;
    }
  }
  const T inv_b = static_cast<T>(1.0 / static_cast<double>(batch.size()));
  for (auto& g : grads.tensors) g.value *= inv_b;
  m.loss = blew_up ? std::numeric_limits<double>::quiet_NaN() : total / static_cast<double>(batch.size());
  m.grad_norm = std::sqrt(grads.squared_norm());
  m.lr = learning_rate(opt, state.step);
  if (blew_up || !std::isfinite(m.grad_norm) || !std::isfinite(m.loss)) {
    m.skipped = true;
    ++state.step;
    return m;
  }
  const double clip = opt.grad_clip > 0 && m.grad_norm > opt.grad_clip ? opt.grad_clip / m.grad_norm : 1.0;
  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  for (size_t i = 0; i < grads.tensors.size(); ++i) {
    auto& w = state.params.tensors[i].value;
    auto& mm = state.m.tensors[i].value;
    auto& vv = state.v.tensors[i].value;
    const Matrix<T> g = grads.tensors[i].value * static_cast<T>(clip);
    mm = b1 * mm + (T(1) - b1) * g;
    vv = b2 * vv + (T(1) - b2) * g.cwiseProduct(g);
    const bool decay = state.params.tensors[i].name.find("norm") == std::string::npos;
    if (decay) w *= static_cast<T>(1.0 - m.lr * opt.weight_decay);
    const auto mhat = mm.array() / static_cast<T>(bc1);
    const auto vhat = vv.array() / static_cast<T>(bc2);
    w.array() -= static_cast<T>(m.lr) * mhat / (vhat.sqrt() + static_cast<T>(opt.eps));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Diagnostics

struct TensorDrift {
  std::string name;
  double relative_change = 0;
};

struct DriftReport {
  std::vector<TensorDrift> tensors;
  double attention_mean = 0;
  double ffn_mean = 0;
};

// ||after - before||_F / ||before||_F per tensor, averaged over the attention
// projections and the feed-forward matrices.
template <class T>
DriftReport weight_drift(const ModelParams<T>& before, const ModelParams<T>& after) {
  if (!before.same_architecture(after)) throw std::invalid_argument("weight_drift: architecture mismatch");
  DriftReport rep;
  int na = 0, nf = 0;
  for (size_t i = 0; i < before.tensors.size(); ++i) {
    const auto& b = before.tensors[i];
    const double base = static_cast<double>(b.value.norm());
    const double diff = static_cast<double>((after.tensors[i].value - b.value).norm());
    const double rel = base > 0 ? diff / base : (diff > 0 ? std::numeric_limits<double>::infinity() : 0.0);
    rep.tensors.push_back({b.name, rel});
    if (b.name.find(".attn.") != std::string::npos) {
      rep.attention_mean += rel;
      ++na;
    } else if (b.name.find(".ffn.") != std::string::npos) {
      rep.ffn_mean += rel;
      ++nf;
    }
  }
  if (na) rep.attention_mean /= na;
  if (nf) rep.ffn_mean /= nf;
  return rep;
}

// Unit-normalized mean of the final hidden states under full bidirectional
// attention. `pos_index` overrides the default 0..n-1 positions.
template <class T>
Vector<T> mean_pool_embed(const ModelParams<T>& p, const Tokens& tokens, const std::vector<int>* pos_index = nullptr) {
  if (tokens.empty()) throw std::invalid_argument("mean_pool_embed: empty sequence");
  AttentionLayout layout = bidirectional_layout(static_cast<int>(tokens.size()));
  if (pos_index) layout.pos_index = *pos_index;
  ForwardRecord<T> rec;
  const std::vector<int> none;
  forward<T>(p, tokens, layout, none, &rec);
  Vector<T> pooled = rec.x_final.colwise().mean().transpose();
  const T n = pooled.norm();
  if (n > 0) pooled /= n;
  return pooled;
}

}  // namespace dlmlab
