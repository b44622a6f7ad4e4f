#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <gtest/gtest.h>

#include "dlmlab/checkpoint.hpp"
#include "dlmlab/model.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace dlmlab;

namespace {

constexpr int kSmallVocab = 16;

// prompt (4 tokens) + target (8 tokens), every id a plain byte token.
TokenSequence small_sequence(int block_size, std::uint64_t seed = 1) {
  TokenSequence s;
  s.block_size = block_size;
  s.prompt_len = 4;
  Rng rng(seed);
  for (int i = 0; i < 12; ++i) s.tokens.push_back(static_cast<TokenId>(3 + rng.below(kSmallVocab - 3)));
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Gradients against central finite differences

struct GradCase {
  std::string name;
  bool ar;
  AttentionKind kind;
  bool shift;
};

class Gradients : public ::testing::TestWithParam<GradCase> {};

TEST_P(Gradients, MatchFiniteDifferences) {
  const GradCase& gc = GetParam();
  auto p = fixture::tiny_model<double>(21, gc.shift, kSmallVocab);
  const int bs = gc.kind == AttentionKind::bidirectional ? 12 : 4;
  const TokenSequence seq = small_sequence(bs);
  Rng rng(4);
  const NoiseInstance noise = corrupt(seq, MaskSchedule{}, 0.6, rng);

  auto loss = [&](const ModelParams<double>& q) {
    return gc.ar ? ar_loss<double>(q, seq).loss : dlm_loss<double>(q, seq, noise, gc.kind).loss;
  };
  auto grads = ModelParams<double>::zeros(p.config);
  if (gc.ar) ar_loss<double>(p, seq, &grads);
  else dlm_loss<double>(p, seq, noise, gc.kind, &grads);

  for (size_t i = 0; i < p.tensors.size(); ++i) {
    const double err = oracle::fd_relative_error(p, i, grads.tensors[i].value, loss);
    EXPECT_LT(err, 1e-4) << p.tensors[i].name;
  }
}

INSTANTIATE_TEST_SUITE_P(
    AllObjectives, Gradients,
    ::testing::Values(GradCase{"ar", true, AttentionKind::bidirectional, false},
                      GradCase{"bidirectional", false, AttentionKind::bidirectional, false},
                      GradCase{"bidirectional_shift", false, AttentionKind::bidirectional, true},
                      GradCase{"block_noisy", false, AttentionKind::block_noisy, false},
                      GradCase{"block_noisy_shift", false, AttentionKind::block_noisy, true},
                      GradCase{"block_clean", false, AttentionKind::block_clean, false},
                      GradCase{"block_clean_shift", false, AttentionKind::block_clean, true}),
    [](const auto& info) { return info.param.name; });

// ---------------------------------------------------------------------------
// Loss invariants

TEST(Loss, ZeroHeadGivesLogVocab) {
  auto p = fixture::tiny_model<double>(3, false, kSmallVocab);
  p.head().setZero();
  const TokenSequence seq = small_sequence(4);
  EXPECT_NEAR(ar_loss<double>(p, seq).loss, std::log(kSmallVocab), 1e-12);
  Rng rng(2);
  const NoiseInstance n = corrupt(seq, MaskSchedule{}, 1.0, rng);
  for (AttentionKind k : {AttentionKind::bidirectional, AttentionKind::block_noisy, AttentionKind::block_clean})
    EXPECT_NEAR(dlm_loss<double>(p, seq, n, k).loss, std::log(kSmallVocab), 1e-12);
}

TEST(Loss, InverseNoiseWeighting) {
  const auto p = fixture::tiny_model<double>(8, false, kSmallVocab);
  const TokenSequence seq = small_sequence(4);
  Rng rng(6);
  NoiseInstance n = corrupt(seq, MaskSchedule{}, 0.5, rng);
  for (AttentionKind k : {AttentionKind::bidirectional, AttentionKind::block_noisy, AttentionKind::block_clean}) {
    std::vector<double> scaled;
    for (double t : {0.25, 0.5, 1.0}) {
      n.t = t;
      std::fill(n.block_t.begin(), n.block_t.end(), t);
      scaled.push_back(dlm_loss<double>(p, seq, n, k).loss * t);
    }
    for (double v : scaled) EXPECT_LT(std::abs(v - scaled[0]) / scaled[0], 1e-6);
  }
}

TEST(Loss, OnlyMaskedPositionsCarryLoss) {
  const auto p = fixture::tiny_model<double>(8, false, kSmallVocab);
  const TokenSequence seq = small_sequence(4);
  Rng rng(6);
  const NoiseInstance n = corrupt(seq, MaskSchedule{}, 0.5, rng);
  const LossResult r = dlm_loss<double>(p, seq, n, AttentionKind::block_clean);
  const auto masked = n.masked_positions();
  ASSERT_EQ(r.per_position.size(), masked.size());
  for (size_t i = 0; i < masked.size(); ++i) EXPECT_EQ(r.per_position[i].position, masked[i]);
  NoiseInstance none = n;
  for (auto& m : none.masked) m.clear();
  none.corrupted = seq.tokens;
  EXPECT_THROW(dlm_loss<double>(p, seq, none, AttentionKind::block_clean), std::invalid_argument);
}

TEST(Loss, ArLossRejectsAllPad) {
  const auto p = fixture::tiny_model<double>(1, false, kSmallVocab);
  TokenSequence s;
  s.tokens.assign(6, default_vocab().pad_id);
  EXPECT_THROW(ar_loss<double>(p, s), std::invalid_argument);
}

// With token shift, block size 1 and every target masked, the dLM objective
// reduces to next-token prediction from a causal pass over masked inputs.
TEST(Loss, TokenShiftWithUnitBlocksMatchesCausalPrediction) {
  const auto p = fixture::tiny_model<double>(9, true, kSmallVocab);
  const TokenSequence seq = small_sequence(1);
  Rng rng(1);
  const NoiseInstance n = corrupt(seq, MaskSchedule{}, 1.0, rng);
  const LossResult d = dlm_loss<double>(p, seq, n, AttentionKind::block_noisy);
  const LossResult a = ar_loss<double>(p, seq, nullptr, default_vocab(), true);
  ASSERT_EQ(d.per_position.size(), 8u);
  for (const auto& pl : d.per_position) {
    const auto it = std::find_if(a.per_position.begin(), a.per_position.end(),
                                 [&](const PositionLoss& x) { return x.position == pl.position; });
    ASSERT_NE(it, a.per_position.end());
    EXPECT_DOUBLE_EQ(pl.nll, it->nll);
  }
}

// Clean-context training with unit blocks: each masked position is predicted
// from the clean prefix plus its own mask, as in a plain causal pass.
TEST(Loss, CleanContextUnitBlocksMatchPerPositionCausalOracle) {
  const auto p = fixture::tiny_model<double>(10, false, kSmallVocab);
  const TokenSequence seq = small_sequence(1);
  Rng rng(3);
  const NoiseInstance n = corrupt(seq, MaskSchedule{}, 1.0, rng);
  const DlmInput in = build_dlm_input(seq, n, AttentionKind::block_clean);
  const auto masked = n.masked_positions();
  const Matrix<double> got = forward<double>(p, in.tokens, in.layout, masked);
  const Matrix<double> want = oracle::per_position_causal(p, seq.tokens, n.corrupted, masked);
  EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Loss, PredictingRows) {
  EXPECT_EQ(predicting_row(5, 8, 4, AttentionKind::block_clean, false), 5);
  EXPECT_EQ(predicting_row(5, 8, 4, AttentionKind::block_clean, true), 4);
  EXPECT_EQ(predicting_row(4, 8, 4, AttentionKind::block_clean, true), 8 + 3);
  EXPECT_EQ(predicting_row(4, 8, 4, AttentionKind::block_noisy, true), 3);
  EXPECT_EQ(predicting_row(0, 8, 4, AttentionKind::block_clean, true), -1);
}

// ---------------------------------------------------------------------------
// Forward pass properties

TEST(Forward, CachedContinuationMatchesFullPass) {
  const auto p = fixture::tiny_model<double>(12);
  Tokens all(10);
  std::iota(all.begin(), all.end(), 20);
  const std::vector<int> rows{6, 7, 8, 9};
  const Matrix<double> full = forward<double>(p, all, causal_layout(10), rows);

  KvCache<double> cache;
  const Tokens prefix(all.begin(), all.begin() + 6);
  const std::vector<int> none;
  forward<double>(p, prefix, causal_layout(6), none, nullptr, nullptr, &cache);
  ASSERT_EQ(cache.length(), 6);
  AttentionLayout tail = detail::empty_layout(4, 10, RowRole::plain);
  for (int r = 0; r < 4; ++r) {
    tail.pos_index[static_cast<size_t>(r)] = 6 + r;
    for (int k = 0; k <= 6 + r; ++k) tail.set(r, k, true);
  }
  const Tokens rest(all.begin() + 6, all.end());
  const std::vector<int> out{0, 1, 2, 3};
  const Matrix<double> inc = forward<double>(p, rest, tail, out, nullptr, &cache);
  EXPECT_LT((full - inc).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, BidirectionalPermutationEquivariance) {
  const auto p = fixture::tiny_model<double>(13);
  const Tokens t{5, 9, 30, 41, 7, 12};
  const std::vector<int> perm{3, 0, 5, 1, 4, 2};
  AttentionLayout base = bidirectional_layout(6);
  AttentionLayout permuted = bidirectional_layout(6);
  Tokens tp(6);
  for (int i = 0; i < 6; ++i) {
    tp[static_cast<size_t>(i)] = t[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    permuted.pos_index[static_cast<size_t>(i)] = perm[static_cast<size_t>(i)];
  }
  const std::vector<int> rows{0, 1, 2, 3, 4, 5};
  const Matrix<double> a = forward<double>(p, t, base, rows);
  const Matrix<double> b = forward<double>(p, tp, permuted, rows);
  for (int i = 0; i < 6; ++i)
    EXPECT_LT((b.row(i) - a.row(perm[static_cast<size_t>(i)])).cwiseAbs().maxCoeff(), 1e-12);

  const auto ea = mean_pool_embed<double>(p, t);
  const auto eb = mean_pool_embed<double>(p, tp, &permuted.pos_index);
  EXPECT_LT((ea - eb).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(ea.norm(), 1.0, 1e-12);
}

TEST(Forward, ReportsNonFiniteLayer) {
  auto p = fixture::tiny_model<double>(14);
  p.layer(1, LayerSlot::w1)(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const Tokens t{5, 6, 7};
  const std::vector<int> rows{2};
  try {
    forward<double>(p, t, causal_layout(3), rows);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("layers.1"), std::string::npos) << e.what();
  }
}

TEST(Forward, RejectsShapeErrors) {
  const auto p = fixture::tiny_model<double>(15);
  const Tokens t{5, 6, 7};
  const std::vector<int> rows{0};
  EXPECT_THROW(forward<double>(p, t, causal_layout(4), rows), std::invalid_argument);
  const Tokens bad{5, 6, 400};
  EXPECT_THROW(forward<double>(p, bad, causal_layout(3), rows), std::invalid_argument);
  AttentionLayout far = causal_layout(3);
  far.pos_index[2] = 1000;
  EXPECT_THROW(forward<double>(p, t, far, rows), std::invalid_argument);
}

TEST(ModelConfig, Validation) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.d_model = 12;
  c.n_heads = 4;  // head_dim 3 is odd
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ModelParams, NamesAndCounts) {
  ModelConfig c;
  c.n_layers = 2;
  const auto p = ModelParams<float>::zeros(c);
  EXPECT_NE(p.find("layers.1.attn.wq"), nullptr);
  EXPECT_NE(p.find("layers.0.ffn.w2"), nullptr);
  EXPECT_NE(p.find("head"), nullptr);
  const size_t d = 128, f = 512, v = 259;
  EXPECT_EQ(p.parameter_count(), 2 * v * d + d + 2 * (4 * d * d + 2 * d + 2 * d * f));
}

// ---------------------------------------------------------------------------
// Optimization

TEST(Optim, LearningRateSchedule) {
  OptimConfig o;
  o.lr = 1.0;
  o.lr_min = 0.1;
  o.warmup = 10;
  o.total_steps = 110;
  EXPECT_DOUBLE_EQ(learning_rate(o, 0), 0.1);
  EXPECT_DOUBLE_EQ(learning_rate(o, 9), 1.0);
  EXPECT_DOUBLE_EQ(learning_rate(o, 10), 1.0);
  EXPECT_NEAR(learning_rate(o, 60), 0.55, 1e-12);
  EXPECT_NEAR(learning_rate(o, 110), 0.1, 1e-12);
  EXPECT_NEAR(learning_rate(o, 500), 0.1, 1e-12);
}

TEST(Optim, MemorizesOneSequence) {
  ModelConfig c;
  c.d_model = 32;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ffn = 64;
  c.max_positions = 64;
  auto st = TrainState<float>::fresh(ModelParams<float>::init(c, 3), 3);
  const TokenSequence seq = format_instance("hello|", "world", SequenceShape{8, 8}, 1);
  OptimConfig o;
  o.lr = 3e-3;
  o.lr_min = 1e-3;
  o.total_steps = 300;
  TrainObjective obj;
  obj.loss = LossKind::ar;
  StepMetrics m;
  for (int s = 0; s < 300; ++s) m = train_step(st, {seq}, obj, o);
  EXPECT_LT(ar_loss<float>(st.params, seq).loss, 0.05);
  EXPECT_FALSE(m.skipped);
}

TEST(Optim, NonFiniteStepIsSkipped) {
  auto st = TrainState<float>::fresh(fixture::tiny_model<float>(2), 2);
  st.params.layer(0, LayerSlot::w1).setConstant(std::numeric_limits<float>::infinity());
  const auto before = st.params;
  TrainObjective obj;
  obj.loss = LossKind::ar;
  const StepMetrics m = train_step(st, {format_instance("ab|", "ab", SequenceShape{4, 4}, 1)}, obj, OptimConfig{});
  EXPECT_TRUE(m.skipped);
  EXPECT_EQ(st.step, 1);
  for (size_t i = 0; i < before.tensors.size(); ++i) {
    const auto& a = before.tensors[i].value;
    const auto& b = st.params.tensors[i].value;
    EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<size_t>(a.size())), 0);
  }
}

TEST(Optim, DlmStepsReduceLoss) {
  auto st = TrainState<float>::fresh(fixture::tiny_model<float>(4, false, 259, 2, 16, 0.05), 4);
  const auto batch = std::vector<TokenSequence>{format_instance("abc|", "abc", SequenceShape{8, 4}, 4),
                                                format_instance("dd|", "dd", SequenceShape{8, 4}, 4)};
  TrainObjective obj;
  OptimConfig o;
  o.lr = 5e-3;
  o.total_steps = 200;
  double first = 0, last = 0;
  for (int s = 0; s < 200; ++s) {
    const auto m = train_step(st, batch, obj, o);
    if (s < 10) first += m.loss;
    if (s >= 190) last += m.loss;
  }
  EXPECT_LT(last, 0.5 * first);
}

TEST(Diagnostics, WeightDrift) {
  const auto a = fixture::tiny_model<double>(5);
  auto b = a;
  EXPECT_EQ(weight_drift(a, b).attention_mean, 0.0);
  for (auto& t : b.tensors)
    if (t.name.find(".attn.") != std::string::npos) t.value *= 1.5;
  const DriftReport r = weight_drift(a, b);
  EXPECT_NEAR(r.attention_mean, 0.5, 1e-12);
  EXPECT_EQ(r.ffn_mean, 0.0);
  EXPECT_EQ(r.tensors.size(), a.tensors.size());
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("dlmlab_" + name)).string();
}

}  // namespace

TEST(Checkpoint, RoundTripIsExact) {
  auto st = TrainState<float>::fresh(fixture::tiny_model<float>(7), 7);
  TrainObjective obj;
  train_step(st, {format_instance("ab|", "ab", SequenceShape{4, 4}, 4)}, obj, OptimConfig{});
  st.rng.normal();  // leaves a cached spare in the generator
  const std::string path = temp_path("roundtrip.ckpt");
  save_checkpoint(st, path);
  auto back = load_checkpoint<float>(path);
  EXPECT_EQ(back.step, st.step);
  EXPECT_EQ(back.params.config.d_model, st.params.config.d_model);
  for (size_t i = 0; i < st.params.tensors.size(); ++i) {
    EXPECT_TRUE(back.params.tensors[i].value == st.params.tensors[i].value);
    EXPECT_TRUE(back.m.tensors[i].value == st.m.tensors[i].value);
    EXPECT_TRUE(back.v.tensors[i].value == st.v.tensors[i].value);
  }
  EXPECT_EQ(back.rng.normal(), st.rng.normal());
  EXPECT_EQ(back.rng.next_u64(), st.rng.next_u64());

  auto d = TrainState<double>::fresh(fixture::tiny_model<double>(7), 7);
  save_checkpoint(d, path, false);
  const auto dback = load_checkpoint<double>(path);
  EXPECT_TRUE(dback.params.tensors[3].value == d.params.tensors[3].value);
  EXPECT_EQ(dback.m.squared_norm(), 0.0);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  auto st = TrainState<float>::fresh(fixture::tiny_model<float>(8), 8);
  const std::string path = temp_path("bad.ckpt");
  save_checkpoint(st, path);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) { std::ofstream(path, std::ios::binary | std::ios::trunc) << b; };

  EXPECT_THROW(load_checkpoint<double>(path), CheckpointError);  // dtype

  std::string bad = bytes;
  bad[0] = 'X';
  write(bad);
  EXPECT_THROW(load_checkpoint<float>(path), CheckpointError);

  bad = bytes;
  bad[8] = 9;  // version
  write(bad);
  EXPECT_THROW(load_checkpoint<float>(path), CheckpointError);

  write(bytes.substr(0, bytes.size() - 10));
  EXPECT_THROW(load_checkpoint<float>(path), CheckpointError);

  write(bytes.substr(0, 30));
  EXPECT_THROW(load_checkpoint<float>(path), CheckpointError);

  bad = bytes;
  const auto pos = bad.find("\"final_norm\"");
  ASSERT_NE(pos, std::string::npos);
  bad.replace(pos, 12, "\"finol_norm\"");
  write(bad);
  EXPECT_THROW(load_checkpoint<float>(path), CheckpointError);

  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint<float>(path), CheckpointError);
}
