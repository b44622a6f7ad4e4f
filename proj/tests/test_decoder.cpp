#include <array>

#include <gtest/gtest.h>

#include "dlmlab/decoder.hpp"
#include "fixtures.hpp"

using namespace dlmlab;

namespace {

Tokens random_prompt(std::uint64_t i) {
  Rng rng(derive_seed(77, i));
  const int n = rng.range(1, 11);
  std::string s;
  for (int k = 0; k < n; ++k) s.push_back(static_cast<char>('a' + rng.below(8)));
  return tokenize(s);
}

DecodeConfig make_cfg(int bs, std::optional<double> tau, int max_new = 8) {
  DecodeConfig c;
  c.eval_block_size = bs;
  c.confidence_threshold = tau;
  c.max_new_tokens = max_new;
  return c;
}

}  // namespace

// 100 prompts spread over block sizes, thresholds and token shift.
TEST(Decoder, CachedGenerateMatchesReferenceDecoder) {
  const std::vector<std::optional<double>> taus{std::nullopt, 0.9, 0.5, 0.2, 0.0};
  const std::vector<int> sizes{1, 2, 4, 8};
  const std::array<ModelParams<double>, 2> models{fixture::tiny_model<double>(31, false),
                                                  fixture::tiny_model<double>(32, true)};
  int eos_seen = 0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    const auto& p = models[i % 2];
    const DecodeConfig cfg = make_cfg(sizes[(i / 2) % 4], taus[(i / 8) % 5], 3 + static_cast<int>(i % 9));
    const Tokens prompt = random_prompt(i);
    const GenerateResult a = generate(p, prompt, cfg);
    const GenerateResult b = generate_reference(p, prompt, cfg);
    EXPECT_EQ(a.tokens, b.tokens) << "prompt " << i;
    EXPECT_EQ(a.hit_eos, b.hit_eos);
    EXPECT_EQ(a.trace.positions, b.trace.positions);
    EXPECT_EQ(a.trace.steps, b.trace.steps);
    EXPECT_EQ(a.trace.block_steps, b.trace.block_steps);
    EXPECT_EQ(a.trace.nfe, b.trace.nfe);
    EXPECT_EQ(a.trace.refresh_forwards, b.trace.refresh_forwards);
    EXPECT_EQ(a.trace.decoded_tokens, b.trace.decoded_tokens);
    eos_seen += a.hit_eos ? 1 : 0;
  }
  RecordProperty("eos_seen", eos_seen);
}

TEST(Decoder, SinglePrecisionTracksReference) {
  const auto p = fixture::tiny_model<float>(33, false);
  for (std::uint64_t i = 0; i < 10; ++i) {
    const DecodeConfig cfg = make_cfg(4, 0.5);
    EXPECT_EQ(generate(p, random_prompt(i), cfg).tokens, generate_reference(p, random_prompt(i), cfg).tokens);
  }
}

TEST(Decoder, ThresholdOffDecodesOneTokenPerForward) {
  const auto p = fixture::tiny_model<double>(34);
  for (int bs : {1, 2, 4, 8}) {
    for (std::uint64_t i = 0; i < 10; ++i) {
      const auto r = generate(p, random_prompt(i), make_cfg(bs, std::nullopt));
      EXPECT_EQ(r.trace.decoded_tokens, r.trace.nfe);
      EXPECT_DOUBLE_EQ(r.trace.tpf(), 1.0);
    }
  }
}

TEST(Decoder, ThresholdZeroDecodesWholeBlockPerForward) {
  const auto p = fixture::tiny_model<double>(35);
  for (int bs : {1, 2, 4, 8}) {
    for (std::uint64_t i = 0; i < 10; ++i) {
      const auto r = generate(p, random_prompt(i), make_cfg(bs, 0.0));
      EXPECT_EQ(r.trace.nfe, r.trace.refresh_forwards);
      EXPECT_DOUBLE_EQ(r.trace.tpf(), static_cast<double>(bs));
      for (int s : r.trace.block_steps) EXPECT_EQ(s, 1);
    }
  }
}

TEST(Decoder, AccountingInvariantsStepByStep) {
  const auto p = fixture::tiny_model<double>(36);
  const DecodeConfig cfg = make_cfg(4, 0.6, 12);
  const Tokens prompt = random_prompt(3);
  DecodeState<double> st = start(p, prompt, cfg);
  EXPECT_EQ(st.nfe, 0);  // prefill is not a denoising forward
  EXPECT_EQ(st.cache.length(), static_cast<int>(prompt.size()));
  int blocks = 0;
  while (!st.finished) {
    while (!st.block_complete(default_vocab().mask_id)) {
      const int before = st.decoded_tokens;
      denoise_step(p, st);
      EXPECT_GE(st.decoded_tokens, before + 1);
      EXPECT_LE(st.decoded_tokens, st.nfe * cfg.eval_block_size);
    }
    finalize_block(p, st);
    ++blocks;
    EXPECT_EQ(st.cache.length(), static_cast<int>(prompt.size()) + blocks * cfg.eval_block_size);
    EXPECT_EQ(st.refresh_forwards, blocks);
  }
  EXPECT_THROW(denoise_step(p, st), std::logic_error);
  for (size_t i = 0; i < st.committed.size(); ++i) EXPECT_GT(st.decoded_step[i], 0);
}

// Without thresholding each step commits the single most confident mask, so
// within a step the committed confidence is the maximum over open masks.
TEST(Decoder, ThresholdOffCommitsArgmaxConfidence) {
  const auto p = fixture::tiny_model<double>(37);
  DecodeState<double> st = start(p, random_prompt(5), make_cfg(8, std::nullopt));
  while (!st.block_complete(default_vocab().mask_id)) {
    const Tokens before = st.block;
    denoise_step(p, st);
    int committed = -1;
    for (size_t j = 0; j < before.size(); ++j)
      if (before[j] == default_vocab().mask_id && st.block[j] != default_vocab().mask_id &&
          st.ruled[static_cast<size_t>(st.block_start - st.prompt_len) + j]) {
        EXPECT_EQ(committed, -1) << "more than one ruled commit";
        committed = static_cast<int>(j);
      }
    ASSERT_GE(committed, 0);
    for (size_t j = 0; j < before.size(); ++j)
      if (before[j] == default_vocab().mask_id) {
        EXPECT_LE(st.last_confidence[j], st.last_confidence[static_cast<size_t>(committed)]);
      }
  }
}

TEST(Decoder, CommitRuleTiesAndThreshold) {
  const Tokens block{2, 2, 2, 2};
  Matrix<double> pred = Matrix<double>::Zero(4, 6);
  for (int j = 0; j < 4; ++j) pred(j, 4) = 2.0;  // identical rows
  Rng rng(0);
  DecodeConfig off = make_cfg(4, std::nullopt);
  auto d = detail::decide_commits<double>(pred, block, off, 2, rng);
  EXPECT_EQ(d.commit, (std::vector<int>{0}));  // lowest index wins ties
  pred(2, 4) = 5.0;
  d = detail::decide_commits<double>(pred, block, off, 2, rng);
  EXPECT_EQ(d.commit, (std::vector<int>{2}));
  DecodeConfig th = make_cfg(4, 0.5);
  d = detail::decide_commits<double>(pred, block, th, 2, rng);
  // max-prob without the mask column: row 2 ~ 0.97, others e^2 / (e^2 + 4) ~ 0.65
  EXPECT_EQ(d.commit, (std::vector<int>{0, 1, 2, 3}));
  DecodeConfig high = make_cfg(4, 0.99);
  d = detail::decide_commits<double>(pred, block, high, 2, rng);
  EXPECT_EQ(d.commit, (std::vector<int>{2}));
  const Tokens partial{7, 2, 7, 7};
  d = detail::decide_commits<double>(pred, partial, off, 2, rng);
  EXPECT_EQ(d.commit, (std::vector<int>{1}));
}

TEST(Decoder, NeverEmitsTheMaskToken) {
  Matrix<double> pred = Matrix<double>::Zero(2, 6);
  pred(0, 2) = 50.0;
  pred(1, 2) = 50.0;
  pred(1, 5) = 1.0;
  Rng rng(0);
  const auto d = detail::decide_commits<double>(pred, Tokens{2, 2}, make_cfg(2, 0.0), 2, rng);
  EXPECT_EQ(d.token, (std::vector<TokenId>{0, 5}));
  EXPECT_NEAR(d.confidence[0], 0.2, 1e-12);
}

TEST(Decoder, EosFillsOnlyLaterMasks) {
  const auto p = fixture::tiny_model<double>(38);
  DecodeState<double> st = start(p, random_prompt(1), make_cfg(4, std::nullopt));
  detail::StepDecision d;
  d.commit = {1};
  d.token = {default_vocab().eos_id};
  d.confidence = {0.1, 0.9, 0.2, 0.3};
  d.argmax = {40, default_vocab().eos_id, 41, 42};
  detail::apply_decision(st, d, default_vocab());
  EXPECT_EQ(st.block, (Tokens{2, 1, 41, 42}));
  EXPECT_EQ(st.decoded_tokens, 1);
  EXPECT_EQ(st.nfe, 1);
  EXPECT_EQ(st.decoded_step[2], 1);
  EXPECT_FALSE(st.ruled[2]);
}

TEST(Decoder, ResultStopsAtEosAndTraceSerializes) {
  const auto p = fixture::tiny_model<double>(39);
  for (std::uint64_t i = 0; i < 20; ++i) {
    const auto r = generate(p, random_prompt(i), make_cfg(2, 0.3, 7));
    EXPECT_LE(r.tokens.size(), 7u);
    for (TokenId t : r.tokens) EXPECT_NE(t, default_vocab().eos_id);
    const auto j = to_json(r.trace);
    for (const char* key : {"positions", "steps", "block_steps", "confidences", "nfe", "tpf", "decoded_tokens"})
      EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_EQ(r.trace.positions.size(), r.trace.steps.size());
    for (int s : r.trace.block_steps) {
      EXPECT_GE(s, 1);
      EXPECT_LE(s, 2);
    }
  }
}

TEST(Decoder, TemperatureSamplingIsSeeded) {
  const auto p = fixture::tiny_model<double>(40);
  DecodeConfig c = make_cfg(4, 0.5);
  c.temperature = 1.0;
  c.seed = 5;
  const auto a = generate(p, random_prompt(2), c);
  const auto b = generate(p, random_prompt(2), c);
  EXPECT_EQ(a.tokens, b.tokens);
}

TEST(Decoder, ConfigValidation) {
  const auto p = fixture::tiny_model<double>(41);
  EXPECT_THROW(generate(p, random_prompt(1), make_cfg(0, std::nullopt)), std::invalid_argument);
  EXPECT_THROW(generate(p, random_prompt(1), make_cfg(4, 1.5)), std::invalid_argument);
  EXPECT_THROW(generate(p, random_prompt(1), make_cfg(4, -0.1)), std::invalid_argument);
  EXPECT_THROW(generate(p, random_prompt(1), make_cfg(4, 0.5, 0)), std::invalid_argument);
  EXPECT_THROW(generate(p, Tokens{}, make_cfg(4, 0.5)), std::invalid_argument);
  EXPECT_THROW(generate(p, Tokens(125, 10), make_cfg(4, 0.5)), std::invalid_argument);
  EXPECT_EQ(make_cfg(4, 0.5, 5).rounded_new_tokens(), 8);
}

TEST(Decoder, ThresholdLabels) {
  EXPECT_EQ(threshold_label(std::nullopt), "off");
  EXPECT_EQ(threshold_label(0.9), "0.9");
  EXPECT_EQ(threshold_label(0.0), "0");
  EXPECT_FALSE(parse_threshold("off").has_value());
  EXPECT_DOUBLE_EQ(*parse_threshold("0.7"), 0.7);
}

TEST(Decoder, PositionStepProfile) {
  DecodeTrace a;
  a.block_size = 2;
  a.positions = {0, 1, 2, 3};
  a.block_steps = {1, 2, 2, 1};
  DecodeTrace b = a;
  b.block_steps = {1, 1, 1, 2};
  const auto m = trace_position_steps({a, b});
  ASSERT_EQ(m.size(), 2u);
  EXPECT_DOUBLE_EQ(m[0], 1.25);
  EXPECT_DOUBLE_EQ(m[1], 1.5);
  EXPECT_THROW(trace_position_steps({}), std::invalid_argument);
  DecodeTrace c = a;
  c.block_size = 4;
  EXPECT_THROW(trace_position_steps({a, c}), std::invalid_argument);
}
