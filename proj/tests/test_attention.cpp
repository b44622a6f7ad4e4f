#include <gtest/gtest.h>

#include "dlmlab/model.hpp"
#include "fixtures.hpp"

using namespace dlmlab;

TEST(Layouts, BlockNoisyDegeneratesToCausalAndBidirectional) {
  for (int L = 1; L <= 32; ++L) {
    EXPECT_TRUE(block_noisy_layout(L, 1).same_relation(causal_layout(L))) << L;
    EXPECT_TRUE(block_noisy_layout(L, L).same_relation(bidirectional_layout(L))) << L;
  }
}

TEST(Layouts, BlockNoisyIsBlockCausal) {
  const auto l = block_noisy_layout(12, 4);
  for (int q = 0; q < 12; ++q)
    for (int k = 0; k < 12; ++k) EXPECT_EQ(l.allows(q, k), k / 4 <= q / 4);
}

TEST(Layouts, BlockCleanRelations) {
  const int L = 12, bs = 3;
  for (CleanPattern pat : {CleanPattern::block_causal, CleanPattern::token_causal}) {
    const auto l = block_clean_layout(L, bs, pat);
    ASSERT_EQ(l.rows, 2 * L);
    ASSERT_EQ(l.keys, 2 * L);
    for (int i = 0; i < L; ++i) {
      EXPECT_EQ(l.pos_index[static_cast<size_t>(i)], i);
      EXPECT_EQ(l.pos_index[static_cast<size_t>(L + i)], i);
      EXPECT_EQ(l.row_role[static_cast<size_t>(i)], RowRole::noisy);
      EXPECT_EQ(l.row_role[static_cast<size_t>(L + i)], RowRole::clean);
      for (int j = 0; j < L; ++j) {
        EXPECT_EQ(l.allows(i, j), i / bs == j / bs);           // noisy -> noisy, same block only
        EXPECT_EQ(l.allows(i, L + j), j / bs < i / bs);        // noisy -> clean, earlier blocks only
        EXPECT_FALSE(l.allows(L + i, j));                      // clean never sees noisy
        const bool want = pat == CleanPattern::block_causal ? j / bs <= i / bs : j <= i;
        EXPECT_EQ(l.allows(L + i, L + j), want);
      }
    }
  }
}

TEST(Layouts, DecodeLayoutShape) {
  const auto l = decode_layout(10, 4);
  EXPECT_EQ(l.rows, 4);
  EXPECT_EQ(l.keys, 14);
  EXPECT_EQ(l.allowed_count(), 4 * 14);
  EXPECT_EQ(l.pos_index, (std::vector<int>{10, 11, 12, 13}));
  EXPECT_EQ(l.loss_rows.size(), 4u);
}

TEST(Layouts, RejectBadShapes) {
  EXPECT_THROW(block_noisy_layout(10, 4), std::invalid_argument);
  EXPECT_THROW(block_clean_layout(10, 3), std::invalid_argument);
  EXPECT_THROW(block_noisy_layout(0, 1), std::invalid_argument);
  EXPECT_THROW(causal_layout(0), std::invalid_argument);
  EXPECT_THROW(decode_layout(-1, 2), std::invalid_argument);
}

TEST(Layouts, AsciiAndPgmDumps) {
  const auto l = block_noisy_layout(4, 2);
  EXPECT_EQ(to_ascii(l), "##..\n##..\n####\n####\n");
  const std::string pgm = to_pgm(l);
  EXPECT_EQ(pgm.rfind("P2\n4 4\n1\n", 0), 0u);
  EXPECT_NE(pgm.find("1 1 0 0\n"), std::string::npos);
}

TEST(CleanPatternNames, RoundTrip) {
  for (CleanPattern p : {CleanPattern::block_causal, CleanPattern::token_causal})
    EXPECT_EQ(parse_clean_pattern(to_string(p)), p);
  EXPECT_THROW(parse_clean_pattern("full"), std::invalid_argument);
}

// Leakage: outputs of a row may only change when a token the row is allowed
// to see (directly or through earlier layers) changes. Checked bit-exactly.
namespace {

Matrix<double> all_rows(const ModelParams<double>& p, const Tokens& t, const AttentionLayout& l) {
  std::vector<int> rows(static_cast<size_t>(l.rows));
  for (int r = 0; r < l.rows; ++r) rows[static_cast<size_t>(r)] = r;
  return forward<double>(p, t, l, rows);
}

}  // namespace

TEST(Leakage, BlockCleanHasNoCleanToNoisyOrFutureInfluence) {
  const int L = 12, bs = 4;
  const auto p = fixture::tiny_model<double>(5);
  const auto layout = block_clean_layout(L, bs);
  Tokens base(2 * static_cast<size_t>(L));
  Rng rng(1);
  for (auto& t : base) t = static_cast<TokenId>(3 + rng.below(50));
  const Matrix<double> ref = all_rows(p, base, layout);

  for (int changed = 0; changed < 2 * L; ++changed) {
    Tokens alt = base;
    alt[static_cast<size_t>(changed)] = base[static_cast<size_t>(changed)] == 60 ? 61 : 60;
    const Matrix<double> out = all_rows(p, alt, layout);
    const bool clean = changed >= L;
    const int pos = clean ? changed - L : changed;
    for (int r = 0; r < 2 * L; ++r) {
      const bool row_clean = r >= L;
      const int rpos = row_clean ? r - L : r;
      bool may_change;
      if (clean) {
        // A clean token reaches clean rows of its block and later blocks, and
        // noisy rows of strictly later blocks.
        may_change = row_clean ? pos / bs <= rpos / bs : pos / bs < rpos / bs;
      } else {
        // A noisy token reaches only noisy rows of its own block.
        may_change = !row_clean && pos / bs == rpos / bs;
      }
      if (!may_change) {
        EXPECT_TRUE(out.row(r) == ref.row(r)) << "token " << changed << " leaked into row " << r;
      } else if (r == changed) {
        EXPECT_FALSE(out.row(r) == ref.row(r));
      }
    }
  }
}

TEST(Leakage, BlockNoisyIsBlockCausalThroughTheModel) {
  const int L = 8, bs = 2;
  const auto p = fixture::tiny_model<double>(6);
  const auto layout = block_noisy_layout(L, bs);
  Tokens base(static_cast<size_t>(L));
  for (int i = 0; i < L; ++i) base[static_cast<size_t>(i)] = 10 + i;
  const Matrix<double> ref = all_rows(p, base, layout);
  for (int c = 0; c < L; ++c) {
    Tokens alt = base;
    alt[static_cast<size_t>(c)] = 100;
    const Matrix<double> out = all_rows(p, alt, layout);
    for (int r = 0; r < L; ++r) {
      if (c / bs > r / bs) EXPECT_TRUE(out.row(r) == ref.row(r));
      else EXPECT_FALSE(out.row(r) == ref.row(r));
    }
  }
}
