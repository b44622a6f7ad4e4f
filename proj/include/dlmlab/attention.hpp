#pragma once

// Explicit attention relations and position-index assignments for causal,
// bidirectional, block-wise and block-wise-with-clean-context inputs.

#include <algorithm>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dlmlab {

enum class RowRole : std::uint8_t { plain, noisy, clean };

// Internal pattern of the clean-context stream.
enum class CleanPattern { block_causal, token_causal };

inline CleanPattern parse_clean_pattern(std::string_view s) {
  if (s == "block_causal") return CleanPattern::block_causal;
  if (s == "token_causal") return CleanPattern::token_causal;
  throw std::invalid_argument("unknown clean pattern: " + std::string(s));
}

inline std::string to_string(CleanPattern p) {
  return p == CleanPattern::block_causal ? "block_causal" : "token_causal";
}

// Query rows x key rows boolean relation. For layouts without a cache the key
// set is the row set itself (keys == rows); a decode layout has `keys =
// cached + rows` where the first `cached` keys are cache entries.
struct AttentionLayout {
  int rows = 0;
  int keys = 0;
  std::vector<std::uint8_t> allowed;
  std::vector<int> pos_index;
  std::vector<RowRole> row_role;
  std::vector<int> loss_rows;

  bool allows(int q, int k) const {
    return allowed[static_cast<size_t>(q) * static_cast<size_t>(keys) + static_cast<size_t>(k)] != 0;
  }
  void set(int q, int k, bool v) {
    allowed[static_cast<size_t>(q) * static_cast<size_t>(keys) + static_cast<size_t>(k)] = v ? 1 : 0;
  }
  int allowed_count() const {
    int n = 0;
    for (auto a : allowed) n += a;
    return n;
  }
  bool same_relation(const AttentionLayout& o) const {
    return rows == o.rows && keys == o.keys && allowed == o.allowed;
  }
};

namespace detail {

inline AttentionLayout empty_layout(int rows, int keys, RowRole role) {
  AttentionLayout l;
  l.rows = rows;
  l.keys = keys;
  l.allowed.assign(static_cast<size_t>(rows) * static_cast<size_t>(keys), 0);
  l.pos_index.resize(static_cast<size_t>(rows));
  l.row_role.assign(static_cast<size_t>(rows), role);
  for (int r = 0; r < rows; ++r) l.pos_index[static_cast<size_t>(r)] = r;
  return l;
}

inline void check_blocks(int L, int block_size) {
  if (L < 1) throw std::invalid_argument("layout: length must be >= 1");
  if (block_size < 1 || L % block_size != 0)
    throw std::invalid_argument("layout: length must be a multiple of the block size");
}

}  // namespace detail

inline AttentionLayout causal_layout(int L) {
  if (L < 1) throw std::invalid_argument("causal_layout: length must be >= 1");
  auto l = detail::empty_layout(L, L, RowRole::plain);
  for (int q = 0; q < L; ++q)
    for (int k = 0; k <= q; ++k) l.set(q, k, true);
  for (int r = 0; r < L; ++r) l.loss_rows.push_back(r);
  return l;
}

inline AttentionLayout bidirectional_layout(int L) {
  if (L < 1) throw std::invalid_argument("bidirectional_layout: length must be >= 1");
  auto l = detail::empty_layout(L, L, RowRole::noisy);
  std::fill(l.allowed.begin(), l.allowed.end(), std::uint8_t{1});
  return l;
}

// Causal across blocks, bidirectional within a block, single input stream.
inline AttentionLayout block_noisy_layout(int L, int block_size) {
  detail::check_blocks(L, block_size);
  auto l = detail::empty_layout(L, L, RowRole::noisy);
  for (int q = 0; q < L; ++q)
    for (int k = 0; k < L; ++k) l.set(q, k, k / block_size <= q / block_size);
  return l;
}

// Rows [0, L) hold the noisy stream, rows [L, 2L) the clean copy. Both rows
// of one sequence position share its position index.
inline AttentionLayout block_clean_layout(int L, int block_size,
                                          CleanPattern clean = CleanPattern::block_causal) {
  detail::check_blocks(L, block_size);
  auto l = detail::empty_layout(2 * L, 2 * L, RowRole::noisy);
  for (int j = 0; j < L; ++j) {
    l.pos_index[static_cast<size_t>(j)] = j;
    l.pos_index[static_cast<size_t>(L + j)] = j;
    l.row_role[static_cast<size_t>(L + j)] = RowRole::clean;
  }
  for (int q = 0; q < L; ++q) {
    const int bq = q / block_size;
    for (int k = 0; k < L; ++k) {
      const int bk = k / block_size;
      l.set(q, k, bk == bq);          // among noisy tokens of the same block
      l.set(q, L + k, bk < bq);       // noisy -> clean context
      const bool clean_ok = clean == CleanPattern::block_causal ? bk <= bq : k <= q;
      l.set(L + q, L + k, clean_ok);  // within the clean context
    }
  }
  return l;
}

// One in-flight block of `block_size` rows attending to every cache entry and
// to every in-flight row.
inline AttentionLayout decode_layout(int cached_len, int block_size) {
  if (cached_len < 0 || block_size < 1) throw std::invalid_argument("decode_layout: bad shape");
  auto l = detail::empty_layout(block_size, cached_len + block_size, RowRole::noisy);
  std::fill(l.allowed.begin(), l.allowed.end(), std::uint8_t{1});
  for (int r = 0; r < block_size; ++r) {
    l.pos_index[static_cast<size_t>(r)] = cached_len + r;
    l.loss_rows.push_back(r);
  }
  return l;
}

// '#' for allowed, '.' otherwise; one line per query row.
inline std::string to_ascii(const AttentionLayout& l) {
  std::ostringstream os;
  for (int q = 0; q < l.rows; ++q) {
    for (int k = 0; k < l.keys; ++k) os << (l.allows(q, k) ? '#' : '.');
    os << '\n';
  }
  return os.str();
}

// Plain (P2) PGM: allowed pairs are white.
inline std::string to_pgm(const AttentionLayout& l) {
  std::ostringstream os;
  os << "P2\n" << l.keys << ' ' << l.rows << "\n1\n";
  for (int q = 0; q < l.rows; ++q) {
    for (int k = 0; k < l.keys; ++k) os << (k ? " " : "") << (l.allows(q, k) ? 1 : 0);
    os << '\n';
  }
  return os.str();
}

}  // namespace dlmlab
