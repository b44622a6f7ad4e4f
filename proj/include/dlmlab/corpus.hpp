#pragma once

// Byte-level tokenization, synthetic task generation and deterministic batch
// streams for toy training and evaluation.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dlmlab/rng.hpp"

namespace dlmlab {

using TokenId = int;
using Tokens = std::vector<TokenId>;

struct Vocabulary {
  int size = 259;
  TokenId pad_id = 0;
  TokenId eos_id = 1;
  TokenId mask_id = 2;
  TokenId byte_offset = 3;

  bool is_special(TokenId t) const { return t < byte_offset; }

  void validate() const {
    if (pad_id == eos_id || pad_id == mask_id || eos_id == mask_id)
      throw std::invalid_argument("vocabulary: special ids must be distinct");
    if (pad_id >= size || eos_id >= size || mask_id >= size)
      throw std::invalid_argument("vocabulary: special id out of range");
    if (size != byte_offset + 256)
      throw std::invalid_argument("vocabulary: size must equal byte_offset + 256");
  }
};

inline const Vocabulary& default_vocab() {
  static const Vocabulary v{};
  return v;
}

// A token row with its block partition. Positions [0, prompt_len) are never
// corrupted; pad positions are never corrupted and never carry loss.
struct TokenSequence {
  Tokens tokens;
  int block_size = 1;
  int prompt_len = 0;

  int length() const { return static_cast<int>(tokens.size()); }
  int num_blocks() const { return length() / block_size; }
};

inline Tokens tokenize(std::string_view text, const Vocabulary& vocab = default_vocab()) {
  Tokens out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(vocab.byte_offset + static_cast<int>(c));
  return out;
}

// Special ids are dropped; every byte token maps back to its byte.
inline std::string detokenize(const Tokens& tokens, const Vocabulary& vocab = default_vocab()) {
  std::string out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (t >= vocab.byte_offset && t < vocab.size)
      out.push_back(static_cast<char>(static_cast<unsigned char>(t - vocab.byte_offset)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic tasks

enum class TaskKind { copy, reverse, modular_add, sorted_digits };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::modular_add: return "modular_add";
    case TaskKind::sorted_digits: return "sorted_digits";
  }
  return "?";
}

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "copy") return TaskKind::copy;
  if (s == "reverse") return TaskKind::reverse;
  if (s == "modular_add") return TaskKind::modular_add;
  if (s == "sorted_digits") return TaskKind::sorted_digits;
  throw std::invalid_argument("unknown task kind: " + std::string(s));
}

struct TaskInstance {
  TaskKind kind = TaskKind::copy;
  std::string prompt;
  std::string target;
  // Multiple-choice variant; empty for pure generation tasks.
  std::vector<std::string> choices;
  int correct_choice = -1;

  bool is_multiple_choice() const { return !choices.empty(); }
};

struct SyntheticOptions {
  int min_len = 2;       // copy / reverse string length
  int max_len = 6;
  int alphabet = 16;     // letters 'a'..
  int max_operand = 19;  // modular_add operands in [0, max_operand]
  int min_modulus = 2;
  int max_modulus = 9;
  int min_digits = 3;    // sorted_digits
  int max_digits = 5;
};

namespace detail {

inline int digit_sum_mod(int a, int b, int m) { return (a + b) % m; }

inline std::string sorted_copy(std::string s) {
  std::sort(s.begin(), s.end());
  return s;
}

inline std::optional<int> parse_int(std::string_view s) {
  if (s.empty() || s.size() > 9) return std::nullopt;
  int v = 0;
  for (char c : s) {
    if (c < '0' || c > '9') return std::nullopt;
    v = v * 10 + (c - '0');
  }
  return v;
}

}  // namespace detail

// Recomputes the unique correct completion from the prompt alone.
inline std::optional<std::string> solve_prompt(TaskKind kind, std::string_view prompt) {
  switch (kind) {
    case TaskKind::copy:
    case TaskKind::reverse: {
      if (prompt.size() < 2 || prompt.back() != '|') return std::nullopt;
      std::string body(prompt.substr(0, prompt.size() - 1));
      if (kind == TaskKind::reverse) std::reverse(body.begin(), body.end());
      return body;
    }
    case TaskKind::modular_add: {
      // "<a>+<b> mod <m>="
      if (prompt.empty() || prompt.back() != '=') return std::nullopt;
      const auto plus = prompt.find('+');
      const auto mod = prompt.find(" mod ");
      if (plus == std::string_view::npos || mod == std::string_view::npos || mod < plus)
        return std::nullopt;
      auto a = detail::parse_int(prompt.substr(0, plus));
      auto b = detail::parse_int(prompt.substr(plus + 1, mod - plus - 1));
      auto m = detail::parse_int(prompt.substr(mod + 5, prompt.size() - mod - 6));
      if (!a || !b || !m || *m == 0) return std::nullopt;
      return std::to_string(detail::digit_sum_mod(*a, *b, *m));
    }
    case TaskKind::sorted_digits: {
      if (prompt.size() < 2 || prompt.back() != '>') return std::nullopt;
      return detail::sorted_copy(std::string(prompt.substr(0, prompt.size() - 1)));
    }
  }
  return std::nullopt;
}

inline bool check_completion(const TaskInstance& inst, std::string_view completion) {
  auto expected = solve_prompt(inst.kind, inst.prompt);
  return expected && *expected == completion;
}

// Instance `index` of the stream for (kind, seed). Pure function of its inputs.
inline TaskInstance make_instance(TaskKind kind, std::uint64_t seed, std::uint64_t index,
                                  const SyntheticOptions& opt = {}) {
  Rng rng(derive_seed(seed, 0x7461736bULL + static_cast<std::uint64_t>(kind), index));
  TaskInstance inst;
  inst.kind = kind;
  switch (kind) {
    case TaskKind::copy:
    case TaskKind::reverse: {
      const int n = rng.range(opt.min_len, opt.max_len);
      std::string s;
      for (int i = 0; i < n; ++i) s.push_back(static_cast<char>('a' + rng.below(opt.alphabet)));
      inst.prompt = s + "|";
      if (kind == TaskKind::reverse) std::reverse(s.begin(), s.end());
      inst.target = s;
      break;
    }
    case TaskKind::modular_add: {
      const int a = rng.range(0, opt.max_operand);
      const int b = rng.range(0, opt.max_operand);
      const int m = rng.range(opt.min_modulus, opt.max_modulus);
      inst.prompt = std::to_string(a) + "+" + std::to_string(b) + " mod " + std::to_string(m) + "=";
      const int answer = detail::digit_sum_mod(a, b, m);
      inst.target = std::to_string(answer);
      // 4-way choice: the answer plus three distinct wrong single digits.
      std::vector<std::string> wrong;
      while (wrong.size() < 3) {
        const int d = static_cast<int>(rng.below(10));
        const std::string c = std::to_string(d);
        if (d != answer && std::find(wrong.begin(), wrong.end(), c) == wrong.end())
          wrong.push_back(c);
      }
      inst.correct_choice = static_cast<int>(rng.below(4));
      for (int i = 0, w = 0; i < 4; ++i)
        inst.choices.push_back(i == inst.correct_choice ? inst.target : wrong[w++]);
      break;
    }
    case TaskKind::sorted_digits: {
      const int n = rng.range(opt.min_digits, opt.max_digits);
      std::string s;
      for (int i = 0; i < n; ++i) s.push_back(static_cast<char>('0' + rng.below(10)));
      inst.prompt = s + ">";
      inst.target = detail::sorted_copy(s);
      // Distractors keep the same length (so noise draws can be shared) and
      // differ from the sorted answer in exactly one digit.
      std::vector<std::string> wrong;
      while (wrong.size() < 3) {
        std::string c = inst.target;
        const auto pos = rng.below(c.size());
        c[pos] = static_cast<char>('0' + rng.below(10));
        if (c != inst.target && std::find(wrong.begin(), wrong.end(), c) == wrong.end())
          wrong.push_back(c);
      }
      inst.correct_choice = static_cast<int>(rng.below(4));
      for (int i = 0, w = 0; i < 4; ++i)
        inst.choices.push_back(i == inst.correct_choice ? inst.target : wrong[w++]);
      break;
    }
  }
  return inst;
}

inline std::vector<TaskInstance> gen_synthetic(TaskKind kind, std::uint64_t seed, int n,
                                               const SyntheticOptions& opt = {}) {
  if (n < 1) throw std::invalid_argument("gen_synthetic: n must be >= 1");
  std::vector<TaskInstance> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(make_instance(kind, seed, static_cast<std::uint64_t>(i), opt));
  return out;
}

inline std::vector<TaskInstance> gen_synthetic(std::string_view kind, std::uint64_t seed, int n,
                                               const SyntheticOptions& opt = {}) {
  return gen_synthetic(parse_task_kind(kind), seed, n, opt);
}

// Fixed-shape training/eval row: the prompt is right-aligned in a left-padded
// region of `prompt_region` tokens; the target is followed by eos tokens up to
// the end of a `target_region`-token region.
struct SequenceShape {
  int prompt_region = 16;
  int target_region = 8;
  int length() const { return prompt_region + target_region; }
};

inline Tokens format_prompt(std::string_view prompt, int prompt_region,
                            const Vocabulary& vocab = default_vocab()) {
  if (static_cast<int>(prompt.size()) > prompt_region)
    throw std::invalid_argument("prompt longer than prompt region");
  Tokens out(static_cast<size_t>(prompt_region) - prompt.size(), vocab.pad_id);
  Tokens p = tokenize(prompt, vocab);
  out.insert(out.end(), p.begin(), p.end());
  return out;
}

inline TokenSequence format_instance(std::string_view prompt, std::string_view target,
                                     const SequenceShape& shape, int block_size,
                                     const Vocabulary& vocab = default_vocab()) {
  if (block_size < 1 || shape.length() % block_size != 0)
    throw std::invalid_argument("sequence length not a multiple of block size");
  if (static_cast<int>(target.size()) + 1 > shape.target_region)
    throw std::invalid_argument("target does not fit target region");
  TokenSequence seq;
  seq.block_size = block_size;
  seq.prompt_len = shape.prompt_region;
  seq.tokens = format_prompt(prompt, shape.prompt_region, vocab);
  Tokens t = tokenize(target, vocab);
  seq.tokens.insert(seq.tokens.end(), t.begin(), t.end());
  seq.tokens.resize(static_cast<size_t>(shape.length()), vocab.eos_id);
  return seq;
}

inline TokenSequence format_instance(const TaskInstance& inst, const SequenceShape& shape,
                                     int block_size, const Vocabulary& vocab = default_vocab()) {
  return format_instance(inst.prompt, inst.target, shape, block_size, vocab);
}

// Renders instances as newline-separated "prompt target" lines; a plain-text
// corpus with left-to-right structure for full-sequence analyses.
inline std::string synthetic_corpus_text(const std::vector<TaskKind>& kinds, std::uint64_t seed,
                                         int n, const SyntheticOptions& opt = {}) {
  std::string out;
  for (int i = 0; i < n; ++i) {
    Rng pick(derive_seed(seed, 0x6d6978ULL, static_cast<std::uint64_t>(i)));
    const TaskKind k = kinds[pick.below(kinds.size())];
    const TaskInstance inst = make_instance(k, seed, static_cast<std::uint64_t>(i), opt);
    out += inst.prompt;
    out += inst.target;
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch streams

struct SyntheticSource {
  std::vector<TaskKind> kinds;
  SyntheticOptions options;
  SequenceShape shape;
};

struct CorpusSource {
  std::string path;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read corpus file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Deterministic stream of fixed-length sequences. Item `i` is a pure function
// of (seed, i), so any sharding of indices across workers reproduces the
// same items. A corpus epoch starts exactly one window in every chunk.
class BatchStream {
 public:
  BatchStream(SyntheticSource src, int seq_len, int batch, std::uint64_t seed, int block_size,
              const Vocabulary& vocab = default_vocab())
      : synthetic_(std::move(src)), seq_len_(seq_len), batch_(batch), seed_(seed),
        block_size_(block_size), vocab_(vocab) {
    if (synthetic_->kinds.empty()) throw std::invalid_argument("batch_stream: no task kinds");
    if (seq_len != synthetic_->shape.length())
      throw std::invalid_argument("batch_stream: seq_len does not match sequence shape");
    validate();
  }

  BatchStream(const CorpusSource& src, int seq_len, int batch, std::uint64_t seed, int block_size,
              const Vocabulary& vocab = default_vocab())
      : seq_len_(seq_len), batch_(batch), seed_(seed), block_size_(block_size), vocab_(vocab) {
    validate();
    corpus_ = tokenize(read_file(src.path), vocab_);
    if (corpus_.empty()) throw std::runtime_error("corpus file is empty: " + src.path);
    num_chunks_ = (static_cast<int>(corpus_.size()) + seq_len_ - 1) / seq_len_;
  }

  // Corpus given in memory (used for generated corpora).
  BatchStream(Tokens corpus, int seq_len, int batch, std::uint64_t seed, int block_size,
              const Vocabulary& vocab = default_vocab())
      : seq_len_(seq_len), batch_(batch), seed_(seed), block_size_(block_size), vocab_(vocab),
        corpus_(std::move(corpus)) {
    validate();
    if (corpus_.empty()) throw std::invalid_argument("batch_stream: empty corpus");
    num_chunks_ = (static_cast<int>(corpus_.size()) + seq_len_ - 1) / seq_len_;
  }

  TokenSequence item(std::uint64_t index) const {
    if (synthetic_) {
      Rng pick(derive_seed(seed_, 0x6b696e64ULL, index));
      const TaskKind k = synthetic_->kinds[pick.below(synthetic_->kinds.size())];
      const TaskInstance inst = make_instance(k, seed_, index, synthetic_->options);
      return format_instance(inst, synthetic_->shape, block_size_, vocab_);
    }
    const auto n = static_cast<std::uint64_t>(num_chunks_);
    const std::uint64_t epoch = index / n;
    const std::uint64_t slot = index % n;
    const int chunk = static_cast<int>(permuted_chunk(epoch, slot));
    TokenSequence seq;
    seq.block_size = block_size_;
    seq.prompt_len = 0;
    // The window starts at a random offset inside its chunk, so position in
    // the window is not tied to position in a line of the text.
    const auto size = static_cast<std::ptrdiff_t>(corpus_.size());
    const std::ptrdiff_t origin = static_cast<std::ptrdiff_t>(chunk) * seq_len_;
    const auto room = static_cast<std::uint64_t>(std::min<std::ptrdiff_t>(seq_len_, size - origin));
    Rng shift(derive_seed(seed_, 0x6f6666ULL, index));
    const std::ptrdiff_t start = origin + static_cast<std::ptrdiff_t>(shift.below(room));
    seq.tokens.assign(corpus_.begin() + start, corpus_.begin() + std::min(size, start + seq_len_));
    seq.tokens.resize(static_cast<size_t>(seq_len_), vocab_.pad_id);
    return seq;
  }

  std::vector<TokenSequence> batch_at(std::uint64_t batch_index) const {
    std::vector<TokenSequence> out;
    out.reserve(static_cast<size_t>(batch_));
    for (int j = 0; j < batch_; ++j)
      out.push_back(item(batch_index * static_cast<std::uint64_t>(batch_) + static_cast<std::uint64_t>(j)));
    return out;
  }

  std::vector<TokenSequence> next() { return batch_at(cursor_++); }

  int seq_len() const { return seq_len_; }
  int batch_size() const { return batch_; }
  int block_size() const { return block_size_; }

 private:
  void validate() const {
    if (seq_len_ < 1 || batch_ < 1) throw std::invalid_argument("batch_stream: empty shape");
    if (block_size_ < 1 || seq_len_ % block_size_ != 0)
      throw std::invalid_argument("batch_stream: seq_len must be a multiple of block_size");
  }

  // Fisher-Yates permutation of chunk ids for one epoch, recomputed on demand.
  std::uint64_t permuted_chunk(std::uint64_t epoch, std::uint64_t slot) const {
    if (epoch != cached_epoch_ || perm_.empty()) {
      perm_.resize(static_cast<size_t>(num_chunks_));
      for (int i = 0; i < num_chunks_; ++i) perm_[static_cast<size_t>(i)] = static_cast<std::uint64_t>(i);
      Rng rng(derive_seed(seed_, 0x65706f6368ULL, epoch));
      for (size_t i = perm_.size(); i > 1; --i) std::swap(perm_[i - 1], perm_[rng.below(i)]);
      cached_epoch_ = epoch;
    }
    return perm_[static_cast<size_t>(slot)];
  }

  std::optional<SyntheticSource> synthetic_;
  int seq_len_;
  int batch_;
  std::uint64_t seed_;
  int block_size_;
  Vocabulary vocab_;
  Tokens corpus_;
  int num_chunks_ = 0;
  std::uint64_t cursor_ = 0;
  mutable std::vector<std::uint64_t> perm_;
  mutable std::uint64_t cached_epoch_ = ~std::uint64_t{0};
};

}  // namespace dlmlab
