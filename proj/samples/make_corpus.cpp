// Writes a plain-text corpus of rendered task instances, one per line, for
// corpus_path runs: sample_make_corpus <file> [lines] [seed]

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "dlmlab/corpus.hpp"

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: " << argv[0] << " <file> [lines] [seed]\n";
    return 2;
  }
  const int lines = argc > 2 ? std::atoi(argv[2]) : 20000;
  const std::uint64_t seed = argc > 3 ? std::strtoull(argv[3], nullptr, 10) : 404;
  dlmlab::SyntheticOptions opt;
  opt.max_operand = 9;
  opt.max_modulus = 5;
  std::ofstream(argv[1]) << dlmlab::synthetic_corpus_text({dlmlab::TaskKind::copy, dlmlab::TaskKind::modular_add},
                                                          seed, lines, opt);
}
