// Prints the attention layouts used in training and decoding as ASCII grids
// ('#' = the row may attend to the key).

#include <iostream>

#include "dlmlab/attention.hpp"

using namespace dlmlab;

int main() {
  const int L = 8, bs = 2;
  std::cout << "causal, L=8\n" << to_ascii(causal_layout(L)) << '\n';
  std::cout << "block_noisy, L=8, L'=2\n" << to_ascii(block_noisy_layout(L, bs)) << '\n';
  std::cout << "block_clean, L=8, L'=2 (rows 0-7 noisy, 8-15 clean)\n" << to_ascii(block_clean_layout(L, bs)) << '\n';
  std::cout << "decode step: 6 cached keys, block of 2\n" << to_ascii(decode_layout(6, bs)) << '\n';
}
