// How often each in-block position is masked under the three schedules, at a
// low and a high noise level.

#include <cstdio>

#include "dlmlab/corpus.hpp"
#include "dlmlab/masking.hpp"

using namespace dlmlab;

int main() {
  const int bs = 8;
  const TokenSequence seq = format_instance("ab|", "abcdefg", SequenceShape{8, 8}, bs);
  MaskSchedule uni, pd, rtl;
  pd.mode = MaskMode::position_dependent;
  pd.half_life_ratio = 0.1;
  rtl.mode = MaskMode::right_to_left;
  const std::pair<const char*, MaskSchedule> schedules[] = {{"uniform", uni}, {"lambda=0.1", pd}, {"right_to_left", rtl}};
  for (double t : {0.25, 0.75}) {
    std::printf("t = %.2f\n", t);
    for (const auto& [name, s] : schedules) {
      Rng rng(1);
      int hits[bs] = {};
      const int draws = 20000;
      for (int d = 0; d < draws; ++d) {
        const NoiseInstance n = corrupt(seq, s, t, rng);
        for (int j : n.masked[1]) ++hits[j];
      }
      std::printf("  %-14s", name);
      for (int h : hits) std::printf(" %5.2f", static_cast<double>(h) / draws);
      std::printf("\n");
    }
  }
}
