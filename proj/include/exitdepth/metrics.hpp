#pragma once

#include <vector>

namespace exitdepth {

/// Matched tokens at aligned positions over total reference tokens.
double token_accuracy(const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs);

struct BleuStats {
  double precisions[4] = {0, 0, 0, 0};
  double brevity_penalty = 1.0;
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
  double score = 0.0;  // 0..100
};

/// Corpus BLEU-4 with uniform weights. `smooth` adds one to each n-gram count
/// for n > 1 so short corpora do not collapse to zero.
BleuStats bleu(const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs,
               bool smooth = false);

}  // namespace exitdepth
