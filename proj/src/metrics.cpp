#include "exitdepth/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "exitdepth/errors.hpp"

namespace exitdepth {

namespace {

void check_pairing(const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs) {
  if (refs.empty()) throw UsageError("metric: empty reference set");
  if (hyps.size() != refs.size()) throw UsageError("metric: hypothesis and reference counts differ");
}

std::map<std::vector<int>, int> ngram_counts(const std::vector<int>& seq, std::size_t n) {
  std::map<std::vector<int>, int> counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) ++counts[std::vector<int>(seq.begin() + i, seq.begin() + i + n)];
  return counts;
}

}  // namespace

double token_accuracy(const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs) {
  check_pairing(hyps, refs);
  std::size_t total = 0, hit = 0;
  for (std::size_t s = 0; s < refs.size(); ++s) {
    total += refs[s].size();
    const std::size_t n = std::min(hyps[s].size(), refs[s].size());
    for (std::size_t i = 0; i < n; ++i) hit += hyps[s][i] == refs[s][i];
  }
  if (total == 0) throw UsageError("token_accuracy: references contain no tokens");
  return static_cast<double>(hit) / static_cast<double>(total);
}

BleuStats bleu(const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs,
               bool smooth) {
  check_pairing(hyps, refs);
  BleuStats st;
  double matched[4] = {0, 0, 0, 0}, possible[4] = {0, 0, 0, 0};
  for (std::size_t s = 0; s < refs.size(); ++s) {
    st.hyp_len += hyps[s].size();
    st.ref_len += refs[s].size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto h = ngram_counts(hyps[s], n);
      const auto r = ngram_counts(refs[s], n);
      for (const auto& [gram, c] : h) {
        possible[n - 1] += c;
        auto it = r.find(gram);
        if (it != r.end()) matched[n - 1] += std::min(c, it->second);
      }
    }
  }
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < 4; ++n) {
    double m = matched[n], p = possible[n];
    if (smooth && n > 0) {
      m += 1.0;
      p += 1.0;
    }
    st.precisions[n] = p > 0.0 ? m / p : 0.0;
    if (st.precisions[n] <= 0.0) {
      zero = true;
    } else {
      log_sum += std::log(st.precisions[n]);
    }
  }
  if (st.hyp_len == 0) {
    st.brevity_penalty = 0.0;
  } else if (st.hyp_len < st.ref_len) {
    st.brevity_penalty = std::exp(1.0 - static_cast<double>(st.ref_len) / static_cast<double>(st.hyp_len));
  }
  st.score = zero ? 0.0 : 100.0 * st.brevity_penalty * std::exp(log_sum / 4.0);
  return st;
}

}  // namespace exitdepth
