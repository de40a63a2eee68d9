#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "exitdepth/halting.hpp"
#include "exitdepth/model.hpp"
#include "exitdepth/vocab.hpp"

namespace exitdepth {

struct DecodeConfig {
  Mechanism mechanism = Mechanism::fixed;
  int fixed_exit = 0;               // 0: the top block
  std::vector<double> thresholds;   // tau_1..tau_{N-1}; empty: chi_threshold (geometric)
  double chi_threshold = 0.5;
  int max_len = 0;                  // 0: 2|x| + 8
  int eos = tokens::eos;

  void validate(int blocks) const;
};

/// One greedy decode. Every computed step is recorded, including the final eos.
struct DecodeTrace {
  Mechanism mechanism = Mechanism::fixed;
  std::vector<int> source;
  std::vector<int> tokens;
  std::vector<int> exits;
  std::vector<double> confidences;   // p(token | h^{exit})
  std::vector<std::int64_t> flops;   // counted while decoding
  bool finished = false;             // stopped on eos rather than max_len

  std::size_t steps() const noexcept { return tokens.size(); }
  /// Tokens without the trailing eos.
  std::vector<int> hypothesis() const;
  std::int64_t total_flops() const;
  double average_exit() const;
};

/// Greedy adaptive decode under cfg.mechanism. The final cache is written to
/// `cache_out` when given.
DecodeTrace decode(const Model& model, const std::vector<int>& source, const DecodeConfig& cfg,
                   DecoderCache* cache_out = nullptr);

DecodeTrace decode_fixed(const Model& model, const std::vector<int>& source, int n_fixed,
                         int max_len = 0);
DecodeTrace decode_geometric(const Model& model, const std::vector<int>& source,
                             const std::vector<double>& thresholds = {}, double chi_threshold = 0.5,
                             int max_len = 0);
DecodeTrace decode_tok_multinomial(const Model& model, const std::vector<int>& source, int max_len = 0);
DecodeTrace decode_seq(const Model& model, const std::vector<int>& source, int max_len = 0);
DecodeTrace decode_confidence(const Model& model, const std::vector<int>& source,
                              const std::vector<double>& thresholds, int max_len = 0);

/// Exit chosen once per sentence by the sequence classifier.
int sequence_exit(const Model& model, const EncoderOutput& enc);

/// Reference decoder with a single classifier on top of block N: every step
/// recomputes the whole prefix with a teacher-forced pass, no cache.
std::vector<int> decode_baseline(const Model& model, const std::vector<int>& source, int max_len = 0);

/// Exit-N logits of the reference decoder at each step, for equivalence checks.
std::vector<std::vector<double>> baseline_step_logits(const Model& model, const std::vector<int>& source,
                                                      const std::vector<int>& prefix);

/// Checks that every layer above each step's exit holds the key/value
/// projections of that step's exit state, bit for bit. Returns the number of
/// mismatching (step, layer) entries.
std::size_t cache_invariant_violations(const Model& model, const DecoderCache& cache);

int default_max_len(std::size_t source_len);

/// {source, hypothesis, exits, confidences, flops, total_flops, ae} on one line.
std::string trace_json_line(const DecodeTrace& trace, const std::string& config_id = "");

}  // namespace exitdepth
