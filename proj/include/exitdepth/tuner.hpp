#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "exitdepth/decoding.hpp"
#include "exitdepth/model.hpp"

namespace exitdepth {

struct ThresholdCandidate {
  std::vector<double> tau;
  double metric = 0.0;
  double ae = 0.0;
  double avg_flops = 0.0;
  int iteration = 0;  // 0-based sample index; seeded candidates are negative
};

struct EvalResult {
  double metric = 0.0;
  double ae = 0.0;
  double avg_flops = 0.0;
};

enum class TuneMetric { token_accuracy, bleu };

struct TunerConfig {
  Mechanism mechanism = Mechanism::confidence;
  int iterations = 200;
  int segments = 6;
  std::uint64_t seed = 1;
  TuneMetric metric = TuneMetric::token_accuracy;
  // Evaluated before the random samples.
  std::vector<std::vector<double>> seeded;

  void validate(int blocks) const;
};

/// Best candidate per equal-width AE segment, with dominated ones removed.
struct ParetoSet {
  std::vector<ThresholdCandidate> evaluated;
  std::vector<ThresholdCandidate> kept;
  std::vector<int> kept_segment;
  int segments = 0;
  double ae_lo = 0.0;
  double ae_hi = 0.0;
};

/// `a` is at least as accurate and at most as costly, and strictly better in one.
bool dominates(const ThresholdCandidate& a, const ThresholdCandidate& b);

EvalResult evaluate_thresholds(const Model& model, const std::vector<SequencePair>& dataset,
                               const std::vector<double>& tau, Mechanism mechanism,
                               TuneMetric metric = TuneMetric::token_accuracy);

ParetoSet select_pareto(std::vector<ThresholdCandidate> evaluated, int segments);
ParetoSet random_search(const Model& model, const std::vector<SequencePair>& valid, const TunerConfig& cfg);

/// segment, tau_1..tau_{N-1}, metric, AE, avg_flops.
std::string pareto_csv(const ParetoSet& set);

}  // namespace exitdepth
