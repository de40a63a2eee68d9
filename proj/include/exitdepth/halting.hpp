#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "exitdepth/autograd.hpp"
#include "exitdepth/model.hpp"
#include "exitdepth/tensor.hpp"

namespace exitdepth {

/// How the exit block is chosen. `fixed` is the non-adaptive reference.
enum class Mechanism { fixed, sequence, token_multinomial, token_geometric, confidence };
enum class OracleKind { likelihood, correctness };

std::string to_string(Mechanism m);
std::string to_string(OracleKind k);
Mechanism parse_mechanism(std::string_view s);
OracleKind parse_oracle(std::string_view s);

/// q over blocks 1..N (probs[0] is block 1).
struct ExitDistribution {
  std::vector<double> probs;

  int blocks() const noexcept { return static_cast<int>(probs.size()); }
  double prob(int n) const { return probs.at(static_cast<std::size_t>(n - 1)); }
  /// Most probable block; ties go to the lowest index.
  int argmax() const;
};

/// Dirac target over blocks.
struct OracleTarget {
  int index = 1;
  friend bool operator==(const OracleTarget&, const OracleTarget&) = default;
};

struct HaltingConfig {
  Mechanism mechanism = Mechanism::token_geometric;
  OracleKind oracle = OracleKind::likelihood;
  double lambda = 0.0;
  double sigma = 0.0;  // <= 0: no smoothing
  double alpha = 1.0;
  std::vector<double> thresholds;  // tau_1..tau_{N-1}; empty: defaults
  double default_chi_threshold = 0.5;

  void validate(int blocks) const;
};

// ---- exit distributions ------------------------------------------------------

ExitDistribution softmax_distribution(std::span<const double> logits);
/// softmax(W_h * mean encoder state + b_h).
ExitDistribution seq_exit_distribution(const Model& model, const EncoderOutput& enc);
/// softmax(W_h * h_t^1 + b_h).
ExitDistribution tok_multinomial_distribution(const Model& model, std::span<const double> h1);
/// chi_t^n = sigmoid(w_h . h_t^n + b_h), defined for n in [1, N-1].
double halting_probability(const Model& model, int n, std::span<const double> h_n);
/// Stick-breaking distribution from chi^1..chi^{N-1}.
ExitDistribution geometric_like_distribution(std::span<const double> chis);

// ---- oracles -------------------------------------------------------------------

double rbf_kernel(std::size_t t, std::size_t t_prime, double sigma);
/// out_t = sum_{t'} exp(-|t - t'|^2 / sigma) * scores_{t'}; sigma <= 0 returns scores.
std::vector<double> rbf_smooth(std::span<const double> scores, double sigma);
/// argmax_n (scores[n-1] - lambda * n), lowest n on ties.
OracleTarget oracle_sequence(std::span<const double> scores, double lambda);
/// scores is [T x N]; each block column is smoothed across time first.
std::vector<OracleTarget> oracle_token(const Tensor& scores, double sigma, double lambda);

/// Per-step, per-block scores of one sentence from a teacher-forced aligned
/// pass: LL_t^n = log p(y_t | h_{t-1}^n) or C_t^n = 1[y_t = argmax].
Tensor token_scores(const DecoderRun& run, const PackedBatch& batch, std::size_t sentence,
                    OracleKind kind);
/// Sequence scores: column sums of token_scores.
std::vector<double> sequence_scores(const Tensor& token_scores);

// ---- losses --------------------------------------------------------------------

struct ExitLoss {
  double value = 0.0;
  bool clamped = false;  // some q(target) was below the 1e-12 floor
};

/// sum_t -log q_t(target_t).
ExitLoss exit_loss(std::span<const OracleTarget> targets, std::span<const ExitDistribution> dists);
double combined_loss(double l_dec, double l_exit, double alpha);
Var combined_loss(const Var& l_dec, const Var& l_exit, double alpha);

// ---- trace dump ----------------------------------------------------------------

struct OracleTraceEntry {
  std::vector<int> source;
  std::vector<int> target;
  Tensor scores;                     // [T x N] raw
  Tensor smoothed;                   // [T x N]
  std::vector<OracleTarget> chosen;  // per step (token) or one (sequence)
};

/// JSON document with one object per sentence.
std::string oracle_trace_json(std::span<const OracleTraceEntry> entries, const HaltingConfig& cfg);

}  // namespace exitdepth
