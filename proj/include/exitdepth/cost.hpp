#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "exitdepth/decoding.hpp"
#include "exitdepth/halting.hpp"
#include "exitdepth/model.hpp"

namespace exitdepth {

struct FlopsParams {
  std::int64_t d_dec = 0;
  std::int64_t d_enc = 0;
  std::int64_t d_ffn = 0;
  std::int64_t vocab = 0;
  std::int64_t blocks = 0;

  static FlopsParams from(const ModelConfig& cfg);
  void validate() const;
};

/// FC: 12 d^2 + 4 d_f d + 4 t d + 4 |x| d + 4 [first call] |x| d d_e.
std::int64_t flops_block(const FlopsParams& p, std::int64_t t, std::int64_t src_len, bool first_call);
/// FS: 4 d^2 for the key/value projections of a skipped block.
std::int64_t flops_skipped(const FlopsParams& p);
/// FP, the exit-prediction overhead at step t with exit q(t) = exit_n.
std::int64_t flops_exit_prediction(Mechanism m, const FlopsParams& p, std::int64_t t, int exit_n);
/// 2 V d for the output projection at the exit.
std::int64_t flops_output(const FlopsParams& p);

/// Closed-form per-step cost of a trace:
/// q FC + (N - q) FS + FP + 2 V d (the last term is inside FP for confidence).
/// A block's first call is the first step whose exit reaches it.
std::vector<std::int64_t> step_flops(const DecodeTrace& trace, const FlopsParams& p);

double average_flops_per_token(std::span<const DecodeTrace> traces, const FlopsParams& p);
/// Cost of running every block at every step: N FC + 2 V d, averaged per token.
double baseline_flops_per_token(std::span<const DecodeTrace> traces, const FlopsParams& p);
double average_exit(std::span<const DecodeTrace> traces);

struct FlopsReport {
  std::int64_t total = 0;
  std::size_t tokens = 0;
  double per_token = 0.0;
  double ae = 0.0;
  std::int64_t exit_prediction = 0;  // sum of FP
};
FlopsReport flops_report(std::span<const DecodeTrace> traces, const FlopsParams& p);

struct ReportRow {
  std::string mechanism;
  std::string config_id;
  double ae = 0.0;
  double avg_flops = 0.0;
  double token_accuracy = 0.0;
  double bleu = 0.0;
};
std::string report_csv(std::span<const ReportRow> rows);

}  // namespace exitdepth
