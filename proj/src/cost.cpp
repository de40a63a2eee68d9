#include "exitdepth/cost.hpp"

#include <cstdio>
#include <sstream>

#include "exitdepth/errors.hpp"

namespace exitdepth {

FlopsParams FlopsParams::from(const ModelConfig& cfg) {
  return {cfg.d_dec, cfg.d_enc, cfg.d_ffn, cfg.tgt_vocab, cfg.blocks};
}

void FlopsParams::validate() const {
  if (d_dec < 1 || d_enc < 1 || d_ffn < 1 || vocab < 1 || blocks < 1) {
    throw UsageError("flops: all dimensions must be positive");
  }
}

std::int64_t flops_block(const FlopsParams& p, std::int64_t t, std::int64_t src_len, bool first_call) {
  if (t < 1) throw UsageError("flops_block: steps are 1-based");
  const std::int64_t d = p.d_dec;
  std::int64_t fc = 12 * d * d + 4 * p.d_ffn * d + 4 * t * d + 4 * src_len * d;
  if (first_call) fc += 4 * src_len * d * p.d_enc;
  return fc;
}

std::int64_t flops_skipped(const FlopsParams& p) { return 4 * p.d_dec * p.d_dec; }

std::int64_t flops_output(const FlopsParams& p) { return 2 * p.vocab * p.d_dec; }

std::int64_t flops_exit_prediction(Mechanism m, const FlopsParams& p, std::int64_t t, int exit_n) {
  if (exit_n < 1 || exit_n > p.blocks) throw UsageError("flops_exit_prediction: exit out of range");
  const std::int64_t q = exit_n;
  switch (m) {
    case Mechanism::fixed:
      return 0;
    case Mechanism::sequence:
      return t == 1 ? 2 * p.blocks * p.d_dec : 0;
    case Mechanism::token_multinomial:
      return 2 * p.blocks * p.d_dec;
    case Mechanism::token_geometric:
      return 2 * p.d_dec * q;
    case Mechanism::confidence:
      return 2 * q * p.vocab * p.d_dec;
  }
  throw UsageError("flops_exit_prediction: unknown mechanism");
}

std::vector<std::int64_t> step_flops(const DecodeTrace& trace, const FlopsParams& p) {
  p.validate();
  const std::int64_t src_len = static_cast<std::int64_t>(trace.source.size());
  std::vector<std::int64_t> out;
  int reached = 0;  // highest block run so far
  for (std::size_t i = 0; i < trace.exits.size(); ++i) {
    const std::int64_t t = static_cast<std::int64_t>(i + 1);
    const int q = trace.exits[i];
    std::int64_t cost = 0;
    for (int n = 1; n <= q; ++n) cost += flops_block(p, t, src_len, n > reached);
    reached = std::max(reached, q);
    cost += (p.blocks - q) * flops_skipped(p);
    cost += flops_exit_prediction(trace.mechanism, p, t, q);
    if (trace.mechanism != Mechanism::confidence) cost += flops_output(p);
    out.push_back(cost);
  }
  return out;
}

namespace {

std::size_t token_count(std::span<const DecodeTrace> traces) {
  std::size_t n = 0;
  for (const auto& t : traces) n += t.steps();
  if (n == 0) throw UsageError("flops: no decoded tokens");
  return n;
}

}  // namespace

double average_flops_per_token(std::span<const DecodeTrace> traces, const FlopsParams& p) {
  if (traces.empty()) throw UsageError("average_flops_per_token: empty trace set");
  std::int64_t total = 0;
  for (const auto& tr : traces) {
    for (std::int64_t c : step_flops(tr, p)) total += c;
  }
  return static_cast<double>(total) / static_cast<double>(token_count(traces));
}

double baseline_flops_per_token(std::span<const DecodeTrace> traces, const FlopsParams& p) {
  if (traces.empty()) throw UsageError("baseline_flops_per_token: empty trace set");
  std::int64_t total = 0;
  for (const auto& tr : traces) {
    const std::int64_t src_len = static_cast<std::int64_t>(tr.source.size());
    for (std::size_t i = 0; i < tr.steps(); ++i) {
      const std::int64_t t = static_cast<std::int64_t>(i + 1);
      for (int n = 1; n <= p.blocks; ++n) total += flops_block(p, t, src_len, t == 1);
      total += flops_output(p);
    }
  }
  return static_cast<double>(total) / static_cast<double>(token_count(traces));
}

double average_exit(std::span<const DecodeTrace> traces) {
  if (traces.empty()) throw UsageError("average_exit: empty trace set");
  long sum = 0;
  for (const auto& tr : traces) {
    for (int e : tr.exits) sum += e;
  }
  return static_cast<double>(sum) / static_cast<double>(token_count(traces));
}

FlopsReport flops_report(std::span<const DecodeTrace> traces, const FlopsParams& p) {
  FlopsReport r;
  for (const auto& tr : traces) {
    const auto steps = step_flops(tr, p);
    for (std::size_t i = 0; i < steps.size(); ++i) {
      r.total += steps[i];
      r.exit_prediction += flops_exit_prediction(tr.mechanism, p, static_cast<std::int64_t>(i + 1), tr.exits[i]);
    }
  }
  r.tokens = token_count(traces);
  r.per_token = static_cast<double>(r.total) / static_cast<double>(r.tokens);
  r.ae = average_exit(traces);
  return r;
}

std::string report_csv(std::span<const ReportRow> rows) {
  std::ostringstream os;
  os << "mechanism,config_id,AE,avg_flops,token_accuracy,bleu\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g,%.17g\n", r.ae, r.avg_flops, r.token_accuracy, r.bleu);
    os << r.mechanism << ',' << r.config_id << buf;
  }
  return os.str();
}

}  // namespace exitdepth
