#include "exitdepth/halting.hpp"

#include <algorithm>
#include <cmath>

#include "exitdepth/errors.hpp"
#include "json.hpp"

namespace exitdepth {

std::string to_string(Mechanism m) {
  switch (m) {
    case Mechanism::fixed:
      return "fixed";
    case Mechanism::sequence:
      return "sequence";
    case Mechanism::token_multinomial:
      return "token_multinomial";
    case Mechanism::token_geometric:
      return "token_geometric";
    case Mechanism::confidence:
      return "confidence";
  }
  return "unknown";
}

std::string to_string(OracleKind k) {
  return k == OracleKind::likelihood ? "likelihood" : "correctness";
}

Mechanism parse_mechanism(std::string_view s) {
  if (s == "fixed") return Mechanism::fixed;
  if (s == "sequence" || s == "seq") return Mechanism::sequence;
  if (s == "token_multinomial" || s == "multinomial") return Mechanism::token_multinomial;
  if (s == "token_geometric" || s == "geometric") return Mechanism::token_geometric;
  if (s == "confidence") return Mechanism::confidence;
  throw UsageError("unknown mechanism '" + std::string(s) + "'");
}

OracleKind parse_oracle(std::string_view s) {
  if (s == "likelihood" || s == "ll") return OracleKind::likelihood;
  if (s == "correctness" || s == "c") return OracleKind::correctness;
  throw UsageError("unknown oracle '" + std::string(s) + "'");
}

int ExitDistribution::argmax() const {
  if (probs.empty()) throw UsageError("argmax of an empty distribution");
  // max_element returns the first maximum, i.e. the lowest block.
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin()) + 1;
}

void HaltingConfig::validate(int blocks) const {
  if (lambda < 0.0) throw UsageError("halting: lambda must be >= 0");
  if (sigma < 0.0) throw UsageError("halting: sigma must be >= 0");
  if (alpha < 0.0) throw UsageError("halting: alpha must be >= 0");
  if (!thresholds.empty() && thresholds.size() != static_cast<std::size_t>(blocks - 1)) {
    throw UsageError("halting: expected N-1 thresholds");
  }
  for (double t : thresholds) {
    if (t < 0.0 || t > 1.0) throw UsageError("halting: thresholds must lie in [0,1]");
  }
}

// ---------------------------------------------------------------------------

ExitDistribution softmax_distribution(std::span<const double> logits) {
  ExitDistribution d;
  d.probs.resize(logits.size());
  kernels::softmax_row(logits, d.probs);
  return d;
}

ExitDistribution seq_exit_distribution(const Model& model, const EncoderOutput& enc) {
  return softmax_distribution(model.seq_halting_logits(enc.mean_state));
}

ExitDistribution tok_multinomial_distribution(const Model& model, std::span<const double> h1) {
  return softmax_distribution(model.tok_halting_logits(h1));
}

double halting_probability(const Model& model, int n, std::span<const double> h_n) {
  if (n < 1 || n >= model.blocks()) {
    throw UsageError("halting_probability: defined for blocks 1..N-1, got " + std::to_string(n));
  }
  return kernels::sigmoid(model.geo_halting_logit(h_n));
}

ExitDistribution geometric_like_distribution(std::span<const double> chis) {
  ExitDistribution d;
  d.probs.reserve(chis.size() + 1);
  double remaining = 1.0;
  for (double chi : chis) {
    if (!(chi >= 0.0 && chi <= 1.0)) throw UsageError("geometric_like_distribution: chi outside [0,1]");
    d.probs.push_back(chi * remaining);
    remaining *= 1.0 - chi;
  }
  d.probs.push_back(remaining);
  return d;
}

// ---------------------------------------------------------------------------

double rbf_kernel(std::size_t t, std::size_t t_prime, double sigma) {
  const double diff = static_cast<double>(t) - static_cast<double>(t_prime);
  return std::exp(-(diff * diff) / sigma);
}

std::vector<double> rbf_smooth(std::span<const double> scores, double sigma) {
  if (sigma <= 0.0) return {scores.begin(), scores.end()};
  std::vector<double> out(scores.size(), 0.0);
  for (std::size_t t = 0; t < scores.size(); ++t) {
    for (std::size_t tp = 0; tp < scores.size(); ++tp) out[t] += rbf_kernel(t, tp, sigma) * scores[tp];
  }
  return out;
}

OracleTarget oracle_sequence(std::span<const double> scores, double lambda) {
  if (scores.empty()) throw UsageError("oracle_sequence: no scores");
  for (double v : scores) {
    if (!std::isfinite(v)) throw NumericError("oracle_sequence: non-finite score");
  }
  int best = 1;
  double best_val = scores[0] - lambda;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    const double v = scores[i] - lambda * static_cast<double>(i + 1);
    if (v > best_val) {
      best_val = v;
      best = static_cast<int>(i + 1);
    }
  }
  return {best};
}

std::vector<OracleTarget> oracle_token(const Tensor& scores, double sigma, double lambda) {
  const std::size_t T = scores.rows(), N = scores.cols();
  Tensor smoothed({T, N});
  std::vector<double> column(T);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t t = 0; t < T; ++t) column[t] = scores(t, n);
    const auto s = rbf_smooth(column, sigma);
    for (std::size_t t = 0; t < T; ++t) smoothed(t, n) = s[t];
  }
  std::vector<OracleTarget> out;
  out.reserve(T);
  for (std::size_t t = 0; t < T; ++t) out.push_back(oracle_sequence(smoothed.row(t), lambda));
  return out;
}

Tensor token_scores(const DecoderRun& run, const PackedBatch& batch, std::size_t sentence,
                    OracleKind kind) {
  const auto [begin, end] = batch.tgt_segments.at(sentence);
  const std::size_t N = run.exit_log_probs.size();
  Tensor out({end - begin, N});
  for (std::size_t n = 0; n < N; ++n) {
    const Tensor& lp = run.exit_log_probs[n].value();
    for (std::size_t r = begin; r < end; ++r) {
      const auto y = static_cast<std::size_t>(batch.targets[r]);
      if (kind == OracleKind::likelihood) {
        out(r - begin, n) = lp(r, y);
      } else {
        auto row = lp.row(r);
        const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        out(r - begin, n) = pred == y ? 1.0 : 0.0;
      }
    }
  }
  return out;
}

std::vector<double> sequence_scores(const Tensor& token_scores) {
  std::vector<double> out(token_scores.cols(), 0.0);
  for (std::size_t t = 0; t < token_scores.rows(); ++t) {
    for (std::size_t n = 0; n < token_scores.cols(); ++n) out[n] += token_scores(t, n);
  }
  return out;
}

// ---------------------------------------------------------------------------

ExitLoss exit_loss(std::span<const OracleTarget> targets, std::span<const ExitDistribution> dists) {
  if (targets.size() != dists.size()) throw UsageError("exit_loss: targets and distributions differ in length");
  constexpr double floor = 1e-12;
  ExitLoss out;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    double q = dists[i].prob(targets[i].index);
    if (q < floor) {
      q = floor;
      out.clamped = true;
    }
    out.value -= std::log(q);
  }
  return out;
}

double combined_loss(double l_dec, double l_exit, double alpha) {
  if (alpha < 0.0) throw UsageError("combined_loss: alpha must be >= 0");
  return l_dec + alpha * l_exit;
}

Var combined_loss(const Var& l_dec, const Var& l_exit, double alpha) {
  if (alpha < 0.0) throw UsageError("combined_loss: alpha must be >= 0");
  return add(l_dec, scale(l_exit, alpha));
}

// ---------------------------------------------------------------------------

std::string oracle_trace_json(std::span<const OracleTraceEntry> entries, const HaltingConfig& cfg) {
  using nlohmann::json;
  auto matrix = [](const Tensor& t) {
    json rows = json::array();
    for (std::size_t r = 0; r < t.rows(); ++r) rows.push_back(std::vector<double>(t.row(r).begin(), t.row(r).end()));
    return rows;
  };
  json doc;
  doc["mechanism"] = to_string(cfg.mechanism);
  doc["oracle"] = to_string(cfg.oracle);
  doc["lambda"] = cfg.lambda;
  doc["sigma"] = cfg.sigma;
  doc["sentences"] = json::array();
  for (const auto& e : entries) {
    json s;
    s["source"] = e.source;
    s["target"] = e.target;
    s["scores"] = matrix(e.scores);
    s["smoothed"] = matrix(e.smoothed);
    std::vector<int> chosen;
    for (const auto& c : e.chosen) chosen.push_back(c.index);
    s["chosen"] = chosen;
    doc["sentences"].push_back(std::move(s));
  }
  return doc.dump(2);
}

}  // namespace exitdepth
