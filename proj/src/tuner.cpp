#include "exitdepth/tuner.hpp"

#include <algorithm>
#include <cstdio>
#include <random>
#include <sstream>

#include "exitdepth/cost.hpp"
#include "exitdepth/errors.hpp"
#include "exitdepth/metrics.hpp"

namespace exitdepth {

void TunerConfig::validate(int blocks) const {
  if (mechanism != Mechanism::confidence && mechanism != Mechanism::token_geometric) {
    throw UsageError("tuner: only confidence and geometric thresholds can be tuned");
  }
  if (iterations < 1) throw UsageError("tuner: iterations must be >= 1");
  if (segments < 1) throw UsageError("tuner: segments must be >= 1");
  for (const auto& tau : seeded) {
    if (tau.size() != static_cast<std::size_t>(blocks - 1)) throw UsageError("tuner: seeded tau needs N-1 entries");
  }
}

bool dominates(const ThresholdCandidate& a, const ThresholdCandidate& b) {
  return a.metric >= b.metric && a.avg_flops <= b.avg_flops &&
         (a.metric > b.metric || a.avg_flops < b.avg_flops);
}

EvalResult evaluate_thresholds(const Model& model, const std::vector<SequencePair>& dataset,
                               const std::vector<double>& tau, Mechanism mechanism, TuneMetric metric) {
  if (dataset.empty()) throw UsageError("evaluate_thresholds: empty dataset");
  DecodeConfig cfg;
  cfg.mechanism = mechanism;
  cfg.thresholds = tau;
  std::vector<DecodeTrace> traces;
  std::vector<std::vector<int>> hyps, refs;
  for (const auto& pair : dataset) {
    traces.push_back(decode(model, pair.source, cfg));
    hyps.push_back(traces.back().hypothesis());
    refs.push_back(pair.target);
  }
  const FlopsParams fp = FlopsParams::from(model.config());
  EvalResult r;
  r.metric = metric == TuneMetric::bleu ? bleu(hyps, refs).score / 100.0 : token_accuracy(hyps, refs);
  r.ae = average_exit(traces);
  r.avg_flops = average_flops_per_token(traces, fp);
  return r;
}

ParetoSet select_pareto(std::vector<ThresholdCandidate> evaluated, int segments) {
  if (evaluated.empty()) throw UsageError("select_pareto: no candidates");
  ParetoSet set;
  set.segments = segments;
  set.evaluated = std::move(evaluated);
  set.ae_lo = set.ae_hi = set.evaluated.front().ae;
  for (const auto& c : set.evaluated) {
    set.ae_lo = std::min(set.ae_lo, c.ae);
    set.ae_hi = std::max(set.ae_hi, c.ae);
  }
  const double width = (set.ae_hi - set.ae_lo) / segments;
  auto segment_of = [&](double ae) {
    if (width <= 0.0) return 0;
    return std::min(segments - 1, static_cast<int>((ae - set.ae_lo) / width));
  };
  auto better = [](const ThresholdCandidate& a, const ThresholdCandidate& b) {
    if (a.metric != b.metric) return a.metric > b.metric;
    if (a.avg_flops != b.avg_flops) return a.avg_flops < b.avg_flops;
    return a.iteration < b.iteration;
  };
  std::vector<int> best(static_cast<std::size_t>(segments), -1);
  for (std::size_t i = 0; i < set.evaluated.size(); ++i) {
    int& slot = best[static_cast<std::size_t>(segment_of(set.evaluated[i].ae))];
    if (slot < 0 || better(set.evaluated[i], set.evaluated[static_cast<std::size_t>(slot)])) slot = static_cast<int>(i);
  }
  for (int s = 0; s < segments; ++s) {
    const int idx = best[static_cast<std::size_t>(s)];
    if (idx < 0) continue;
    const auto& cand = set.evaluated[static_cast<std::size_t>(idx)];
    bool drop = false;
    for (int o = 0; o < segments && !drop; ++o) {
      const int other = best[static_cast<std::size_t>(o)];
      if (other < 0 || other == idx) continue;
      const auto& oc = set.evaluated[static_cast<std::size_t>(other)];
      // Equal points: keep the one in the lower segment.
      const bool same = oc.metric == cand.metric && oc.avg_flops == cand.avg_flops;
      drop = dominates(oc, cand) || (same && o < s);
    }
    if (!drop) {
      set.kept.push_back(cand);
      set.kept_segment.push_back(s);
    }
  }
  return set;
}

ParetoSet random_search(const Model& model, const std::vector<SequencePair>& valid, const TunerConfig& cfg) {
  const int N = model.blocks();
  cfg.validate(N);
  if (valid.empty()) throw UsageError("random_search: empty validation set");
  std::vector<ThresholdCandidate> evaluated;
  auto add = [&](std::vector<double> tau, int iteration) {
    const EvalResult r = evaluate_thresholds(model, valid, tau, cfg.mechanism, cfg.metric);
    evaluated.push_back({std::move(tau), r.metric, r.ae, r.avg_flops, iteration});
  };
  for (std::size_t i = 0; i < cfg.seeded.size(); ++i) add(cfg.seeded[i], -static_cast<int>(i) - 1);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int it = 0; it < cfg.iterations; ++it) {
    std::vector<double> tau(static_cast<std::size_t>(N - 1));
    for (double& v : tau) v = unit(rng);
    add(std::move(tau), it);
  }
  return select_pareto(std::move(evaluated), cfg.segments);
}

std::string pareto_csv(const ParetoSet& set) {
  std::ostringstream os;
  const std::size_t taus = set.kept.empty() ? 0 : set.kept.front().tau.size();
  os << "segment";
  for (std::size_t i = 1; i <= taus; ++i) os << ",tau_" << i;
  os << ",metric,AE,avg_flops\n";
  char buf[128];
  for (std::size_t k = 0; k < set.kept.size(); ++k) {
    os << set.kept_segment[k];
    for (double t : set.kept[k].tau) {
      std::snprintf(buf, sizeof buf, ",%.17g", t);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g\n", set.kept[k].metric, set.kept[k].ae, set.kept[k].avg_flops);
    os << buf;
  }
  return os.str();
}

}  // namespace exitdepth
