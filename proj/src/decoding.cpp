#include "exitdepth/decoding.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>

#include "exitdepth/cost.hpp"
#include "exitdepth/errors.hpp"
#include "json.hpp"

namespace exitdepth {

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

int argmax_token(std::span<const double> logits) {
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

}  // namespace

void DecodeConfig::validate(int blocks) const {
  if (mechanism == Mechanism::fixed && (fixed_exit < 0 || fixed_exit > blocks)) {
    throw UsageError("decode: fixed exit out of range");
  }
  if (mechanism == Mechanism::confidence && thresholds.size() != sz(blocks - 1)) {
    throw UsageError("decode: confidence thresholding needs N-1 thresholds");
  }
  if (mechanism == Mechanism::token_geometric && !thresholds.empty() && thresholds.size() != sz(blocks - 1)) {
    throw UsageError("decode: geometric thresholds need N-1 entries");
  }
  for (double t : thresholds) {
    if (!(t >= 0.0 && t <= 1.0)) throw UsageError("decode: thresholds must lie in [0,1]");
  }
  if (!(chi_threshold >= 0.0 && chi_threshold <= 1.0)) throw UsageError("decode: chi threshold outside [0,1]");
  if (max_len < 0) throw UsageError("decode: max_len must be >= 1 (0 selects the default)");
}

int default_max_len(std::size_t source_len) { return static_cast<int>(2 * source_len + 8); }

std::vector<int> DecodeTrace::hypothesis() const {
  std::vector<int> out = tokens;
  if (finished && !out.empty()) out.pop_back();
  return out;
}

std::int64_t DecodeTrace::total_flops() const { return std::accumulate(flops.begin(), flops.end(), std::int64_t{0}); }

double DecodeTrace::average_exit() const {
  if (exits.empty()) return 0.0;
  return static_cast<double>(std::accumulate(exits.begin(), exits.end(), 0L)) / static_cast<double>(exits.size());
}

int sequence_exit(const Model& model, const EncoderOutput& enc) {
  return seq_exit_distribution(model, enc).argmax();
}

DecodeTrace decode(const Model& model, const std::vector<int>& source, const DecodeConfig& cfg,
                   DecoderCache* cache_out) {
  const int N = model.blocks();
  cfg.validate(N);
  const FlopsParams fp = FlopsParams::from(model.config());
  const std::int64_t src_len = static_cast<std::int64_t>(source.size());
  const EncoderOutput enc = model.encode(source);
  const int max_len = cfg.max_len > 0 ? cfg.max_len : default_max_len(source.size());
  DecoderCache cache(N, source.size());

  DecodeTrace trace;
  trace.mechanism = cfg.mechanism;
  trace.source = source;

  int planned = 0;  // exit fixed before the block loop, 0 when decided on the way
  std::int64_t pending_fp = 0;
  if (cfg.mechanism == Mechanism::fixed) planned = cfg.fixed_exit > 0 ? cfg.fixed_exit : N;
  if (cfg.mechanism == Mechanism::sequence) {
    planned = sequence_exit(model, enc);
    pending_fp = 2 * fp.blocks * fp.d_dec;
  }
  auto threshold = [&](int n) {
    return cfg.thresholds.empty() ? cfg.chi_threshold : cfg.thresholds[sz(n - 1)];
  };

  int prev = tokens::bos;
  for (std::size_t t = 1; t <= static_cast<std::size_t>(max_len); ++t) {
    std::int64_t cost = pending_fp;
    pending_fp = 0;
    std::vector<double> h = model.embed_target(prev, t);
    std::vector<double> logits;
    int target = planned;
    int exit_n = 0;
    for (int n = 1; n <= N; ++n) {
      cost += flops_block(fp, static_cast<std::int64_t>(t), src_len, cache.layer(n).first_call);
      h = model.decoder_block(n, h, cache, enc, t);
      if (cfg.mechanism == Mechanism::token_multinomial && n == 1) {
        cost += 2 * fp.blocks * fp.d_dec;
        target = tok_multinomial_distribution(model, h).argmax();
      } else if (cfg.mechanism == Mechanism::token_geometric) {
        cost += 2 * fp.d_dec;
        if (n < N && halting_probability(model, n, h) > threshold(n)) target = n;
      } else if (cfg.mechanism == Mechanism::confidence) {
        cost += flops_output(fp);
        logits = model.exit_logits(n, h);
        std::vector<double> probs(logits.size());
        kernels::softmax_row(logits, probs);
        if (n < N && *std::max_element(probs.begin(), probs.end()) > cfg.thresholds[sz(n - 1)]) target = n;
      }
      if (n == target || n == N) {
        exit_n = n;
        break;
      }
    }
    if (cfg.mechanism != Mechanism::confidence) {
      cost += flops_output(fp);
      logits = model.exit_logits(exit_n, h);
    }
    cost += flops_skipped(fp) * (N - exit_n);
    model.copy_state_upward(t, exit_n, h, cache);

    std::vector<double> probs(logits.size());
    kernels::softmax_row(logits, probs);
    const int token = argmax_token(logits);
    cache.record_exit(exit_n, h);
    trace.tokens.push_back(token);
    trace.exits.push_back(exit_n);
    trace.confidences.push_back(probs[sz(token)]);
    trace.flops.push_back(cost);
    prev = token;
    if (token == cfg.eos) {
      trace.finished = true;
      break;
    }
  }
  if (cache_out) *cache_out = std::move(cache);
  return trace;
}

DecodeTrace decode_fixed(const Model& model, const std::vector<int>& source, int n_fixed, int max_len) {
  if (n_fixed < 1 || n_fixed > model.blocks()) throw UsageError("decode_fixed: exit out of range");
  DecodeConfig cfg;
  cfg.mechanism = Mechanism::fixed;
  cfg.fixed_exit = n_fixed;
  cfg.max_len = max_len;
  return decode(model, source, cfg);
}

DecodeTrace decode_geometric(const Model& model, const std::vector<int>& source,
                             const std::vector<double>& thresholds, double chi_threshold, int max_len) {
  DecodeConfig cfg;
  cfg.mechanism = Mechanism::token_geometric;
  cfg.thresholds = thresholds;
  cfg.chi_threshold = chi_threshold;
  cfg.max_len = max_len;
  return decode(model, source, cfg);
}

DecodeTrace decode_tok_multinomial(const Model& model, const std::vector<int>& source, int max_len) {
  DecodeConfig cfg;
  cfg.mechanism = Mechanism::token_multinomial;
  cfg.max_len = max_len;
  return decode(model, source, cfg);
}

DecodeTrace decode_seq(const Model& model, const std::vector<int>& source, int max_len) {
  DecodeConfig cfg;
  cfg.mechanism = Mechanism::sequence;
  cfg.max_len = max_len;
  return decode(model, source, cfg);
}

DecodeTrace decode_confidence(const Model& model, const std::vector<int>& source,
                              const std::vector<double>& thresholds, int max_len) {
  DecodeConfig cfg;
  cfg.mechanism = Mechanism::confidence;
  cfg.thresholds = thresholds;
  cfg.max_len = max_len;
  return decode(model, source, cfg);
}

// ---------------------------------------------------------------------------

std::vector<std::vector<double>> baseline_step_logits(const Model& model, const std::vector<int>& source,
                                                      const std::vector<int>& prefix) {
  SequencePair pair{source, prefix};
  PackedBatch batch = PackedBatch::build(std::span<const SequencePair>(&pair, 1));
  Tape tape;
  DecoderRun run = model.run_frozen(tape, batch);
  // Re-project the top state with the block-N classifier only.
  const Tensor& top = run.block_states.back().value();
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r < top.rows(); ++r) out.push_back(model.exit_logits(model.blocks(), top.row(r)));
  return out;
}

std::vector<int> decode_baseline(const Model& model, const std::vector<int>& source, int max_len) {
  const int limit = max_len > 0 ? max_len : default_max_len(source.size());
  std::vector<int> out;
  for (int t = 0; t < limit; ++t) {
    const auto logits = baseline_step_logits(model, source, out);
    const int token = argmax_token(logits.back());
    if (token == tokens::eos) break;
    out.push_back(token);
  }
  return out;
}

std::size_t cache_invariant_violations(const Model& model, const DecoderCache& cache) {
  const std::size_t d = static_cast<std::size_t>(model.config().d_dec);
  std::size_t bad = 0;
  const auto& exits = cache.exits();
  for (std::size_t t = 0; t < exits.size(); ++t) {
    for (int m = exits[t] + 1; m <= model.blocks(); ++m) {
      const auto& layer = cache.layer(m);
      if (layer.steps <= t) {
        ++bad;
        continue;
      }
      auto [k, v] = model.self_kv(m, cache.exit_states()[t]);
      if (std::memcmp(k.data(), layer.keys.data() + t * d, d * sizeof(double)) != 0 ||
          std::memcmp(v.data(), layer.values.data() + t * d, d * sizeof(double)) != 0) {
        ++bad;
      }
    }
  }
  return bad;
}

std::string trace_json_line(const DecodeTrace& trace, const std::string& config_id) {
  nlohmann::json j;
  if (!config_id.empty()) j["config"] = config_id;
  j["source"] = trace.source;
  j["hypothesis"] = trace.hypothesis();
  j["exits"] = trace.exits;
  j["confidences"] = trace.confidences;
  j["flops"] = trace.flops;
  j["total_flops"] = trace.total_flops();
  j["ae"] = trace.average_exit();
  j["mechanism"] = to_string(trace.mechanism);
  return j.dump();
}

}  // namespace exitdepth
