#include "exitdepth/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <sstream>

#include "exitdepth/errors.hpp"

namespace exitdepth {

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

std::size_t row_argmax(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

std::string to_string(WeightScheme s) {
  switch (s) {
    case WeightScheme::uniform:
      return "uniform";
    case WeightScheme::n:
      return "n";
    case WeightScheme::sqrt_n:
      return "sqrt_n";
    case WeightScheme::inv_sqrt_n:
      return "inv_sqrt_n";
    case WeightScheme::inv_n:
      return "inv_n";
    case WeightScheme::custom:
      return "custom";
  }
  return "unknown";
}

WeightScheme parse_weight_scheme(std::string_view s) {
  if (s == "uniform") return WeightScheme::uniform;
  if (s == "n") return WeightScheme::n;
  if (s == "sqrt_n") return WeightScheme::sqrt_n;
  if (s == "inv_sqrt_n") return WeightScheme::inv_sqrt_n;
  if (s == "inv_n") return WeightScheme::inv_n;
  throw UsageError("unknown weight scheme '" + std::string(s) + "'");
}

LossWeights LossWeights::make(WeightScheme scheme, int blocks) {
  if (scheme == WeightScheme::custom) throw UsageError("LossWeights::make: use custom() for explicit weights");
  LossWeights w;
  w.scheme = scheme;
  for (int n = 1; n <= blocks; ++n) {
    const double x = n;
    switch (scheme) {
      case WeightScheme::uniform:
        w.omega.push_back(1.0);
        break;
      case WeightScheme::n:
        w.omega.push_back(x);
        break;
      case WeightScheme::sqrt_n:
        w.omega.push_back(std::sqrt(x));
        break;
      case WeightScheme::inv_sqrt_n:
        w.omega.push_back(1.0 / std::sqrt(x));
        break;
      case WeightScheme::inv_n:
        w.omega.push_back(1.0 / x);
        break;
      case WeightScheme::custom:
        break;
    }
  }
  return w;
}

LossWeights LossWeights::custom(std::vector<double> omega) {
  LossWeights w;
  w.scheme = WeightScheme::custom;
  w.omega = std::move(omega);
  return w;
}

std::vector<double> LossWeights::values(int blocks) const {
  if (omega.empty() && scheme != WeightScheme::custom) return make(scheme, blocks).omega;
  return omega;
}

void LossWeights::validate(int blocks) const {
  const auto w = values(blocks);
  if (w.size() != sz(blocks)) throw UsageError("loss weights: expected one weight per block");
  for (double v : w) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw UsageError("loss weights must be finite and >= 0");
  }
  if (std::accumulate(w.begin(), w.end(), 0.0) <= 0.0) throw UsageError("loss weights: not all weights may be zero");
}

std::vector<double> GradScaleConfig::factors(int blocks) const {
  if (!gammas.empty()) {
    if (gammas.size() != sz(blocks)) throw UsageError("grad scale: expected one gamma per block");
    return gammas;
  }
  std::vector<double> g;
  for (int n = 1; n <= blocks; ++n) g.push_back(gamma * (blocks - n));
  if (top_block_unit) g.back() = 1.0;
  return g;
}

void GradScaleConfig::validate() const {
  if (!(gamma >= 0.0)) throw UsageError("grad scale: gamma must be >= 0");
  for (double g : gammas) {
    if (!(g >= 0.0)) throw UsageError("grad scale: gammas must be >= 0");
  }
}

ForwardOptions gradient_scale_options(const GradScaleConfig& gs, int blocks) {
  gs.validate();
  ForwardOptions opts;
  if (!gs.enabled) return opts;
  opts.classifier_grad_scale = gs.factors(blocks);
  if (opts.classifier_grad_scale.back() == 0.0) {
    static bool warned = false;
    if (!warned) {
      std::cerr << "warning: gamma_N = 0, the top exit's loss term gets no gradient\n";
      warned = true;
    }
  }
  opts.state_grad_scale.assign(sz(blocks), 1.0);
  for (int n = 1; n < blocks; ++n) {
    const double next = opts.classifier_grad_scale[sz(n)];
    opts.state_grad_scale[sz(n - 1)] = next == 0.0 ? 1.0 : 1.0 / next;
  }
  return opts;
}

std::string to_string(TrainMode m) { return m == TrainMode::aligned ? "aligned" : "mixed"; }

TrainMode parse_train_mode(std::string_view s) {
  if (s == "aligned") return TrainMode::aligned;
  if (s == "mixed") return TrainMode::mixed;
  throw UsageError("unknown training mode '" + std::string(s) + "'");
}

void TrainConfig::validate(int blocks) const {
  if (paths < 1) throw UsageError("train: paths (M) must be >= 1");
  if (!(alpha >= 0.0)) throw UsageError("train: alpha must be >= 0");
  if (!(g_clip > 0.0)) throw UsageError("train: g_clip must be > 0");
  if (!(learning_rate > 0.0)) throw UsageError("train: learning rate must be > 0");
  if (warmup < 1) throw UsageError("train: warmup must be >= 1");
  if (stage1_updates < 0 || stage2_updates < 0) throw UsageError("train: update counts must be >= 0");
  if (batch_size < 1) throw UsageError("train: batch size must be >= 1");
  if (log_every < 1) throw UsageError("train: log_every must be >= 1");
  weights.validate(blocks);
  grad_scale.validate();
}

// ---------------------------------------------------------------------------

AlignedLoss aligned_loss(Model& model, Tape& tape, const PackedBatch& batch,
                         const LossWeights& weights, const ForwardOptions& opts) {
  const int N = model.blocks();
  weights.validate(N);
  const std::vector<double> omega = weights.values(N);
  if (!opts.exit_path.empty()) throw UsageError("aligned_loss: exit paths belong to mixed training");
  AlignedLoss out;
  out.run = model.run(tape, batch, opts);
  Var acc;
  for (int n = 1; n <= N; ++n) {
    Var ll = sum(pick(out.run.exit_log_probs[sz(n - 1)], batch.targets));
    out.ll.push_back(ll.item());
    Var term = scale(ll, omega[sz(n - 1)]);
    acc = acc.valid() ? add(acc, term) : term;
  }
  out.l_dec = scale(acc, -1.0 / std::accumulate(omega.begin(), omega.end(), 0.0));
  return out;
}

Var path_log_likelihood(Model& model, Tape& tape, const PackedBatch& batch,
                        const std::vector<int>& path) {
  ForwardOptions opts;
  opts.exit_path = path;
  DecoderRun run = model.run(tape, batch, opts);
  std::vector<int> choice(path.size());
  for (std::size_t r = 0; r < path.size(); ++r) choice[r] = path[r] - 1;
  return sum(pick(select_rows(run.exit_log_probs, choice), batch.targets));
}

std::vector<int> sample_exit_path(std::size_t rows, int blocks, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dist(1, blocks);
  std::vector<int> path(rows);
  for (int& n : path) n = dist(rng);
  return path;
}

Var mixed_loss(Model& model, Tape& tape, const PackedBatch& batch, int paths, std::mt19937_64& rng) {
  if (paths < 1) throw UsageError("mixed_loss: M must be >= 1");
  Var acc;
  for (int m = 0; m < paths; ++m) {
    Var ll = path_log_likelihood(model, tape, batch, sample_exit_path(batch.rows(), model.blocks(), rng));
    acc = acc.valid() ? add(acc, ll) : ll;
  }
  return scale(acc, -1.0 / paths);
}

AlignedLoss gradient_scaled_forward(Model& model, Tape& tape, const PackedBatch& batch,
                                    const LossWeights& weights, const GradScaleConfig& gs) {
  if (!gs.enabled) throw UsageError("gradient_scaled_forward: gradient scaling is disabled");
  return aligned_loss(model, tape, batch, weights, gradient_scale_options(gs, model.blocks()));
}

double clip_renorm(ParameterStore& params, double g_clip) {
  if (!(g_clip > 0.0)) throw UsageError("clip_renorm: g_clip must be > 0");
  const double norm = params.grad_norm();
  if (norm > g_clip) {
    const double factor = g_clip / norm;
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (double& g : params[i].grad.values()) g *= factor;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------

std::vector<int> oracle_targets(const DecoderRun& run, const PackedBatch& batch,
                                const HaltingConfig& hc) {
  std::vector<int> out;
  for (std::size_t s = 0; s < batch.sentences(); ++s) {
    Tensor scores = token_scores(run, batch, s, hc.oracle);
    if (hc.mechanism == Mechanism::sequence) {
      out.push_back(oracle_sequence(sequence_scores(scores), hc.lambda).index);
    } else {
      for (const auto& t : oracle_token(scores, hc.sigma, hc.lambda)) out.push_back(t.index);
    }
  }
  return out;
}

Var exit_loss_term(Model& model, Tape& tape, const DecoderRun& run, const PackedBatch& batch,
                   const HaltingConfig& hc, const std::vector<int>& targets) {
  const int N = model.blocks();
  std::vector<int> cls(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 1 || targets[i] > N) throw UsageError("exit loss: target out of range");
    cls[i] = targets[i] - 1;
  }
  switch (hc.mechanism) {
    case Mechanism::sequence: {
      if (targets.size() != batch.sentences()) throw UsageError("exit loss: one target per sentence");
      return cross_entropy(model.seq_halting_logits(tape, run.encoder_means, true), cls);
    }
    case Mechanism::token_multinomial: {
      if (targets.size() != batch.rows()) throw UsageError("exit loss: one target per row");
      return cross_entropy(model.tok_halting_logits(tape, run.block_states.front(), true), cls);
    }
    case Mechanism::token_geometric: {
      if (targets.size() != batch.rows()) throw UsageError("exit loss: one target per row");
      if (N < 2) return tape.constant(Tensor::scalar(0.0));
      // log q(n) = log chi^n + sum_{n' < n} log(1 - chi^{n'}), without the chi^N term.
      Var z = model.geo_halting_logits(tape, run.block_states, true);
      Tensor halt({targets.size(), sz(N - 1)});
      Tensor pass({targets.size(), sz(N - 1)});
      for (std::size_t r = 0; r < targets.size(); ++r) {
        const std::size_t k = sz(cls[r]);
        if (k < sz(N - 1)) halt(r, k) = 1.0;
        for (std::size_t c = 0; c < k; ++c) pass(r, c) = 1.0;
      }
      Var ll = add(sum(mul(log_sigmoid(z), tape.constant(std::move(halt)))),
                   sum(mul(log_sigmoid(scale(z, -1.0)), tape.constant(std::move(pass)))));
      return scale(ll, -1.0);
    }
    case Mechanism::fixed:
    case Mechanism::confidence:
      break;
  }
  return tape.constant(Tensor::scalar(0.0));
}

// ---------------------------------------------------------------------------

AdamOptimizer::AdamOptimizer(const ParameterStore& params, const TrainConfig& cfg)
    : lr_(cfg.learning_rate),
      warmup_(cfg.warmup),
      b1_(cfg.beta1),
      b2_(cfg.beta2),
      eps_(cfg.adam_eps) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_.push_back(Tensor::zeros_like(params[i].value));
    v_.push_back(Tensor::zeros_like(params[i].value));
  }
}

double AdamOptimizer::rate(long step) const {
  const double s = static_cast<double>(std::max(step, 1L));
  return lr_ * std::min(s / warmup_, std::sqrt(warmup_ / s));
}

void AdamOptimizer::step(ParameterStore& params) {
  if (params.size() != m_.size()) throw UsageError("adam: parameter set changed");
  ++step_;
  const double lr = rate(step_);
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(step_));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto w = params[p].value.values();
    auto g = params[p].grad.values();
    auto m = m_[p].values();
    auto v = v_[p].values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
      v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

// ---------------------------------------------------------------------------

StepResult training_step(Model& model, const PackedBatch& batch, const TrainConfig& tc,
                         const HaltingConfig& hc, bool with_exit_loss, std::mt19937_64& rng) {
  const int N = model.blocks();
  const double tokens = static_cast<double>(batch.rows());
  model.params().zero_grad();
  Tape tape;
  StepResult res;
  res.tokens = batch.rows();

  const ForwardOptions opts = gradient_scale_options(tc.grad_scale, N);
  AlignedLoss aligned = aligned_loss(model, tape, batch, tc.weights, opts);
  Var l_dec = tc.mode == TrainMode::aligned ? aligned.l_dec : mixed_loss(model, tape, batch, tc.paths, rng);
  Var loss = scale(l_dec, 1.0 / tokens);
  res.l_dec = loss.item();

  if (with_exit_loss && tc.alpha > 0.0 && hc.mechanism != Mechanism::fixed &&
      hc.mechanism != Mechanism::confidence) {
    const std::vector<int> targets = oracle_targets(aligned.run, batch, hc);
    Var l_exit = scale(exit_loss_term(model, tape, aligned.run, batch, hc, targets),
                       1.0 / static_cast<double>(targets.size()));
    res.l_exit = l_exit.item();
    loss = combined_loss(loss, l_exit, tc.alpha);
  }
  if (!std::isfinite(loss.item())) throw NumericError("training diverged: loss is not finite");
  tape.backward(loss);

  res.correct.assign(sz(N), 0.0);
  for (int n = 1; n <= N; ++n) {
    const Tensor& lp = aligned.run.exit_log_probs[sz(n - 1)].value();
    for (std::size_t r = 0; r < batch.rows(); ++r) {
      if (static_cast<int>(row_argmax(lp.row(r))) == batch.targets[r]) res.correct[sz(n - 1)] += 1.0;
    }
  }
  return res;
}

std::string TrainReport::csv() const {
  std::ostringstream os;
  os << "update,stage,L_dec,L_exit";
  for (int n = 1; n <= blocks; ++n) os << ",acc_" << n;
  os << '\n';
  char buf[64];
  for (const auto& r : records) {
    os << r.update << ',' << r.stage;
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g", r.l_dec, r.l_exit);
    os << buf;
    for (double a : r.accuracy) {
      std::snprintf(buf, sizeof buf, ",%.17g", a);
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

Trainer::Trainer(const Model& model, std::shared_ptr<const std::vector<SequencePair>> corpus, TrainConfig tc)
    : corpus_(std::move(corpus)), tc_(std::move(tc)), rng_(tc_.seed), adam_(model.params(), tc_) {
  tc_.validate(model.blocks());
  if (!corpus_ || corpus_->empty()) throw UsageError("train: empty corpus");
  order_.resize(corpus_->size());
  std::iota(order_.begin(), order_.end(), 0);
  std::shuffle(order_.begin(), order_.end(), rng_);
  report_.blocks = model.blocks();
}

PackedBatch Trainer::next_batch() {
  std::vector<SequencePair> pairs;
  for (int i = 0; i < tc_.batch_size; ++i) {
    if (cursor_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    pairs.push_back((*corpus_)[order_[cursor_++]]);
  }
  return PackedBatch::build(pairs);
}

void Trainer::run(Model& model, const HaltingConfig& hc, int stage, int updates, const TrainCallback& on_log) {
  const int N = model.blocks();
  if (stage != 1 && stage != 2) throw UsageError("train: stage must be 1 or 2");
  if (updates < 0) throw UsageError("train: update count must be >= 0");
  tc_.validate(N);
  hc.validate(N);

  TrainRecord window;
  window.accuracy.assign(sz(N), 0.0);
  std::size_t window_updates = 0, window_tokens = 0;
  auto flush = [&]() {
    if (window_updates == 0) return;
    TrainRecord rec;
    rec.update = update_;
    rec.stage = stage;
    rec.l_dec = window.l_dec / static_cast<double>(window_updates);
    rec.l_exit = window.l_exit / static_cast<double>(window_updates);
    for (double c : window.accuracy) rec.accuracy.push_back(c / static_cast<double>(window_tokens));
    report_.records.push_back(rec);
    if (on_log) on_log(rec);
    window = TrainRecord{};
    window.accuracy.assign(sz(N), 0.0);
    window_updates = 0;
    window_tokens = 0;
  };

  for (int u = 1; u <= updates; ++u) {
    const PackedBatch batch = next_batch();
    StepResult res = training_step(model, batch, tc_, hc, stage == 2, rng_);
    clip_renorm(model.params(), tc_.g_clip);
    adam_.step(model.params());
    ++update_;

    window.l_dec += res.l_dec;
    window.l_exit += res.l_exit;
    for (int n = 0; n < N; ++n) window.accuracy[sz(n)] += res.correct[sz(n)];
    window_tokens += res.tokens;
    ++window_updates;
    if (update_ % tc_.log_every == 0 || u == updates) flush();
  }
}

TrainReport train(Model& model, const std::vector<SequencePair>& corpus, const TrainConfig& tc,
                  const HaltingConfig& hc, const TrainCallback& on_log) {
  Trainer trainer(model, std::make_shared<const std::vector<SequencePair>>(corpus), tc);
  trainer.run(model, hc, 1, tc.stage1_updates, on_log);
  trainer.run(model, hc, 2, tc.stage2_updates, on_log);
  return trainer.report();
}

}  // namespace exitdepth
