#include "exitdepth/model.hpp"

#include <cmath>
#include <random>
#include <tuple>

#include "exitdepth/errors.hpp"
#include "exitdepth/vocab.hpp"

namespace exitdepth {

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

Tensor position_matrix(std::span<const std::size_t> positions, std::size_t d) {
  Tensor pe({positions.size(), d});
  for (std::size_t r = 0; r < positions.size(); ++r) kernels::add_position_encoding(positions[r], pe.row(r));
  return pe;
}

void add_into(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

void ModelConfig::validate() const {
  if (blocks < 1) throw UsageError("model: blocks must be >= 1");
  if (encoder_layers < 1) throw UsageError("model: encoder_layers must be >= 1");
  if (d_enc < 1 || d_dec < 1 || d_ffn < 1 || heads < 1) throw UsageError("model: dims must be positive");
  if (d_enc % heads != 0 || d_dec % heads != 0) {
    throw UsageError("model: d_enc and d_dec must be divisible by heads");
  }
  if (src_vocab <= tokens::first_content || tgt_vocab <= tokens::first_content) {
    throw UsageError("model: vocabularies need at least one non-reserved token");
  }
}

// ---------------------------------------------------------------------------
// DecoderCache

DecoderCache::DecoderCache(int blocks, std::size_t source_len)
    : layers_(sz(blocks)), source_len_(source_len) {}

void DecoderCache::record_exit(int n, std::vector<double> state) {
  exits_.push_back(n);
  exit_states_.push_back(std::move(state));
}

// ---------------------------------------------------------------------------
// PackedBatch

PackedBatch PackedBatch::build(std::span<const SequencePair> pairs) {
  PackedBatch b;
  for (std::size_t s = 0; s < pairs.size(); ++s) {
    const auto& src = pairs[s].source;
    const auto& tgt = pairs[s].target;
    if (src.empty()) throw UsageError("packed batch: empty source sequence");
    const std::size_t so = b.src_ids.size();
    const std::size_t se = so + src.size();
    for (std::size_t i = 0; i < src.size(); ++i) {
      b.src_ids.push_back(src[i]);
      b.src_pos.push_back(i);
      b.enc_spans.push_back({so, se});
    }
    b.src_segments.emplace_back(so, se);

    const std::size_t ro = b.targets.size();
    const std::size_t len = tgt.size() + 1;
    for (std::size_t t = 0; t < len; ++t) {
      b.dec_inputs.push_back(t == 0 ? tokens::bos : tgt[t - 1]);
      b.targets.push_back(t < tgt.size() ? tgt[t] : tokens::eos);
      b.dec_pos.push_back(t);
      b.row_sentence.push_back(s);
      b.self_spans.push_back({ro, ro + t + 1});
      b.cross_spans.push_back({so, se});
    }
    b.tgt_segments.emplace_back(ro, ro + len);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  init_parameters();
}

Model::Model(ModelConfig cfg, ParameterStore params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  Model reference(cfg_);
  if (reference.params_.size() != params_.size()) {
    throw UsageError("model: parameter set does not match the configuration");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Parameter& want = reference.params_[i];
    if (!params_.contains(want.name) || params_.get(want.name).value.shape() != want.value.shape()) {
      throw UsageError("model: missing or misshaped parameter " + want.name);
    }
  }
}

std::string Model::classifier_name(int n) const {
  return cfg_.tie_classifiers ? std::string("exit.w") : "exit." + std::to_string(n) + ".w";
}

void Model::init_parameters() {
  std::mt19937_64 rng(cfg_.seed);
  auto uniform = [&](std::size_t fan_in, std::size_t fan_out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor w({fan_in, fan_out});
    for (double& v : w.values()) v = dist(rng);
    return w;
  };
  auto linear = [&](const std::string& pre, std::size_t in, std::size_t out) {
    params_.add(pre + "w", uniform(in, out));
    params_.add(pre + "b", Tensor({out}));
  };
  auto norm = [&](const std::string& pre, std::size_t d) {
    params_.add(pre + "g", Tensor({d}, 1.0));
    params_.add(pre + "b", Tensor({d}));
  };
  const std::size_t de = sz(cfg_.d_enc), dd = sz(cfg_.d_dec), df = sz(cfg_.d_ffn);

  {
    // Embedding rows drawn like a [d x V] matrix, i.e. scaled by 1/sqrt(d).
    Tensor e = uniform(de, sz(cfg_.src_vocab));
    Tensor t({sz(cfg_.src_vocab), de});
    for (std::size_t i = 0; i < de; ++i)
      for (std::size_t j = 0; j < t.rows(); ++j) t(j, i) = e(i, j);
    params_.add("src_embed", std::move(t));
  }
  {
    Tensor e = uniform(dd, sz(cfg_.tgt_vocab));
    Tensor t({sz(cfg_.tgt_vocab), dd});
    for (std::size_t i = 0; i < dd; ++i)
      for (std::size_t j = 0; j < t.rows(); ++j) t(j, i) = e(i, j);
    params_.add("tgt_embed", std::move(t));
  }
  for (int l = 1; l <= cfg_.encoder_layers; ++l) {
    const std::string p = "enc." + std::to_string(l) + ".";
    for (const char* m : {"attn.q.", "attn.k.", "attn.v.", "attn.o."}) linear(p + m, de, de);
    norm(p + "ln1.", de);
    linear(p + "ffn.1.", de, df);
    linear(p + "ffn.2.", df, de);
    norm(p + "ln2.", de);
  }
  for (int n = 1; n <= cfg_.blocks; ++n) {
    const std::string p = block_prefix(n);
    for (const char* m : {"self.q.", "self.k.", "self.v.", "self.o."}) linear(p + m, dd, dd);
    norm(p + "ln1.", dd);
    linear(p + "src.q.", dd, dd);
    linear(p + "src.k.", de, dd);
    linear(p + "src.v.", de, dd);
    linear(p + "src.o.", dd, dd);
    norm(p + "ln2.", dd);
    linear(p + "ffn.1.", dd, df);
    linear(p + "ffn.2.", df, dd);
    norm(p + "ln3.", dd);
  }
  if (!cfg_.tie_embeddings) {
    if (cfg_.tie_classifiers) {
      params_.add("exit.w", uniform(dd, sz(cfg_.tgt_vocab)));
    } else {
      for (int n = 1; n <= cfg_.blocks; ++n) {
        params_.add(classifier_name(n), uniform(dd, sz(cfg_.tgt_vocab)));
      }
    }
  }
  const std::size_t nb = sz(cfg_.blocks);
  linear("halt.seq.", de, nb);
  linear("halt.tok.", dd, nb);
  linear("halt.geo.", dd, 1);
}

template <class Bind>
std::pair<Var, Var> Model::encode_impl(Tape& tape, const PackedBatch& batch, Bind&& bind) const {
  const std::size_t heads = sz(cfg_.heads);
  auto lin = [&](const Var& x, const std::string& pre) {
    return add_bias(matmul(x, bind(pre + "w")), bind(pre + "b"));
  };
  auto norm = [&](const Var& x, const std::string& pre) {
    return hooks.layer_norm ? layer_norm(x, bind(pre + "g"), bind(pre + "b")) : x;
  };
  auto resid = [&](const Var& x, const Var& y) { return hooks.residual ? add(x, y) : y; };

  Var e = scale(embedding_lookup(bind("src_embed"), batch.src_ids), std::sqrt(double(cfg_.d_enc)));
  if (hooks.position_encoding) e = add(e, tape.constant(position_matrix(batch.src_pos, sz(cfg_.d_enc))));
  for (int l = 1; l <= cfg_.encoder_layers; ++l) {
    const std::string p = "enc." + std::to_string(l) + ".";
    Var a = attention(lin(e, p + "attn.q."), lin(e, p + "attn.k."), lin(e, p + "attn.v."), heads,
                      batch.enc_spans);
    e = norm(resid(e, lin(a, p + "attn.o.")), p + "ln1.");
    Var f = lin(relu(lin(e, p + "ffn.1.")), p + "ffn.2.");
    e = norm(resid(e, f), p + "ln2.");
  }
  return {e, segment_mean(e, batch.src_segments)};
}

template <class Bind>
DecoderRun Model::run_impl(Tape& tape, const PackedBatch& batch, const ForwardOptions& opts,
                           Bind&& bind) const {
  const int N = cfg_.blocks;
  const std::size_t heads = sz(cfg_.heads);
  if (!opts.exit_path.empty() && opts.exit_path.size() != batch.rows()) {
    throw UsageError("forward: exit path needs one exit per decoder row");
  }
  for (int e : opts.exit_path) {
    if (e < 1 || e > N) throw UsageError("forward: exit out of range");
  }

  auto lin = [&](const Var& x, const std::string& pre) {
    return add_bias(matmul(x, bind(pre + "w")), bind(pre + "b"));
  };
  auto norm = [&](const Var& x, const std::string& pre) {
    return hooks.layer_norm ? layer_norm(x, bind(pre + "g"), bind(pre + "b")) : x;
  };
  auto resid = [&](const Var& x, const Var& y) { return hooks.residual ? add(x, y) : y; };

  DecoderRun out;
  std::tie(out.encoder_states, out.encoder_means) = encode_impl(tape, batch, bind);
  const Var& e = out.encoder_states;

  Var h = scale(embedding_lookup(bind("tgt_embed"), batch.dec_inputs), std::sqrt(double(cfg_.d_dec)));
  if (hooks.position_encoding) h = add(h, tape.constant(position_matrix(batch.dec_pos, sz(cfg_.d_dec))));

  std::vector<int> choice(batch.rows());
  for (int n = 1; n <= N; ++n) {
    const std::string p = block_prefix(n);
    Var sa = attention(lin(h, p + "self.q."), lin(h, p + "self.k."), lin(h, p + "self.v."), heads,
                       batch.self_spans);
    Var x1 = norm(resid(h, lin(sa, p + "self.o.")), p + "ln1.");
    Var ca = attention(lin(x1, p + "src.q."), lin(e, p + "src.k."), lin(e, p + "src.v."), heads,
                       batch.cross_spans);
    Var x2 = norm(resid(x1, lin(ca, p + "src.o.")), p + "ln2.");
    Var f = lin(relu(lin(x2, p + "ffn.1.")), p + "ffn.2.");
    Var state = norm(resid(x2, f), p + "ln3.");

    if (!opts.exit_path.empty()) {
      // Rows that exited below n carry their exit state upward unchanged.
      for (std::size_t r = 0; r < choice.size(); ++r) choice[r] = n <= opts.exit_path[r] ? 0 : 1;
      state = select_rows({state, h}, choice);
    }
    out.block_states.push_back(state);

    Var w = cfg_.tie_embeddings ? transpose(bind("tgt_embed")) : bind(classifier_name(n));
    Var lp = log_softmax(matmul(state, w));
    if (!opts.classifier_grad_scale.empty()) lp = scale_gradient(lp, opts.classifier_grad_scale[sz(n - 1)]);
    out.exit_log_probs.push_back(lp);

    h = state;
    if (!opts.state_grad_scale.empty() && n < N) h = scale_gradient(h, opts.state_grad_scale[sz(n - 1)]);
  }
  return out;
}

DecoderRun Model::run(Tape& tape, const PackedBatch& batch, const ForwardOptions& opts) {
  return run_impl(tape, batch, opts,
                  [&](const std::string& name) { return tape.param(params_.get(name)); });
}

DecoderRun Model::run_frozen(Tape& tape, const PackedBatch& batch, const ForwardOptions& opts) const {
  return run_impl(tape, batch, opts,
                  [&](const std::string& name) { return tape.constant(params_.get(name).value); });
}

namespace {

Var bind_param(Tape& tape, ParameterStore& params, const std::string& name, bool trainable) {
  return trainable ? tape.param(params.get(name)) : tape.constant(params.get(name).value);
}

}  // namespace

Var Model::seq_halting_logits(Tape& tape, const Var& encoder_means, bool trainable) {
  return add_bias(matmul(encoder_means, bind_param(tape, params_, "halt.seq.w", trainable)),
                  bind_param(tape, params_, "halt.seq.b", trainable));
}

Var Model::tok_halting_logits(Tape& tape, const Var& first_block_state, bool trainable) {
  return add_bias(matmul(first_block_state, bind_param(tape, params_, "halt.tok.w", trainable)),
                  bind_param(tape, params_, "halt.tok.b", trainable));
}

Var Model::geo_halting_logits(Tape& tape, const std::vector<Var>& block_states, bool trainable) {
  if (block_states.size() < 2) throw UsageError("geometric halting needs at least two blocks");
  Var w = bind_param(tape, params_, "halt.geo.w", trainable);
  Var b = bind_param(tape, params_, "halt.geo.b", trainable);
  std::vector<Var> cols;
  for (std::size_t n = 0; n + 1 < block_states.size(); ++n) {
    cols.push_back(add_bias(matmul(block_states[n], w), b));
  }
  return concat_cols(cols);
}

// ---------------------------------------------------------------------------
// Incremental inference. Each step mirrors run_impl row by row with the same
// kernels, so decoded states match the teacher-forced pass bit for bit.

EncoderOutput Model::encode(std::span<const int> source) const {
  if (source.empty()) throw UsageError("encode: empty source sequence");
  for (int id : source) {
    if (id < 0 || id >= cfg_.src_vocab) throw UsageError("encode: token outside source vocabulary");
  }
  SequencePair pair{{source.begin(), source.end()}, {}};
  PackedBatch batch = PackedBatch::build(std::span<const SequencePair>(&pair, 1));
  Tape tape;
  auto [states, means] = encode_impl(tape, batch, [&](const std::string& name) {
    return tape.constant(params_.get(name).value);
  });
  EncoderOutput out;
  out.states = states.value();
  const Tensor& m = means.value();
  out.mean_state.assign(m.values().begin(), m.values().end());
  return out;
}

std::vector<double> Model::embed_target(int prev_token, std::size_t t) const {
  if (prev_token < 0 || prev_token >= cfg_.tgt_vocab) throw UsageError("embed_target: token out of range");
  if (t < 1) throw UsageError("embed_target: steps are 1-based");
  const Tensor& table = params_.get("tgt_embed").value;
  auto row = table.row(sz(prev_token));
  std::vector<double> h(row.begin(), row.end());
  const double factor = std::sqrt(double(cfg_.d_dec));
  for (double& v : h) v *= factor;
  if (hooks.position_encoding) {
    std::vector<double> pe(h.size(), 0.0);
    kernels::add_position_encoding(t - 1, pe);
    add_into(h, pe);
  }
  return h;
}

std::pair<std::vector<double>, std::vector<double>> Model::self_kv(int n,
                                                                   std::span<const double> h) const {
  const std::string p = block_prefix(n);
  return {kernels::linear_row(h, params_.get(p + "self.k.w").value, params_.get(p + "self.k.b").value),
          kernels::linear_row(h, params_.get(p + "self.v.w").value, params_.get(p + "self.v.b").value)};
}

std::vector<double> Model::decoder_block(int n, std::span<const double> h_prev, DecoderCache& cache,
                                         const EncoderOutput& enc, std::size_t t) const {
  if (n < 1 || n > cfg_.blocks) throw UsageError("decoder_block: block index out of range");
  if (h_prev.size() != sz(cfg_.d_dec)) throw DimensionError("decoder_block: state width");
  DecoderCache::Layer& layer = cache.layer(n);
  if (t < 1 || layer.steps != t - 1) {
    throw UsageError("decoder_block: cache for block " + std::to_string(n) + " holds " +
                     std::to_string(layer.steps) + " steps, step " + std::to_string(t) + " requested");
  }
  const std::string p = block_prefix(n);
  const std::size_t d = sz(cfg_.d_dec);
  const std::size_t heads = sz(cfg_.heads);
  auto W = [&](const std::string& name) -> const Tensor& { return params_.get(p + name).value; };
  auto norm = [&](std::vector<double>& x, const std::string& pre) {
    if (!hooks.layer_norm) return;
    std::vector<double> y(x.size());
    kernels::layer_norm_row(x, W(pre + "g").values(), W(pre + "b").values(), 1e-5, y);
    x = std::move(y);
  };
  auto resid = [&](std::span<const double> x, std::vector<double> y) {
    if (hooks.residual) {
      std::vector<double> s(x.begin(), x.end());
      add_into(s, y);
      return s;
    }
    return y;
  };

  std::vector<double> q = kernels::linear_row(h_prev, W("self.q.w"), W("self.q.b"));
  auto [k, v] = self_kv(n, h_prev);
  layer.keys.insert(layer.keys.end(), k.begin(), k.end());
  layer.values.insert(layer.values.end(), v.begin(), v.end());
  layer.steps += 1;
  std::vector<double> sa(d);
  kernels::attend_row(q, layer.keys, layer.values, 0, t, heads, sa, {});
  std::vector<double> x1 = resid(h_prev, kernels::linear_row(sa, W("self.o.w"), W("self.o.b")));
  norm(x1, "ln1.");

  if (layer.first_call) {
    Tensor sk = kernels::matmul(enc.states, W("src.k.w"));
    Tensor sv = kernels::matmul(enc.states, W("src.v.w"));
    for (std::size_t r = 0; r < sk.rows(); ++r) {
      add_into(sk.row(r), W("src.k.b").values());
      add_into(sv.row(r), W("src.v.b").values());
    }
    layer.src_keys.assign(sk.values().begin(), sk.values().end());
    layer.src_values.assign(sv.values().begin(), sv.values().end());
    layer.first_call = false;
  }
  std::vector<double> q2 = kernels::linear_row(x1, W("src.q.w"), W("src.q.b"));
  std::vector<double> ca(d);
  kernels::attend_row(q2, layer.src_keys, layer.src_values, 0, enc.states.rows(), heads, ca, {});
  std::vector<double> x2 = resid(x1, kernels::linear_row(ca, W("src.o.w"), W("src.o.b")));
  norm(x2, "ln2.");

  std::vector<double> f = kernels::linear_row(x2, W("ffn.1.w"), W("ffn.1.b"));
  for (double& z : f) z = z > 0.0 ? z : 0.0;
  std::vector<double> x3 = resid(x2, kernels::linear_row(f, W("ffn.2.w"), W("ffn.2.b")));
  norm(x3, "ln3.");
  return x3;
}

std::vector<double> Model::exit_logits(int n, std::span<const double> h) const {
  if (n < 1 || n > cfg_.blocks) throw UsageError("exit_logits: block index out of range");
  const std::size_t d = sz(cfg_.d_dec), V = sz(cfg_.tgt_vocab);
  std::vector<double> out(V);
  if (cfg_.tie_embeddings) {
    const Tensor& e = params_.get("tgt_embed").value;
    Tensor w({d, V});
    for (std::size_t i = 0; i < V; ++i)
      for (std::size_t j = 0; j < d; ++j) w(j, i) = e(i, j);
    kernels::gemm(h.data(), w.data(), out.data(), 1, d, V);
  } else {
    kernels::gemm(h.data(), params_.get(classifier_name(n)).value.data(), out.data(), 1, d, V);
  }
  return out;
}

void Model::copy_state_upward(std::size_t t, int n_exit, std::span<const double> h_exit,
                              DecoderCache& cache) const {
  if (n_exit < 1 || n_exit > cfg_.blocks) throw UsageError("copy_state_upward: exit out of range");
  for (int m = n_exit + 1; m <= cfg_.blocks; ++m) {
    DecoderCache::Layer& layer = cache.layer(m);
    if (layer.steps != t - 1) throw UsageError("copy_state_upward: cache out of step");
    auto [k, v] = self_kv(m, h_exit);
    layer.keys.insert(layer.keys.end(), k.begin(), k.end());
    layer.values.insert(layer.values.end(), v.begin(), v.end());
    layer.steps += 1;
  }
}

std::vector<double> Model::seq_halting_logits(std::span<const double> mean_state) const {
  return kernels::linear_row(mean_state, params_.get("halt.seq.w").value, params_.get("halt.seq.b").value);
}

std::vector<double> Model::tok_halting_logits(std::span<const double> h1) const {
  return kernels::linear_row(h1, params_.get("halt.tok.w").value, params_.get("halt.tok.b").value);
}

double Model::geo_halting_logit(std::span<const double> h) const {
  return kernels::linear_row(h, params_.get("halt.geo.w").value, params_.get("halt.geo.b").value)[0];
}

}  // namespace exitdepth
