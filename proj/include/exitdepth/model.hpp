#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "exitdepth/autograd.hpp"
#include "exitdepth/tensor.hpp"

namespace exitdepth {

struct ModelConfig {
  int blocks = 4;  // N decoder blocks, each with its own exit
  int encoder_layers = 2;
  int d_enc = 32;
  int d_dec = 32;
  int d_ffn = 64;
  int heads = 2;
  int src_vocab = 16;
  int tgt_vocab = 16;
  bool tie_classifiers = false;
  // Exit classifiers reuse the (transposed) target embedding; implies tied classifiers.
  bool tie_embeddings = false;
  std::uint64_t seed = 1;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Test switches for structural checks. Production code keeps the defaults.
struct ModelHooks {
  bool position_encoding = true;
  bool residual = true;
  bool layer_norm = true;
};

struct EncoderOutput {
  Tensor states;                   // [|x|, d_enc]
  std::vector<double> mean_state;  // d_enc
};

/// Incremental decoding memory. Layer n's self-attention keys/values at step t
/// are projections of the state that entered block n at step t: the real
/// h_t^{n-1} when block n ran, otherwise the copied exit state h_t^{n_t}.
class DecoderCache {
 public:
  struct Layer {
    std::vector<double> keys;    // steps x d_dec, row-major
    std::vector<double> values;  // steps x d_dec
    std::size_t steps = 0;
    std::vector<double> src_keys;  // |x| x d_dec, filled on first call
    std::vector<double> src_values;
    bool first_call = true;
  };

  DecoderCache(int blocks, std::size_t source_len);

  Layer& layer(int n) { return layers_.at(static_cast<std::size_t>(n - 1)); }
  const Layer& layer(int n) const { return layers_.at(static_cast<std::size_t>(n - 1)); }
  int blocks() const noexcept { return static_cast<int>(layers_.size()); }
  std::size_t source_len() const noexcept { return source_len_; }

  /// Exit n_t and exit state h_t^{n_t} recorded per completed step.
  void record_exit(int n, std::vector<double> state);
  const std::vector<int>& exits() const noexcept { return exits_; }
  const std::vector<std::vector<double>>& exit_states() const noexcept { return exit_states_; }

 private:
  std::vector<Layer> layers_;
  std::size_t source_len_;
  std::vector<int> exits_;
  std::vector<std::vector<double>> exit_states_;
};

struct SequencePair {
  std::vector<int> source;
  std::vector<int> target;  // without the trailing eos
  friend bool operator==(const SequencePair&, const SequencePair&) = default;
};

/// Several sentences packed row-wise without padding; attention spans play the
/// role of the padding mask. Decoder rows are [bos, y_1..y_L] predicting
/// [y_1..y_L, eos].
struct PackedBatch {
  std::vector<int> src_ids;
  std::vector<std::size_t> src_pos;
  std::vector<std::pair<std::size_t, std::size_t>> src_segments;
  std::vector<int> dec_inputs;
  std::vector<std::size_t> dec_pos;
  std::vector<int> targets;
  std::vector<std::pair<std::size_t, std::size_t>> tgt_segments;
  std::vector<std::size_t> row_sentence;
  std::vector<AttentionSpan> enc_spans;
  std::vector<AttentionSpan> self_spans;
  std::vector<AttentionSpan> cross_spans;

  static PackedBatch build(std::span<const SequencePair> pairs);
  std::size_t sentences() const noexcept { return src_segments.size(); }
  std::size_t rows() const noexcept { return targets.size(); }
};

/// Options for a teacher-forced decoder pass.
struct ForwardOptions {
  // Empty: aligned pass, every block runs on every row. Otherwise one exit
  // (1..N) per decoder row; blocks above it see the copied exit state.
  std::vector<int> exit_path;
  // Per-block factors on the gradient of exit n's log-probabilities (empty: none).
  std::vector<double> classifier_grad_scale;
  // Per-block factors on the gradient flowing from block n+1 into h^n (empty: none).
  std::vector<double> state_grad_scale;
};

struct DecoderRun {
  Var encoder_states;                // [S, d_enc]
  Var encoder_means;                 // [B, d_enc]
  std::vector<Var> block_states;     // h^n for n = 1..N, [R, d_dec]
  std::vector<Var> exit_log_probs;   // log softmax(W_n h^n), [R, V]
};

class Model {
 public:
  explicit Model(ModelConfig cfg);
  Model(ModelConfig cfg, ParameterStore params);

  const ModelConfig& config() const noexcept { return cfg_; }
  int blocks() const noexcept { return cfg_.blocks; }
  ParameterStore& params() noexcept { return params_; }
  const ParameterStore& params() const noexcept { return params_; }

  ModelHooks hooks;

  // ---- teacher-forced passes on a tape --------------------------------------
  /// Parameters enter as trainable leaves.
  DecoderRun run(Tape& tape, const PackedBatch& batch, const ForwardOptions& opts = {});
  /// Parameters enter as constants.
  DecoderRun run_frozen(Tape& tape, const PackedBatch& batch,
                        const ForwardOptions& opts = {}) const;

  /// Halting-head outputs as tape values.
  Var seq_halting_logits(Tape& tape, const Var& encoder_means, bool trainable);
  Var tok_halting_logits(Tape& tape, const Var& first_block_state, bool trainable);
  /// Columns are z^1..z^{N-1} with chi^n = sigmoid(z^n).
  Var geo_halting_logits(Tape& tape, const std::vector<Var>& block_states, bool trainable);

  // ---- tape-free incremental inference --------------------------------------
  EncoderOutput encode(std::span<const int> source) const;
  /// h^0 for 1-based step t given the previous output token.
  std::vector<double> embed_target(int prev_token, std::size_t t) const;
  /// h_t^n from h_t^{n-1}; appends block n's key/value for step t to the cache.
  std::vector<double> decoder_block(int n, std::span<const double> h_prev, DecoderCache& cache,
                                    const EncoderOutput& enc, std::size_t t) const;
  std::vector<double> exit_logits(int n, std::span<const double> h) const;
  /// Writes layer-m key/value projections of h_t^{n_exit} for every m in (n_exit, N].
  void copy_state_upward(std::size_t t, int n_exit, std::span<const double> h_exit,
                         DecoderCache& cache) const;
  /// Key/value projections block n applies to the state entering it.
  std::pair<std::vector<double>, std::vector<double>> self_kv(int n,
                                                              std::span<const double> h) const;

  std::vector<double> seq_halting_logits(std::span<const double> mean_state) const;
  std::vector<double> tok_halting_logits(std::span<const double> h1) const;
  double geo_halting_logit(std::span<const double> h) const;

  static std::string block_prefix(int n) { return "dec." + std::to_string(n) + "."; }
  std::string classifier_name(int n) const;

 private:
  void init_parameters();
  template <class Bind>
  std::pair<Var, Var> encode_impl(Tape& tape, const PackedBatch& batch, Bind&& bind) const;
  template <class Bind>
  DecoderRun run_impl(Tape& tape, const PackedBatch& batch, const ForwardOptions& opts,
                      Bind&& bind) const;

  ModelConfig cfg_;
  ParameterStore params_;
};

}  // namespace exitdepth
