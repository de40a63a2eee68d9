#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "exitdepth/autograd.hpp"
#include "exitdepth/halting.hpp"
#include "exitdepth/model.hpp"

namespace exitdepth {

enum class WeightScheme { uniform, n, sqrt_n, inv_sqrt_n, inv_n, custom };

std::string to_string(WeightScheme s);
WeightScheme parse_weight_scheme(std::string_view s);

/// Per-exit loss weights omega_1..omega_N, normalized by their sum at use.
struct LossWeights {
  WeightScheme scheme = WeightScheme::uniform;
  std::vector<double> omega;  // empty: derived from the scheme

  static LossWeights make(WeightScheme scheme, int blocks);
  static LossWeights custom(std::vector<double> omega);
  std::vector<double> values(int blocks) const;
  void validate(int blocks) const;
};

/// gamma_n = gamma * (N - n) on exit n's gradient, 1/gamma_{n+1} on the state
/// entering block n+1.
struct GradScaleConfig {
  bool enabled = false;
  double gamma = 1.0;
  // Use gamma_N = 1 instead of the literal gamma * 0.
  bool top_block_unit = false;
  // Non-empty: explicit gamma_1..gamma_N.
  std::vector<double> gammas;

  std::vector<double> factors(int blocks) const;
  void validate() const;
};

/// Forward options implementing the gradient-scaling recipe. A zero gamma_{n+1}
/// leaves the state gradient unscaled: everything flowing down through it is
/// already zero.
ForwardOptions gradient_scale_options(const GradScaleConfig& gs, int blocks);

enum class TrainMode { aligned, mixed };
std::string to_string(TrainMode m);
TrainMode parse_train_mode(std::string_view s);

struct TrainConfig {
  TrainMode mode = TrainMode::aligned;
  int paths = 1;  // M for mixed training
  double alpha = 1.0;
  double g_clip = 3.0;
  double learning_rate = 3e-3;  // peak
  int warmup = 200;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  int stage1_updates = 5000;
  int stage2_updates = 2000;
  int batch_size = 32;
  int log_every = 50;
  std::uint64_t seed = 1;
  LossWeights weights;
  GradScaleConfig grad_scale;

  void validate(int blocks) const;
};

struct AlignedLoss {
  Var l_dec;
  std::vector<double> ll;  // LL^1..LL^N summed over all rows
  DecoderRun run;
};

/// L_dec = -(sum_n omega_n LL^n) / (sum_n omega_n), summed over the batch.
AlignedLoss aligned_loss(Model& model, Tape& tape, const PackedBatch& batch,
                         const LossWeights& weights, const ForwardOptions& opts = {});

/// Log-likelihood of one exit path: sum_r log p(y_r | h_r^{path[r]}).
Var path_log_likelihood(Model& model, Tape& tape, const PackedBatch& batch,
                        const std::vector<int>& path);
/// Uniform i.i.d. exit per decoder row.
std::vector<int> sample_exit_path(std::size_t rows, int blocks, std::mt19937_64& rng);
/// L_dec = -(1/M) sum_m LL(path_m).
Var mixed_loss(Model& model, Tape& tape, const PackedBatch& batch, int paths, std::mt19937_64& rng);

/// Same value as aligned_loss; gradients follow the gradient-scaling recipe.
AlignedLoss gradient_scaled_forward(Model& model, Tape& tape, const PackedBatch& batch,
                                    const LossWeights& weights, const GradScaleConfig& gs);

/// Rescales every gradient when the global L2 norm exceeds g_clip. Returns the
/// norm before clipping.
double clip_renorm(ParameterStore& params, double g_clip);

/// Per-unit oracle targets for one aligned run (one unit per row for token
/// mechanisms, one per sentence for the sequence mechanism).
std::vector<int> oracle_targets(const DecoderRun& run, const PackedBatch& batch,
                                const HaltingConfig& hc);

/// L_exit for the configured mechanism; the zero constant for fixed/confidence.
Var exit_loss_term(Model& model, Tape& tape, const DecoderRun& run, const PackedBatch& batch,
                   const HaltingConfig& hc, const std::vector<int>& targets);

class AdamOptimizer {
 public:
  AdamOptimizer(const ParameterStore& params, const TrainConfig& cfg);
  double rate(long step) const;
  void step(ParameterStore& params);
  long steps() const noexcept { return step_; }

 private:
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  long step_ = 0;
  double lr_, warmup_, b1_, b2_, eps_;
};

struct TrainRecord {
  int update = 0;
  int stage = 1;
  double l_dec = 0.0;  // per target token
  double l_exit = 0.0;
  std::vector<double> accuracy;  // teacher-forced, per exit
};

struct TrainReport {
  std::vector<TrainRecord> records;
  int blocks = 0;
  std::string csv() const;
};

using TrainCallback = std::function<void(const TrainRecord&)>;

/// Optimizer, batch order and report of one training run. Copying a trainer
/// (with a copy of its model) branches the run, e.g. several stage-2
/// continuations from one stage-1 model.
class Trainer {
 public:
  Trainer(const Model& model, std::shared_ptr<const std::vector<SequencePair>> corpus, TrainConfig tc);

  /// Runs `updates` updates of stage 1 (alpha = 0) or stage 2 (alpha * L_exit).
  void run(Model& model, const HaltingConfig& hc, int stage, int updates, const TrainCallback& on_log = {});

  TrainConfig& config() noexcept { return tc_; }
  const TrainReport& report() const noexcept { return report_; }
  int updates_done() const noexcept { return update_; }

 private:
  PackedBatch next_batch();

  std::shared_ptr<const std::vector<SequencePair>> corpus_;
  TrainConfig tc_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  AdamOptimizer adam_;
  TrainReport report_;
  int update_ = 0;
};

/// Stage 1 trains with alpha = 0, stage 2 adds alpha * L_exit with oracle
/// targets recomputed from the current model every update.
TrainReport train(Model& model, const std::vector<SequencePair>& corpus, const TrainConfig& tc,
                  const HaltingConfig& hc, const TrainCallback& on_log = {});

/// One optimization step of either stage.
struct StepResult {
  double l_dec = 0.0;
  double l_exit = 0.0;
  std::vector<double> correct;  // per exit
  std::size_t tokens = 0;
};
StepResult training_step(Model& model, const PackedBatch& batch, const TrainConfig& tc,
                         const HaltingConfig& hc, bool with_exit_loss, std::mt19937_64& rng);

}  // namespace exitdepth
