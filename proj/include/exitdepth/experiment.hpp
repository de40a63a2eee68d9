#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "exitdepth/corpus.hpp"
#include "exitdepth/cost.hpp"
#include "exitdepth/decoding.hpp"
#include "exitdepth/halting.hpp"
#include "exitdepth/model.hpp"
#include "exitdepth/training.hpp"
#include "exitdepth/tuner.hpp"

namespace exitdepth {

struct ExperimentConfig {
  SyntheticTask task;
  ModelConfig model;
  TrainConfig train;
  HaltingConfig halting;
  // Adaptive mechanisms decoded on the test set besides the fixed-exit sweep.
  std::vector<Mechanism> decode_mechanisms;
  int max_len = 0;
  bool tune = false;
  TunerConfig tuner;
  // Non-empty: one stage-2 continuation per lambda from the shared stage-1 model.
  std::vector<double> lambda_sweep;
  std::size_t eval_sentences = 0;  // 0: the whole test split
  std::filesystem::path output_dir = "run";

  /// Cross-field consistency.
  void validate() const;
};

ExperimentConfig experiment_from_json(const std::string& text);
std::string experiment_to_json(const ExperimentConfig& cfg);

struct Evaluation {
  ReportRow row;
  std::vector<DecodeTrace> traces;
};

/// Decodes every pair and scores the hypotheses against the references.
Evaluation evaluate(const Model& model, const std::vector<SequencePair>& data, const DecodeConfig& cfg,
                    const std::string& config_id);

struct ExperimentResult {
  TrainReport training;
  std::vector<ReportRow> rows;
  ParetoSet pareto;
  std::vector<std::filesystem::path> files;
};

/// Generates data, trains both stages, decodes the test split under each fixed
/// exit and each configured mechanism, tunes thresholds, and writes
/// training.csv, report.csv, traces.jsonl, pareto.csv and model.json.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

}  // namespace exitdepth
