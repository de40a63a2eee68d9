#include "exitdepth/experiment.hpp"

#include <fstream>

#include "exitdepth/checkpoint.hpp"
#include "exitdepth/errors.hpp"
#include "exitdepth/metrics.hpp"
#include "json.hpp"

namespace exitdepth {

using nlohmann::json;

namespace {

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw UsageError("cannot write " + path.string());
  os << text;
}

bool needs_head(Mechanism m) {
  return m == Mechanism::sequence || m == Mechanism::token_multinomial || m == Mechanism::token_geometric;
}

std::string tau_id(const std::vector<double>& tau) {
  std::string id = "tau=";
  char buf[32];
  for (std::size_t i = 0; i < tau.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%s%.4f", i ? "/" : "", tau[i]);
    id += buf;
  }
  return id;
}

}  // namespace

void ExperimentConfig::validate() const {
  task.validate();
  model.validate();
  if (model.src_vocab < task.vocab || model.tgt_vocab < task.vocab) {
    throw UsageError("experiment: model vocabulary smaller than the task vocabulary");
  }
  train.validate(model.blocks);
  halting.validate(model.blocks);
  for (Mechanism m : decode_mechanisms) {
    if (needs_head(m) && m != halting.mechanism) {
      throw UsageError("experiment: decoding with " + to_string(m) + " needs a halting head trained for it, but halting.mechanism is " +
                       to_string(halting.mechanism));
    }
  }
  if (tune) {
    tuner.validate(model.blocks);
    if (tuner.mechanism == Mechanism::token_geometric && halting.mechanism != Mechanism::token_geometric) {
      throw UsageError("experiment: tuning geometric thresholds needs geometric halting training");
    }
  }
  if (!lambda_sweep.empty() && !needs_head(halting.mechanism)) {
    throw UsageError("experiment: a lambda sweep needs a trained halting mechanism");
  }
  for (double l : lambda_sweep) {
    if (l < 0.0) throw UsageError("experiment: lambda must be >= 0");
  }
}

static ExperimentConfig parse_experiment(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw UsageError(std::string("experiment config: ") + e.what());
  }
  ExperimentConfig c;
  if (j.contains("task")) {
    const json& t = j["task"];
    if (t.contains("kind")) c.task.kind = parse_task(t["kind"].get<std::string>());
    read(t, "vocab", c.task.vocab);
    read(t, "min_len", c.task.min_len);
    read(t, "max_len", c.task.max_len);
    read(t, "train_size", c.task.train_size);
    read(t, "valid_size", c.task.valid_size);
    read(t, "test_size", c.task.test_size);
    read(t, "window", c.task.window);
    read(t, "seed", c.task.seed);
  }
  if (j.contains("model")) {
    c.model = model_config_from_json(j["model"].dump());
  } else {
    c.model.src_vocab = c.model.tgt_vocab = c.task.vocab;
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    if (t.contains("mode")) c.train.mode = parse_train_mode(t["mode"].get<std::string>());
    read(t, "paths", c.train.paths);
    read(t, "alpha", c.train.alpha);
    read(t, "g_clip", c.train.g_clip);
    read(t, "learning_rate", c.train.learning_rate);
    read(t, "warmup", c.train.warmup);
    read(t, "stage1_updates", c.train.stage1_updates);
    read(t, "stage2_updates", c.train.stage2_updates);
    read(t, "batch_size", c.train.batch_size);
    read(t, "log_every", c.train.log_every);
    read(t, "seed", c.train.seed);
    if (t.contains("weights")) c.train.weights.scheme = parse_weight_scheme(t["weights"].get<std::string>());
    if (t.contains("omega")) c.train.weights = LossWeights::custom(t["omega"].get<std::vector<double>>());
    if (t.contains("grad_scale")) {
      const json& g = t["grad_scale"];
      read(g, "enabled", c.train.grad_scale.enabled);
      read(g, "gamma", c.train.grad_scale.gamma);
      read(g, "top_block_unit", c.train.grad_scale.top_block_unit);
      read(g, "gammas", c.train.grad_scale.gammas);
    }
  }
  if (j.contains("halting")) {
    const json& h = j["halting"];
    if (h.contains("mechanism")) c.halting.mechanism = parse_mechanism(h["mechanism"].get<std::string>());
    if (h.contains("oracle")) c.halting.oracle = parse_oracle(h["oracle"].get<std::string>());
    read(h, "lambda", c.halting.lambda);
    read(h, "sigma", c.halting.sigma);
    read(h, "alpha", c.halting.alpha);
    read(h, "thresholds", c.halting.thresholds);
    read(h, "chi_threshold", c.halting.default_chi_threshold);
    c.train.alpha = c.halting.alpha;
  }
  if (j.contains("decode")) {
    const json& d = j["decode"];
    if (d.contains("mechanisms")) {
      for (const auto& m : d["mechanisms"]) c.decode_mechanisms.push_back(parse_mechanism(m.get<std::string>()));
    }
    read(d, "max_len", c.max_len);
    read(d, "eval_sentences", c.eval_sentences);
  }
  if (j.contains("tuner")) {
    const json& t = j["tuner"];
    c.tune = t.value("enabled", true);
    if (t.contains("mechanism")) c.tuner.mechanism = parse_mechanism(t["mechanism"].get<std::string>());
    read(t, "iterations", c.tuner.iterations);
    read(t, "segments", c.tuner.segments);
    read(t, "seed", c.tuner.seed);
    if (t.value("metric", std::string("token_accuracy")) == "bleu") c.tuner.metric = TuneMetric::bleu;
  }
  read(j, "lambda_sweep", c.lambda_sweep);
  if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
  c.validate();
  return c;
}

ExperimentConfig experiment_from_json(const std::string& text) {
  try {
    return parse_experiment(text);
  } catch (const json::exception& e) {
    throw UsageError(std::string("experiment config: ") + e.what());
  }
}

std::string experiment_to_json(const ExperimentConfig& c) {
  json j;
  j["task"] = {{"kind", to_string(c.task.kind)}, {"vocab", c.task.vocab},           {"min_len", c.task.min_len},
               {"max_len", c.task.max_len},      {"train_size", c.task.train_size}, {"valid_size", c.task.valid_size},
               {"test_size", c.task.test_size},  {"window", c.task.window},         {"seed", c.task.seed}};
  j["model"] = json::parse(model_config_json(c.model));
  j["train"] = {{"mode", to_string(c.train.mode)},
                {"paths", c.train.paths},
                {"alpha", c.train.alpha},
                {"g_clip", c.train.g_clip},
                {"learning_rate", c.train.learning_rate},
                {"warmup", c.train.warmup},
                {"stage1_updates", c.train.stage1_updates},
                {"stage2_updates", c.train.stage2_updates},
                {"batch_size", c.train.batch_size},
                {"log_every", c.train.log_every},
                {"seed", c.train.seed},
                {"weights", to_string(c.train.weights.scheme)},
                {"grad_scale",
                 {{"enabled", c.train.grad_scale.enabled},
                  {"gamma", c.train.grad_scale.gamma},
                  {"top_block_unit", c.train.grad_scale.top_block_unit},
                  {"gammas", c.train.grad_scale.gammas}}}};
  if (c.train.weights.scheme == WeightScheme::custom) j["train"]["omega"] = c.train.weights.omega;
  j["halting"] = {{"mechanism", to_string(c.halting.mechanism)},
                  {"oracle", to_string(c.halting.oracle)},
                  {"lambda", c.halting.lambda},
                  {"sigma", c.halting.sigma},
                  {"alpha", c.halting.alpha},
                  {"thresholds", c.halting.thresholds},
                  {"chi_threshold", c.halting.default_chi_threshold}};
  std::vector<std::string> mechs;
  for (Mechanism m : c.decode_mechanisms) mechs.push_back(to_string(m));
  j["decode"] = {{"mechanisms", mechs}, {"max_len", c.max_len}, {"eval_sentences", c.eval_sentences}};
  j["tuner"] = {{"enabled", c.tune},
                {"mechanism", to_string(c.tuner.mechanism)},
                {"iterations", c.tuner.iterations},
                {"segments", c.tuner.segments},
                {"seed", c.tuner.seed},
                {"metric", c.tuner.metric == TuneMetric::bleu ? "bleu" : "token_accuracy"}};
  j["lambda_sweep"] = c.lambda_sweep;
  j["output_dir"] = c.output_dir.string();
  return j.dump(2);
}

Evaluation evaluate(const Model& model, const std::vector<SequencePair>& data, const DecodeConfig& cfg,
                    const std::string& config_id) {
  if (data.empty()) throw UsageError("evaluate: empty dataset");
  Evaluation ev;
  std::vector<std::vector<int>> hyps, refs;
  for (const auto& pair : data) {
    ev.traces.push_back(decode(model, pair.source, cfg));
    hyps.push_back(ev.traces.back().hypothesis());
    refs.push_back(pair.target);
  }
  const FlopsParams fp = FlopsParams::from(model.config());
  ev.row.mechanism = to_string(cfg.mechanism);
  ev.row.config_id = config_id;
  ev.row.ae = average_exit(ev.traces);
  ev.row.avg_flops = average_flops_per_token(ev.traces, fp);
  ev.row.token_accuracy = token_accuracy(hyps, refs);
  ev.row.bleu = bleu(hyps, refs).score;
  return ev;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const int N = cfg.model.blocks;
  std::filesystem::create_directories(cfg.output_dir / "corpus");
  write_text(cfg.output_dir / "config.json", experiment_to_json(cfg));

  const Corpus corpus = generate_corpus(cfg.task);
  write_pairs(cfg.output_dir / "corpus" / "train", corpus.train);
  write_pairs(cfg.output_dir / "corpus" / "valid", corpus.valid);
  write_pairs(cfg.output_dir / "corpus" / "test", corpus.test);
  std::vector<SequencePair> test = corpus.test;
  if (cfg.eval_sentences > 0 && test.size() > cfg.eval_sentences) test.resize(cfg.eval_sentences);
  if (test.empty()) throw UsageError("experiment: empty test split");

  ExperimentResult result;
  std::ofstream traces(cfg.output_dir / "traces.jsonl");
  auto record = [&](const Evaluation& ev) {
    result.rows.push_back(ev.row);
    for (const auto& tr : ev.traces) traces << trace_json_line(tr, ev.row.config_id) << '\n';
  };
  auto decode_cfg = [&](Mechanism m) {
    DecodeConfig d;
    d.mechanism = m;
    d.max_len = cfg.max_len;
    d.chi_threshold = cfg.halting.default_chi_threshold;
    if (m == Mechanism::token_geometric) d.thresholds = cfg.halting.thresholds;
    if (m == Mechanism::confidence) {
      d.thresholds = cfg.halting.thresholds.empty() ? std::vector<double>(static_cast<std::size_t>(N - 1), 0.9)
                                                    : cfg.halting.thresholds;
    }
    return d;
  };

  Model model(cfg.model);
  Trainer trainer(model, std::make_shared<const std::vector<SequencePair>>(corpus.train), cfg.train);
  trainer.run(model, cfg.halting, 1, cfg.train.stage1_updates);

  if (!cfg.lambda_sweep.empty()) {
    for (double lambda : cfg.lambda_sweep) {
      Model branch = model;
      Trainer branch_trainer = trainer;
      HaltingConfig hc = cfg.halting;
      hc.lambda = lambda;
      branch_trainer.run(branch, hc, 2, cfg.train.stage2_updates);
      char id[48];
      std::snprintf(id, sizeof id, "lambda=%g", lambda);
      record(evaluate(branch, test, decode_cfg(cfg.halting.mechanism), id));
    }
  }

  trainer.run(model, cfg.halting, 2, cfg.train.stage2_updates);
  result.training = trainer.report();
  write_text(cfg.output_dir / "training.csv", result.training.csv());
  save_checkpoint(model, cfg.output_dir / "model.json");

  for (int n = 1; n <= N; ++n) {
    DecodeConfig d = decode_cfg(Mechanism::fixed);
    d.fixed_exit = n;
    record(evaluate(model, test, d, "n=" + std::to_string(n)));
  }
  for (Mechanism m : cfg.decode_mechanisms) {
    if (m == Mechanism::fixed) continue;
    record(evaluate(model, test, decode_cfg(m), m == Mechanism::confidence || m == Mechanism::token_geometric
                                                     ? tau_id(decode_cfg(m).thresholds)
                                                     : "default"));
  }

  if (cfg.tune) {
    TunerConfig tc = cfg.tuner;
    if (tc.seeded.empty()) tc.seeded.push_back(std::vector<double>(static_cast<std::size_t>(N - 1), 0.0));
    result.pareto = random_search(model, corpus.valid, tc);
    write_text(cfg.output_dir / "pareto.csv", pareto_csv(result.pareto));
    for (const auto& cand : result.pareto.kept) {
      DecodeConfig d = decode_cfg(tc.mechanism);
      d.thresholds = cand.tau;
      record(evaluate(model, test, d, "tuned:" + tau_id(cand.tau)));
    }
  }
  traces.close();
  write_text(cfg.output_dir / "report.csv", report_csv(result.rows));

  for (const char* f : {"config.json", "training.csv", "model.json", "traces.jsonl", "report.csv"}) {
    result.files.push_back(cfg.output_dir / f);
  }
  if (cfg.tune) result.files.push_back(cfg.output_dir / "pareto.csv");
  return result;
}

}  // namespace exitdepth
