// exitdepth command line: generate, train, decode, tune, report, run.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "exitdepth/checkpoint.hpp"
#include "exitdepth/corpus.hpp"
#include "exitdepth/errors.hpp"
#include "exitdepth/experiment.hpp"

using namespace exitdepth;
namespace fs = std::filesystem;

namespace {

// Relative output paths land under $EXITDEPTH_OUTPUT_ROOT when it is set.
fs::path output_path(const std::string& p) {
  fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv("EXITDEPTH_OUTPUT_ROOT"); root && *root) return fs::path(root) / path;
  return path;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw UsageError("cannot write " + path.string());
  os << text;
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct Options {
  std::string config;
  std::string out;
  std::string data;
  std::string model_path;
  std::string input;
  std::string task = "copy";
  int vocab = 16, min_len = 1, max_len = 12, train_size = 10000, valid_size = 200, test_size = 200, window = 2;
  std::uint64_t seed = 1;
  int blocks = 4, d_model = 32, d_ffn = 64, heads = 2, encoder_layers = 2;
  std::string mode = "aligned";
  int paths = 1, stage1 = 5000, stage2 = 2000, batch = 32;
  double lr = 3e-3;
  std::string mechanism = "token_geometric", oracle = "likelihood", weights = "uniform";
  double lambda = 0.0, sigma = 0.0, alpha = 1.0, gamma = -1.0;
  int fixed_exit = 0, decode_max_len = 0, iterations = 200, segments = 6;
  double chi = 0.5;
  std::vector<double> thresholds;
  std::vector<std::string> mechanisms;
};

ExperimentConfig config_from(const Options& o) {
  ExperimentConfig c;
  if (!o.config.empty()) return experiment_from_json(read_file(o.config));
  c.task.kind = parse_task(o.task);
  c.task.vocab = o.vocab;
  c.task.min_len = o.min_len;
  c.task.max_len = o.max_len;
  c.task.train_size = o.train_size;
  c.task.valid_size = o.valid_size;
  c.task.test_size = o.test_size;
  c.task.window = o.window;
  c.task.seed = o.seed;
  c.model.blocks = o.blocks;
  c.model.encoder_layers = o.encoder_layers;
  c.model.d_enc = c.model.d_dec = o.d_model;
  c.model.d_ffn = o.d_ffn;
  c.model.heads = o.heads;
  c.model.src_vocab = c.model.tgt_vocab = o.vocab;
  c.model.seed = o.seed;
  c.train.mode = parse_train_mode(o.mode);
  c.train.paths = o.paths;
  c.train.stage1_updates = o.stage1;
  c.train.stage2_updates = o.stage2;
  c.train.batch_size = o.batch;
  c.train.learning_rate = o.lr;
  c.train.seed = o.seed;
  c.train.alpha = o.alpha;
  c.train.weights.scheme = parse_weight_scheme(o.weights);
  if (o.gamma >= 0.0) {
    c.train.grad_scale.enabled = true;
    c.train.grad_scale.gamma = o.gamma;
  }
  c.halting.mechanism = parse_mechanism(o.mechanism);
  c.halting.oracle = parse_oracle(o.oracle);
  c.halting.lambda = o.lambda;
  c.halting.sigma = o.sigma;
  c.halting.alpha = o.alpha;
  c.halting.thresholds = o.thresholds;
  c.halting.default_chi_threshold = o.chi;
  for (const auto& m : o.mechanisms) c.decode_mechanisms.push_back(parse_mechanism(m));
  c.max_len = o.decode_max_len;
  c.tuner.iterations = o.iterations;
  c.tuner.segments = o.segments;
  c.tuner.seed = o.seed;
  if (!o.out.empty()) c.output_dir = o.out;
  return c;
}

void add_task_flags(CLI::App* app, Options& o) {
  app->add_option("--task", o.task, "copy | reverse | mixed_difficulty");
  app->add_option("--vocab", o.vocab, "vocabulary size including 4 reserved ids");
  app->add_option("--min-len", o.min_len);
  app->add_option("--max-len", o.max_len);
  app->add_option("--train-size", o.train_size);
  app->add_option("--valid-size", o.valid_size);
  app->add_option("--test-size", o.test_size);
  app->add_option("--window", o.window, "k for mixed_difficulty");
  app->add_option("--seed", o.seed);
}

void add_model_flags(CLI::App* app, Options& o) {
  app->add_option("--blocks", o.blocks, "decoder blocks N");
  app->add_option("--d-model", o.d_model);
  app->add_option("--d-ffn", o.d_ffn);
  app->add_option("--heads", o.heads);
  app->add_option("--encoder-layers", o.encoder_layers);
}

void add_halting_flags(CLI::App* app, Options& o) {
  app->add_option("--mechanism", o.mechanism, "fixed | sequence | token_multinomial | token_geometric | confidence");
  app->add_option("--oracle", o.oracle, "likelihood | correctness");
  app->add_option("--lambda", o.lambda);
  app->add_option("--sigma", o.sigma, "RBF width, 0 disables smoothing");
  app->add_option("--alpha", o.alpha);
  app->add_option("--thresholds", o.thresholds, "tau_1..tau_{N-1}")->delimiter(',');
  app->add_option("--chi", o.chi, "default geometric exit threshold");
}

DecodeConfig decode_config(const Options& o, int blocks) {
  DecodeConfig d;
  d.mechanism = parse_mechanism(o.mechanism);
  d.fixed_exit = o.fixed_exit;
  d.thresholds = o.thresholds;
  d.chi_threshold = o.chi;
  d.max_len = o.decode_max_len;
  if (d.mechanism == Mechanism::confidence && d.thresholds.empty()) {
    d.thresholds.assign(static_cast<std::size_t>(blocks - 1), 0.9);
  }
  return d;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Depth-adaptive sequence-to-sequence decoding on synthetic tasks"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("generate", "write a synthetic corpus as .src/.tgt files");
  add_task_flags(gen, o);
  gen->add_option("--out", o.out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train a model (stage 1, then stage 2 with the exit loss)");
  tr->add_option("--config", o.config, "experiment JSON; flags below are ignored when given");
  add_task_flags(tr, o);
  add_model_flags(tr, o);
  add_halting_flags(tr, o);
  tr->add_option("--data", o.data, "corpus directory with train.src/train.tgt (default: generate)");
  tr->add_option("--mode", o.mode, "aligned | mixed");
  tr->add_option("--paths", o.paths, "M for mixed training");
  tr->add_option("--stage1", o.stage1);
  tr->add_option("--stage2", o.stage2);
  tr->add_option("--batch", o.batch);
  tr->add_option("--lr", o.lr);
  tr->add_option("--weights", o.weights, "uniform | n | sqrt_n | inv_sqrt_n | inv_n");
  tr->add_option("--gamma", o.gamma, "enable gradient scaling with this base ratio");
  tr->add_option("--out", o.out, "output directory")->required();

  auto* dec = app.add_subcommand("decode", "decode sources and write JSON-lines traces");
  dec->add_option("--model", o.model_path)->required();
  dec->add_option("--input", o.input, "source file, one sentence per line")->required();
  add_halting_flags(dec, o);
  dec->add_option("--fixed-exit", o.fixed_exit, "exit for --mechanism fixed (0: top block)");
  dec->add_option("--max-len", o.decode_max_len, "0: 2|x|+8");
  dec->add_option("--out", o.out, "trace file (default: stdout)");

  auto* tune = app.add_subcommand("tune", "random search over exit thresholds");
  tune->add_option("--model", o.model_path)->required();
  tune->add_option("--data", o.data, "corpus stem, e.g. dir/valid")->required();
  tune->add_option("--mechanism", o.mechanism, "confidence | token_geometric");
  tune->add_option("--iterations", o.iterations);
  tune->add_option("--segments", o.segments);
  tune->add_option("--seed", o.seed);
  tune->add_option("--out", o.out, "Pareto CSV")->required();

  auto* rep = app.add_subcommand("report", "fixed-exit sweep plus adaptive mechanisms on a test set");
  rep->add_option("--model", o.model_path)->required();
  rep->add_option("--data", o.data, "corpus stem, e.g. dir/test")->required();
  rep->add_option("--mechanisms", o.mechanisms, "adaptive mechanisms to add")->delimiter(',');
  rep->add_option("--thresholds", o.thresholds)->delimiter(',');
  rep->add_option("--chi", o.chi);
  rep->add_option("--out", o.out, "report CSV")->required();

  auto* run = app.add_subcommand("run", "full experiment from a JSON config");
  run->add_option("--config", o.config)->required();
  run->add_option("--out", o.out, "override output_dir");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      ExperimentConfig c = config_from(o);
      const Corpus corpus = generate_corpus(c.task);
      const fs::path dir = output_path(o.out);
      fs::create_directories(dir);
      write_pairs(dir / "train", corpus.train);
      write_pairs(dir / "valid", corpus.valid);
      write_pairs(dir / "test", corpus.test);
      std::cout << "wrote " << corpus.train.size() << "/" << corpus.valid.size() << "/" << corpus.test.size()
                << " pairs to " << dir.string() << "\n";
    } else if (tr->parsed()) {
      ExperimentConfig c = config_from(o);
      c.output_dir = output_path(o.out);
      std::vector<SequencePair> data =
          o.data.empty() ? generate_corpus(c.task).train : read_pairs(fs::path(o.data) / "train");
      Model model(c.model);
      TrainReport rep = train(model, data, c.train, c.halting, [](const TrainRecord& r) {
        std::cerr << "update " << r.update << " stage " << r.stage << " L_dec " << r.l_dec << " L_exit " << r.l_exit
                  << " acc_N " << r.accuracy.back() << "\n";
      });
      fs::create_directories(c.output_dir);
      write_file(c.output_dir / "training.csv", rep.csv());
      save_checkpoint(model, c.output_dir / "model.json");
      write_file(c.output_dir / "config.json", experiment_to_json(c));
    } else if (dec->parsed()) {
      const Model model = load_checkpoint(o.model_path);
      const DecodeConfig d = decode_config(o, model.blocks());
      std::ostringstream lines;
      for (const auto& src : read_sequences(o.input)) lines << trace_json_line(decode(model, src, d)) << "\n";
      if (o.out.empty()) {
        std::cout << lines.str();
      } else {
        write_file(output_path(o.out), lines.str());
      }
    } else if (tune->parsed()) {
      const Model model = load_checkpoint(o.model_path);
      TunerConfig tc;
      tc.mechanism = parse_mechanism(o.mechanism);
      tc.iterations = o.iterations;
      tc.segments = o.segments;
      tc.seed = o.seed;
      tc.seeded.push_back(std::vector<double>(static_cast<std::size_t>(model.blocks() - 1), 0.0));
      const ParetoSet set = random_search(model, read_pairs(o.data), tc);
      write_file(output_path(o.out), pareto_csv(set));
      std::cout << set.kept.size() << " Pareto candidates from " << set.evaluated.size() << " evaluated\n";
    } else if (rep->parsed()) {
      const Model model = load_checkpoint(o.model_path);
      const auto data = read_pairs(o.data);
      std::vector<ReportRow> rows;
      for (int n = 1; n <= model.blocks(); ++n) {
        Options fo = o;
        fo.mechanism = "fixed";
        fo.fixed_exit = n;
        rows.push_back(evaluate(model, data, decode_config(fo, model.blocks()), "n=" + std::to_string(n)).row);
      }
      for (const auto& m : o.mechanisms) {
        Options mo = o;
        mo.mechanism = m;
        rows.push_back(evaluate(model, data, decode_config(mo, model.blocks()), "default").row);
      }
      write_file(output_path(o.out), report_csv(rows));
    } else if (run->parsed()) {
      ExperimentConfig c = experiment_from_json(read_file(o.config));
      c.output_dir = output_path(o.out.empty() ? c.output_dir.string() : o.out);
      const ExperimentResult res = run_experiment(c);
      for (const auto& f : res.files) std::cout << f.string() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
