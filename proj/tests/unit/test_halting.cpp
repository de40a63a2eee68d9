#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "exitdepth/errors.hpp"
#include "exitdepth/halting.hpp"
#include "exitdepth/model.hpp"
#include "json.hpp"

using namespace exitdepth;

namespace {

ModelConfig tiny(int blocks = 4) {
  ModelConfig c;
  c.blocks = blocks;
  c.encoder_layers = 1;
  c.d_enc = 4;
  c.d_dec = 4;
  c.d_ffn = 8;
  c.heads = 1;
  c.src_vocab = 8;
  c.tgt_vocab = 8;
  c.seed = 11;
  return c;
}

Tensor scores_matrix(std::initializer_list<std::initializer_list<double>> rows) { return Tensor::matrix(rows); }

// Independent brute force: enumerate n, keep the first strict maximum.
int brute_oracle(const std::vector<double>& s, double lambda) {
  int best = 1;
  for (int n = 2; n <= static_cast<int>(s.size()); ++n) {
    if (s[n - 1] - lambda * n > s[best - 1] - lambda * best) best = n;
  }
  return best;
}

}  // namespace

TEST_CASE("mechanism and oracle names round trip") {
  for (auto m : {Mechanism::fixed, Mechanism::sequence, Mechanism::token_multinomial, Mechanism::token_geometric,
                 Mechanism::confidence}) {
    CHECK(parse_mechanism(to_string(m)) == m);
  }
  CHECK(parse_oracle(to_string(OracleKind::likelihood)) == OracleKind::likelihood);
  CHECK(parse_oracle(to_string(OracleKind::correctness)) == OracleKind::correctness);
  CHECK_THROWS_AS(parse_mechanism("bogus"), UsageError);
  CHECK_THROWS_AS(parse_oracle("bogus"), UsageError);
}

TEST_CASE("exit distributions are normalized") {
  Model m(tiny());
  EncoderOutput enc = m.encode(std::vector<int>{4, 5, 6});
  ExitDistribution q = seq_exit_distribution(m, enc);
  CHECK(q.blocks() == 4);
  double total = 0.0;
  for (double p : q.probs) total += p;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<double> h1 = {0.3, -0.2, 0.5, 0.1};
  ExitDistribution r = tok_multinomial_distribution(m, h1);
  total = 0.0;
  for (double p : r.probs) total += p;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

  const std::vector<double> extreme = {1000.0, -1000.0, 0.0};
  ExitDistribution e = softmax_distribution(extreme);
  CHECK(std::isfinite(e.probs[0]));
  CHECK(e.probs[0] == doctest::Approx(1.0));
}

TEST_CASE("argmax ties go to the lowest block") {
  ExitDistribution q{{0.25, 0.25, 0.25, 0.25}};
  CHECK(q.argmax() == 1);
  ExitDistribution r{{0.1, 0.4, 0.4, 0.1}};
  CHECK(r.argmax() == 2);
}

TEST_CASE("halting probability is a sigmoid of the block state") {
  Model m(tiny());
  std::vector<double> h = {0.1, 0.2, -0.3, 0.4};
  const Tensor& w = m.params().get("halt.geo.w").value;
  const double b = m.params().get("halt.geo.b").value[0];
  double z = b;
  for (std::size_t i = 0; i < 4; ++i) z += w[i] * h[i];
  const double chi = halting_probability(m, 2, h);
  CHECK(chi == doctest::Approx(1.0 / (1.0 + std::exp(-z))).epsilon(1e-14));
  CHECK(chi > 0.0);
  CHECK(chi < 1.0);
  CHECK_THROWS_AS(halting_probability(m, 4, h), UsageError);
  CHECK_THROWS_AS(halting_probability(m, 0, h), UsageError);
}

TEST_CASE("geometric-like distribution") {
  SUBCASE("hand values") {
    const std::vector<double> chis = {0.5, 0.5, 0.5};
    ExitDistribution q = geometric_like_distribution(chis);
    REQUIRE(q.blocks() == 4);
    CHECK(q.prob(1) == doctest::Approx(0.5));
    CHECK(q.prob(2) == doctest::Approx(0.25));
    CHECK(q.prob(3) == doctest::Approx(0.125));
    CHECK(q.prob(4) == doctest::Approx(0.125));
  }
  SUBCASE("chi = 1 at the first block") {
    const std::vector<double> chis = {1.0, 0.3, 0.6};
    ExitDistribution q = geometric_like_distribution(chis);
    CHECK(q.prob(1) == 1.0);
    for (int n = 2; n <= 4; ++n) CHECK(q.prob(n) == 0.0);
  }
  SUBCASE("chi = 0 everywhere") {
    const std::vector<double> chis = {0.0, 0.0, 0.0};
    ExitDistribution q = geometric_like_distribution(chis);
    CHECK(q.prob(4) == 1.0);
  }
  SUBCASE("random chis sum to one") {
    const std::vector<double> chis = {0.13, 0.77, 0.42, 0.91, 0.05};
    ExitDistribution q = geometric_like_distribution(chis);
    double total = 0.0;
    for (double p : q.probs) total += p;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
  }
  SUBCASE("N = 1") {
    ExitDistribution q = geometric_like_distribution(std::vector<double>{});
    REQUIRE(q.blocks() == 1);
    CHECK(q.prob(1) == 1.0);
  }
  CHECK_THROWS_AS(geometric_like_distribution(std::vector<double>{1.2}), UsageError);
  CHECK_THROWS_AS(geometric_like_distribution(std::vector<double>{-0.1}), UsageError);
}

TEST_CASE("rbf smoothing") {
  CHECK(rbf_kernel(3, 3, 2.0) == 1.0);
  CHECK(rbf_kernel(0, 2, 2.0) == doctest::Approx(std::exp(-2.0)));

  const std::vector<double> s = {1.0, -2.0, 0.5, 3.0};
  CHECK(rbf_smooth(s, 0.0) == s);
  CHECK(rbf_smooth(s, -1.0) == s);

  const auto tiny_sigma = rbf_smooth(s, 1e-9);
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(tiny_sigma[i] == doctest::Approx(s[i]).epsilon(1e-12));

  const std::vector<double> constant(5, 2.0);
  const auto wide = rbf_smooth(constant, 1e9);
  for (double v : wide) CHECK(v == doctest::Approx(10.0).epsilon(1e-6));

  const std::vector<double> pair = {1.0, 0.0};
  const auto sm = rbf_smooth(pair, 1.0);
  CHECK(sm[0] == doctest::Approx(1.0));
  CHECK(sm[1] == doctest::Approx(std::exp(-1.0)));
}

TEST_CASE("sequence oracle") {
  const std::vector<double> s = {-10.0, -4.0, -3.5, -3.4};
  CHECK(oracle_sequence(s, 0.0).index == 4);
  CHECK(oracle_sequence(s, 1.0).index == 2);
  CHECK(oracle_sequence(s, 100.0).index == 1);

  const std::vector<double> tie = {1.0, 2.0, 2.0};
  CHECK(oracle_sequence(tie, 0.0).index == 2);

  const std::vector<double> nan_scores = {1.0, std::numeric_limits<double>::quiet_NaN()};
  CHECK_THROWS_AS(oracle_sequence(nan_scores, 0.0), NumericError);

  for (double lambda : {0.0, 0.1, 0.5, 2.0}) {
    const std::vector<double> r = {-3.1, -2.2, -2.15, -2.149, -5.0, -0.5};
    CHECK(oracle_sequence(r, lambda).index == brute_oracle(r, lambda));
  }
}

TEST_CASE("token oracle smooths each block column") {
  Tensor scores = scores_matrix({{-5.0, -1.0, -0.9}, {-0.1, -0.2, -0.3}, {-4.0, -4.0, -0.1}});
  auto raw = oracle_token(scores, 0.0, 0.0);
  REQUIRE(raw.size() == 3);
  CHECK(raw[0].index == 3);
  CHECK(raw[1].index == 1);
  CHECK(raw[2].index == 3);

  auto penalized = oracle_token(scores, 0.0, 0.5);
  CHECK(penalized[0].index == 2);

  // Smoothed oracle recomputed column by column.
  const double sigma = 1.5;
  auto smoothed = oracle_token(scores, sigma, 0.1);
  for (std::size_t t = 0; t < 3; ++t) {
    std::vector<double> row(3);
    for (std::size_t n = 0; n < 3; ++n) {
      for (std::size_t u = 0; u < 3; ++u) {
        const double dt = static_cast<double>(t) - static_cast<double>(u);
        row[n] += std::exp(-dt * dt / sigma) * scores(u, n);
      }
    }
    CHECK(smoothed[t].index == brute_oracle(row, 0.1));
  }
}

TEST_CASE("token scores from an aligned run") {
  Model m(tiny(3));
  std::vector<SequencePair> pairs = {{{4, 5}, {6, 7}}, {{5, 6, 7}, {4}}};
  PackedBatch batch = PackedBatch::build(pairs);
  Tape tape;
  DecoderRun run = m.run_frozen(tape, batch);

  Tensor ll = token_scores(run, batch, 1, OracleKind::likelihood);
  CHECK(ll.shape() == std::vector<std::size_t>{2, 3});
  // Sentence 1 rows 3..4 predict {4, eos}.
  for (std::size_t n = 0; n < 3; ++n) {
    CHECK(ll(0, n) == run.exit_log_probs[n].value()(3, 4));
    CHECK(ll(1, n) == run.exit_log_probs[n].value()(4, 2));
    CHECK(ll(0, n) <= 0.0);
  }

  Tensor c = token_scores(run, batch, 0, OracleKind::correctness);
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t n = 0; n < 3; ++n) {
      const auto row = run.exit_log_probs[n].value().row(t);
      std::size_t best = 0;
      for (std::size_t v = 1; v < row.size(); ++v) {
        if (row[v] > row[best]) best = v;
      }
      CHECK(c(t, n) == (static_cast<int>(best) == batch.targets[t] ? 1.0 : 0.0));
    }
  }

  const auto seq = sequence_scores(ll);
  for (std::size_t n = 0; n < 3; ++n) CHECK(seq[n] == doctest::Approx(ll(0, n) + ll(1, n)));
}

TEST_CASE("exit loss") {
  std::vector<OracleTarget> targets = {{2}, {1}};
  std::vector<ExitDistribution> dists = {ExitDistribution{{0.2, 0.5, 0.3}}, ExitDistribution{{0.6, 0.3, 0.1}}};
  ExitLoss l = exit_loss(targets, dists);
  CHECK(l.value == doctest::Approx(-std::log(0.5) - std::log(0.6)));
  CHECK_FALSE(l.clamped);

  std::vector<OracleTarget> dirac = {{3}};
  std::vector<ExitDistribution> perfect = {ExitDistribution{{0.0, 0.0, 1.0}}};
  CHECK(exit_loss(dirac, perfect).value == 0.0);

  std::vector<ExitDistribution> zero = {ExitDistribution{{1.0, 0.0, 0.0}}};
  ExitLoss clamped = exit_loss(dirac, zero);
  CHECK(std::isfinite(clamped.value));
  CHECK(clamped.clamped);
  CHECK(clamped.value == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("combined loss") {
  CHECK(combined_loss(2.0, 3.0, 0.0) == 2.0);
  CHECK(combined_loss(2.0, 3.0, 0.5) == 3.5);
  CHECK_THROWS_AS(combined_loss(2.0, 3.0, -1.0), UsageError);
  Tape tape;
  Var a = tape.constant(Tensor::scalar(2.0));
  Var b = tape.constant(Tensor::scalar(3.0));
  CHECK(combined_loss(a, b, 0.5).item() == 3.5);
}

TEST_CASE("halting config validation") {
  HaltingConfig hc;
  hc.validate(4);
  hc.thresholds = {0.5, 0.5};
  CHECK_THROWS_AS(hc.validate(4), UsageError);
  hc.thresholds = {0.5, 0.5, 1.5};
  CHECK_THROWS_AS(hc.validate(4), UsageError);
  hc.thresholds.clear();
  hc.lambda = -0.1;
  CHECK_THROWS_AS(hc.validate(4), UsageError);
}

TEST_CASE("oracle trace JSON") {
  OracleTraceEntry e;
  e.source = {4, 5};
  e.target = {6};
  e.scores = Tensor::matrix({{-1.0, -0.5}, {-0.2, -0.1}});
  e.smoothed = e.scores;
  e.chosen = {{2}, {2}};
  HaltingConfig hc;
  hc.lambda = 0.25;
  auto j = nlohmann::json::parse(oracle_trace_json(std::span<const OracleTraceEntry>(&e, 1), hc));
  CHECK(j["lambda"].get<double>() == 0.25);
  REQUIRE(j["sentences"].size() == 1);
  CHECK(j["sentences"][0]["chosen"].get<std::vector<int>>() == std::vector<int>{2, 2});
}
