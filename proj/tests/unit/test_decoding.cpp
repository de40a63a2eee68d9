#include <vector>

#include "doctest.h"
#include "exitdepth/cost.hpp"
#include "exitdepth/decoding.hpp"
#include "exitdepth/errors.hpp"
#include "json.hpp"

using namespace exitdepth;

namespace {

ModelConfig small(int blocks = 4) {
  ModelConfig c;
  c.blocks = blocks;
  c.encoder_layers = 1;
  c.d_enc = 8;
  c.d_dec = 8;
  c.d_ffn = 12;
  c.heads = 2;
  c.src_vocab = 10;
  c.tgt_vocab = 10;
  c.seed = 21;
  return c;
}

const std::vector<int> kSource = {4, 7, 9, 5, 6};

void check_all(const std::vector<int>& exits, int n) {
  REQUIRE_FALSE(exits.empty());
  for (int e : exits) CHECK(e == n);
}

}  // namespace

TEST_CASE("geometric decoding with forced halting probabilities") {
  Model m(small());
  m.params().get("halt.geo.w").value.fill(0.0);
  m.params().get("halt.geo.b").value[0] = 1e3;
  check_all(decode_geometric(m, kSource).exits, 1);
  m.params().get("halt.geo.b").value[0] = -1e3;
  check_all(decode_geometric(m, kSource).exits, 4);

  // chi = 0.5 exactly never exceeds a 0.5 threshold.
  m.params().get("halt.geo.b").value[0] = 0.0;
  check_all(decode_geometric(m, kSource, {}, 0.5).exits, 4);
  check_all(decode_geometric(m, kSource, {0.9, 0.4, 0.9}).exits, 2);
}

TEST_CASE("multinomial decoding follows the head's argmax") {
  Model m(small());
  m.params().get("halt.tok.w").value.fill(0.0);
  for (int k = 1; k <= 4; ++k) {
    Tensor& b = m.params().get("halt.tok.b").value;
    b.fill(0.0);
    b[static_cast<std::size_t>(k - 1)] = 50.0;
    check_all(decode_tok_multinomial(m, kSource).exits, k);
  }
}

TEST_CASE("sequence decoding plans one exit") {
  Model m(small());
  m.params().get("halt.seq.w").value.fill(0.0);
  m.params().get("halt.seq.b").value.fill(0.0);
  // Uniform q: the lowest block wins the tie.
  check_all(decode_seq(m, kSource).exits, 1);

  Model r(small());
  const int planned = sequence_exit(r, r.encode(kSource));
  const DecodeTrace seq = decode_seq(r, kSource);
  const DecodeTrace fixed = decode_fixed(r, kSource, planned);
  check_all(seq.exits, planned);
  CHECK(seq.tokens == fixed.tokens);
  CHECK(seq.confidences == fixed.confidences);
}

TEST_CASE("confidence thresholds") {
  Model m(small());
  check_all(decode_confidence(m, kSource, {0.0, 0.0, 0.0}).exits, 1);
  check_all(decode_confidence(m, kSource, {1.0, 1.0, 1.0}).exits, 4);
  check_all(decode_confidence(m, kSource, {1.0, 0.0, 1.0}).exits, 2);
  CHECK_THROWS_AS(decode_confidence(m, kSource, {0.5}), UsageError);
  const DecodeTrace t = decode_confidence(m, kSource, {1.0, 0.0, 1.0});
  CHECK(t.tokens == decode_fixed(m, kSource, 2).tokens);
}

TEST_CASE("counted FLOPs equal the closed form") {
  Model m(small());
  const FlopsParams p = FlopsParams::from(m.config());
  std::vector<DecodeTrace> traces = {
      decode_fixed(m, kSource, 3),
      decode_geometric(m, kSource, {0.45, 0.5, 0.55}),
      decode_tok_multinomial(m, kSource),
      decode_seq(m, kSource),
      decode_confidence(m, kSource, {0.2, 0.15, 0.1}),
  };
  for (const auto& t : traces) {
    CHECK(t.flops == step_flops(t, p));
    CHECK(t.flops.size() == t.exits.size());
  }
}

TEST_CASE("copied states satisfy the cache invariant") {
  Model m(small());
  for (const auto& tau : std::vector<std::vector<double>>{{0.45, 0.5, 0.55}, {0.0, 0.0, 0.0}, {0.3, 1.0, 0.4}}) {
    DecodeConfig cfg;
    cfg.mechanism = Mechanism::token_geometric;
    cfg.thresholds = tau;
    DecoderCache cache(1, 1);
    const DecodeTrace t = decode(m, kSource, cfg, &cache);
    CHECK(cache.exits() == t.exits);
    CHECK(cache_invariant_violations(m, cache) == 0);
    for (int n = 1; n <= 4; ++n) CHECK(cache.layer(n).steps == t.steps());
  }
  // Tampering with a copied key is detected.
  DecodeConfig cfg;
  cfg.mechanism = Mechanism::confidence;
  cfg.thresholds = {0.0, 0.0, 0.0};
  DecoderCache cache(1, 1);
  decode(m, kSource, cfg, &cache);
  cache.layer(3).keys[0] += 1e-9;
  CHECK(cache_invariant_violations(m, cache) == 1);
}

TEST_CASE("fixed top exit equals the recomputing reference decoder") {
  Model m(small());
  for (const auto& src : std::vector<std::vector<int>>{kSource, {8}, {5, 5, 6, 9}}) {
    const DecodeTrace t = decode_fixed(m, src, 4);
    CHECK(t.hypothesis() == decode_baseline(m, src));
    const auto logits = baseline_step_logits(m, src, t.hypothesis());
    REQUIRE(logits.size() >= t.hypothesis().size());
  }
}

TEST_CASE("length bound, eos handling and determinism") {
  Model m(small());
  const DecodeTrace a = decode_fixed(m, kSource, 2, 3);
  CHECK(a.steps() <= 3);
  CHECK(decode_fixed(m, kSource, 2).steps() <= static_cast<std::size_t>(default_max_len(kSource.size())));

  // Force eos at every step.
  Model e(small(2));
  for (int n = 1; n <= 2; ++n) {
    Tensor& w = e.params().get(e.classifier_name(n)).value;
    w.fill(0.0);
  }
  const DecodeTrace stop = decode_fixed(e, kSource, 2);
  // Zero logits: argmax picks id 0 (pad), so the decode runs to max_len.
  CHECK_FALSE(stop.finished);
  CHECK(stop.steps() == static_cast<std::size_t>(default_max_len(kSource.size())));

  const DecodeTrace b = decode_geometric(m, kSource, {0.45, 0.5, 0.55});
  const DecodeTrace c = decode_geometric(m, kSource, {0.45, 0.5, 0.55});
  CHECK(b.tokens == c.tokens);
  CHECK(b.exits == c.exits);
  CHECK(b.flops == c.flops);
  CHECK(b.confidences == c.confidences);

  CHECK_THROWS_AS(decode_fixed(m, kSource, 5), UsageError);
  CHECK_THROWS_AS(decode_geometric(m, kSource, {0.5}), UsageError);
}

TEST_CASE("trace JSON line") {
  Model m(small());
  const DecodeTrace t = decode_geometric(m, kSource, {0.45, 0.5, 0.55}, 0.5, 4);
  const auto j = nlohmann::json::parse(trace_json_line(t, "geo"));
  CHECK(j["config"] == "geo");
  CHECK(j["exits"].get<std::vector<int>>() == t.exits);
  CHECK(j["total_flops"].get<std::int64_t>() == t.total_flops());
  CHECK(j["ae"].get<double>() == doctest::Approx(t.average_exit()));
}
