#include <cmath>
#include <cstring>
#include <random>

#include "doctest.h"
#include "exitdepth/errors.hpp"
#include "exitdepth/model.hpp"
#include "exitdepth/vocab.hpp"

using namespace exitdepth;

namespace {

ModelConfig small_config(int blocks = 4) {
  ModelConfig c;
  c.blocks = blocks;
  c.encoder_layers = 1;
  c.d_enc = 8;
  c.d_dec = 8;
  c.d_ffn = 12;
  c.heads = 2;
  c.src_vocab = 9;
  c.tgt_vocab = 9;
  c.seed = 5;
  return c;
}

bool bits_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// x W + b by explicit summation.
std::vector<double> project(std::span<const double> x, const Tensor& w, const Tensor& b) {
  std::vector<double> out(w.cols());
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) s += x[k] * w(k, j);
    out[j] = s + b[j];
  }
  return out;
}

}  // namespace

TEST_CASE("encoder output shape and mean state") {
  Model m(small_config());
  const std::vector<int> src = {4, 7, 5, 8, 6};
  EncoderOutput enc = m.encode(src);
  CHECK(enc.states.shape() == std::vector<std::size_t>{5, 8});
  for (std::size_t c = 0; c < 8; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < 5; ++r) s += enc.states(r, c);
    CHECK(enc.mean_state[c] == doctest::Approx(s / 5.0).epsilon(1e-12));
  }

  EncoderOutput one = m.encode(std::vector<int>{6});
  for (std::size_t c = 0; c < 8; ++c) CHECK(one.mean_state[c] == one.states(0, c));

  CHECK_THROWS_AS(m.encode(std::vector<int>{}), UsageError);
  CHECK_THROWS_AS(m.encode(std::vector<int>{99}), UsageError);
}

TEST_CASE("without position encoding a repeated token gives identical states") {
  Model m(small_config());
  m.hooks.position_encoding = false;
  EncoderOutput enc = m.encode(std::vector<int>{7, 7, 7});
  CHECK(bits_equal(enc.states.row(0), enc.states.row(1)));
  CHECK(bits_equal(enc.states.row(0), enc.states.row(2)));
}

TEST_CASE("parameter count is a function of the configuration") {
  Model a(small_config()), b(small_config());
  CHECK(a.params().scalar_count() == b.params().scalar_count());
  ModelConfig tied = small_config();
  tied.tie_classifiers = true;
  Model c(tied);
  CHECK(c.params().scalar_count() == a.params().scalar_count() - 3 * 8 * 9);
}

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  c.heads = 3;
  CHECK_THROWS_AS(Model{c}, UsageError);
  c = small_config();
  c.blocks = 0;
  CHECK_THROWS_AS(Model{c}, UsageError);
}

TEST_CASE("decoder block at the first step") {
  Model m(small_config());
  EncoderOutput enc = m.encode(std::vector<int>{4, 5});
  DecoderCache cache(m.blocks(), 2);
  auto h0 = m.embed_target(tokens::bos, 1);
  auto h1 = m.decoder_block(1, h0, cache, enc, 1);
  CHECK(h1.size() == 8);
  CHECK(cache.layer(1).steps == 1);

  // A single key gets all the attention weight.
  std::vector<double> out(8), weights(2);
  auto [k, v] = m.self_kv(1, h0);
  kernels::attend_row(h0, k, v, 0, 1, 2, out, weights);
  CHECK(weights[0] == 1.0);
  CHECK(weights[1] == 1.0);

  // Wrong step for the cache contents.
  CHECK_THROWS_AS(m.decoder_block(2, h1, cache, enc, 2), UsageError);
  CHECK_THROWS_AS(m.decoder_block(1, h1, cache, enc, 1), UsageError);
}

TEST_CASE("residual hook") {
  const std::vector<int> src = {4, 6, 5};
  auto run_block = [&](Model& m) {
    EncoderOutput enc = m.encode(src);
    DecoderCache cache(m.blocks(), src.size());
    auto h0 = m.embed_target(tokens::bos, 1);
    return std::make_pair(h0, m.decoder_block(1, h0, cache, enc, 1));
  };
  Model m(small_config());
  auto [in_a, with_residual] = run_block(m);
  m.hooks.residual = false;
  auto [in_b, without] = run_block(m);
  CHECK_FALSE(with_residual == without);

  // Zero sublayer outputs and no normalization: the block is the identity.
  Model z(small_config());
  z.hooks.layer_norm = false;
  for (const char* name : {"self.o.w", "self.o.b", "src.o.w", "src.o.b", "ffn.2.w", "ffn.2.b"}) {
    z.params().get(Model::block_prefix(1) + name).value.fill(0.0);
  }
  auto [in_z, out_z] = run_block(z);
  CHECK(out_z == in_z);
}

TEST_CASE("classifier tying and isolation") {
  ModelConfig c = small_config();
  c.tie_classifiers = true;
  Model tied(c);
  std::vector<double> h(8);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = 0.1 * static_cast<double>(i) - 0.3;
  CHECK(tied.exit_logits(1, h) == tied.exit_logits(4, h));

  Model untied(small_config());
  auto before = std::vector<std::vector<double>>{};
  for (int n = 1; n <= 4; ++n) before.push_back(untied.exit_logits(n, h));
  untied.params().get("exit.3.w").value[5] += 0.25;
  for (int n = 1; n <= 4; ++n) {
    if (n == 3) {
      CHECK_FALSE(untied.exit_logits(n, h) == before[2]);
    } else {
      CHECK(untied.exit_logits(n, h) == before[static_cast<std::size_t>(n - 1)]);
    }
  }

  std::vector<double> probs(9);
  kernels::softmax_row(untied.exit_logits(2, h), probs);
  double total = 0.0;
  for (double p : probs) total += p;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

  ModelConfig e = small_config();
  e.tie_embeddings = true;
  e.tie_classifiers = true;
  Model emb(e);
  CHECK_FALSE(emb.params().contains("exit.w"));
  const Tensor& table = emb.params().get("tgt_embed").value;
  auto logits = emb.exit_logits(2, h);
  for (std::size_t v = 0; v < 9; ++v) {
    double s = 0.0;
    for (std::size_t k = 0; k < 8; ++k) s += h[k] * table(v, k);
    CHECK(logits[v] == doctest::Approx(s).epsilon(1e-12));
  }
}

TEST_CASE("copy_state_upward writes layer-specific projections of the exit state") {
  Model m(small_config(4));
  const std::vector<int> src = {5, 6};
  EncoderOutput enc = m.encode(src);
  DecoderCache cache(4, src.size());
  auto h = m.embed_target(tokens::bos, 1);
  h = m.decoder_block(1, h, cache, enc, 1);
  h = m.decoder_block(2, h, cache, enc, 1);
  m.copy_state_upward(1, 2, h, cache);

  for (int layer = 3; layer <= 4; ++layer) {
    const std::string p = Model::block_prefix(layer);
    const auto k = project(h, m.params().get(p + "self.k.w").value, m.params().get(p + "self.k.b").value);
    const auto v = project(h, m.params().get(p + "self.v.w").value, m.params().get(p + "self.v.b").value);
    const auto& l = cache.layer(layer);
    REQUIRE(l.steps == 1);
    for (std::size_t i = 0; i < 8; ++i) {
      CHECK(l.keys[i] == doctest::Approx(k[i]).epsilon(1e-13));
      CHECK(l.values[i] == doctest::Approx(v[i]).epsilon(1e-13));
    }
  }

  // The next step can run block 3 over the copied key.
  auto h2 = m.embed_target(7, 2);
  for (int n = 1; n <= 4; ++n) h2 = m.decoder_block(n, h2, cache, enc, 2);
  CHECK(cache.layer(3).steps == 2);

  // n_exit = N copies nothing.
  const auto steps = cache.layer(4).steps;
  m.copy_state_upward(2, 4, h2, cache);
  CHECK(cache.layer(4).steps == steps);
  CHECK_THROWS_AS(m.copy_state_upward(3, 0, h2, cache), UsageError);
  CHECK_THROWS_AS(m.copy_state_upward(3, 5, h2, cache), UsageError);
}

TEST_CASE("teacher-forced logits are causal") {
  Model m(small_config());
  SequencePair a{{4, 5, 6}, {7, 8, 4, 5}};
  SequencePair b = a;
  b.target[3] = 6;  // position 4 only
  Tape ta, tb;
  auto ra = m.run_frozen(ta, PackedBatch::build(std::span<const SequencePair>(&a, 1)));
  auto rb = m.run_frozen(tb, PackedBatch::build(std::span<const SequencePair>(&b, 1)));
  for (int n = 0; n < 4; ++n) {
    const Tensor& la = ra.exit_log_probs[static_cast<std::size_t>(n)].value();
    const Tensor& lb = rb.exit_log_probs[static_cast<std::size_t>(n)].value();
    // Rows 0..3 predict y_1..y_4 and only see inputs up to y_3.
    for (std::size_t r = 0; r < 4; ++r) CHECK(bits_equal(la.row(r), lb.row(r)));
    CHECK_FALSE(bits_equal(la.row(4), lb.row(4)));
  }
}

TEST_CASE("packing several sentences does not change any row") {
  Model m(small_config());
  std::vector<SequencePair> pairs = {{{4, 5, 6}, {7, 8}}, {{8, 7}, {4, 4, 5, 6}}};
  Tape tb;
  auto rb = m.run_frozen(tb, PackedBatch::build(pairs));
  std::size_t offset = 0;
  for (const auto& p : pairs) {
    Tape ts;
    auto rs = m.run_frozen(ts, PackedBatch::build(std::span<const SequencePair>(&p, 1)));
    const Tensor& single = rs.block_states.back().value();
    const Tensor& packed = rb.block_states.back().value();
    for (std::size_t r = 0; r < single.rows(); ++r) CHECK(bits_equal(single.row(r), packed.row(offset + r)));
    offset += single.rows();
  }
}

TEST_CASE("incremental decoding reproduces the teacher-forced pass bit for bit") {
  Model m(small_config(3));
  SequencePair pair{{4, 6, 5, 8}, {7, 5, 6}};
  const PackedBatch batch = PackedBatch::build(std::span<const SequencePair>(&pair, 1));

  SUBCASE("aligned") {
    Tape tape;
    auto run = m.run_frozen(tape, batch);
    EncoderOutput enc = m.encode(pair.source);
    CHECK(bits_equal(enc.states.values(), run.encoder_states.value().values()));
    DecoderCache cache(3, pair.source.size());
    for (std::size_t t = 1; t <= batch.rows(); ++t) {
      auto h = m.embed_target(batch.dec_inputs[t - 1], t);
      for (int n = 1; n <= 3; ++n) {
        h = m.decoder_block(n, h, cache, enc, t);
        CHECK(bits_equal(h, run.block_states[static_cast<std::size_t>(n - 1)].value().row(t - 1)));
        const auto logits = m.exit_logits(n, h);
        std::vector<double> lp(logits.size());
        kernels::log_softmax_row(logits, lp);
        CHECK(bits_equal(lp, run.exit_log_probs[static_cast<std::size_t>(n - 1)].value().row(t - 1)));
      }
    }
  }

  SUBCASE("with exit paths and copied states") {
    const std::vector<int> path = {1, 3, 2, 1};
    ForwardOptions opts;
    opts.exit_path = path;
    Tape tape;
    auto run = m.run_frozen(tape, batch, opts);
    EncoderOutput enc = m.encode(pair.source);
    DecoderCache cache(3, pair.source.size());
    for (std::size_t t = 1; t <= batch.rows(); ++t) {
      auto h = m.embed_target(batch.dec_inputs[t - 1], t);
      const int exit_n = path[t - 1];
      for (int n = 1; n <= exit_n; ++n) h = m.decoder_block(n, h, cache, enc, t);
      m.copy_state_upward(t, exit_n, h, cache);
      CHECK(bits_equal(h, run.block_states[static_cast<std::size_t>(exit_n - 1)].value().row(t - 1)));
      // Every block above the exit carries the exit state unchanged.
      for (int n = exit_n; n <= 3; ++n) {
        CHECK(bits_equal(h, run.block_states[static_cast<std::size_t>(n - 1)].value().row(t - 1)));
      }
    }
  }
}

TEST_CASE("packed batch layout") {
  std::vector<SequencePair> pairs = {{{4, 5}, {6}}, {{7}, {8, 9}}};
  PackedBatch b = PackedBatch::build(pairs);
  CHECK(b.rows() == 5);
  CHECK(b.dec_inputs == std::vector<int>{tokens::bos, 6, tokens::bos, 8, 9});
  CHECK(b.targets == std::vector<int>{6, tokens::eos, 8, 9, tokens::eos});
  CHECK(b.self_spans[3].begin == 2);
  CHECK(b.self_spans[3].end == 4);
  CHECK(b.cross_spans[4].begin == 2);
  CHECK(b.cross_spans[4].end == 3);
  CHECK_THROWS_AS(PackedBatch::build(std::vector<SequencePair>{{{}, {4}}}), UsageError);
}
