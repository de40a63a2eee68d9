#include <cmath>
#include <cstring>
#include <random>

#include "doctest.h"
#include "exitdepth/autograd.hpp"
#include "exitdepth/errors.hpp"
#include "gradcheck.hpp"

using namespace exitdepth;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace

TEST_CASE("matmul matches hand arithmetic") {
  Tape tape;
  Var eye = tape.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  Var m = tape.constant(Tensor::matrix({{2, 3}, {5, 7}}));
  CHECK(matmul(eye, m).value() == m.value());

  Var row = tape.constant(Tensor::matrix({{1, 2}}));
  Var col = tape.constant(Tensor::matrix({{3}, {4}}));
  CHECK(matmul(row, col).value()(0, 0) == doctest::Approx(11.0));

  CHECK_THROWS_AS(matmul(row, row), DimensionError);
}

TEST_CASE("matmul gradient of sum matches central differences") {
  std::mt19937_64 rng(7);
  ParameterStore ps;
  ps.add("a", random_tensor({3, 4}, rng));
  ps.add("b", random_tensor({4, 2}, rng));
  auto res = testing::gradient_check(ps, [&](Tape& t) {
    return sum(matmul(t.param(ps.get("a")), t.param(ps.get("b"))));
  });
  CHECK(res.checked == 20);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("activation and loss spot values") {
  Tape tape;
  Var x = tape.constant(Tensor::matrix({{0.0, 0.0}}));
  Var s = softmax(x);
  CHECK(s.value()[0] == doctest::Approx(0.5));
  CHECK(s.value()[1] == doctest::Approx(0.5));

  CHECK(sigmoid(tape.constant(Tensor::scalar(0.0))).item() == doctest::Approx(0.5));
  CHECK(sigmoid(tape.constant(Tensor::scalar(1.0))).item() == doctest::Approx(0.7310585786));

  Var logits = tape.constant(Tensor::matrix({{0, 0, 0, 0}}));
  CHECK(cross_entropy(logits, 2).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(cross_entropy(logits, 2).item() == doctest::Approx(1.3863).epsilon(1e-4));

  Var r = relu(tape.constant(Tensor::vector({-1.0, 0.0, 2.5})));
  CHECK(r.value() == Tensor::vector({0.0, 0.0, 2.5}));
}

TEST_CASE("softmax rows are normalized and strictly inside (0,1)") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tape tape;
    Var y = softmax(tape.constant(random_tensor({5, 7}, rng, -5.0, 5.0)));
    for (std::size_t r = 0; r < 5; ++r) {
      double total = 0.0;
      for (double v : y.value().row(r)) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        total += v;
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("softmax survives large logits") {
  Tape tape;
  Var y = softmax(tape.constant(Tensor::matrix({{1000.0, 1000.0}})));
  CHECK(y.value()[0] == doctest::Approx(0.5));
}

TEST_CASE("non-finite values are rejected") {
  Tape tape;
  CHECK_THROWS_AS(tape.constant(Tensor::vector({1.0, std::nan("")})), NumericError);
  Var big = tape.constant(Tensor::vector({1e308}));
  CHECK_THROWS_AS(scale(big, 10.0), NumericError);
}

TEST_CASE("scale_gradient semantics") {
  auto grad_of_square = [](double gamma) {
    ParameterStore ps;
    ps.add("x", Tensor::scalar(2.0));
    Tape tape;
    Var x = tape.param(ps.get("x"));
    Var y = scale_gradient(mul(x, x), gamma);
    CHECK(y.item() == 4.0);
    tape.backward(y);
    return ps.get("x").grad.item();
  };
  CHECK(grad_of_square(1.0) == doctest::Approx(4.0));
  CHECK(grad_of_square(0.0) == 0.0);
  CHECK(grad_of_square(0.3) == doctest::Approx(1.2).epsilon(1e-14));

  // Forward is a bit-level copy.
  std::mt19937_64 rng(3);
  Tape tape;
  Var x = tape.constant(random_tensor({4, 6}, rng, -1e3, 1e3));
  Var y = scale_gradient(x, 0.37);
  CHECK(std::memcmp(x.value().data(), y.value().data(), x.value().size() * sizeof(double)) == 0);
  CHECK_THROWS_AS(scale_gradient(x, -1.0), UsageError);
}

TEST_CASE("stop_gradient blocks the backward pass") {
  ParameterStore ps;
  ps.add("x", Tensor::scalar(3.0));
  Tape tape;
  Var x = tape.param(ps.get("x"));
  Var y = add(mul(stop_gradient(x), x), x);  // grad = stop(x) + 1 = 4
  CHECK(y.item() == 12.0);
  tape.backward(y);
  CHECK(ps.get("x").grad.item() == doctest::Approx(4.0));
}

TEST_CASE("backward contract") {
  ParameterStore ps;
  ps.add("w", Tensor::vector({1.0, 2.0}));
  {
    Tape tape;
    tape.param(ps.get("w"));
    Var c = tape.constant(Tensor::scalar(5.0));
    ps.zero_grad();
    tape.backward(c);
    CHECK(ps.get("w").grad == Tensor::vector({0.0, 0.0}));
  }
  {
    Tape tape;
    Var loss = sum(tape.param(ps.get("w")));
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), UsageError);
  }
  {
    Tape tape;
    Var w = tape.param(ps.get("w"));
    CHECK_THROWS_AS(tape.backward(w), UsageError);
  }
}

TEST_CASE("every differentiable op passes a finite-difference check") {
  std::mt19937_64 rng(2024);
  ParameterStore ps;
  ps.add("x", random_tensor({4, 6}, rng));
  ps.add("y", random_tensor({4, 6}, rng));
  ps.add("g", random_tensor({6}, rng, 0.5, 1.5));
  ps.add("b", random_tensor({6}, rng));
  ps.add("table", random_tensor({5, 6}, rng));
  ps.add("k", random_tensor({5, 6}, rng));
  ps.add("v", random_tensor({5, 6}, rng));
  auto P = [&](Tape& t, const char* n) { return t.param(ps.get(n)); };
  const int ids[4] = {4, 0, 2, 2};
  const int cols[4] = {5, 1, 0, 3};
  const int choice[4] = {1, 0, 1, 0};
  const std::size_t rows[3] = {3, 0, 3};
  const std::pair<std::size_t, std::size_t> segs[2] = {{0, 1}, {1, 4}};
  const AttentionSpan spans[4] = {{0, 1}, {0, 2}, {1, 5}, {0, 5}};
  const Tensor mask = random_tensor({4, 6}, rng);

  std::vector<std::pair<const char*, std::function<Var(Tape&)>>> cases = {
      {"add/sub/mul", [&](Tape& t) { return sum(mul(sub(P(t, "x"), P(t, "y")), add(P(t, "x"), P(t, "y")))); }},
      {"scale", [&](Tape& t) { return sum(mul(scale(P(t, "x"), -2.5), P(t, "y"))); }},
      {"transpose", [&](Tape& t) { return sum(matmul(transpose(P(t, "x")), P(t, "y"))); }},
      {"add_bias", [&](Tape& t) { return sum(mul(add_bias(P(t, "x"), P(t, "b")), P(t, "y"))); }},
      {"relu", [&](Tape& t) { return sum(mul(relu(P(t, "x")), P(t, "y"))); }},
      {"sigmoid", [&](Tape& t) { return sum(mul(sigmoid(P(t, "x")), P(t, "y"))); }},
      {"log_sigmoid", [&](Tape& t) { return sum(mul(log_sigmoid(P(t, "x")), P(t, "y"))); }},
      {"softmax", [&](Tape& t) { return sum(mul(softmax(P(t, "x")), t.constant(mask))); }},
      {"log_softmax", [&](Tape& t) { return sum(mul(log_softmax(P(t, "x")), t.constant(mask))); }},
      {"layer_norm", [&](Tape& t) {
         return sum(mul(layer_norm(P(t, "x"), P(t, "g"), P(t, "b")), t.constant(mask)));
       }},
      {"embedding", [&](Tape& t) { return sum(mul(embedding_lookup(P(t, "table"), ids), P(t, "x"))); }},
      {"cross_entropy", [&](Tape& t) { return cross_entropy(P(t, "x"), cols); }},
      {"pick/mean", [&](Tape& t) { return mean(pick(mul(P(t, "x"), P(t, "y")), cols)); }},
      {"select_rows", [&](Tape& t) {
         return sum(mul(select_rows({P(t, "x"), P(t, "y")}, choice), t.constant(mask)));
       }},
      {"gather_rows", [&](Tape& t) { return sum(mul(gather_rows(P(t, "x"), rows), gather_rows(P(t, "y"), rows))); }},
      {"segment_mean", [&](Tape& t) { return sum(mul(segment_mean(P(t, "x"), segs), segment_mean(P(t, "y"), segs))); }},
      {"concat_cols", [&](Tape& t) {
         return sum(matmul(concat_cols({P(t, "x"), P(t, "y")}), transpose(concat_cols({P(t, "y"), P(t, "x")}))));
       }},
      {"attention", [&](Tape& t) {
         return sum(mul(attention(P(t, "x"), P(t, "k"), P(t, "v"), 2, spans), t.constant(mask)));
       }},
  };
  for (const auto& [name, fn] : cases) {
    CAPTURE(name);
    auto res = testing::gradient_check(ps, fn);
    CAPTURE(res.worst);
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("attention over a single key returns that value") {
  Tape tape;
  Var q = tape.constant(Tensor::matrix({{0.3, -0.2}}));
  Var k = tape.constant(Tensor::matrix({{1.0, 2.0}}));
  Var v = tape.constant(Tensor::matrix({{5.0, -7.0}}));
  const AttentionSpan spans[1] = {{0, 1}};
  CHECK(attention(q, k, v, 1, spans).value() == Tensor::matrix({{5.0, -7.0}}));
}
