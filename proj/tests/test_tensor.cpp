#include <cmath>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "lightdarts/error.hpp"
#include "lightdarts/gradcheck.hpp"
#include "lightdarts/ops.hpp"
#include "oracles.hpp"

using namespace lightdarts;
using testutil::max_abs_diff;
using testutil::random_tensor;

TEST_CASE("tensor basics") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK(t[5] == 1.5);
  CHECK(t.grad().empty());
  t.set_requires_grad(true);
  REQUIRE(t.grad().size() == 6);
  CHECK(t.grad()[0] == 0.0);
  t.set_requires_grad(false);
  CHECK(t.grad().empty());
  CHECK_THROWS_AS(t.reshaped({4}), ShapeError);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
  t[1] = std::nan("");
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("parameters accumulate gradients only when tracked") {
  Tensor w({3}, std::vector<double>{1, 2, 3});
  {
    Tape tape;
    tape.backward(sum(scale(tape.parameter(w), 2.0)));
  }
  CHECK(w.grad().empty());
  w.set_requires_grad(true);
  for (int pass = 0; pass < 2; ++pass) {
    Tape tape;
    tape.backward(sum(scale(tape.parameter(w), 2.0)));
  }
  CHECK(w.grad()[0] == doctest::Approx(4.0));
  w.zero_grad();
  CHECK(w.grad()[2] == 0.0);
}

TEST_CASE("cross entropy matches its closed form") {
  const Tensor logits({3, 2}, std::vector<double>{0.5, -1.0, 2.0, 2.0, -3.0, 1.0});
  const std::vector<int> labels{0, 1, 1};
  Tensor p = logits;
  p.set_requires_grad(true);
  Tape tape;
  const Var loss = cross_entropy(tape.parameter(p), labels);
  tape.backward(loss);

  double want = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double a = logits[2 * i], b = logits[2 * i + 1];
    const double lse = std::log(std::exp(a) + std::exp(b));
    want += lse - logits[2 * i + static_cast<std::size_t>(labels[i])];
    for (std::size_t k = 0; k < 2; ++k) {
      const double soft = std::exp(logits[2 * i + k] - lse);
      const double g = (soft - (static_cast<int>(k) == labels[i] ? 1.0 : 0.0)) / 3.0;
      CHECK(p.grad()[2 * i + k] == doctest::Approx(g).epsilon(1e-12));
    }
  }
  CHECK(loss.value()[0] == doctest::Approx(want / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and resist overflow") {
  Tape tape;
  const Var s = softmax(tape.constant(Tensor({2, 3}, std::vector<double>{1000, 1001, 999, -5, 0, 5})));
  for (std::size_t r = 0; r < 2; ++r) {
    double z = 0.0;
    for (std::size_t k = 0; k < 3; ++k) z += s.value()[r * 3 + k];
    CHECK(z == doctest::Approx(1.0).epsilon(1e-14));
  }
  CHECK(s.value().all_finite());
}

TEST_CASE("conv2d matches direct summation forward and backward") {
  struct Case {
    Shape x, k;
    Conv2dOptions opt;
  };
  const std::vector<Case> cases = {
      {{2, 3, 7, 6}, {4, 3, 3, 3}, {1, 1, 1, 1}},
      {{1, 4, 9, 8}, {4, 1, 5, 5}, {2, 2, 1, 4}},
      {{2, 4, 8, 8}, {4, 1, 3, 3}, {1, 2, 2, 4}},
      {{1, 4, 11, 9}, {4, 1, 5, 5}, {2, 4, 2, 4}},
      {{2, 6, 5, 5}, {4, 3, 1, 1}, {1, 0, 1, 2}},
      {{1, 2, 6, 7}, {2, 2, 3, 3}, {2, 0, 1, 1}},
  };
  std::uint64_t seed = 1;
  for (const Case& c : cases) {
    CAPTURE(seed);
    Tensor x = random_tensor(c.x, seed++);
    Tensor k = random_tensor(c.k, seed++);
    x.set_requires_grad(true);
    k.set_requires_grad(true);
    Tape tape;
    const Var y = conv2d(tape.parameter(x), tape.parameter(k), c.opt);
    const Tensor want = oracle::conv2d(x, k, c.opt);
    REQUIRE(y.value().shape() == want.shape());
    CHECK(max_abs_diff(y.value(), want) <= 1e-10);

    const Tensor gy = random_tensor(want.shape(), seed++);
    tape.backward(dot_constant(y, gy));
    const auto [dx, dk] = oracle::conv2d_adjoint(x, k, gy, c.opt);
    Tensor got_dx(x.shape(), std::vector<double>(x.grad().begin(), x.grad().end()));
    Tensor got_dk(k.shape(), std::vector<double>(k.grad().begin(), k.grad().end()));
    CHECK(max_abs_diff(got_dx, dx) <= 1e-10);
    CHECK(max_abs_diff(got_dk, dk) <= 1e-10);
  }
}

TEST_CASE("conv2d rejects inconsistent channels") {
  Tape tape;
  const Var x = tape.constant(Tensor({1, 3, 5, 5}));
  CHECK_THROWS_AS(conv2d(x, tape.constant(Tensor({4, 2, 3, 3})), {}), ShapeError);
  CHECK_THROWS_AS(conv2d(x, tape.constant(Tensor({4, 1, 3, 3})), {1, 1, 1, 2}), ShapeError);
}

TEST_CASE("average pooling divides by in-bounds cells") {
  Tape tape;
  const Tensor x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  const Var y = pool2d(tape.constant(x), PoolKind::avg, 3, 1, 1);
  // Every window covers all four cells.
  for (double v : y.value().values()) CHECK(v == doctest::Approx(2.5));
  const Var m = pool2d(tape.constant(scale(tape.constant(x), -1.0).value()), PoolKind::max, 3, 1, 1);
  for (double v : m.value().values()) CHECK(v == -1.0);
}

TEST_CASE("channel norm standardizes each channel") {
  Tape tape;
  const Tensor x = random_tensor({3, 2, 4, 4}, 9, -2.0, 5.0);
  Tensor g({2}, 1.0), b({2}, 0.0);
  NormStatistics seen;
  const Var y = channel_norm(tape.constant(x), tape.parameter(g), tape.parameter(b), nullptr, &seen);
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < 16; ++i) {
        const double v = y.value()[(n * 2 + c) * 16 + i];
        mean += v;
        sq += v * v;
      }
    CHECK(mean / 48.0 == doctest::Approx(0.0).epsilon(1e-12).scale(1.0));
    CHECK(sq / 48.0 == doctest::Approx(seen.var[c] / (seen.var[c] + kNormEpsilon)).epsilon(1e-12));
  }
  // Frozen statistics make each sample independent of the rest of the batch.
  const Var a = channel_norm(tape.constant(x), tape.parameter(g), tape.parameter(b), &seen);
  Tensor first({1, 2, 4, 4}, std::vector<double>(x.values().begin(), x.values().begin() + 32));
  const Var single = channel_norm(tape.constant(first), tape.parameter(g), tape.parameter(b), &seen);
  for (std::size_t i = 0; i < 32; ++i) CHECK(a.value()[i] == single.value()[i]);
}

TEST_CASE("grad_check flags a wrong backward") {
  Tensor x = random_tensor({4}, 3);
  x.set_requires_grad(true);
  std::vector<Tensor*> leaves{&x};
  auto good = [&](Tape& t) { return scale(t.parameter(x), 3.0); };
  CHECK(grad_check(good, leaves).max_rel_error < 1e-9);
  auto bad = [&](Tape& t) {
    const Var p = t.parameter(x);
    Tensor v = p.value();
    for (double& e : v.values()) e *= 3.0;
    return t.record(std::move(v), {p}, [](const Tensor& g, std::span<Tensor* const> in) {
      for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += 2.0 * g[i];
    });
  };
  CHECK(grad_check(bad, leaves).max_rel_error > 0.1);
}

TEST_CASE("inference tapes free values once no handle remains") {
  const Tensor x = random_tensor({2, 3}, 4);
  Tape rec;
  const Var want = relu(scale(rec.constant(x), 2.0));

  Tape inf(TapeMode::inference);
  Tensor w({2, 3}, 1.0);
  w.set_requires_grad(true);
  std::size_t scaled_id = 0;
  {
    const Var scaled = scale(inf.constant(x), 2.0);
    scaled_id = scaled.id();
    const Var kept = relu(scaled);
    CHECK(kept.value() == want.value());
    CHECK(inf.value(scaled_id).size() == 6);
    const Var loss = sum(add(kept, inf.parameter(w)));
    CHECK_FALSE(loss.requires_grad());
    CHECK_THROWS_AS(inf.backward(loss), Error);
  }
  CHECK(inf.value(scaled_id).empty());
  CHECK(w.grad()[0] == 0.0);
}
