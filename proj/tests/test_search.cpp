#include <cmath>
#include <fstream>
#include <functional>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "lightdarts/adam.hpp"
#include "lightdarts/error.hpp"
#include "lightdarts/ops.hpp"
#include "lightdarts/search.hpp"

using namespace lightdarts;

TEST_CASE("adam follows the bias-corrected update") {
  Tensor p({2}, std::vector<double>{1.0, -2.0});
  std::vector<Tensor*> params{&p};
  AdamState state = AdamState::for_params(params);
  const AdamConfig cfg{0.1};
  const double g1[] = {0.5, -3.0}, g2[] = {-1.0, 2.0};
  double m[2] = {}, v[2] = {}, want[2] = {1.0, -2.0};
  for (int step = 1; step <= 2; ++step) {
    p.set_requires_grad(true);
    for (std::size_t i = 0; i < 2; ++i) {
      const double g = step == 1 ? g1[i] : g2[i];
      p.grad()[i] = g;
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1.0 - std::pow(0.9, step));
      const double vh = v[i] / (1.0 - std::pow(0.999, step));
      want[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    }
    adam_update(params, state, cfg);
    CHECK(p[0] == doctest::Approx(want[0]).epsilon(1e-14));
    CHECK(p[1] == doctest::Approx(want[1]).epsilon(1e-14));
  }
  CHECK(state.step == 2);

  p.grad()[1] = INFINITY;
  const Tensor before = p;
  CHECK_THROWS_AS(adam_update(params, state, cfg), NonFiniteError);
  CHECK(p == before);
  CHECK(state.step == 2);
}

namespace {

Batch toy_batch(std::size_t n, std::uint64_t seed, std::size_t index) {
  Rng rng(seed);
  Batch b;
  b.index = index;
  b.features = Tensor({n, 1, 1, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const bool bona = i % 2 == 0;
    b.features[2 * i] = (bona ? 1.0 : -1.0) * rng.uniform(0.5, 2.0);
    b.features[2 * i + 1] = rng.uniform(-1.0, 1.0);
    b.labels.push_back(bona ? 0 : 1);
    b.ids.push_back("t" + std::to_string(i));
  }
  return b;
}

// Two candidate edges, zero and a linear map, mixed by softmax(alpha).
struct ZeroSkipToy {
  Tensor weight{{2, 2}, std::vector<double>{1, 0, -1, 0}};
  Tensor bias{{2}, 0.0};
  Tensor alpha{{1, 2}, 0.0};

  BilevelProblem problem() {
    return BilevelProblem{{&weight, &bias}, {&alpha}, [this](ForwardContext& ctx, const Batch& b) {
                            const Var x = reshape(ctx.tape.constant(b.features), {b.labels.size(), 2});
                            const Var z = linear(x, ctx.tape.parameter(weight), ctx.tape.parameter(bias));
                            const std::vector<Var> terms{zeros(ctx.tape, z.shape()), z};
                            return weighted_sum(terms, softmax(ctx.tape.parameter(alpha)), 0);
                          }};
  }
  double skip_weight() const { return 1.0 / (1.0 + std::exp(alpha[0] - alpha[1])); }
};

// Two learned branches whose balance alpha sets; the alpha gradient depends on w.
struct TwoBranchToy {
  Tensor w1, b1, w2, alpha;
  explicit TwoBranchToy(std::uint64_t seed)
      : w1(testutil::random_tensor({2, 2}, seed)),
        b1(testutil::random_tensor({2}, seed + 1)),
        w2(testutil::random_tensor({2, 2}, seed + 2)),
        alpha(testutil::random_tensor({1, 2}, seed + 3)) {}

  Var logits(Tape& tape, const Batch& b) {
    const Var x = reshape(tape.constant(b.features), {b.labels.size(), 2});
    const Var p = linear(x, tape.parameter(w1), tape.parameter(b1));
    const Var q = scale(relu(linear(x, tape.parameter(w2), tape.constant(Tensor({2})))), 2.0);
    const std::vector<Var> terms{p, q};
    return weighted_sum(terms, softmax(tape.parameter(alpha)), 0);
  }
  BilevelProblem problem() {
    return BilevelProblem{{&w1, &b1, &w2}, {&alpha}, [this](ForwardContext& ctx, const Batch& b) {
                            return logits(ctx.tape, b);
                          }};
  }
  std::vector<Tensor*> weights() { return {&w1, &b1, &w2}; }

  double loss(const Batch& b) {
    Tape tape;
    return cross_entropy(logits(tape, b), b.labels).value()[0];
  }
};

}  // namespace

TEST_CASE("a rigged zero-versus-skip search converges to skip") {
  ZeroSkipToy toy;
  BilevelProblem problem = toy.problem();
  SearchOptimizers opt = SearchOptimizers::for_problem(problem);
  SearchConfig cfg;
  cfg.lr = 0.01;
  cfg.arch_lr = 0.1;
  double prev = toy.skip_weight();
  CHECK(prev == doctest::Approx(0.5));
  for (std::size_t step = 0; step < 50; ++step) {
    search_step(problem, toy_batch(16, 2 * step, step), toy_batch(16, 2 * step + 1, step), opt, cfg);
    CHECK(toy.skip_weight() >= prev);
    prev = toy.skip_weight();
  }
  CHECK(toy.skip_weight() > 0.9);
  CHECK(toy.alpha.grad().empty());
}

TEST_CASE("steps alternate: weights on train, then alpha on val") {
  ZeroSkipToy toy;
  BilevelProblem problem = toy.problem();
  SearchOptimizers opt = SearchOptimizers::for_problem(problem);
  std::vector<std::pair<SearchPhase, std::size_t>> seen;
  const BatchObserver observer = [&](SearchPhase phase, const Batch& b) { seen.emplace_back(phase, b.index); };
  for (std::size_t step = 0; step < 3; ++step) {
    search_step(problem, toy_batch(8, step, 100 + step), toy_batch(8, step + 50, 200 + step), opt, SearchConfig{},
                observer);
  }
  REQUIRE(seen.size() == 6);
  for (std::size_t step = 0; step < 3; ++step) {
    CHECK(seen[2 * step] == std::make_pair(SearchPhase::weights, 100 + step));
    CHECK(seen[2 * step + 1] == std::make_pair(SearchPhase::arch, 200 + step));
  }
}

TEST_CASE("second order with a zero virtual step equals first order") {
  TwoBranchToy a(7), b(7);
  BilevelProblem pa = a.problem(), pb = b.problem();
  SearchOptimizers oa = SearchOptimizers::for_problem(pa), ob = SearchOptimizers::for_problem(pb);
  SearchConfig first, second;
  first.lr = second.lr = 0.05;
  first.arch_lr = second.arch_lr = 0.05;
  second.order = SearchOrder::second;
  second.xi = 0.0;
  for (std::size_t step = 0; step < 5; ++step) {
    const Batch t = toy_batch(8, step, step), v = toy_batch(8, step + 9, step);
    search_step(pa, t, v, oa, first);
    search_step(pb, t, v, ob, second);
  }
  CHECK(a.alpha == b.alpha);
  CHECK(a.w1 == b.w1);
  CHECK(a.w2 == b.w2);
}

TEST_CASE("second-order alpha steps follow the unrolled validation gradient") {
  // The unrolled objective L_val(w - xi * grad_w L_train(w, alpha), alpha)
  // is differentiated in alpha by central differences; Adam's first step
  // moves each coordinate against the sign of its gradient.
  const double xi = 0.5;
  std::size_t disagreements_with_first_order = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    CAPTURE(seed);
    TwoBranchToy toy(seed * 10);
    BilevelProblem problem = toy.problem();
    SearchOptimizers opt = SearchOptimizers::for_problem(problem);
    SearchConfig cfg;
    cfg.lr = 0.05;
    cfg.arch_lr = 1e-3;
    cfg.order = SearchOrder::second;
    cfg.xi = xi;
    const Batch train = toy_batch(8, 1000 + seed, 0), val = toy_batch(8, 2000 + seed, 0);

    std::vector<Tensor> w_after_step;
    const BatchObserver snapshot = [&](SearchPhase phase, const Batch&) {
      if (phase == SearchPhase::arch && w_after_step.empty())
        for (Tensor* t : toy.weights()) w_after_step.push_back(*t);
    };
    const Tensor alpha_before = toy.alpha;
    search_step(problem, train, val, opt, cfg, snapshot);
    REQUIRE(w_after_step.size() == 3);

    TwoBranchToy probe(seed * 10);
    std::vector<Tensor*> pw = probe.weights();
    auto unrolled = [&](const Tensor& alpha) {
      for (std::size_t i = 0; i < pw.size(); ++i) *pw[i] = w_after_step[i];
      probe.alpha = alpha;
      for (Tensor* t : pw) t->set_requires_grad(true);
      {
        Tape tape;
        tape.backward(cross_entropy(probe.logits(tape, train), train.labels));
      }
      for (Tensor* t : pw)
        for (std::size_t k = 0; k < t->size(); ++k) (*t)[k] -= xi * t->grad()[k];
      for (Tensor* t : pw) t->set_requires_grad(false);
      return probe.loss(val);
    };
    auto direct = [&](const Tensor& alpha) {
      for (std::size_t i = 0; i < pw.size(); ++i) *pw[i] = w_after_step[i];
      probe.alpha = alpha;
      return probe.loss(val);
    };
    for (std::size_t k = 0; k < 2; ++k) {
      const double h = 1e-5;
      Tensor up = alpha_before, down = alpha_before;
      up[k] += h;
      down[k] -= h;
      const double g = (unrolled(up) - unrolled(down)) / (2 * h);
      const double g_first = (direct(up) - direct(down)) / (2 * h);
      if (std::abs(g) < 1e-4) continue;
      const double moved = toy.alpha[k] - alpha_before[k];
      CHECK((moved < 0.0) == (g > 0.0));
      if ((g > 0.0) != (g_first > 0.0)) ++disagreements_with_first_order;
    }
  }
  CHECK(disagreements_with_first_order > 0);
}

TEST_CASE("alpha stays put when both candidates agree") {
  Tensor w{{2, 2}, std::vector<double>{0.3, -0.2, 0.1, 0.4}};
  Tensor b{{2}, 0.0};
  Tensor alpha{{1, 2}, std::vector<double>{0.25, -0.5}};
  BilevelProblem problem{{&w, &b}, {&alpha}, [&](ForwardContext& ctx, const Batch& batch) {
                           const Var x = reshape(ctx.tape.constant(batch.features), {batch.labels.size(), 2});
                           const Var z = linear(x, ctx.tape.parameter(w), ctx.tape.parameter(b));
                           const std::vector<Var> terms{z, z};
                           return weighted_sum(terms, softmax(ctx.tape.parameter(alpha)), 0);
                         }};
  SearchOptimizers opt = SearchOptimizers::for_problem(problem);
  const Tensor start = alpha;
  for (SearchOrder order : {SearchOrder::first, SearchOrder::second}) {
    SearchConfig cfg;
    cfg.order = order;
    cfg.arch_lr = 0.5;
    for (std::size_t step = 0; step < 5; ++step) {
      search_step(problem, toy_batch(8, step, 0), toy_batch(8, 99, 0), opt, cfg);
    }
    // The alpha gradient is zero up to rounding; Adam turns that into at most ~lr * 1e-9.
    CHECK(testutil::max_abs_diff(alpha, start) <= 1e-8);
  }
}

TEST_CASE("non-finite losses name the batch") {
  ZeroSkipToy toy;
  BilevelProblem problem = toy.problem();
  SearchOptimizers opt = SearchOptimizers::for_problem(problem);
  Batch bad = toy_batch(4, 0, 17);
  bad.features[0] = INFINITY;
  try {
    search_step(problem, bad, toy_batch(4, 1, 3), opt, SearchConfig{});
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("17") != std::string::npos);
  }
}

TEST_CASE("search configuration is validated") {
  SearchConfig c;
  CHECK_NOTHROW(c.validate());
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = SearchConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = SearchConfig{};
  c.lr = -1.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = SearchConfig{};
  c.xi = -0.1;
  CHECK_THROWS_AS(c.validate(), Error);
  c = SearchConfig{};
  CHECK(c.virtual_step() == c.lr);
  CHECK(c.effective_retrain_epochs() == 2 * c.epochs);
}

TEST_CASE("row entropy of uniform logits is log of the op count") {
  CHECK(mean_row_entropy(Tensor({3, kNumOps}, 2.0)) == doctest::Approx(std::log(9.0)));
  Tensor peaked({1, 2}, std::vector<double>{0.0, -1000.0});
  CHECK(mean_row_entropy(peaked) == doctest::Approx(0.0));
}

namespace {

SearchConfig tiny_search() {
  SearchConfig c;
  c.epochs = 2;
  c.lr = 1e-3;
  c.arch_lr = 3e-3;
  c.batch_size = 8;
  c.cells = 3;
  c.channels = 4;
  c.nodes = 2;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("search runs are deterministic") {
  const Dataset train = testutil::synthetic_dataset(24, 16, 8, 1);
  const Dataset val = testutil::synthetic_dataset(16, 16, 8, 2);
  const SearchResult a = run_search(tiny_search(), train, val);
  const SearchResult b = run_search(tiny_search(), train, val);
  CHECK(a.alpha.normal == b.alpha.normal);
  CHECK(a.alpha.reduce == b.alpha.reduce);
  CHECK(a.genotype == b.genotype);
  REQUIRE(a.history.size() == 2);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(a.history[e].epoch == e + 1);
    CHECK(a.history[e].train_loss == b.history[e].train_loss);
    CHECK(a.history[e].val_loss == b.history[e].val_loss);
  }
  SearchConfig other = tiny_search();
  other.seed = 6;
  CHECK_FALSE(run_search(other, train, val).alpha.normal == a.alpha.normal);
}

TEST_CASE("history csv has one row per epoch") {
  const auto dir = testutil::scratch_dir("history");
  std::vector<EpochRecord> h{{1, 0.5, 0.25, 0.75, 1.0, 2.0, 2.1}, {2, 0.4, std::nan(""), 0.8, 1.0, 1.9, 2.0}};
  write_history_csv((dir / "h.csv").string(), h);
  std::ifstream in(dir / "h.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == kHistoryHeader);
  std::getline(in, line);
  CHECK(line == "1,0.500000,0.250000,0.750000,1.000000,2.000000,2.100000");
  std::getline(in, line);
  CHECK(line == "2,0.400000,,0.800000,1.000000,1.900000,2.000000");
}

TEST_CASE("retraining an all-skip network learns the synthetic task") {
  Genotype g;
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t s = 0; s < 2; ++s) {
      g.normal.push_back({OpKind::skip_connect, s});
      g.reduce.push_back({OpKind::skip_connect, s});
    }
  SearchConfig cfg = tiny_search();
  cfg.retrain_epochs = 10;
  const Dataset train = testutil::synthetic_dataset(96, 16, 16, 11);
  const Dataset test = testutil::synthetic_dataset(64, 16, 16, 12);
  RetrainResult r = retrain_discrete(g, cfg, train);
  REQUIRE(r.history.size() == 10);
  std::size_t decreasing = 0;
  for (std::size_t e = 1; e < r.history.size(); ++e) decreasing += r.history[e].train_loss <= r.history[e - 1].train_loss;
  CHECK(decreasing >= 8 * (r.history.size() - 1) / 10);
  CHECK(evaluate_accuracy(r.model, test, 16, NormMode::frozen).accuracy >= 0.95);
}
