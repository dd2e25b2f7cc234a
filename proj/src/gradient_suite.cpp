#include "lightdarts/gradient_suite.hpp"

#include <algorithm>
#include <deque>
#include <numeric>
#include <optional>

#include "lightdarts/candidate_ops.hpp"
#include "lightdarts/error.hpp"
#include "lightdarts/layers.hpp"
#include "lightdarts/ops.hpp"
#include "lightdarts/rng.hpp"
#include "lightdarts/supernet.hpp"

namespace lightdarts {

namespace {

struct Holder {
  std::deque<Tensor> tensors;
  std::vector<OpInstance> ops;
  std::vector<int> labels;
  Tensor constant;
  NormStatistics stats;
};

// Distinct values in (-1, 1) from an even grid of m >= n points spaced 2/m
// apart, none closer than 1/m to 0, so relu and max see no ties in the input.
Tensor& spread(Holder& h, Shape shape, Rng& rng) {
  Tensor& t = h.tensors.emplace_back(std::move(shape));
  const std::size_t n = t.size();
  const std::size_t m = n + n % 2;
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order.begin(), order.end());
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = (2.0 * static_cast<double>(order[i]) + 1.0 - static_cast<double>(m)) / static_cast<double>(m);
  }
  return t;
}

Tensor& gauss(Holder& h, Shape shape, Rng& rng, double sd = 1.0) {
  Tensor& t = h.tensors.emplace_back(std::move(shape));
  for (double& v : t.values()) v = sd * rng.normal();
  return t;
}

GradInstance finish(std::shared_ptr<Holder> h, std::function<Var(Tape&)> forward) {
  GradInstance inst;
  for (Tensor& t : h->tensors) inst.leaves.push_back(&t);
  inst.forward = std::move(forward);
  inst.owner = std::move(h);
  return inst;
}

GradCase conv_case(std::string name, Shape input, Shape kernel, Conv2dOptions opt) {
  return {std::move(name), [=](std::uint64_t seed) {
            auto h = std::make_shared<Holder>();
            Rng rng(seed);
            Tensor* x = &gauss(*h, input, rng);
            Tensor* k = &gauss(*h, kernel, rng, 0.5);
            return finish(h, [=](Tape& t) { return conv2d(t.parameter(*x), t.parameter(*k), opt); });
          }};
}

GradCase pool_case(std::string name, PoolKind kind, std::size_t stride) {
  return {std::move(name), [=](std::uint64_t seed) {
            auto h = std::make_shared<Holder>();
            Rng rng(seed);
            Tensor* x = &spread(*h, {2, 2, 5, 5}, rng);
            return finish(h, [=](Tape& t) { return pool2d(t.parameter(*x), kind, 3, stride, 1); });
          }};
}

GradCase unary_case(std::string name, Shape shape, bool tie_free, std::function<Var(Var)> f) {
  return {std::move(name), [=](std::uint64_t seed) {
            auto h = std::make_shared<Holder>();
            Rng rng(seed);
            Tensor* x = tie_free ? &spread(*h, shape, rng) : &gauss(*h, shape, rng);
            return finish(h, [=](Tape& t) { return f(t.parameter(*x)); });
          }};
}

constexpr double kKernelScale = 5.0;
constexpr double kInputScale = 3.0;

GradCase op_case(OpKind kind, std::size_t stride) {
  std::string name = "op_" + std::string(op_name(kind)) + "_s" + std::to_string(stride);
  return {std::move(name), [=](std::uint64_t seed) {
            auto h = std::make_shared<Holder>();
            Rng rng(seed);
            Tensor* x = &spread(*h, {2, 4, 5, 5}, rng);
            for (double& v : x->values()) v *= kInputScale;
            h->ops.emplace_back(kind, 4, stride, derive_seed(seed, {hash_tag("op")}));
            LayerRefs refs;
            h->ops.back().collect(refs);
            GradInstance inst = finish(h, [h_raw = h.get(), x](Tape& t) {
              ForwardContext ctx{t};
              return h_raw->ops.back().apply(ctx, t.parameter(*x));
            });
            // Each kernel feeds a norm, so the op is invariant to kernel scale
            // and its k-th derivative in the kernel shrinks as scale^-k.
            // Larger kernels keep the central-difference truncation error small.
            for (Tensor* p : refs.params) {
              if (p->rank() == 4) {
                for (double& v : p->values()) v *= kKernelScale;
              }
              inst.leaves.push_back(p);
            }
            return inst;
          }};
}

std::vector<GradCase> primitive_cases() {
  std::vector<GradCase> cases;
  cases.push_back(conv_case("conv2d_3x3", {2, 3, 5, 5}, {4, 3, 3, 3}, {1, 1, 1, 1}));
  cases.push_back(conv_case("conv2d_stride2", {2, 2, 5, 6}, {3, 2, 3, 3}, {2, 1, 1, 1}));
  cases.push_back(conv_case("conv2d_dilation2", {2, 2, 6, 5}, {2, 2, 3, 3}, {1, 2, 2, 1}));
  cases.push_back(conv_case("conv2d_depthwise_5x5", {2, 3, 5, 5}, {3, 1, 5, 5}, {1, 2, 1, 3}));
  cases.push_back(conv_case("conv2d_grouped", {2, 4, 4, 4}, {4, 2, 3, 3}, {1, 1, 1, 2}));
  cases.push_back(conv_case("conv2d_pointwise", {2, 3, 4, 4}, {5, 3, 1, 1}, {}));
  cases.push_back(conv_case("conv2d_pointwise_stride2", {2, 3, 5, 5}, {2, 3, 1, 1}, {2, 0, 1, 1}));
  cases.push_back(pool_case("pool2d_avg_s1", PoolKind::avg, 1));
  cases.push_back(pool_case("pool2d_avg_s2", PoolKind::avg, 2));
  cases.push_back(pool_case("pool2d_max_s1", PoolKind::max, 1));
  cases.push_back(pool_case("pool2d_max_s2", PoolKind::max, 2));

  cases.push_back({"elementwise_max", [](std::uint64_t seed) {
                     auto h = std::make_shared<Holder>();
                     Rng rng(seed);
                     // Both operands come from one spread draw so no pair ties.
                     Tensor& both = spread(*h, {2, 3, 4}, rng);
                     Tensor* a = &h->tensors.emplace_back(Shape{3, 4});
                     Tensor* b = &h->tensors.emplace_back(Shape{3, 4});
                     std::copy_n(both.data(), 12, a->data());
                     std::copy_n(both.data() + 12, 12, b->data());
                     h->tensors.pop_front();
                     return finish(h, [=](Tape& t) { return elementwise_max(t.parameter(*a), t.parameter(*b)); });
                   }});
  cases.push_back(unary_case("relu", {3, 7}, true, [](Var x) { return relu(x); }));
  cases.push_back({"add", [](std::uint64_t seed) {
                     auto h = std::make_shared<Holder>();
                     Rng rng(seed);
                     Tensor* a = &gauss(*h, {2, 5}, rng);
                     Tensor* b = &gauss(*h, {2, 5}, rng);
                     return finish(h, [=](Tape& t) { return add(t.parameter(*a), t.parameter(*b)); });
                   }});
  cases.push_back({"add_n", [](std::uint64_t seed) {
                     auto h = std::make_shared<Holder>();
                     Rng rng(seed);
                     Tensor* a = &gauss(*h, {2, 3}, rng);
                     Tensor* b = &gauss(*h, {2, 3}, rng);
                     Tensor* c = &gauss(*h, {2, 3}, rng);
                     return finish(h, [=](Tape& t) {
                       const Var parts[] = {t.parameter(*a), t.parameter(*b), t.parameter(*c), t.parameter(*a)};
                       return add_n(parts);
                     });
                   }});
  cases.push_back(unary_case("scale", {4, 3}, false, [](Var x) { return scale(x, -1.7); }));
  cases.push_back(unary_case("reshape", {2, 3, 2}, false, [](Var x) { return reshape(x, {3, 4}); }));
  cases.push_back(unary_case("sum", {3, 4}, false, [](Var x) { return sum(x); }));
  cases.push_back({"dot_constant", [](std::uint64_t seed) {
                     auto h = std::make_shared<Holder>();
                     Rng rng(seed);
                     Tensor* x = &gauss(*h, {3, 4}, rng);
                     h->constant = Tensor({3, 4});
                     for (double& v : h->constant.values()) v = rng.normal();
                     const Tensor* w = &h->constant;
                     return finish(h, [=](Tape& t) { return dot_constant(t.parameter(*x), *w); });
                   }});
  cases.push_back(unary_case("softmax", {3, 5}, false, [](Var x) { return softmax(x); }));
  cases.push_back(unary_case("log_softmax", {3, 5}, false, [](Var x) { return log_softmax(x); }));
  cases.push_back({"cross_entropy", [](std::uint64_t seed) {
                     auto h = std::make_shared<Holder>();
                     Rng rng(seed);
                     Tensor* x = &gauss(*h, {5, 3}, rng);
                     for (int i = 0; i < 5; ++i) h->labels.push_back(static_cast<int>(rng.below(3)));
                     const std::vector<int>* labels = &h->labels;
                     return finish(h, [=](Tape& t) { return cross_entropy(t.parameter(*x), *labels); });
                   }});
  cases.push_back({"linear", [](std::uint64_t seed) {
                     auto h = std::make_shared<Holder>();
                     Rng rng(seed);
                     Tensor* x = &gauss(*h, {4, 6}, rng);
                     Tensor* w = &gauss(*h, {3, 6}, rng, 0.5);
                     Tensor* b = &gauss(*h, {3}, rng);
                     return finish(
                         h, [=](Tape& t) { return linear(t.parameter(*x), t.parameter(*w), t.parameter(*b)); });
                   }});
  cases.push_back({"concat_channels", [](std::uint64_t seed) {
                     auto h = std::make_shared<Holder>();
                     Rng rng(seed);
                     Tensor* a = &gauss(*h, {2, 1, 3, 2}, rng);
                     Tensor* b = &gauss(*h, {2, 3, 3, 2}, rng);
                     return finish(h, [=](Tape& t) {
                       const Var parts[] = {t.parameter(*a), t.parameter(*b), t.parameter(*a)};
                       return concat_channels(parts);
                     });
                   }});
  cases.push_back(
      unary_case("slice_channels", {2, 5, 2, 3}, false, [](Var x) { return slice_channels(x, 1, 3); }));
  cases.push_back(unary_case("global_avg_pool", {2, 3, 4, 5}, false, [](Var x) { return global_avg_pool(x); }));
  cases.push_back(unary_case("subsample2_even", {2, 2, 5, 4}, false, [](Var x) { return subsample2(x, 0); }));
  cases.push_back(unary_case("subsample2_odd", {2, 2, 5, 4}, false, [](Var x) { return subsample2(x, 1); }));
  cases.push_back({"weighted_sum", [](std::uint64_t seed) {
                     auto h = std::make_shared<Holder>();
                     Rng rng(seed);
                     Tensor* a = &gauss(*h, {2, 3}, rng);
                     Tensor* b = &gauss(*h, {2, 3}, rng);
                     Tensor* w = &gauss(*h, {2, 3}, rng);
                     return finish(h, [=](Tape& t) {
                       const Var terms[] = {t.parameter(*a), t.parameter(*b)};
                       const std::size_t columns[] = {2, 0};
                       return weighted_sum(terms, columns, t.parameter(*w), 1);
                     });
                   }});
  cases.push_back({"channel_norm_batch", [](std::uint64_t seed) {
                     auto h = std::make_shared<Holder>();
                     Rng rng(seed);
                     Tensor* x = &gauss(*h, {3, 2, 3, 2}, rng);
                     Tensor* g = &gauss(*h, {2}, rng);
                     Tensor* b = &gauss(*h, {2}, rng);
                     return finish(h, [=](Tape& t) {
                       return channel_norm(t.parameter(*x), t.parameter(*g), t.parameter(*b));
                     });
                   }});
  cases.push_back({"channel_norm_frozen", [](std::uint64_t seed) {
                     auto h = std::make_shared<Holder>();
                     Rng rng(seed);
                     Tensor* x = &gauss(*h, {3, 2, 3, 2}, rng);
                     Tensor* g = &gauss(*h, {2}, rng);
                     Tensor* b = &gauss(*h, {2}, rng);
                     h->stats = NormStatistics{{rng.normal(), rng.normal()}, {rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)}};
                     const NormStatistics* stats = &h->stats;
                     return finish(h, [=](Tape& t) {
                       return channel_norm(t.parameter(*x), t.parameter(*g), t.parameter(*b), stats);
                     });
                   }});
  cases.push_back(unary_case("mfm_pairing", {2, 4, 3, 3}, true, [](Var x) { return mfm_pairing(x); }));
  cases.push_back({"mixed_edge", [](std::uint64_t seed) {
                     auto h = std::make_shared<Holder>();
                     Rng rng(seed);
                     Tensor* x = &spread(*h, {2, 2, 4, 4}, rng);
                     Tensor* logits = &gauss(*h, {kNumOps}, rng);
                     for (OpKind kind : kAllOps) {
                       h->ops.emplace_back(kind, 2, 1, derive_seed(seed, {hash_tag("mixed"), op_index(kind)}));
                     }
                     return finish(h, [h_raw = h.get(), x, logits](Tape& t) {
                       ForwardContext ctx{t};
                       return mixed_forward(ctx, h_raw->ops, t.parameter(*x), t.parameter(*logits));
                     });
                   }});
  return cases;
}

}  // namespace

std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases = primitive_cases();
  for (OpKind kind : kAllOps) {
    for (std::size_t stride : {1, 2}) cases.push_back(op_case(kind, stride));
  }
  return cases;
}

GradCaseResult run_grad_case(const GradCase& c, const GradSuiteOptions& options) {
  GradCaseResult result;
  result.name = c.name;
  const std::uint64_t case_seed = derive_seed(options.seed, {hash_tag(c.name)});
  std::size_t attempt = 0;
  while (result.instances < options.instances) {
    if (attempt >= options.max_attempts) {
      result.passed = false;
      return result;
    }
    const std::uint64_t draw = derive_seed(case_seed, {attempt++});
    GradInstance inst = c.make(draw);
    const GradCheckResult r = grad_check(inst.forward, inst.leaves, options.epsilon, draw);
    if (r.kink_margin < options.min_kink_margin) {
      ++result.rejected_draws;
      continue;
    }
    result.max_rel_error = std::max(result.max_rel_error, r.max_rel_error);
    ++result.instances;
  }
  result.passed = result.max_rel_error <= options.tolerance;
  return result;
}

std::vector<GradCaseResult> run_gradient_suite(const GradSuiteOptions& options) {
  std::vector<GradCaseResult> out;
  for (const GradCase& c : gradient_cases()) out.push_back(run_grad_case(c, options));
  return out;
}

}  // namespace lightdarts
