#include "lightdarts/layers.hpp"

#include <cmath>

#include "lightdarts/error.hpp"
#include "lightdarts/rng.hpp"

namespace lightdarts {

Tensor init_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  Rng rng(seed);
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  t.set_requires_grad(true);
  return t;
}

ChannelNorm::ChannelNorm(std::size_t channels) : scale_({channels}, 1.0), shift_({channels}, 0.0) {
  scale_.set_requires_grad(true);
  shift_.set_requires_grad(true);
}

Var ChannelNorm::forward(ForwardContext& ctx, Var x) {
  Var g = ctx.tape.parameter(scale_);
  Var b = ctx.tape.parameter(shift_);
  switch (ctx.mode) {
    case NormMode::batch:
      return channel_norm(x, g, b);
    case NormMode::calibrate: {
      NormStatistics observed;
      Var out = channel_norm(x, g, b, nullptr, &observed);
      const double w = static_cast<double>(x.value().dim(0));
      if (sum_mean_.empty()) {
        sum_mean_.assign(channels(), 0.0);
        sum_second_.assign(channels(), 0.0);
      }
      for (std::size_t c = 0; c < channels(); ++c) {
        sum_mean_[c] += w * observed.mean[c];
        sum_second_[c] += w * (observed.var[c] + observed.mean[c] * observed.mean[c]);
      }
      weight_ += w;
      return out;
    }
    case NormMode::frozen:
      if (!population_) throw Error("channel_norm: frozen mode without population statistics");
      return channel_norm(x, g, b, &*population_);
  }
  throw Error("channel_norm: unknown mode");
}

void ChannelNorm::collect(LayerRefs& refs) {
  refs.params.push_back(&scale_);
  refs.params.push_back(&shift_);
  refs.norms.push_back(this);
}

void ChannelNorm::set_population(NormStatistics stats) {
  if (stats.mean.size() != channels() || stats.var.size() != channels()) {
    throw ShapeError("channel_norm: population statistics for " + std::to_string(stats.mean.size()) +
                     " channels, layer has " + std::to_string(channels()));
  }
  population_ = std::move(stats);
}

void ChannelNorm::reset_calibration() {
  sum_mean_.clear();
  sum_second_.clear();
  weight_ = 0.0;
}

void ChannelNorm::finish_calibration() {
  if (weight_ <= 0.0) throw Error("channel_norm: calibration saw no data");
  NormStatistics stats{std::vector<double>(channels()), std::vector<double>(channels())};
  for (std::size_t c = 0; c < channels(); ++c) {
    const double m = sum_mean_[c] / weight_;
    stats.mean[c] = m;
    stats.var[c] = std::max(0.0, sum_second_[c] / weight_ - m * m);
  }
  population_ = std::move(stats);
  reset_calibration();
}

Conv::Conv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, const Conv2dOptions& opt,
           std::uint64_t seed)
    : kernel_(init_uniform({out_channels, in_channels / opt.groups, kernel, kernel},
                           in_channels / opt.groups * kernel * kernel, seed)),
      opt_(opt) {}

Var Conv::forward(ForwardContext& ctx, Var x) { return conv2d(x, ctx.tape.parameter(kernel_), opt_); }

ReluConvNorm::ReluConvNorm(std::size_t in_channels, std::size_t out_channels, std::uint64_t seed)
    : conv_(in_channels, out_channels, 1, {}, seed), norm_(out_channels) {}

Var ReluConvNorm::forward(ForwardContext& ctx, Var x) { return norm_.forward(ctx, conv_.forward(ctx, relu(x))); }

void ReluConvNorm::collect(LayerRefs& refs) {
  conv_.collect(refs);
  norm_.collect(refs);
}

FactorizedReduce::FactorizedReduce(std::size_t in_channels, std::size_t out_channels, std::uint64_t seed)
    : even_(in_channels, out_channels / 2, 1, {}, derive_seed(seed, {0})),
      odd_(in_channels, out_channels / 2, 1, {}, derive_seed(seed, {1})),
      norm_(out_channels) {
  if (out_channels % 2 != 0) throw ShapeError("factorized_reduce: output channels must be even");
}

Var FactorizedReduce::forward(ForwardContext& ctx, Var x) {
  Var r = relu(x);
  const Var parts[] = {even_.forward(ctx, subsample2(r, 0)), odd_.forward(ctx, subsample2(r, 1))};
  return norm_.forward(ctx, concat_channels(parts));
}

void FactorizedReduce::collect(LayerRefs& refs) {
  even_.collect(refs);
  odd_.collect(refs);
  norm_.collect(refs);
}

Linear::Linear(std::size_t in_features, std::size_t out_features, std::uint64_t seed)
    : weight_(init_uniform({out_features, in_features}, in_features, derive_seed(seed, {0}))),
      bias_(init_uniform({out_features}, in_features, derive_seed(seed, {1}))) {}

Var Linear::forward(ForwardContext& ctx, Var x) {
  return linear(x, ctx.tape.parameter(weight_), ctx.tape.parameter(bias_));
}

void Linear::collect(LayerRefs& refs) {
  refs.params.push_back(&weight_);
  refs.params.push_back(&bias_);
}

void Linear::zero() {
  for (double& v : weight_.values()) v = 0.0;
  for (double& v : bias_.values()) v = 0.0;
}

}  // namespace lightdarts
