#include "lightdarts/candidate_ops.hpp"

#include <string>

#include "lightdarts/error.hpp"
#include "lightdarts/rng.hpp"

namespace lightdarts {
namespace {

constexpr std::array<std::string_view, kNumOps> kNames = {
    "sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5",    "avg_pool_3x3",
    "max_pool_3x3", "skip_connect", "zero",         "max_feature_map",
};

Conv2dOptions depthwise_options(std::size_t channels, std::size_t kernel, std::size_t stride, std::size_t dilation) {
  return Conv2dOptions{stride, dilation * (kernel - 1) / 2, dilation, channels};
}

}  // namespace

std::string_view op_name(OpKind kind) noexcept { return kNames[op_index(kind)]; }

std::optional<OpKind> parse_op_name(std::string_view name) noexcept {
  for (std::size_t i = 0; i < kNumOps; ++i) {
    if (kNames[i] == name) return kAllOps[i];
  }
  return std::nullopt;
}

Var mfm_pairing(Var y) {
  if (y.value().rank() != 4) throw ShapeError("mfm_pairing: expected [N,2C,H,W], got " + shape_string(y.shape()));
  const std::size_t c2 = y.value().dim(1);
  if (c2 % 2 != 0 || c2 == 0) {
    throw ShapeError("mfm_pairing: channel count " + std::to_string(c2) + " is not even");
  }
  const std::size_t c = c2 / 2;
  return elementwise_max(slice_channels(y, 0, c), slice_channels(y, c, c));
}

OpInstance::Impl OpInstance::make_impl(OpKind kind, std::size_t c, std::size_t stride, std::uint64_t seed) {
  if (c < 2 || c % 2 != 0) throw ShapeError("build_op: channels must be even and >= 2, got " + std::to_string(c));
  if (stride != 1 && stride != 2) throw ShapeError("build_op: stride must be 1 or 2, got " + std::to_string(stride));
  auto stack = [c](std::size_t kernel, std::size_t s, std::size_t dilation, std::uint64_t sd) {
    return DepthwiseStack{Conv(c, c, kernel, depthwise_options(c, kernel, s, dilation), derive_seed(sd, {0})),
                          Conv(c, c, 1, {}, derive_seed(sd, {1})), ChannelNorm(c)};
  };
  switch (kind) {
    case OpKind::sep_conv_3x3:
    case OpKind::sep_conv_5x5: {
      const std::size_t k = kind == OpKind::sep_conv_3x3 ? 3 : 5;
      return Separable{stack(k, stride, 1, derive_seed(seed, {0})), stack(k, 1, 1, derive_seed(seed, {1}))};
    }
    case OpKind::dil_conv_3x3:
    case OpKind::dil_conv_5x5: {
      const std::size_t k = kind == OpKind::dil_conv_3x3 ? 3 : 5;
      return Dilated{stack(k, stride, 2, seed)};
    }
    case OpKind::avg_pool_3x3:
      return Pool{PoolKind::avg, ChannelNorm(c)};
    case OpKind::max_pool_3x3:
      return Pool{PoolKind::max, ChannelNorm(c)};
    case OpKind::skip_connect:
      if (stride == 1) return Identity{};
      return Reduce{FactorizedReduce(c, c, seed)};
    case OpKind::zero:
      return Zero{};
    case OpKind::max_feature_map:
      return MaxFeatureMap{Conv(c, 2 * c, 1, Conv2dOptions{stride, 0, 1, 1}, seed)};
  }
  throw Error("build_op: unknown op kind");
}

OpInstance::OpInstance(OpKind kind, std::size_t channels, std::size_t stride, std::uint64_t seed)
    : kind_(kind), channels_(channels), stride_(stride), impl_(make_impl(kind, channels, stride, seed)) {}

Var OpInstance::apply_stack(ForwardContext& ctx, DepthwiseStack& s, Var rectified) {
  return s.norm.forward(ctx, s.pointwise.forward(ctx, s.depthwise.forward(ctx, rectified)));
}

bool OpInstance::begins_with_relu() const noexcept {
  return std::holds_alternative<Separable>(impl_) || std::holds_alternative<Dilated>(impl_);
}

Var OpInstance::apply(ForwardContext& ctx, Var x, const Var* rectified) {
  if (x.value().rank() != 4 || x.value().dim(1) != channels_) {
    throw ShapeError(std::string(op_name(kind_)) + ": expected " + std::to_string(channels_) +
                     " input channels, got shape " + shape_string(x.shape()));
  }
  return std::visit(
      [&](auto& impl) -> Var {
        using T = std::decay_t<decltype(impl)>;
        if constexpr (std::is_same_v<T, Separable>) {
          const Var first = apply_stack(ctx, impl.first, rectified ? *rectified : relu(x));
          return apply_stack(ctx, impl.second, relu(first));
        } else if constexpr (std::is_same_v<T, Dilated>) {
          return apply_stack(ctx, impl.stack, rectified ? *rectified : relu(x));
        } else if constexpr (std::is_same_v<T, Pool>) {
          return impl.norm.forward(ctx, pool2d(x, impl.kind, 3, stride_, 1));
        } else if constexpr (std::is_same_v<T, Identity>) {
          return x;
        } else if constexpr (std::is_same_v<T, Reduce>) {
          return impl.reduce.forward(ctx, x);
        } else if constexpr (std::is_same_v<T, Zero>) {
          const Shape& s = x.shape();
          const std::size_t h = stride_ == 1 ? s[2] : (s[2] + 1) / 2;
          const std::size_t w = stride_ == 1 ? s[3] : (s[3] + 1) / 2;
          return zeros(ctx.tape, {s[0], s[1], h, w});
        } else {
          return mfm_pairing(impl.expand.forward(ctx, x));
        }
      },
      impl_);
}

void OpInstance::collect(LayerRefs& refs) {
  std::visit(
      [&](auto& impl) {
        using T = std::decay_t<decltype(impl)>;
        auto stack = [&](DepthwiseStack& s) {
          s.depthwise.collect(refs);
          s.pointwise.collect(refs);
          s.norm.collect(refs);
        };
        if constexpr (std::is_same_v<T, Separable>) {
          stack(impl.first);
          stack(impl.second);
        } else if constexpr (std::is_same_v<T, Dilated>) {
          stack(impl.stack);
        } else if constexpr (std::is_same_v<T, Pool>) {
          impl.norm.collect(refs);
        } else if constexpr (std::is_same_v<T, Reduce>) {
          impl.reduce.collect(refs);
        } else if constexpr (std::is_same_v<T, MaxFeatureMap>) {
          impl.expand.collect(refs);
        }
      },
      impl_);
}

std::size_t OpInstance::parameter_count() {
  LayerRefs refs;
  collect(refs);
  std::size_t n = 0;
  for (const Tensor* t : refs.params) n += t->size();
  return n;
}

}  // namespace lightdarts
