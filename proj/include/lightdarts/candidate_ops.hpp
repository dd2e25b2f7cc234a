#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>
#include <variant>
#include <vector>

#include "lightdarts/layers.hpp"

namespace lightdarts {

// The candidate operations on a mixed edge. The numeric value is the column
// index in the architecture logit matrices.
enum class OpKind : std::uint8_t {
  sep_conv_3x3 = 0,
  sep_conv_5x5,
  dil_conv_3x3,
  dil_conv_5x5,
  avg_pool_3x3,
  max_pool_3x3,
  skip_connect,
  zero,
  max_feature_map,
};

inline constexpr std::size_t kNumOps = 9;

inline constexpr std::array<OpKind, kNumOps> kAllOps = {
    OpKind::sep_conv_3x3, OpKind::sep_conv_5x5, OpKind::dil_conv_3x3, OpKind::dil_conv_5x5, OpKind::avg_pool_3x3,
    OpKind::max_pool_3x3, OpKind::skip_connect, OpKind::zero,         OpKind::max_feature_map,
};

constexpr std::size_t op_index(OpKind kind) noexcept { return static_cast<std::size_t>(kind); }
std::string_view op_name(OpKind kind) noexcept;
std::optional<OpKind> parse_op_name(std::string_view name) noexcept;

// Channel-pair max: output channel k is max(y[k], y[k + C]) for y with 2C channels.
Var mfm_pairing(Var y);

// One candidate operation with its own parameters. Maps (N,C,H,W) to
// (N,C,ceil(H/stride),ceil(W/stride)).
class OpInstance {
 public:
  // Channels must be even and >= 2; stride 1 or 2.
  OpInstance(OpKind kind, std::size_t channels, std::size_t stride, std::uint64_t seed);

  // rectified, when given, must be relu(x); ops that begin with a relu reuse it
  // so a mixed edge computes relu(x) once.
  Var apply(ForwardContext& ctx, Var x, const Var* rectified = nullptr);
  bool begins_with_relu() const noexcept;

  OpKind kind() const noexcept { return kind_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t stride() const noexcept { return stride_; }

  void collect(LayerRefs& refs);
  std::size_t parameter_count();

 private:
  // relu -> depthwise -> pointwise -> norm
  struct DepthwiseStack {
    Conv depthwise;
    Conv pointwise;
    ChannelNorm norm;
  };
  struct Separable {
    DepthwiseStack first;
    DepthwiseStack second;
  };
  struct Dilated {
    DepthwiseStack stack;
  };
  struct Pool {
    PoolKind kind;
    ChannelNorm norm;
  };
  struct Identity {};
  struct Reduce {
    FactorizedReduce reduce;
  };
  struct Zero {};
  struct MaxFeatureMap {
    Conv expand;
  };
  using Impl = std::variant<Separable, Dilated, Pool, Identity, Reduce, Zero, MaxFeatureMap>;

  static Impl make_impl(OpKind kind, std::size_t channels, std::size_t stride, std::uint64_t seed);
  // Takes the already rectified input.
  Var apply_stack(ForwardContext& ctx, DepthwiseStack& s, Var rectified);

  OpKind kind_;
  std::size_t channels_;
  std::size_t stride_;
  Impl impl_;
};

inline OpInstance build_op(OpKind kind, std::size_t channels, std::size_t stride, std::uint64_t seed) {
  return OpInstance(kind, channels, stride, seed);
}

}  // namespace lightdarts
