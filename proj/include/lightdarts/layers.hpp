#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "lightdarts/ops.hpp"

namespace lightdarts {

// How channel_norm layers pick their statistics during a forward pass.
enum class NormMode {
  batch,      // batch statistics
  calibrate,  // batch statistics, also accumulated into population estimates
  frozen,     // stored population statistics; output is independent of batch composition
};

struct ForwardContext {
  Tape& tape;
  NormMode mode = NormMode::batch;
};

class ChannelNorm;

// Non-owning view of every trainable tensor and norm layer inside a module,
// in a fixed traversal order.
struct LayerRefs {
  std::vector<Tensor*> params;
  std::vector<ChannelNorm*> norms;
};

// Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) initialization.
Tensor init_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed);

class ChannelNorm {
 public:
  explicit ChannelNorm(std::size_t channels);

  Var forward(ForwardContext& ctx, Var x);
  void collect(LayerRefs& refs);

  std::size_t channels() const noexcept { return scale_.size(); }
  const std::optional<NormStatistics>& population() const noexcept { return population_; }
  void set_population(NormStatistics stats);
  void reset_calibration();
  void finish_calibration();

 private:
  Tensor scale_;
  Tensor shift_;
  std::optional<NormStatistics> population_;
  std::vector<double> sum_mean_;
  std::vector<double> sum_second_;
  double weight_ = 0.0;
};

class Conv {
 public:
  Conv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, const Conv2dOptions& opt,
       std::uint64_t seed);

  Var forward(ForwardContext& ctx, Var x);
  void collect(LayerRefs& refs) { refs.params.push_back(&kernel_); }
  Tensor& kernel() noexcept { return kernel_; }

 private:
  Tensor kernel_;
  Conv2dOptions opt_;
};

// relu -> 1x1 conv -> norm; aligns a cell input to the cell's channel count.
class ReluConvNorm {
 public:
  ReluConvNorm(std::size_t in_channels, std::size_t out_channels, std::uint64_t seed);
  Var forward(ForwardContext& ctx, Var x);
  void collect(LayerRefs& refs);

 private:
  Conv conv_;
  ChannelNorm norm_;
};

// relu, then two 1x1 convs on the even and odd pixel grids, concatenated and
// normalized. Halves H and W (rounding up); out_channels must be even.
class FactorizedReduce {
 public:
  FactorizedReduce(std::size_t in_channels, std::size_t out_channels, std::uint64_t seed);
  Var forward(ForwardContext& ctx, Var x);
  void collect(LayerRefs& refs);

 private:
  Conv even_;
  Conv odd_;
  ChannelNorm norm_;
};

class Linear {
 public:
  Linear(std::size_t in_features, std::size_t out_features, std::uint64_t seed);
  Var forward(ForwardContext& ctx, Var x);
  void collect(LayerRefs& refs);
  void zero();

 private:
  Tensor weight_;
  Tensor bias_;
};

}  // namespace lightdarts
