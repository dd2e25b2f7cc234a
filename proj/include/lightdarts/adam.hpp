#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lightdarts/tensor.hpp"

namespace lightdarts {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Moment buffers, one per parameter and shaped like it, plus the step count.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  static AdamState for_params(std::span<Tensor* const> params);
};

// One bias-corrected Adam step driven by each parameter's gradient buffer.
// A non-finite gradient throws NonFiniteError before anything is modified.
void adam_update(std::span<Tensor* const> params, AdamState& state, const AdamConfig& config);

}  // namespace lightdarts
