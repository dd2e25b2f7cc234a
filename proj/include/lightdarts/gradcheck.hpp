#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "lightdarts/autodiff.hpp"

namespace lightdarts {

struct GradCheckResult {
  double max_rel_error = 0.0;  // max |analytic - numeric| / max(1, |numeric|)
  double kink_margin = 0.0;    // distance of the unperturbed forward from any relu/max kink
  std::size_t coordinates = 0;
};

// Compares reverse-mode gradients with central differences. `forward` must
// bind every tensor in `leaves` through Tape::parameter; the scalar checked is
// sum(output * R) for a seeded random R, so non-scalar outputs are allowed.
GradCheckResult grad_check(const std::function<Var(Tape&)>& forward, std::span<Tensor* const> leaves,
                           double epsilon = 1e-3, std::uint64_t seed = 0);

}  // namespace lightdarts
