#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lightdarts/gradcheck.hpp"

namespace lightdarts {

// One random draw of a gradient-check case: the tensors to differentiate and
// a forward pass that binds them. `owner` keeps everything alive.
struct GradInstance {
  std::shared_ptr<void> owner;
  std::vector<Tensor*> leaves;
  std::function<Var(Tape&)> forward;
};

struct GradCase {
  std::string name;
  std::function<GradInstance(std::uint64_t seed)> make;
};

// Every tensor primitive plus every candidate op at strides 1 and 2.
std::vector<GradCase> gradient_cases();

struct GradSuiteOptions {
  std::size_t instances = 10;
  double epsilon = 1e-3;
  double tolerance = 1e-4;
  // Draws whose forward pass comes closer than this to a relu/max kink are
  // replaced by the next seeded draw.
  double min_kink_margin = 1e-2;
  std::size_t max_attempts = 200;
  std::uint64_t seed = 0;
};

struct GradCaseResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t instances = 0;
  std::size_t rejected_draws = 0;
  bool passed = false;
};

GradCaseResult run_grad_case(const GradCase& c, const GradSuiteOptions& options = {});
std::vector<GradCaseResult> run_gradient_suite(const GradSuiteOptions& options = {});

}  // namespace lightdarts
