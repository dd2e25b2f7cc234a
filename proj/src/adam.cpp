#include "lightdarts/adam.hpp"

#include <cmath>
#include <string>

#include "lightdarts/error.hpp"

namespace lightdarts {

AdamState AdamState::for_params(std::span<Tensor* const> params) {
  AdamState s;
  for (const Tensor* p : params) {
    s.m.emplace_back(p->size(), 0.0);
    s.v.emplace_back(p->size(), 0.0);
  }
  return s;
}

void adam_update(std::span<Tensor* const> params, AdamState& state, const AdamConfig& config) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam: state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = *params[i];
    if (p.grad().size() != p.size() || state.m[i].size() != p.size() || state.v[i].size() != p.size()) {
      throw ShapeError("adam: parameter " + std::to_string(i) + " of shape " + shape_string(p.shape()) +
                       " has mismatched gradient or moment buffers");
    }
    for (double g : p.grad()) {
      if (!std::isfinite(g)) throw NonFiniteError("adam: non-finite gradient in parameter " + std::to_string(i));
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    std::span<const double> g = p.grad();
    std::vector<double>& m = state.m[i];
    std::vector<double>& v = state.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
      v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
      p[k] -= config.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config.epsilon);
    }
  }
}

}  // namespace lightdarts
