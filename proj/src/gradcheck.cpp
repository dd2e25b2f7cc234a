#include "lightdarts/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "lightdarts/error.hpp"
#include "lightdarts/ops.hpp"
#include "lightdarts/rng.hpp"

namespace lightdarts {

GradCheckResult grad_check(const std::function<Var(Tape&)>& forward, std::span<Tensor* const> leaves,
                           double epsilon, std::uint64_t seed) {
  for (Tensor* leaf : leaves) {
    leaf->set_requires_grad(true);
  }

  Tensor projection;
  auto loss_of = [&](Tape& tape) {
    Var out = forward(tape);
    if (projection.empty()) {
      projection = Tensor(out.shape());
      Rng rng(seed);
      for (double& v : projection.values()) v = rng.uniform(-1.0, 1.0);
    }
    return dot_constant(out, projection);
  };

  GradCheckResult result;
  {
    Tape tape;
    Var loss = loss_of(tape);
    tape.backward(loss);
    result.kink_margin = tape.kink_margin();
  }

  for (Tensor* leaf : leaves) {
    const std::vector<double> analytic(leaf->grad().begin(), leaf->grad().end());
    for (std::size_t i = 0; i < leaf->size(); ++i) {
      const double saved = (*leaf)[i];
      (*leaf)[i] = saved + epsilon;
      double plus;
      {
        Tape tape;
        plus = loss_of(tape).value()[0];
      }
      (*leaf)[i] = saved - epsilon;
      double minus;
      {
        Tape tape;
        minus = loss_of(tape).value()[0];
      }
      (*leaf)[i] = saved;
      const double numeric = (plus - minus) / (2.0 * epsilon);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      if (!std::isfinite(err)) throw NonFiniteError("grad_check: non-finite gradient");
      result.max_rel_error = std::max(result.max_rel_error, err);
      ++result.coordinates;
    }
    leaf->zero_grad();
  }
  return result;
}

}  // namespace lightdarts
