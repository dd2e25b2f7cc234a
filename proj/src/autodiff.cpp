#include "lightdarts/autodiff.hpp"

#include <algorithm>

#include "lightdarts/error.hpp"

namespace lightdarts {

Var::Var(Tape* tape, std::size_t id) : tape_(tape), id_(id), counted_(tape->inference()) { retain(); }

void Var::retain() noexcept {
  if (counted_) ++tape_->nodes_[id_].handles;
}

void Var::release() noexcept {
  if (!counted_) return;
  Tape::Node& node = tape_->nodes_[id_];
  if (--node.handles == 0) node.value = Tensor();
}

const Tensor& Var::value() const { return tape_->value(id_); }

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
  return handle(nodes_.size() - 1);
}

Var Tape::parameter(Tensor& param) {
  Tensor copy(param.shape(), std::vector<double>(param.values().begin(), param.values().end()));
  const bool tracked = param.requires_grad() && !inference();
  nodes_.push_back(Node{std::move(copy), {}, {}, tracked ? &param : nullptr, tracked});
  return handle(nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  if (inference()) {
    for (const Var& v : inputs) {
      if (&v.tape() != this) throw Error("tape: input recorded on a different tape");
    }
    nodes_.push_back(std::move(node));
    return handle(nodes_.size() - 1);
  }
  node.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw Error("tape: input recorded on a different tape");
    node.inputs.push_back(v.id());
    node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return handle(nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  if (!loss.valid() || &loss.tape() != this) throw Error("backward: loss is not recorded on this tape");
  if (inference()) throw Error("backward: inference tapes keep no adjoint rules");
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_string(loss.shape()));
  }
  if (!nodes_[loss.id()].requires_grad) return;

  std::vector<Tensor> adjoints(loss.id() + 1);
  adjoints[loss.id()] = Tensor(loss.shape(), 1.0);
  std::vector<Tensor*> input_grads;

  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (adjoints[i].empty() || !node.requires_grad) continue;
    if (node.param != nullptr) {
      auto grad = node.param->grad();
      const auto adj = adjoints[i].values();
      for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += adj[k];
    }
    if (node.backward) {
      input_grads.assign(node.inputs.size(), nullptr);
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const std::size_t in = node.inputs[k];
        if (!nodes_[in].requires_grad) continue;
        if (adjoints[in].empty()) adjoints[in] = Tensor(nodes_[in].value.shape());
        input_grads[k] = &adjoints[in];
      }
      node.backward(adjoints[i], input_grads);
    }
    adjoints[i] = Tensor();
  }
}

}  // namespace lightdarts
