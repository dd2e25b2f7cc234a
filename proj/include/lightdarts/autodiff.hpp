#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <utility>
#include <vector>

#include "lightdarts/tensor.hpp"

namespace lightdarts {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape
// lives. On an inference tape handles are counted and a value is freed once
// no handle refers to it, so handles must not outlive their tape.
class Var {
 public:
  Var() = default;
  Var(const Var& other) noexcept : tape_(other.tape_), id_(other.id_), counted_(other.counted_) { retain(); }
  Var& operator=(const Var& other) noexcept {
    if (this != &other) {
      Var copy(other);
      std::swap(tape_, copy.tape_);
      std::swap(id_, copy.id_);
      std::swap(counted_, copy.counted_);
    }
    return *this;
  }
  ~Var() { release(); }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id);
  void retain() noexcept;
  void release() noexcept;

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
  bool counted_ = false;
};

// Adjoint rule for one recorded primitive: receives the gradient of the
// output and accumulates into the gradients of the inputs. Entries of
// `input_grads` are null for inputs that do not need a gradient.
using BackwardFn = std::function<void(const Tensor& output_grad, std::span<Tensor* const> input_grads)>;

// Records primitive applications in execution order and replays their
// adjoints in reverse. Single owner; not shared across threads.
enum class TapeMode {
  record,     // keeps every value and adjoint rule for backward
  inference,  // keeps a value only while a handle refers to it; no backward
};

class Tape {
 public:
  explicit Tape(TapeMode mode = TapeMode::record) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool inference() const noexcept { return mode_ == TapeMode::inference; }

  // Leaf that never receives a gradient.
  Var constant(Tensor value);
  // Leaf bound to a parameter. If the parameter requires gradients and the
  // tape records, backward accumulates into its gradient buffer.
  Var parameter(Tensor& param);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }

  // Reverse sweep from a scalar loss; writes gradients into every bound
  // parameter that requires them.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Smallest distance of any recorded nonsmooth primitive (relu, max) from
  // its kink. Gradient checks use it to reject inputs near a kink.
  double kink_margin() const noexcept { return kink_margin_; }
  void note_kink(double margin) noexcept {
    if (margin < kink_margin_) kink_margin_ = margin;
  }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor* param = nullptr;
    bool requires_grad = false;
    std::size_t handles = 0;
  };

  friend class Var;
  Var handle(std::size_t id) { return Var(this, id); }

  std::deque<Node> nodes_;
  double kink_margin_ = 1e300;
  TapeMode mode_;
};

}  // namespace lightdarts
