#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <vector>

#include "cxrfuse/tensor.hpp"

namespace cxrfuse {

class Tape;

/// Handle to a tensor recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  /// Accumulated gradient. Only available when requires_grad() is true.
  const Tensor& grad() const;
  bool requires_grad() const;
  const Shape& shape() const { return value().shape(); }

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records tensor operations in execution order and replays their
/// gradient rules in reverse. Gradients accumulate additively, so a Var
/// consumed by several operations receives the sum of their contributions.
///
/// Single writer: a tape must not be shared between threads.
class Tape {
 public:
  /// Backward rule of a recorded op. Receives the tape and the id of the
  /// op's output node; reads the output gradient and adds into inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient (data, targets).
  Var constant(Tensor value);
  /// Leaf whose gradient is tracked (parameters, inputs under test).
  Var variable(Tensor value);

  /// Records an op output. The backward rule is kept only if at least one
  /// input requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);

  /// Seeds d(root)/d(root) = seed (root must hold one element) and runs every
  /// recorded rule up to root in reverse order. Returns the number of rules run.
  std::size_t backward(Var root, double seed = 1.0);

  /// Resets every gradient buffer to zero, keeping the recorded graph.
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const;
  Tensor& grad_buffer(std::size_t id);
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn backward);

  // deque keeps references returned by value()/grad() stable across push_back.
  std::deque<Node> nodes_;
};

}  // namespace cxrfuse
