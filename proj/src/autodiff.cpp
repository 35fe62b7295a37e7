#include "cxrfuse/autodiff.hpp"

#include "cxrfuse/errors.hpp"

namespace cxrfuse {

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::push(Tensor value, bool requires_grad, BackwardFn backward) {
  Node node;
  if (requires_grad) node.grad = Tensor(value.shape(), 0.0);
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) { return push(std::move(value), false, {}); }

Var Tape::variable(Tensor value) { return push(std::move(value), true, {}); }

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape() != this) throw Error("op input recorded on a different tape");
    needs = needs || requires_grad(in.id());
  }
  return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
}

const Tensor& Tape::grad(std::size_t id) const {
  if (!nodes_[id].requires_grad) throw Error("gradient requested for a constant");
  return nodes_[id].grad;
}

Tensor& Tape::grad_buffer(std::size_t id) { return nodes_[id].grad; }

std::size_t Tape::backward(Var root, double seed) {
  if (root.tape() != this) throw Error("backward root recorded on a different tape");
  Node& r = nodes_[root.id()];
  if (r.value.size() != 1) {
    throw ShapeError("backward root must be a scalar, got " + shape_string(r.value.shape()));
  }
  if (!r.requires_grad) return 0;
  r.grad[0] += seed;
  std::size_t visited = 0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward) continue;
    n.backward(*this, i);
    ++visited;
  }
  for (std::size_t i = 0; i <= root.id(); ++i) {
    if (nodes_[i].requires_grad && !nodes_[i].grad.all_finite()) {
      throw DomainError("non-finite gradient during backward pass");
    }
  }
  return visited;
}

void Tape::zero_grad() {
  for (auto& n : nodes_) {
    if (n.requires_grad) n.grad.fill(0.0);
  }
}

}  // namespace cxrfuse
