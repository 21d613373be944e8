#include "ulsa/autograd.hpp"

#include "ulsa/error.hpp"

namespace ulsa {

const Tensor& Var::value() const { return tape_->value(id_); }

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Tensor Var::grad() const {
  if (const Tensor* g = tape_->grad_if_any(id_)) return *g;
  return Tensor(value().shape(), 0.0);
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), nullptr, true, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), nullptr, false, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn) {
  bool tracked = false;
  for (auto p : parents) tracked = tracked || nodes_[p].requires_grad;
  Node node{std::move(value), nullptr, tracked, {}, {}};
  if (tracked) {
    node.parents = std::move(parents);
    node.backward = std::move(fn);
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_slot(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.grad) n.grad = std::make_unique<Tensor>(n.value.shape(), 0.0);
  return *n.grad;
}

const Tensor* Tape::grad_if_any(std::size_t id) const { return nodes_[id].grad.get(); }

void Tape::backward(Var root) {
  if (root.value().size() != 1)
    throw ShapeMismatch("backward() without seed needs a size-1 root, got " + shape_str(root.shape()));
  backward(root, Tensor(root.shape(), 1.0));
}

void Tape::backward(Var root, const Tensor& seed) {
  if (root.tape_ != this) throw Error("backward: root belongs to another tape");
  if (seed.shape() != root.shape())
    throw ShapeMismatch("backward seed " + shape_str(seed.shape()) + " vs root " + shape_str(root.shape()));
  if (!nodes_[root.id_].requires_grad) return;
  Tensor& g = grad_slot(root.id_);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (std::size_t id = root.id_ + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.grad || !n.backward) continue;
    n.backward(*this, id);
  }
}

void Tape::zero_grad() {
  for (auto& n : nodes_) n.grad.reset();
}

}  // namespace ulsa
