#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "ulsa/tensor.hpp"

namespace ulsa {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid as long as
/// the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  /// Accumulated gradient after Tape::backward; zeros if nothing flowed here.
  Tensor grad() const;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in creation order, which is a
/// topological order, so backward is one reverse sweep visiting each
/// node at most once. A tape is confined to one thread.
class Tape {
 public:
  /// Accumulates the node's gradient into its parents' gradients.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is tracked (parameters, inputs under test).
  Var leaf(Tensor value);
  /// Leaf without gradient tracking.
  Var constant(Tensor value);

  /// Records an op result. Gradient tracking is on iff any parent tracks
  /// gradients; when off, `fn` is dropped so no backward work is kept.
  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn);

  /// Seeds d(root)/d(root) = 1 for a size-1 root and sweeps backward.
  void backward(Var root);
  /// Seeds an explicit upstream gradient of the root's shape.
  void backward(Var root, const Tensor& seed);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient slot of a node, allocated (zero) on first access.
  Tensor& grad_slot(std::size_t id);
  const Tensor* grad_if_any(std::size_t id) const;
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_[id].parents; }

  Var var(std::size_t id) { return Var(this, id); }
  std::size_t size() const { return nodes_.size(); }

  /// Clears all gradients so backward can be run again.
  void zero_grad();

 private:
  struct Node {
    Tensor value;
    std::unique_ptr<Tensor> grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
};

}  // namespace ulsa
