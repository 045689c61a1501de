#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "tbdetect/error.hpp"
#include "tbdetect/tensor.hpp"

namespace tb {

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; identity is (tape, id).
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::uint32_t id = 0;

  bool valid() const { return tape != nullptr; }
  const Tensor<T>& value() const { return tape->value(*this); }
};

// Reverse-mode tape. Nodes are appended in execution order, which is a
// topological order by construction, so one reverse sweep propagates every
// gradient. A tape is confined to a single thread and a single backward pass;
// training builds a fresh tape per step.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // When disabled, ops still evaluate but record no backward closures; used
  // for inference so throwaway tapes stay light.
  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires_grad && grad_enabled_, nullptr});
    return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Var<T> record(Tensor<T> value, bool needs_grad, BackwardFn backward) {
    needs_grad = needs_grad && grad_enabled_;
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, needs_grad,
                          needs_grad ? std::move(backward) : nullptr});
    return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool needs_grad(Var<T> v) const { return nodes_.at(v.id).needs_grad; }

  // Gradient of a node, or nullptr when backward never reached it.
  const Tensor<T>* grad_ptr(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad.empty() ? nullptr : &n.grad;
  }

  const Tensor<T>& grad(Var<T> v) const {
    const Tensor<T>* g = grad_ptr(v);
    if (!g) throw ContractViolation("node has no gradient; call backward on a reachable loss first");
    return *g;
  }

  // Accumulates a contribution into a node's gradient buffer.
  void add_grad(Var<T> v, const Tensor<T>& g) {
    Node& n = nodes_.at(v.id);
    if (!n.needs_grad) return;
    if (!n.value.same_shape(g)) {
      throw ContractViolation("gradient shape " + shape_str(g.shape()) +
                              " does not match value shape " + shape_str(n.value.shape()));
    }
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    T* dst = n.grad.raw();
    const T* src = g.raw();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
  }

  // Reverse sweep from a scalar loss. Populates the gradient of every
  // reachable node that needs one, exactly once per tape.
  void backward(Var<T> loss) {
    if (loss.tape != this) throw ContractViolation("loss recorded on a different tape");
    if (value(loss).size() != 1) {
      throw ContractViolation("backward requires a scalar loss, got shape " +
                              shape_str(value(loss).shape()));
    }
    if (backward_done_) throw ContractViolation("backward already ran on this tape");
    backward_done_ = true;
    if (!nodes_[loss.id].needs_grad) return;
    nodes_[loss.id].grad = Tensor<T>::full(value(loss).shape(), T(1));
    for (std::uint32_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until backward reaches it
    bool needs_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

}  // namespace tb
