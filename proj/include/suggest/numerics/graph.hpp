#pragma once

#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "suggest/numerics/tensor.hpp"

namespace suggest::num {

/// Handle to a value recorded on a Graph.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode tape. Operations are appended in execution order; backward()
/// walks them in reverse, visiting each node once, then clears the tape.
///
/// A graph built with `grad_enabled = false` records values only, which is
/// the inference path.
template <typename T>
class Graph {
 public:
  struct BackwardArgs {
    const Tensor<T>& out;
    const Tensor<T>& grad_out;
    std::span<const Tensor<T>* const> in;
    /// Null for inputs that do not need a gradient; otherwise a zero-initialised
    /// (or partially accumulated) buffer the rule must add into.
    std::span<Tensor<T>* const> grad_in;
  };
  using BackwardFn = std::function<void(const BackwardArgs&)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  /// Leaf holding a copy of `t`; never receives a gradient.
  Var constant(Tensor<T> t);
  /// Leaf referring to `t` without copying. When `t.requires_grad` and the
  /// graph records gradients, backward() accumulates into `t.grad`.
  /// `t` must outlive the graph's use of it.
  Var param(Tensor<T>& t);
  /// Read-only leaf referring to `t` without copying.
  Var view(const Tensor<T>& t);

  Var record(Tensor<T> value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor<T>& value(Var v) const;
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Populates gradients of every requires_grad tensor reachable from the
  /// scalar `loss`, then clears the tape.
  void backward(Var loss);
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T>* param = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool needs_grad = false;
  };

  std::deque<Node> nodes_;
  bool grad_enabled_;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace suggest::num
