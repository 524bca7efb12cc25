#include "suggest/numerics/graph.hpp"

#include <sstream>

namespace suggest::num {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

template <typename T>
Var Graph<T>::constant(Tensor<T> t) {
  Node n;
  n.value = std::move(t);
  n.value.requires_grad = false;
  n.value.grad.clear();
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::param(Tensor<T>& t) {
  Node n;
  n.external = &t;
  n.needs_grad = grad_enabled_ && t.requires_grad;
  if (n.needs_grad) n.param = &t;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::view(const Tensor<T>& t) {
  Node n;
  n.external = &t;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::record(Tensor<T> value, std::vector<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (auto v : inputs) n.needs_grad = n.needs_grad || nodes_[v.id].needs_grad;
  }
  if (n.needs_grad) {
    n.inputs.reserve(inputs.size());
    for (auto v : inputs) n.inputs.push_back(v.id);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
const Tensor<T>& Graph<T>::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.external ? *n.external : n.value;
}

template <typename T>
void Graph<T>::backward(Var loss) {
  if (value(loss).size() != 1)
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(value(loss).shape));
  std::vector<Tensor<T>> grads(nodes_.size());
  std::vector<bool> has(nodes_.size(), false);
  grads[loss.id] = Tensor<T>(value(loss).shape, T(1));
  has[loss.id] = true;

  std::vector<const Tensor<T>*> in;
  std::vector<Tensor<T>*> gin;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || !has[i]) continue;
    if (n.param) {
      Tensor<T>& p = *n.param;
      if (p.grad.size() != p.size()) p.grad.assign(p.size(), T(0));
      for (std::size_t j = 0; j < p.size(); ++j) p.grad[j] += grads[i].data[j];
      continue;
    }
    if (!n.backward) continue;
    in.clear();
    gin.clear();
    for (std::size_t id : n.inputs) {
      in.push_back(&value(Var{id}));
      if (nodes_[id].needs_grad) {
        if (!has[id]) {
          grads[id] = Tensor<T>(value(Var{id}).shape, T(0));
          has[id] = true;
        }
        gin.push_back(&grads[id]);
      } else {
        gin.push_back(nullptr);
      }
    }
    n.backward(BackwardArgs{n.external ? *n.external : n.value, grads[i], in, gin});
    // Free intermediate gradients as soon as they are consumed.
    grads[i] = Tensor<T>();
  }
  clear();
}

template class Graph<float>;
template class Graph<double>;

}  // namespace suggest::num
