#pragma once

#include <functional>
#include <span>
#include <vector>

#include "suggest/numerics/graph.hpp"

namespace suggest::num {

// Differentiable op set. Shapes follow linear-algebra rules with ranks <= 2;
// a mismatch throws ShapeError naming both shapes. Broadcasting is limited
// to adding a bias vector to every row of a matrix.

/// a (n x k) times b (k x m); either side may be transposed.
template <typename T>
Var matmul(Graph<T>& g, Var a, Var b, bool trans_a = false, bool trans_b = false);
/// Same shapes, or matrix plus a length-cols bias ([cols] or [1, cols]).
template <typename T>
Var add(Graph<T>& g, Var a, Var b);
template <typename T>
Var sub(Graph<T>& g, Var a, Var b);
/// Elementwise product of same-shaped tensors.
template <typename T>
Var mul(Graph<T>& g, Var a, Var b);
template <typename T>
Var scale(Graph<T>& g, Var a, T factor);
template <typename T>
Var add_scalar(Graph<T>& g, Var a, T c);
template <typename T>
Var sigmoid(Graph<T>& g, Var a);
template <typename T>
Var tanh(Graph<T>& g, Var a);
template <typename T>
Var relu(Graph<T>& g, Var a);
template <typename T>
Var abs(Graph<T>& g, Var a);
/// Softmax along `axis` (rank-1 inputs use axis 0).
template <typename T>
Var softmax(Graph<T>& g, Var a, std::size_t axis);
/// Reduces `axis` with a max-shifted log-sum-exp. Matrix input yields a
/// vector; vector input yields a scalar.
template <typename T>
Var log_sum_exp(Graph<T>& g, Var a, std::size_t axis);
template <typename T>
Var concat(Graph<T>& g, std::span<const Var> parts, std::size_t axis);
/// Half-open range [begin, end) along `axis`.
template <typename T>
Var slice(Graph<T>& g, Var a, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T>
Var reshape(Graph<T>& g, Var a, Shape shape);
/// Sum of all elements (scalar).
template <typename T>
Var sum(Graph<T>& g, Var a);
/// Mean of all elements (scalar).
template <typename T>
Var mean(Graph<T>& g, Var a);
/// Sums a matrix along `axis`, yielding a vector.
template <typename T>
Var sum_axis(Graph<T>& g, Var a, std::size_t axis);

/// Worst coordinate found by a finite-difference check.
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t param = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares backward() against central differences for every coordinate of
/// every tensor in `params`. `build` must bind the tensors with Graph::param
/// and return a scalar. Relative error per coordinate is
/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
GradCheckResult grad_check(const std::function<Var(Graph<double>&)>& build,
                           std::span<Tensor<double>* const> params, double eps = 1e-4);

/// Single-input convenience form: `f` receives the bound input.
double grad_check(const std::function<Var(Graph<double>&, Var)>& f, Tensor<double> x, double eps = 1e-4);

}  // namespace suggest::num
