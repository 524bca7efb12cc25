#include "suggest/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "suggest/numerics/blas.hpp"
#include "suggest/numerics/fastmath.hpp"

namespace suggest::num {

namespace {

template <typename T>
[[noreturn]] void mismatch(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

template <typename T>
void require_rank_le2(const char* op, const Tensor<T>& a) {
  if (a.rank() > 2) throw ShapeError(std::string(op) + ": rank > 2 not supported, got " + shape_str(a.shape));
}

// Iteration over the 1-D lanes of a tensor along one axis.
struct Lanes {
  std::size_t groups = 1, len = 1, stride = 1, group_step = 0, group_stride_inner = 1;
  std::size_t offset(std::size_t g) const { return group_step ? g * group_step : g * group_stride_inner; }
};

template <typename T>
Lanes lanes(const char* op, const Tensor<T>& a, std::size_t axis) {
  require_rank_le2(op, a);
  Lanes l;
  if (a.rank() == 0) {
    if (axis != 0) throw ShapeError(std::string(op) + ": axis out of range for scalar");
    return l;
  }
  if (a.rank() == 1) {
    if (axis != 0) throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape));
    l.len = a.shape[0];
    return l;
  }
  const std::size_t r = a.shape[0], c = a.shape[1];
  if (axis == 1) {
    l.groups = r;
    l.len = c;
    l.stride = 1;
    l.group_step = c;
  } else if (axis == 0) {
    l.groups = c;
    l.len = r;
    l.stride = c;
    l.group_step = 0;
    l.group_stride_inner = 1;
  } else {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape));
  }
  return l;
}

template <typename T>
Shape reduced_shape(const Tensor<T>& a, std::size_t axis) {
  if (a.rank() <= 1) return Shape{};
  return Shape{axis == 1 ? a.shape[0] : a.shape[1]};
}

template <typename T, typename F, typename D>
Var unary(Graph<T>& g, Var a, F f, D dfdx_from_x_y) {
  const Tensor<T>& x = g.value(a);
  Tensor<T> y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = f(x.data[i]);
  return g.record(std::move(y), {a}, [dfdx_from_x_y](const typename Graph<T>::BackwardArgs& b) {
    const auto& x = *b.in[0];
    auto& gx = *b.grad_in[0];
    for (std::size_t i = 0; i < x.size(); ++i)
      gx.data[i] += b.grad_out.data[i] * dfdx_from_x_y(x.data[i], b.out.data[i]);
  });
}

}  // namespace

template <typename T>
Var matmul(Graph<T>& g, Var a, Var b, bool ta, bool tb) {
  const Tensor<T>& A = g.value(a);
  const Tensor<T>& B = g.value(b);
  if (A.rank() != 2 || B.rank() != 2) mismatch("matmul", A, B);
  const std::size_t ar = A.shape[0], ac = A.shape[1], br = B.shape[0], bc = B.shape[1];
  const std::size_t m = ta ? ac : ar, k = ta ? ar : ac;
  const std::size_t k2 = tb ? bc : br, n = tb ? br : bc;
  if (k != k2) mismatch("matmul", A, B);
  Tensor<T> C(Shape{m, n});
  if (k > 0) blas::gemm(ta, tb, m, n, k, T(1), A.data.data(), ac, B.data.data(), bc, T(0), C.data.data(), n);
  return g.record(std::move(C), {a, b}, [=](const typename Graph<T>::BackwardArgs& args) {
    const T* dC = args.grad_out.data.data();
    const T* Ad = args.in[0]->data.data();
    const T* Bd = args.in[1]->data.data();
    if (k == 0) return;
    if (Tensor<T>* dA = args.grad_in[0]) {
      if (!ta) blas::gemm(false, !tb, m, k, n, T(1), dC, n, Bd, bc, T(1), dA->data.data(), ac);
      else blas::gemm(tb, true, k, m, n, T(1), Bd, bc, dC, n, T(1), dA->data.data(), ac);
    }
    if (Tensor<T>* dB = args.grad_in[1]) {
      if (!tb) blas::gemm(!ta, false, k, n, m, T(1), Ad, ac, dC, n, T(1), dB->data.data(), bc);
      else blas::gemm(true, ta, n, k, m, T(1), dC, n, Ad, ac, T(1), dB->data.data(), bc);
    }
  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& A = g.value(a);
  const Tensor<T>& B = g.value(b);
  if (A.shape == B.shape) {
    Tensor<T> C(A.shape);
    for (std::size_t i = 0; i < A.size(); ++i) C.data[i] = A.data[i] + B.data[i];
    return g.record(std::move(C), {a, b}, [](const typename Graph<T>::BackwardArgs& args) {
      for (int s = 0; s < 2; ++s)
        if (Tensor<T>* d = args.grad_in[s])
          for (std::size_t i = 0; i < d->size(); ++i) d->data[i] += args.grad_out.data[i];
    });
  }
  const bool bias = A.rank() == 2 && B.size() == A.shape[1] &&
                    (B.rank() == 1 || (B.rank() == 2 && B.shape[0] == 1));
  if (!bias) mismatch("add", A, B);
  const std::size_t r = A.shape[0], c = A.shape[1];
  Tensor<T> C(A.shape);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) C.data[i * c + j] = A.data[i * c + j] + B.data[j];
  return g.record(std::move(C), {a, b}, [r, c](const typename Graph<T>::BackwardArgs& args) {
    if (Tensor<T>* d = args.grad_in[0])
      for (std::size_t i = 0; i < r * c; ++i) d->data[i] += args.grad_out.data[i];
    if (Tensor<T>* d = args.grad_in[1])
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) d->data[j] += args.grad_out.data[i * c + j];
  });
}

template <typename T>
Var sub(Graph<T>& g, Var a, Var b) {
  return add(g, a, scale(g, b, T(-1)));
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& A = g.value(a);
  const Tensor<T>& B = g.value(b);
  if (A.shape != B.shape) mismatch("mul", A, B);
  Tensor<T> C(A.shape);
  for (std::size_t i = 0; i < A.size(); ++i) C.data[i] = A.data[i] * B.data[i];
  return g.record(std::move(C), {a, b}, [](const typename Graph<T>::BackwardArgs& args) {
    const auto& x = *args.in[0];
    const auto& y = *args.in[1];
    if (Tensor<T>* d = args.grad_in[0])
      for (std::size_t i = 0; i < d->size(); ++i) d->data[i] += args.grad_out.data[i] * y.data[i];
    if (Tensor<T>* d = args.grad_in[1])
      for (std::size_t i = 0; i < d->size(); ++i) d->data[i] += args.grad_out.data[i] * x.data[i];
  });
}

template <typename T>
Var scale(Graph<T>& g, Var a, T factor) {
  return unary(g, a, [factor](T x) { return factor * x; }, [factor](T, T) { return factor; });
}

template <typename T>
Var add_scalar(Graph<T>& g, Var a, T c) {
  return unary(g, a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var sigmoid(Graph<T>& g, Var a) {
  return unary(
      g, a, [](T x) { return num::sigmoid(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var tanh(Graph<T>& g, Var a) {
  return unary(
      g, a, [](T x) { return num::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var relu(Graph<T>& g, Var a) {
  return unary(
      g, a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var abs(Graph<T>& g, Var a) {
  return unary(
      g, a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var softmax(Graph<T>& g, Var a, std::size_t axis) {
  const Tensor<T>& x = g.value(a);
  const Lanes l = lanes("softmax", x, axis);
  Tensor<T> y(x.shape);
  for (std::size_t gi = 0; gi < l.groups; ++gi) {
    const std::size_t off = l.offset(gi);
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < l.len; ++i) mx = std::max(mx, x.data[off + i * l.stride]);
    T s = 0;
    for (std::size_t i = 0; i < l.len; ++i) {
      const T e = std::exp(x.data[off + i * l.stride] - mx);
      y.data[off + i * l.stride] = e;
      s += e;
    }
    for (std::size_t i = 0; i < l.len; ++i) y.data[off + i * l.stride] /= s;
  }
  return g.record(std::move(y), {a}, [l](const typename Graph<T>::BackwardArgs& args) {
    auto& gx = *args.grad_in[0];
    for (std::size_t gi = 0; gi < l.groups; ++gi) {
      const std::size_t off = l.offset(gi);
      T dot = 0;
      for (std::size_t i = 0; i < l.len; ++i) dot += args.grad_out.data[off + i * l.stride] * args.out.data[off + i * l.stride];
      for (std::size_t i = 0; i < l.len; ++i) {
        const std::size_t p = off + i * l.stride;
        gx.data[p] += args.out.data[p] * (args.grad_out.data[p] - dot);
      }
    }
  });
}

template <typename T>
Var log_sum_exp(Graph<T>& g, Var a, std::size_t axis) {
  const Tensor<T>& x = g.value(a);
  const Lanes l = lanes("log_sum_exp", x, axis);
  Tensor<T> y(reduced_shape(x, axis));
  for (std::size_t gi = 0; gi < l.groups; ++gi) {
    const std::size_t off = l.offset(gi);
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < l.len; ++i) mx = std::max(mx, x.data[off + i * l.stride]);
    if (std::isinf(mx)) {
      y.data[gi] = mx;
      continue;
    }
    T s = 0;
    for (std::size_t i = 0; i < l.len; ++i) s += std::exp(x.data[off + i * l.stride] - mx);
    y.data[gi] = mx + std::log(s);
  }
  return g.record(std::move(y), {a}, [l](const typename Graph<T>::BackwardArgs& args) {
    const auto& x = *args.in[0];
    auto& gx = *args.grad_in[0];
    for (std::size_t gi = 0; gi < l.groups; ++gi) {
      const std::size_t off = l.offset(gi);
      const T out = args.out.data[gi];
      if (std::isinf(out)) continue;
      for (std::size_t i = 0; i < l.len; ++i) {
        const std::size_t p = off + i * l.stride;
        gx.data[p] += args.grad_out.data[gi] * std::exp(x.data[p] - out);
      }
    }
  });
}

template <typename T>
Var concat(Graph<T>& g, std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Tensor<T>& first = g.value(parts[0]);
  require_rank_le2("concat", first);
  if (first.rank() == 0) throw ShapeError("concat: scalars cannot be concatenated");
  if (axis >= first.rank()) throw ShapeError("concat: axis out of range for " + shape_str(first.shape));

  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (auto v : parts) {
    const Tensor<T>& t = g.value(v);
    if (t.rank() != first.rank()) mismatch("concat", first, t);
    if (first.rank() == 2 && t.shape[1 - axis] != first.shape[1 - axis]) mismatch("concat", first, t);
    widths.push_back(t.shape[axis]);
    total += t.shape[axis];
  }

  Shape out_shape = first.shape;
  out_shape[axis] = total;
  Tensor<T> y(out_shape);
  const std::size_t rows = first.rank() == 2 ? first.shape[0] : 1;
  const std::size_t out_cols = y.cols();
  std::size_t pos = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor<T>& t = g.value(parts[p]);
    if (first.rank() == 1 || axis == 0) {
      std::copy(t.data.begin(), t.data.end(), y.data.begin() + static_cast<std::ptrdiff_t>(pos * (first.rank() == 2 ? out_cols : 1)));
    } else {
      const std::size_t w = widths[p];
      for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(r * w), w, y.data.begin() + static_cast<std::ptrdiff_t>(r * out_cols + pos));
    }
    pos += widths[p];
  }
  const std::size_t rank = first.rank();
  return g.record(std::move(y), std::vector<Var>(parts.begin(), parts.end()),
                  [widths, rows, out_cols, axis, rank](const typename Graph<T>::BackwardArgs& args) {
                    std::size_t pos = 0;
                    for (std::size_t p = 0; p < widths.size(); ++p) {
                      if (Tensor<T>* d = args.grad_in[p]) {
                        const std::size_t w = widths[p];
                        if (rank == 1 || axis == 0) {
                          const std::size_t off = pos * (rank == 2 ? out_cols : 1);
                          for (std::size_t i = 0; i < d->size(); ++i) d->data[i] += args.grad_out.data[off + i];
                        } else {
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < w; ++j) d->data[r * w + j] += args.grad_out.data[r * out_cols + pos + j];
                        }
                      }
                      pos += widths[p];
                    }
                  });
}

template <typename T>
Var slice(Graph<T>& g, Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor<T>& x = g.value(a);
  require_rank_le2("slice", x);
  if (x.rank() == 0 || axis >= x.rank()) throw ShapeError("slice: axis out of range for " + shape_str(x.shape));
  if (begin > end || end > x.shape[axis])
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of bounds for " +
                     shape_str(x.shape));
  Shape s = x.shape;
  s[axis] = end - begin;
  Tensor<T> y(s);
  const std::size_t rows = x.rank() == 2 ? x.shape[0] : 1;
  const std::size_t cols = x.cols();
  if (x.rank() == 1 || axis == 0) {
    const std::size_t stride = x.rank() == 2 ? cols : 1;
    std::copy(x.data.begin() + static_cast<std::ptrdiff_t>(begin * stride),
              x.data.begin() + static_cast<std::ptrdiff_t>(end * stride), y.data.begin());
  } else {
    const std::size_t w = end - begin;
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(r * cols + begin), w,
                  y.data.begin() + static_cast<std::ptrdiff_t>(r * w));
  }
  const std::size_t rank = x.rank();
  return g.record(std::move(y), {a}, [=](const typename Graph<T>::BackwardArgs& args) {
    auto& d = *args.grad_in[0];
    if (rank == 1 || axis == 0) {
      const std::size_t stride = rank == 2 ? cols : 1;
      for (std::size_t i = 0; i < args.grad_out.size(); ++i) d.data[begin * stride + i] += args.grad_out.data[i];
    } else {
      const std::size_t w = end - begin;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j) d.data[r * cols + begin + j] += args.grad_out.data[r * w + j];
    }
  });
}

template <typename T>
Var reshape(Graph<T>& g, Var a, Shape shape) {
  const Tensor<T>& x = g.value(a);
  if (shape_size(shape) != x.size())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(shape));
  Tensor<T> y(std::move(shape), x.data);
  return g.record(std::move(y), {a}, [](const typename Graph<T>::BackwardArgs& args) {
    auto& d = *args.grad_in[0];
    for (std::size_t i = 0; i < d.size(); ++i) d.data[i] += args.grad_out.data[i];
  });
}

template <typename T>
Var sum(Graph<T>& g, Var a) {
  const Tensor<T>& x = g.value(a);
  T s = 0;
  for (T v : x.data) s += v;
  return g.record(Tensor<T>::scalar(s), {a}, [](const typename Graph<T>::BackwardArgs& args) {
    auto& d = *args.grad_in[0];
    const T go = args.grad_out.data[0];
    for (auto& v : d.data) v += go;
  });
}

template <typename T>
Var mean(Graph<T>& g, Var a) {
  const Tensor<T>& x = g.value(a);
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  T s = 0;
  for (T v : x.data) s += v;
  const T n = static_cast<T>(x.size());
  return g.record(Tensor<T>::scalar(s / n), {a}, [n](const typename Graph<T>::BackwardArgs& args) {
    auto& d = *args.grad_in[0];
    const T go = args.grad_out.data[0] / n;
    for (auto& v : d.data) v += go;
  });
}

template <typename T>
Var sum_axis(Graph<T>& g, Var a, std::size_t axis) {
  const Tensor<T>& x = g.value(a);
  const Lanes l = lanes("sum_axis", x, axis);
  Tensor<T> y(reduced_shape(x, axis));
  for (std::size_t gi = 0; gi < l.groups; ++gi) {
    T s = 0;
    for (std::size_t i = 0; i < l.len; ++i) s += x.data[l.offset(gi) + i * l.stride];
    y.data[gi] = s;
  }
  return g.record(std::move(y), {a}, [l](const typename Graph<T>::BackwardArgs& args) {
    auto& d = *args.grad_in[0];
    for (std::size_t gi = 0; gi < l.groups; ++gi)
      for (std::size_t i = 0; i < l.len; ++i) d.data[l.offset(gi) + i * l.stride] += args.grad_out.data[gi];
  });
}

// ---------------------------------------------------------------------------

GradCheckResult grad_check(const std::function<Var(Graph<double>&)>& build,
                           std::span<Tensor<double>* const> params, double eps) {
  for (auto* p : params) {
    p->requires_grad = true;
    p->grad.clear();
  }
  {
    Graph<double> g(true);
    const Var loss = build(g);
    g.backward(loss);
  }
  auto eval = [&] {
    Graph<double> g(false);
    return g.value(build(g)).item();
  };

  GradCheckResult worst;
  bool first = true;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double>& p = *params[pi];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double analytic = p.has_grad() ? p.grad[i] : 0.0;
      const double orig = p.data[i];
      p.data[i] = orig + eps;
      const double up = eval();
      p.data[i] = orig - eps;
      const double down = eval();
      p.data[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double rel = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      if (first || rel > worst.max_rel_error) {
        worst = GradCheckResult{rel, pi, i, analytic, numeric};
        first = false;
      }
    }
  }
  return worst;
}

double grad_check(const std::function<Var(Graph<double>&, Var)>& f, Tensor<double> x, double eps) {
  Tensor<double>* ptr = &x;
  return grad_check([&](Graph<double>& g) { return f(g, g.param(x)); }, std::span<Tensor<double>* const>(&ptr, 1), eps)
      .max_rel_error;
}

#define SUGGEST_INSTANTIATE_OPS(T)                                                      \
  template Var matmul<T>(Graph<T>&, Var, Var, bool, bool);                              \
  template Var add<T>(Graph<T>&, Var, Var);                                             \
  template Var sub<T>(Graph<T>&, Var, Var);                                             \
  template Var mul<T>(Graph<T>&, Var, Var);                                             \
  template Var scale<T>(Graph<T>&, Var, T);                                             \
  template Var add_scalar<T>(Graph<T>&, Var, T);                                        \
  template Var sigmoid<T>(Graph<T>&, Var);                                              \
  template Var tanh<T>(Graph<T>&, Var);                                                 \
  template Var relu<T>(Graph<T>&, Var);                                                 \
  template Var abs<T>(Graph<T>&, Var);                                                  \
  template Var softmax<T>(Graph<T>&, Var, std::size_t);                                 \
  template Var log_sum_exp<T>(Graph<T>&, Var, std::size_t);                             \
  template Var concat<T>(Graph<T>&, std::span<const Var>, std::size_t);                 \
  template Var slice<T>(Graph<T>&, Var, std::size_t, std::size_t, std::size_t);         \
  template Var reshape<T>(Graph<T>&, Var, Shape);                                       \
  template Var sum<T>(Graph<T>&, Var);                                                  \
  template Var mean<T>(Graph<T>&, Var);                                                 \
  template Var sum_axis<T>(Graph<T>&, Var, std::size_t);

SUGGEST_INSTANTIATE_OPS(float)
SUGGEST_INSTANTIATE_OPS(double)

}  // namespace suggest::num
