#include <doctest.h>

#include <cmath>
#include <limits>

#include "suggest/numerics/ops.hpp"
#include "suggest/numerics/optim.hpp"
#include "suggest/numerics/tensor_io.hpp"

using namespace suggest;
using namespace suggest::num;

namespace {

Tensor<double> random_tensor(Rng& rng, Shape s, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data) v = rng.uniform(-scale, scale);
  t.requires_grad = true;
  return t;
}

Shape random_matrix_shape(Rng& rng) { return {1 + rng.below(4), 1 + rng.below(4)}; }

// A fixed random projection turns any tensor into a scalar whose gradient
// exercises every output coordinate with a different weight.
Var probe(Graph<double>& g, Var y, Rng& rng) {
  Tensor<double> w(g.value(y).shape);
  for (auto& v : w.data) v = rng.uniform(-1, 1);
  return sum(g, mul(g, y, g.constant(std::move(w))));
}

template <typename Build>
double check_unary(std::uint64_t seed, Build build) {
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(seed + trial);
    Tensor<double> x = random_tensor(rng, random_matrix_shape(rng), 2.0);
    const std::uint64_t probe_seed = rng.next();
    Tensor<double>* ps[] = {&x};
    auto r = grad_check(
        [&](Graph<double>& g) {
          Rng pr(probe_seed);
          return probe(g, build(g, g.param(x)), pr);
        },
        ps);
    worst = std::max(worst, r.max_rel_error);
  }
  return worst;
}

}  // namespace

TEST_CASE("forward values of basic ops") {
  Graph<double> g(false);
  auto s = softmax(g, g.constant(Tensor<double>({2}, {0.0, 0.0})), 0);
  CHECK(g.value(s).data[0] == doctest::Approx(0.5));
  CHECK(g.value(s).data[1] == doctest::Approx(0.5));
  CHECK(g.value(sigmoid(g, g.constant(Tensor<double>::scalar(0.0)))).item() == 0.5);

  auto l = log_sum_exp(g, g.constant(Tensor<double>({2}, {1000.0, 1000.0})), 0);
  CHECK(g.value(l).item() == doctest::Approx(1000.0 + std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("log_sum_exp matches the max-shift formula at 32-bit") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(20);
    Tensor<float> x({n});
    std::vector<double> xd(n);
    for (std::size_t i = 0; i < n; ++i) xd[i] = x.data[i] = static_cast<float>(rng.uniform(-50, 50));
    double mx = -1e300;
    for (double v : xd) mx = std::max(mx, static_cast<double>(static_cast<float>(v)));
    double z = 0;
    for (double v : xd) z += std::exp(static_cast<double>(static_cast<float>(v)) - mx);
    Graph<float> g(false);
    const float got = g.value(log_sum_exp(g, g.constant(x), 0)).item();
    CHECK(std::abs(got - (mx + std::log(z))) <= 1e-6 * std::max(1.0, std::abs(mx)) * 4);
  }
}

TEST_CASE("softmax rows are distributions") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<float> x({1 + rng.below(5), 1 + rng.below(8)});
    for (auto& v : x.data) v = static_cast<float>(rng.uniform(-20, 20));
    for (std::size_t axis = 0; axis < 2; ++axis) {
      Graph<float> g(false);
      const auto& p = g.value(softmax(g, g.constant(x), axis));
      const std::size_t outer = axis == 1 ? p.rows() : p.cols();
      for (std::size_t o = 0; o < outer; ++o) {
        double s = 0;
        const std::size_t inner = axis == 1 ? p.cols() : p.rows();
        for (std::size_t i = 0; i < inner; ++i) {
          const float v = axis == 1 ? p(o, i) : p(i, o);
          CHECK(v >= 0.0f);
          s += v;
        }
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("backward of simple losses") {
  Tensor<double> x({3}, {1.0, 2.0, 3.0});
  x.requires_grad = true;
  Graph<double> g;
  g.backward(sum(g, g.param(x)));
  CHECK(x.grad == std::vector<double>{1, 1, 1});

  Tensor<double> y = Tensor<double>::scalar(3.0);
  y.requires_grad = true;
  Graph<double> g2;
  auto v = g2.param(y);
  g2.backward(mul(g2, v, v));
  CHECK(y.grad[0] == doctest::Approx(6.0));
  CHECK(g2.size() == 0);
}

TEST_CASE("backward rejects a non-scalar loss") {
  Tensor<double> x({2}, {1.0, 2.0});
  x.requires_grad = true;
  Graph<double> g;
  CHECK_THROWS_AS(g.backward(g.param(x)), ShapeError);
}

TEST_CASE("shape mismatch names both shapes") {
  Graph<double> g;
  auto a = g.constant(Tensor<double>({2, 3}));
  auto b = g.constant(Tensor<double>({2, 3}));
  try {
    matmul(g, a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string m = e.what();
    CHECK(m.find("[2, 3]") != std::string::npos);
  }
}

TEST_CASE("grad_check: sum of squares") {
  Rng rng(1);
  auto x = random_tensor(rng, {4, 3});
  const double err = grad_check([](Graph<double>& g, Var v) { return sum(g, mul(g, v, v)); }, x);
  CHECK(err < 1e-6);
}

TEST_CASE("grad_check: every op over random shapes") {
  CHECK(check_unary(100, [](Graph<double>& g, Var x) { return sigmoid(g, x); }) < 1e-4);
  CHECK(check_unary(200, [](Graph<double>& g, Var x) { return tanh(g, x); }) < 1e-4);
  CHECK(check_unary(300, [](Graph<double>& g, Var x) { return relu(g, add_scalar(g, x, 0.0123)); }) < 1e-4);
  CHECK(check_unary(400, [](Graph<double>& g, Var x) { return abs(g, add_scalar(g, x, 0.0123)); }) < 1e-4);
  CHECK(check_unary(500, [](Graph<double>& g, Var x) { return softmax(g, x, 1); }) < 1e-4);
  CHECK(check_unary(600, [](Graph<double>& g, Var x) { return softmax(g, x, 0); }) < 1e-4);
  CHECK(check_unary(700, [](Graph<double>& g, Var x) { return log_sum_exp(g, x, 1); }) < 1e-4);
  CHECK(check_unary(800, [](Graph<double>& g, Var x) { return log_sum_exp(g, x, 0); }) < 1e-4);
  CHECK(check_unary(900, [](Graph<double>& g, Var x) { return scale(g, x, -2.5); }) < 1e-4);
  CHECK(check_unary(1000, [](Graph<double>& g, Var x) { return sum_axis(g, x, 0); }) < 1e-4);
  CHECK(check_unary(1100, [](Graph<double>& g, Var x) { return sum_axis(g, x, 1); }) < 1e-4);
  CHECK(check_unary(1200, [](Graph<double>& g, Var x) { return mean(g, x); }) < 1e-4);
  CHECK(check_unary(1300, [](Graph<double>& g, Var x) {
          return slice(g, x, 1, 0, (g.value(x).cols() + 1) / 2);
        }) < 1e-4);
  CHECK(check_unary(1400, [](Graph<double>& g, Var x) {
          const auto& v = g.value(x);
          return reshape(g, x, Shape{v.size()});
        }) < 1e-4);
}

TEST_CASE("grad_check: binary ops, broadcasting and concat") {
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(5000 + trial);
    const std::size_t n = 1 + rng.below(4), k = 1 + rng.below(4), m = 1 + rng.below(4);
    const bool ta = rng.below(2), tb = rng.below(2);
    auto a = random_tensor(rng, ta ? Shape{k, n} : Shape{n, k});
    auto b = random_tensor(rng, tb ? Shape{m, k} : Shape{k, m});
    auto c = random_tensor(rng, {n, m});
    auto bias = random_tensor(rng, {m});
    const auto ps_seed = rng.next();
    Tensor<double>* ps[] = {&a, &b, &c, &bias};
    auto r = grad_check(
        [&](Graph<double>& g) {
          Rng pr(ps_seed);
          Var ab = matmul(g, g.param(a), g.param(b), ta, tb);
          Var y = mul(g, add(g, ab, g.param(bias)), sub(g, g.param(c), ab));
          Var parts[] = {y, g.param(c)};
          return probe(g, concat(g, std::span<const Var>(parts), trial % 2), pr);
        },
        ps);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("gradients accumulate over two consumers") {
  Rng rng(11);
  auto x = random_tensor(rng, {3, 3});
  const double err = grad_check(
      [](Graph<double>& g, Var v) { return sum(g, mul(g, tanh(g, v), matmul(g, v, v))); }, x);
  CHECK(err < 1e-4);
}

TEST_CASE("grad_check detects a corrupted backward rule") {
  Rng rng(12);
  auto x = random_tensor(rng, {3, 2});
  const double err = grad_check(
      [](Graph<double>& g, Var v) {
        const Tensor<double>& xv = g.value(v);
        Tensor<double> y(xv.shape);
        for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = xv.data[i] * xv.data[i];
        // derivative deliberately off by a factor of 1.5
        Var out = g.record(std::move(y), {v}, [](const Graph<double>::BackwardArgs& a) {
          for (std::size_t i = 0; i < a.out.size(); ++i)
            a.grad_in[0]->data[i] += a.grad_out.data[i] * 3.0 * a.in[0]->data[i];
        });
        return sum(g, out);
      },
      x);
  CHECK(err > 1e-2);
}

TEST_CASE("noam schedule") {
  NoamSchedule s;
  CHECK_THROWS_AS(s.lr(0), Error);
  CHECK(s.lr(1) == doctest::Approx(1.0 / (std::sqrt(300.0) * std::pow(4000.0, 1.5))).epsilon(1e-12));
  CHECK(s.lr(4000) == doctest::Approx(1.0 / (std::sqrt(300.0) * std::sqrt(4000.0))).epsilon(1e-12));
  for (std::uint64_t t = 1; t < 4000; t += 37) CHECK(s.lr(t) <= s.lr(t + 1));
  for (std::uint64_t t = 4000; t < 20000; t += 91) CHECK(s.lr(t) >= s.lr(t + 1));
}

TEST_CASE("adam step") {
  Tensor<float> w({3}, {1.0f, -2.0f, 0.5f});
  w.requires_grad = true;
  NamedParam<float> p{"w", &w};
  AdamState<float> st;

  w.grad.assign(3, 0.0f);
  adam_step(std::span<const NamedParam<float>>(&p, 1), st, 0.1);
  CHECK(w.data == std::vector<float>{1.0f, -2.0f, 0.5f});

  // constant gradient: the first bias-corrected step moves every coordinate by lr
  Tensor<float> u({3}, {1.0f, -2.0f, 0.5f});
  u.requires_grad = true;
  u.grad = {0.3f, -5.0f, 1e-3f};
  NamedParam<float> q{"u", &u};
  AdamState<float> st2;
  adam_step(std::span<const NamedParam<float>>(&q, 1), st2, 0.01);
  CHECK(u.data[0] == doctest::Approx(0.99).epsilon(1e-6));
  CHECK(u.data[1] == doctest::Approx(-1.99).epsilon(1e-6));
  CHECK(u.data[2] == doctest::Approx(0.49).epsilon(1e-5));
  CHECK(st2.step == 1);

  u.grad[1] = std::numeric_limits<float>::quiet_NaN();
  try {
    adam_step(std::span<const NamedParam<float>>(&q, 1), st2, 0.01);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("u") != std::string::npos);
  }
}

TEST_CASE("tensor file round trip and corruption") {
  TensorFile f;
  f.add("a", Tensor<float>({2, 2}, {1, 2, 3, 4}));
  f.add("b.c", Tensor<float>({3}, {-1, 0.5f, 7}));
  f.metadata = R"({"k":1})";
  const std::string bytes = encode_tensor_file(f);
  CHECK(bytes.substr(0, 4) == "RSV1");
  auto back = decode_tensor_file(bytes);
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.get("a").data == f.get("a").data);
  CHECK(back.get("b.c").shape == Shape{3});
  CHECK(*back.metadata == *f.metadata);

  CHECK_THROWS_AS(decode_tensor_file(bytes.substr(0, bytes.size() - 3)), FormatError);
  std::string flipped = bytes;
  flipped[30] ^= 0x10;
  CHECK_THROWS_AS(decode_tensor_file(flipped), FormatError);
  CHECK_THROWS_AS(decode_tensor_file("XXXX"), FormatError);
}
