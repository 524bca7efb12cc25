#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "suggest/encoder.hpp"
#include "suggest/numerics/ops.hpp"

using namespace suggest;
using namespace suggest::enc;
using num::Shape;

namespace {

EncoderConfig toy(Cell cell = Cell::sru) {
  EncoderConfig c;
  c.cell = cell;
  c.layers = 2;
  c.input_dim = 8;
  c.hidden = 8;
  c.heads = 2;
  c.attn_dim = 4;
  return c;
}

// Initialisation leaves biases at zero; tests want every parameter active.
template <typename T>
void jitter(Encoder<T>& e, Rng& rng, double scale = 0.5) {
  for (auto& p : e.parameters("x"))
    for (auto& v : p.tensor->data) v += static_cast<T>(rng.uniform(-scale, scale) * 0.2);
}

template <typename T>
Tensor<T> random_rows(Rng& rng, std::size_t n, std::size_t d, double scale = 1.0) {
  Tensor<T> x(Shape{n, d});
  for (auto& v : x.data) v = static_cast<T>(rng.uniform(-scale, scale));
  return x;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<double> matvec(const Tensor<float>& m, const double* x) {
  std::vector<double> y(m.rows(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) y[i] += m(i, j) * x[j];
  return y;
}

// Direct transcription of the SRU recurrence over canonical tensors.
std::vector<std::vector<double>> sru_oracle(const num::TensorFile& f, const std::string& p, const Tensor<double>& x,
                                            bool reverse, std::size_t split_off, std::vector<double> c) {
  const auto& W = f.get(p + "W");
  const auto& Wf = f.get(p + "W_f");
  const auto& Wr = f.get(p + "W_r");
  const auto* P = f.find(p + "P");
  const auto& vf = f.get(p + "v_f").data;
  const auto& vr = f.get(p + "v_r").data;
  const auto& bf = f.get(p + "b_f").data;
  const auto& br = f.get(p + "b_r").data;
  const std::size_t n = x.rows(), h = W.rows();
  std::vector<std::vector<double>> out(n, std::vector<double>(h));
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t t = reverse ? n - 1 - s : s;
    const double* xt = x.row(t);
    auto wx = matvec(W, xt), fx = matvec(Wf, xt), rx = matvec(Wr, xt);
    std::vector<double> hw(h);
    if (P) {
      hw = matvec(*P, xt);
    } else {
      for (std::size_t j = 0; j < h; ++j) hw[j] = xt[split_off + j];
    }
    for (std::size_t j = 0; j < h; ++j) {
      const double f_ = sig(fx[j] + vf[j] * c[j] + bf[j]);
      const double r_ = sig(rx[j] + vr[j] * c[j] + br[j]);
      const double cn = f_ * c[j] + (1 - f_) * wx[j];
      out[t][j] = r_ * cn + (1 - r_) * hw[j];
      c[j] = cn;
    }
  }
  return out;
}

std::vector<std::vector<double>> lstm_oracle(const num::TensorFile& f, const std::string& p, const Tensor<double>& x,
                                             bool reverse) {
  const auto& Wih = f.get(p + "W_ih");
  const auto& Whh = f.get(p + "W_hh");
  const auto& b = f.get(p + "b").data;
  const std::size_t n = x.rows(), h = Whh.cols();
  std::vector<double> hs(h, 0.0), cs(h, 0.0);
  std::vector<std::vector<double>> out(n, std::vector<double>(h));
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t t = reverse ? n - 1 - s : s;
    auto a = matvec(Wih, x.row(t));
    auto r = matvec(Whh, hs.data());
    for (std::size_t j = 0; j < h; ++j) {
      const double i_ = sig(a[j] + r[j] + b[j]);
      const double f_ = sig(a[h + j] + r[h + j] + b[h + j]);
      const double g_ = std::tanh(a[2 * h + j] + r[2 * h + j] + b[2 * h + j]);
      const double o_ = sig(a[3 * h + j] + r[3 * h + j] + b[3 * h + j]);
      cs[j] = f_ * cs[j] + i_ * g_;
      hs[j] = o_ * std::tanh(cs[j]);
      out[t][j] = hs[j];
    }
  }
  return out;
}

double full_grad_check(EncoderConfig cfg, std::vector<std::size_t> lengths, std::uint64_t seed) {
  Rng rng(seed);
  Encoder<double> enc = Encoder<float>(cfg, rng).cast<double>();
  jitter(enc, rng);
  enc.set_requires_grad(true);
  const Segments seg = Segments::packed(lengths);
  Tensor<double> x = random_rows<double>(rng, seg.rows, cfg.input_dim);
  x.requires_grad = true;
  Tensor<double> probe = random_rows<double>(rng, lengths.size(), cfg.output_dim());
  std::vector<Tensor<double>*> ps{&x};
  for (auto& p : enc.parameters("e")) ps.push_back(p.tensor);
  auto r = num::grad_check(
      [&](num::Graph<double>& g) {
        Var y = enc.forward(g, g.param(x), seg);
        return num::sum(g, num::mul(g, y, g.constant(probe)));
      },
      ps);
  return r.max_rel_error;
}

}  // namespace

TEST_CASE("sru: hand-evaluated single step") {
  SruLayer<double> L;
  L.input_dim = L.hidden = 1;
  L.weight = Tensor<double>(Shape{1, 3}, {1, 1, 1});
  L.gates = Tensor<double>(Shape{1, 4});
  auto out = sru_layer_forward(Tensor<double>(Shape{1, 1}, {0.0}), {1.0}, L);
  CHECK(out.h(0, 0) == doctest::Approx(0.25));
  CHECK(out.state[0] == doctest::Approx(0.5));
}

TEST_CASE("sru and lstm: zero input and state give zero output") {
  Rng rng(1);
  for (Cell cell : {Cell::sru, Cell::lstm}) {
    EncoderConfig c = toy(cell);
    Encoder<double> e(c, rng);
    Tensor<double> x(Shape{4, 8});
    if (cell == Cell::sru) {
      auto o = sru_layer_forward(x, std::vector<double>(8, 0.0), e.sru_layers()[0]);
      for (double v : o.h.data) CHECK(v == 0.0);
    } else {
      auto o = lstm_layer_forward(x, std::vector<double>(16, 0.0), e.lstm_layers()[0]);
      for (double v : o.h.data) CHECK(v == 0.0);
    }
  }
}

TEST_CASE("sru layer matches a direct transcription of the recurrence") {
  for (Highway hw : {Highway::automatic, Highway::projection}) {
    Rng rng(2);
    EncoderConfig c = toy();
    c.highway = hw;
    Encoder<float> e(c, rng);
    jitter(e, rng);
    num::TensorFile f;
    e.export_tensors("m", f);
    Encoder<double> ed = e.cast<double>();
    for (std::size_t layer = 0; layer < 2; ++layer) {
      const auto& L = ed.sru_layers()[layer];
      Tensor<double> x = random_rows<double>(rng, 6, L.input_dim);
      std::vector<double> c0(8);
      for (auto& v : c0) v = rng.uniform(-1, 1);
      for (std::size_t d = 0; d < 2; ++d) {
        auto got = sru_layer_forward(x, c0, L, d);
        const std::string p = "m.layer" + std::to_string(layer) + (d == 0 ? ".fwd." : ".bwd.");
        auto want = sru_oracle(f, p, x, d == 1, L.highway == HighwayKind::split ? d * 8 : 0, c0);
        for (std::size_t t = 0; t < 6; ++t)
          for (std::size_t j = 0; j < 8; ++j) CHECK(got.h(t, j) == doctest::Approx(want[t][j]).epsilon(1e-9));
      }
    }
    CHECK(ed.sru_layers()[1].highway == (hw == Highway::automatic ? HighwayKind::split : HighwayKind::projection));
  }
}

TEST_CASE("lstm layer matches a direct transcription") {
  Rng rng(3);
  Encoder<float> e(toy(Cell::lstm), rng);
  jitter(e, rng);
  num::TensorFile f;
  e.export_tensors("m", f);
  Encoder<double> ed = e.cast<double>();
  for (std::size_t layer = 0; layer < 2; ++layer) {
    const auto& L = ed.lstm_layers()[layer];
    Tensor<double> x = random_rows<double>(rng, 5, L.input_dim);
    for (std::size_t d = 0; d < 2; ++d) {
      auto got = lstm_layer_forward(x, std::vector<double>(16, 0.0), L, d);
      auto want = lstm_oracle(f, "m.layer" + std::to_string(layer) + (d == 0 ? ".fwd." : ".bwd."), x, d == 1);
      for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t j = 0; j < 8; ++j) CHECK(got.h(t, j) == doctest::Approx(want[t][j]).epsilon(1e-9));
    }
  }
}

TEST_CASE("sru gates stay inside (0, 1)") {
  Rng rng(4);
  Encoder<double> e(toy(), rng);
  jitter(e, rng, 5.0);
  const auto& L = e.sru_layers()[0];
  Tensor<double> x = random_rows<double>(rng, 10, 8, 3.0);
  // With W x_t = 0 and c0 = 0, h_t = (1 - r_t) x_t, so h / x recovers 1 - r.
  SruLayer<double> z = L;
  for (std::size_t r = 0; r < z.weight.rows(); ++r)
    for (std::size_t j = 0; j < 8; ++j) z.weight(r, j) = 0;
  auto o = sru_layer_forward(x, std::vector<double>(8, 0.0), z);
  for (std::size_t i = 0; i < o.h.size(); ++i) {
    const double one_minus_r = o.h.data[i] / x.data[i];
    CHECK(one_minus_r > 0.0);
    CHECK(one_minus_r < 1.0);
  }
}

TEST_CASE("full encoder gradient check at toy dims") {
  CHECK(full_grad_check(toy(), {5}, 10) < 1e-4);
  CHECK(full_grad_check(toy(), {5, 3, 1}, 11) < 1e-4);
  EncoderConfig proj = toy();
  proj.highway = Highway::projection;
  CHECK(full_grad_check(proj, {4, 2}, 12) < 1e-4);
  EncoderConfig uni = toy();
  uni.bidirectional = false;
  uni.input_dim = 5;
  CHECK(full_grad_check(uni, {4}, 13) < 1e-4);
  CHECK(full_grad_check(toy(Cell::lstm), {5, 2}, 14) < 1e-4);
  EncoderConfig relu = toy();
  relu.activation = Activation::sigmoid;
  CHECK(full_grad_check(relu, {3}, 15) < 1e-4);
}

TEST_CASE("sru recurrence gradient with an initial state") {
  Rng rng(16);
  Encoder<double> e = Encoder<float>(toy(), rng).cast<double>();
  jitter(e, rng);
  SruLayer<double> L = e.sru_layers()[0];
  L.weight.requires_grad = L.gates.requires_grad = true;
  Tensor<double> x = random_rows<double>(rng, 4, 8);
  x.requires_grad = true;
  std::vector<double> c0(8);
  for (auto& v : c0) v = rng.uniform(-1, 1);
  const Segments seg = Segments::packed({4});
  Tensor<double>* ps[] = {&x, &L.weight, &L.gates};
  for (std::size_t d = 0; d < 2; ++d) {
    auto r = num::grad_check(
        [&](num::Graph<double>& g) {
          Var xv = g.param(x);
          Var u = num::matmul(g, xv, g.param(L.weight));
          Var h = sru_recurrence(g, u, xv, g.param(L.gates), L, d, seg, &c0);
          return num::sum(g, num::mul(g, h, num::tanh(g, h)));
        },
        ps);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("attention pooling properties") {
  Rng rng(20);
  EncoderConfig c = toy();
  Encoder<double> e(c, rng);
  jitter(e, rng, 3.0);
  const auto& pool = e.attention();

  SUBCASE("single position returns it exactly") {
    Tensor<double> h = random_rows<double>(rng, 1, 16);
    auto o = attention_pool(h, {true}, pool);
    for (std::size_t j = 0; j < 16; ++j) CHECK(o[j] == h(0, j));
  }
  SUBCASE("zero v_a gives the mean of unmasked rows") {
    AttentionPool<double> z = pool;
    std::fill(z.v_a.data.begin(), z.v_a.data.end(), 0.0);
    Tensor<double> h = random_rows<double>(rng, 5, 16);
    std::vector<bool> mask{true, false, true, true, false};
    auto o = attention_pool(h, mask, z);
    for (std::size_t j = 0; j < 16; ++j)
      CHECK(o[j] == doctest::Approx((h(0, j) + h(2, j) + h(3, j)) / 3.0).epsilon(1e-12));
  }
  SUBCASE("weights are distributions and the output stays in the hull") {
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t n = 1 + rng.below(9);
      Tensor<double> h = random_rows<double>(rng, n, 16, 4.0);
      std::vector<bool> mask(n);
      for (std::size_t i = 0; i < n; ++i) mask[i] = rng.below(4) != 0;
      mask[rng.below(n)] = true;
      auto w = attention_weights(h, mask, pool);
      for (std::size_t i = 0; i < 2; ++i) {
        double s = 0;
        for (std::size_t r = 0; r < n; ++r) {
          CHECK(w(r, i) >= 0.0);
          if (!mask[r]) CHECK(w(r, i) == 0.0);
          s += w(r, i);
        }
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
      auto o = attention_pool(h, mask, pool);
      for (std::size_t j = 0; j < 16; ++j) {
        double lo = 1e300, hi = -1e300;
        for (std::size_t r = 0; r < n; ++r)
          if (mask[r]) lo = std::min(lo, h(r, j)), hi = std::max(hi, h(r, j));
        CHECK(o[j] >= lo - 1e-5);
        CHECK(o[j] <= hi + 1e-5);
      }
    }
  }
  SUBCASE("masked padding does not change the output") {
    Tensor<double> h = random_rows<double>(rng, 4, 16);
    auto base = attention_pool(h, {true, true, true, true}, pool);
    Tensor<double> hp(Shape{7, 16});
    std::copy(h.data.begin(), h.data.end(), hp.data.begin());
    for (std::size_t i = 64; i < hp.size(); ++i) hp.data[i] = rng.uniform(-9, 9);
    auto padded = attention_pool(hp, {true, true, true, true, false, false, false}, pool);
    for (std::size_t j = 0; j < 16; ++j) CHECK(std::abs(base[j] - padded[j]) < 1e-5);
  }
  SUBCASE("all masked is an error") {
    Tensor<double> h = random_rows<double>(rng, 3, 16);
    CHECK_THROWS_AS(attention_pool(h, {false, false, false}, pool), Error);
  }
}

TEST_CASE("bidirectional structure") {
  Rng rng(30);
  EncoderConfig c = toy();
  c.layers = 1;
  Encoder<double> e(c, rng);
  jitter(e, rng);

  SUBCASE("single step concatenates both directions") {
    Tensor<double> x = random_rows<double>(rng, 1, 8);
    num::Graph<double> g(false);
    const auto& h = g.value(e.recurrent(g, g.view(x), Segments::packed({1})));
    REQUIRE(h.cols() == 16);
    const auto& L = e.sru_layers()[0];
    auto f = sru_layer_forward(x, std::vector<double>(8, 0.0), L, 0);
    auto b = sru_layer_forward(x, std::vector<double>(8, 0.0), L, 1);
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(h(0, j) == f.h(0, j));
      CHECK(h(0, 8 + j) == b.h(0, j));
    }
  }
  SUBCASE("palindrome with tied directions is time-symmetric") {
    auto& L = e.sru_layers()[0];
    for (std::size_t r = 0; r < L.weight.rows(); ++r)
      for (std::size_t j = 0; j < 24; ++j) L.weight(r, 24 + j) = L.weight(r, j);
    for (std::size_t j = 0; j < 32; ++j) L.gates(1, j) = L.gates(0, j);
    Tensor<double> x = random_rows<double>(rng, 5, 8);
    for (std::size_t j = 0; j < 8; ++j) x(3, j) = x(1, j), x(4, j) = x(0, j);
    num::Graph<double> g(false);
    const auto& h = g.value(e.recurrent(g, g.view(x), Segments::packed({5})));
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t j = 0; j < 8; ++j) {
        CHECK(h(t, j) == doctest::Approx(h(4 - t, 8 + j)).epsilon(1e-12));
      }
  }
  SUBCASE("output width") {
    EncoderConfig big;
    CHECK(big.output_dim() == 600);
  }
}

TEST_CASE("batched encoding agrees with one-at-a-time encoding") {
  Rng rng(40);
  EncoderConfig c = toy();
  Encoder<float> e(c, rng);
  jitter(e, rng);
  std::vector<std::size_t> lengths{5, 1, 7, 3};
  std::vector<Tensor<float>> xs;
  for (auto n : lengths) xs.push_back(random_rows<float>(rng, n, 8));

  auto encode_one = [&](const Tensor<float>& x) {
    num::Graph<float> g(false);
    return g.value(e.forward(g, g.view(x), Segments::packed({x.rows()}))).data;
  };
  auto pack = [&](const std::vector<std::size_t>& order, bool padded) {
    std::vector<std::size_t> ls;
    for (auto i : order) ls.push_back(lengths[i]);
    Segments seg = padded ? Segments::padded(ls, 7) : Segments::packed(ls);
    Tensor<float> x(Shape{seg.rows, 8}, 0.0f);
    for (std::size_t s = 0; s < order.size(); ++s)
      std::copy(xs[order[s]].data.begin(), xs[order[s]].data.end(), x.row(seg.offset[s]));
    num::Graph<float> g(false);
    return g.value(e.forward(g, g.view(x), seg));
  };

  const auto packed = pack({0, 1, 2, 3}, false);
  const auto padded = pack({0, 1, 2, 3}, true);
  const auto permuted = pack({2, 0, 3, 1}, false);
  const std::size_t perm[] = {2, 0, 3, 1};
  for (std::size_t s = 0; s < 4; ++s) {
    auto one = encode_one(xs[s]);
    for (std::size_t j = 0; j < 16; ++j) {
      CHECK(packed(s, j) == one[j]);
      CHECK(std::abs(padded(s, j) - one[j]) < 1e-5);
    }
  }
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t j = 0; j < 16; ++j) CHECK(permuted(s, j) == packed(perm[s], j));
}

TEST_CASE("parameter counts") {
  EncoderConfig paper;
  Rng rng(0);
  // Layer 0: 2 * (3*300*300 + 4*300); layers 1-3 read 600 features with
  // per-direction highway halves; pooling: 16 * (600*64 + 64).
  const std::size_t sru = 2 * (3 * 300 * 300 + 1200) + 3 * 2 * (3 * 300 * 600 + 1200);
  const std::size_t pool = 16 * (600 * 64 + 64);
  CHECK(parameter_count(paper) == sru + pool);
  CHECK(2 * parameter_count(paper) == 8810048);
  Encoder<float> e(paper, rng);
  CHECK(e.parameter_count() == parameter_count(paper));

  EncoderConfig proj = paper;
  proj.highway = Highway::projection;
  CHECK(parameter_count(proj) == parameter_count(paper) + 3 * 2 * 300 * 600);

  EncoderConfig lstm = paper;
  lstm.cell = Cell::lstm;
  lstm.layers = 2;
  const double ratio = static_cast<double>(parameter_count(lstm)) / static_cast<double>(parameter_count(paper));
  CHECK(ratio > 0.9);
  CHECK(ratio < 1.1);
}

TEST_CASE("canonical export round trip") {
  for (Cell cell : {Cell::sru, Cell::lstm}) {
    Rng rng(50);
    EncoderConfig c = toy(cell);
    Encoder<float> e(c, rng);
    jitter(e, rng);
    num::TensorFile f;
    e.export_tensors("ctx", f);
    if (cell == Cell::sru) {
      CHECK(f.get("ctx.layer0.fwd.W_f").shape == Shape{8, 8});
      CHECK(f.get("ctx.layer1.bwd.W").shape == Shape{8, 16});
      CHECK(f.find("ctx.layer1.bwd.P") == nullptr);
    }
    CHECK(f.get("ctx.pool.head1.W_a").shape == Shape{16, 4});
    auto back = Encoder<float>::import_tensors(c, "ctx", f);
    auto a = e.parameters("p");
    auto b = back.parameters("p");
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].tensor->data == b[i].tensor->data);
  }
}

TEST_CASE("encoder rejects empty sequences and bad widths") {
  Rng rng(60);
  Encoder<float> e(toy(), rng);
  num::Graph<float> g(false);
  Tensor<float> x(Shape{0, 8});
  CHECK_THROWS_AS(e.forward(g, g.view(x), Segments::packed({0})), Error);
  Tensor<float> bad(Shape{2, 7});
  CHECK_THROWS_AS(e.forward(g, g.view(bad), Segments::packed({2})), ShapeError);
}
