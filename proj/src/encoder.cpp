#include "suggest/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <type_traits>

#include "suggest/numerics/blas.hpp"
#include "suggest/numerics/fastmath.hpp"
#include "suggest/numerics/ops.hpp"

namespace suggest::enc {

namespace {

using num::sigmoid;

const char* dir_name(std::size_t d) { return d == 0 ? "fwd" : "bwd"; }

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double bound) {
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
Var bind(Graph<T>& g, const Tensor<T>& t) {
  // Training owns the encoder exclusively for the duration of a step, so the
  // gradient buffers may be written through a const encoder.
  if (g.grad_enabled() && t.requires_grad) return g.param(const_cast<Tensor<T>&>(t));
  return g.view(t);
}

std::size_t row_of(const Segments& seg, std::size_t s, std::size_t t, bool reverse) {
  return seg.offset[s] + (reverse ? seg.length[s] - 1 - t : t);
}

bool row_valid(const Segments& seg, std::size_t r) { return seg.valid.empty() || seg.valid[r] != 0; }

void check_segments(const Segments& seg, std::size_t rows, const char* op) {
  if (seg.offset.size() != seg.length.size())
    throw ShapeError(std::string(op) + ": segment offsets and lengths differ in count");
  if (seg.rows != rows)
    throw ShapeError(std::string(op) + ": segments describe " + std::to_string(seg.rows) + " rows, input has " +
                     std::to_string(rows));
  if (!seg.valid.empty() && seg.valid.size() != rows)
    throw ShapeError(std::string(op) + ": row mask length does not match rows");
  for (std::size_t s = 0; s < seg.count(); ++s)
    if (seg.offset[s] + seg.length[s] > rows) throw ShapeError(std::string(op) + ": segment exceeds rows");
}

// One time step for all hidden units. ur holds W x_t, W_f x_t, W_r x_t.
template <typename T, bool kCache>
inline void sru_step(std::size_t h, const T* __restrict ur, const T* __restrict x, const T* __restrict vf,
                     const T* __restrict vr, const T* __restrict bf, const T* __restrict br, T* __restrict c,
                     T* __restrict o, T* __restrict cc, T* __restrict fc, T* __restrict rc) {
  for (std::size_t j = 0; j < h; ++j) {
    const T f = sigmoid(ur[h + j] + vf[j] * c[j] + bf[j]);
    const T rg = sigmoid(ur[2 * h + j] + vr[j] * c[j] + br[j]);
    const T cn = f * c[j] + (T(1) - f) * ur[j];
    o[j] = rg * cn + (T(1) - rg) * x[j];
    c[j] = cn;
    if constexpr (kCache) {
      cc[j] = cn;
      fc[j] = f;
      rc[j] = rg;
    }
  }
}

// One LSTM step for all hidden units; p holds h_{t-1} W_hh, xr holds x_t W_ih.
template <typename T, bool kCache>
inline void lstm_step(std::size_t h, const T* __restrict p, const T* __restrict xr, const T* __restrict bias,
                      T* __restrict hrow, T* __restrict crow, T* __restrict cg, T* __restrict ccell) {
  for (std::size_t j = 0; j < h; ++j) {
    const T ig = sigmoid(p[j] + xr[j] + bias[j]);
    const T fg = sigmoid(p[h + j] + xr[h + j] + bias[h + j]);
    const T gg = num::tanh(p[2 * h + j] + xr[2 * h + j] + bias[2 * h + j]);
    const T og = sigmoid(p[3 * h + j] + xr[3 * h + j] + bias[3 * h + j]);
    const T cn = fg * crow[j] + ig * gg;
    crow[j] = cn;
    hrow[j] = og * num::tanh(cn);
    if constexpr (kCache) {
      cg[j] = ig, cg[h + j] = fg, cg[2 * h + j] = gg, cg[3 * h + j] = og;
      ccell[j] = cn;
    }
  }
}

// One SRU direction over rows [row_of(0) .. row_of(len-1)]. Caches are
// optional; c_out receives the final cell state.
template <typename T>
struct SruScan {
  const T* u;
  std::size_t u_ld, u_off;
  const T* hw;
  std::size_t hw_ld, hw_off;
  const T* gates;  // v_f | v_r | b_f | b_r
  std::size_t h;
  T* out;
  T* cache_c = nullptr;
  T* cache_f = nullptr;
  T* cache_r = nullptr;

  void run(const Segments& seg, std::size_t s, bool reverse, const T* c0, T* c_final) const {
    std::vector<T> c(h, T(0));
    if (c0) std::copy(c0, c0 + h, c.begin());
    const T* vf = gates;
    const T* vr = gates + h;
    const T* bf = gates + 2 * h;
    const T* br = gates + 3 * h;
    for (std::size_t t = 0; t < seg.length[s]; ++t) {
      const std::size_t r = row_of(seg, s, t, reverse);
      const T* ur = u + r * u_ld + u_off;
      const T* x = hw + r * hw_ld + hw_off;
      T* o = out + r * h;
      if (cache_c)
        sru_step<T, true>(h, ur, x, vf, vr, bf, br, c.data(), o, cache_c + r * h, cache_f + r * h, cache_r + r * h);
      else
        sru_step<T, false>(h, ur, x, vf, vr, bf, br, c.data(), o, nullptr, nullptr, nullptr);
    }
    if (c_final) std::copy(c.begin(), c.end(), c_final);
  }
};

template <typename T>
SruScan<T> make_scan(const SruLayer<T>& layer, std::size_t dir, const Tensor<T>& u, const Tensor<T>& x,
                     const Tensor<T>& gates, T* out) {
  const std::size_t h = layer.hidden;
  const std::size_t off = dir * layer.blocks() * h;
  SruScan<T> s{u.data.data(), u.cols(), off, nullptr, 0, 0, gates.row(dir), h, out};
  switch (layer.highway) {
    case HighwayKind::identity:
      s.hw = x.data.data(), s.hw_ld = x.cols(), s.hw_off = 0;
      break;
    case HighwayKind::split:
      s.hw = x.data.data(), s.hw_ld = x.cols(), s.hw_off = dir * h;
      break;
    case HighwayKind::projection:
      s.hw = u.data.data(), s.hw_ld = u.cols(), s.hw_off = off + 3 * h;
      break;
  }
  return s;
}


// Batched LSTM direction: every active segment advances one step per
// iteration so the recurrent product is a single GEMM.
template <typename T>
void lstm_scan(const Tensor<T>& gx, const T* w_hh, const T* bias, std::size_t h, std::size_t dir,
               const Segments& seg, const std::type_identity_t<std::vector<T>>* state0, T* out,
               std::type_identity_t<T>* cache_gates, std::type_identity_t<T>* cache_c,
               std::type_identity_t<std::vector<T>>* final_state) {
  const bool reverse = dir == 1;
  const std::size_t n = seg.count();
  const std::size_t g4 = 4 * h;
  const std::size_t gx_off = dir * g4;
  std::size_t max_len = 0;
  for (auto l : seg.length) max_len = std::max(max_len, l);
  std::vector<T> hs(n * h, T(0)), cs(n * h, T(0));
  if (state0)
    for (std::size_t s = 0; s < n; ++s) {
      std::copy(state0->begin(), state0->begin() + h, hs.begin() + s * h);
      std::copy(state0->begin() + h, state0->begin() + 2 * h, cs.begin() + s * h);
    }
  std::vector<std::size_t> active;
  std::vector<T> hprev, pre;
  for (std::size_t t = 0; t < max_len; ++t) {
    active.clear();
    for (std::size_t s = 0; s < n; ++s)
      if (seg.length[s] > t) active.push_back(s);
    const std::size_t a = active.size();
    hprev.resize(a * h);
    pre.assign(a * g4, T(0));
    for (std::size_t i = 0; i < a; ++i) std::copy_n(hs.data() + active[i] * h, h, hprev.data() + i * h);
    if (a == 1)
      num::blas::gemv(true, h, g4, T(1), w_hh, g4, hprev.data(), T(0), pre.data());
    else
      num::blas::gemm(false, false, a, g4, h, T(1), hprev.data(), h, w_hh, g4, T(0), pre.data(), g4);
    for (std::size_t i = 0; i < a; ++i) {
      const std::size_t s = active[i];
      const std::size_t r = row_of(seg, s, t, reverse);
      const T* xr = gx.row(r) + gx_off;
      T* p = pre.data() + i * g4;
      T* hrow = hs.data() + s * h;
      T* crow = cs.data() + s * h;
      if (cache_gates)
        lstm_step<T, true>(h, p, xr, bias, hrow, crow, cache_gates + r * g4, cache_c + r * h);
      else
        lstm_step<T, false>(h, p, xr, bias, hrow, crow, nullptr, nullptr);
      std::copy_n(hrow, h, out + r * h);
    }
  }
  if (final_state) {
    final_state->assign(hs.begin(), hs.begin() + std::min<std::size_t>(n, 1) * h);
    final_state->insert(final_state->end(), cs.begin(), cs.begin() + std::min<std::size_t>(n, 1) * h);
  }
}

}  // namespace

std::string_view to_string(Cell c) { return c == Cell::sru ? "sru" : "lstm"; }
std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
    case Activation::relu: return "relu";
  }
  return "tanh";
}
std::string_view to_string(Highway h) { return h == Highway::automatic ? "auto" : "projection"; }

Cell parse_cell(std::string_view s) {
  if (s == "sru") return Cell::sru;
  if (s == "lstm") return Cell::lstm;
  throw Error("unknown cell type '" + std::string(s) + "' (expected sru or lstm)");
}
Activation parse_activation(std::string_view s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "relu") return Activation::relu;
  throw Error("unknown activation '" + std::string(s) + "' (expected tanh, sigmoid or relu)");
}
Highway parse_highway(std::string_view s) {
  if (s == "auto") return Highway::automatic;
  if (s == "projection") return Highway::projection;
  throw Error("unknown highway mode '" + std::string(s) + "' (expected auto or projection)");
}

void EncoderConfig::validate() const {
  if (layers == 0 || input_dim == 0 || hidden == 0 || heads == 0 || attn_dim == 0)
    throw Error("encoder sizes must be positive (layers, input_dim, hidden, heads, attn_dim)");
}

Segments Segments::packed(const std::vector<std::size_t>& lengths) {
  Segments s;
  for (auto l : lengths) {
    s.offset.push_back(s.rows);
    s.length.push_back(l);
    s.rows += l;
  }
  return s;
}

Segments Segments::padded(const std::vector<std::size_t>& lengths, std::size_t max_len) {
  Segments s;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] > max_len) throw ShapeError("sequence longer than the padded length");
    s.offset.push_back(i * max_len);
    s.length.push_back(lengths[i]);
  }
  s.rows = lengths.size() * max_len;
  return s;
}

HighwayKind highway_kind(const EncoderConfig& cfg, std::size_t input_dim) {
  if (input_dim == cfg.hidden) return HighwayKind::identity;
  if (cfg.highway == Highway::automatic && cfg.bidirectional && input_dim == 2 * cfg.hidden)
    return HighwayKind::split;
  return HighwayKind::projection;
}

std::size_t parameter_count(const EncoderConfig& cfg) {
  cfg.validate();
  const std::size_t h = cfg.hidden, dirs = cfg.directions();
  std::size_t total = 0;
  std::size_t d_in = cfg.input_dim;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    if (cfg.cell == Cell::sru) {
      const std::size_t k = highway_kind(cfg, d_in) == HighwayKind::projection ? 4 : 3;
      total += dirs * (k * h * d_in + 4 * h);
    } else {
      total += dirs * (4 * h * d_in + 4 * h * h + 4 * h);
    }
    d_in = cfg.output_dim();
  }
  total += cfg.heads * (cfg.output_dim() * cfg.attn_dim + cfg.attn_dim);
  return total;
}

// --- differentiable ops -----------------------------------------------------

template <typename T>
Var sru_recurrence(Graph<T>& g, Var u, Var x, Var gates, const SruLayer<T>& layer, std::size_t dir,
                   const Segments& seg, const std::vector<T>* c0) {
  const Tensor<T>& U = g.value(u);
  const Tensor<T>& X = g.value(x);
  const Tensor<T>& G = g.value(gates);
  const std::size_t h = layer.hidden;
  if (dir >= layer.directions) throw ShapeError("sru: direction out of range");
  if (U.rank() != 2 || U.cols() != layer.directions * layer.blocks() * h || X.rank() != 2 ||
      X.cols() != layer.input_dim || U.rows() != X.rows())
    throw ShapeError("sru: input shapes " + num::shape_str(U.shape) + " and " + num::shape_str(X.shape) +
                     " do not fit the layer");
  if (G.rows() != layer.directions || G.cols() != 4 * h) throw ShapeError("sru: gate tensor has wrong shape");
  if (c0 && c0->size() != h) throw ShapeError("sru: initial state has wrong length");
  check_segments(seg, U.rows(), "sru");

  const std::size_t rows = U.rows();
  Tensor<T> out(num::Shape{rows, h});
  const bool cache = g.grad_enabled() && (g.needs_grad(u) || g.needs_grad(x) || g.needs_grad(gates));
  struct Cache {
    std::vector<T> c, f, r;
  };
  auto cc = std::make_shared<Cache>();
  auto scan = make_scan(layer, dir, U, X, G, out.data.data());
  if (cache) {
    cc->c.assign(rows * h, T(0));
    cc->f.assign(rows * h, T(0));
    cc->r.assign(rows * h, T(0));
    scan.cache_c = cc->c.data(), scan.cache_f = cc->f.data(), scan.cache_r = cc->r.data();
  }
  const T* c0p = c0 ? c0->data() : nullptr;
  for (std::size_t s = 0; s < seg.count(); ++s) scan.run(seg, s, dir == 1, c0p, nullptr);
  if (!cache) return g.record(std::move(out), {u, x, gates}, nullptr);

  std::vector<T> init = c0 ? *c0 : std::vector<T>(h, T(0));
  const HighwayKind hk = layer.highway;
  const std::size_t blocks = layer.blocks();
  return g.record(std::move(out), {u, x, gates}, [=](const typename Graph<T>::BackwardArgs& a) {
    const Tensor<T>& U = *a.in[0];
    const Tensor<T>& X = *a.in[1];
    const Tensor<T>& G = *a.in[2];
    Tensor<T>* dU = a.grad_in[0];
    Tensor<T>* dX = a.grad_in[1];
    Tensor<T>* dG = a.grad_in[2];
    const std::size_t off = dir * blocks * h;
    const T* vf = G.row(dir);
    const T* vr = vf + h;
    std::vector<T> carry(h), dvf(h), dvr(h), dbf(h), dbr(h);
    for (std::size_t s = 0; s < seg.count(); ++s) {
      std::fill(carry.begin(), carry.end(), T(0));
      const std::size_t len = seg.length[s];
      for (std::size_t t = len; t-- > 0;) {
        const std::size_t r = row_of(seg, s, t, dir == 1);
        const T* cprev = t == 0 ? init.data() : cc->c.data() + row_of(seg, s, t - 1, dir == 1) * h;
        const T* ct = cc->c.data() + r * h;
        const T* ft = cc->f.data() + r * h;
        const T* rt = cc->r.data() + r * h;
        const T* ur = U.row(r) + off;
        const T* hw;
        T* dhw = nullptr;
        switch (hk) {
          case HighwayKind::identity:
            hw = X.row(r);
            if (dX) dhw = dX->row(r);
            break;
          case HighwayKind::split:
            hw = X.row(r) + dir * h;
            if (dX) dhw = dX->row(r) + dir * h;
            break;
          default:
            hw = ur + 3 * h;
            if (dU) dhw = dU->row(r) + off + 3 * h;
            break;
        }
        const T* dh = a.grad_out.row(r);
        T* du = dU ? dU->row(r) + off : nullptr;
        for (std::size_t j = 0; j < h; ++j) {
          const T rg = rt[j], f = ft[j];
          const T dr = dh[j] * (ct[j] - hw[j]);
          const T dc = dh[j] * rg + carry[j];
          const T dpr = dr * rg * (T(1) - rg);
          const T df = dc * (cprev[j] - ur[j]);
          const T dpf = df * f * (T(1) - f);
          carry[j] = dc * f + dpf * vf[j] + dpr * vr[j];
          dvf[j] += dpf * cprev[j];
          dvr[j] += dpr * cprev[j];
          dbf[j] += dpf;
          dbr[j] += dpr;
          if (du) {
            du[j] += dc * (T(1) - f);
            du[h + j] += dpf;
            du[2 * h + j] += dpr;
          }
          if (dhw) dhw[j] += dh[j] * (T(1) - rg);
        }
      }
    }
    if (dG) {
      T* gr = dG->row(dir);
      for (std::size_t j = 0; j < h; ++j) {
        gr[j] += dvf[j];
        gr[h + j] += dvr[j];
        gr[2 * h + j] += dbf[j];
        gr[3 * h + j] += dbr[j];
      }
    }
  });
}

template <typename T>
Var lstm_recurrence(Graph<T>& g, Var gx, Var w_hh, Var bias, const LstmLayer<T>& layer, std::size_t dir,
                    const Segments& seg, const std::vector<T>* state0) {
  const Tensor<T>& GX = g.value(gx);
  const Tensor<T>& W = g.value(w_hh);
  const Tensor<T>& B = g.value(bias);
  const std::size_t h = layer.hidden, g4 = 4 * h;
  if (dir >= layer.directions) throw ShapeError("lstm: direction out of range");
  if (GX.rank() != 2 || GX.cols() != layer.directions * g4) throw ShapeError("lstm: projected input has wrong shape");
  if (W.rows() != layer.directions * h || W.cols() != g4) throw ShapeError("lstm: recurrent weight has wrong shape");
  if (B.rows() != layer.directions || B.cols() != g4) throw ShapeError("lstm: bias has wrong shape");
  if (state0 && state0->size() != 2 * h) throw ShapeError("lstm: initial state has wrong length");
  check_segments(seg, GX.rows(), "lstm");

  const std::size_t rows = GX.rows();
  Tensor<T> out(num::Shape{rows, h});
  const bool cache = g.grad_enabled() && (g.needs_grad(gx) || g.needs_grad(w_hh) || g.needs_grad(bias));
  struct Cache {
    std::vector<T> gates, c;
  };
  auto cc = std::make_shared<Cache>();
  if (cache) {
    cc->gates.assign(rows * g4, T(0));
    cc->c.assign(rows * h, T(0));
  }
  const T* wd = W.row(dir * h);
  lstm_scan(GX, wd, B.row(dir), h, dir, seg, state0, out.data.data(), cache ? cc->gates.data() : nullptr,
            cache ? cc->c.data() : nullptr, nullptr);
  if (!cache) return g.record(std::move(out), {gx, w_hh, bias}, nullptr);

  std::vector<T> init = state0 ? *state0 : std::vector<T>(2 * h, T(0));
  return g.record(std::move(out), {gx, w_hh, bias}, [=](const typename Graph<T>::BackwardArgs& a) {
    const Tensor<T>& H = a.out;
    const Tensor<T>& W = *a.in[1];
    Tensor<T>* dGX = a.grad_in[0];
    Tensor<T>* dW = a.grad_in[1];
    Tensor<T>* dB = a.grad_in[2];
    const bool reverse = dir == 1;
    const std::size_t n = seg.count();
    const T* wd = W.row(dir * h);
    std::size_t max_len = 0;
    for (auto l : seg.length) max_len = std::max(max_len, l);
    std::vector<T> dh_carry(n * h, T(0)), dc_carry(n * h, T(0));
    std::vector<std::size_t> active;
    std::vector<T> dpre, hprev, dhprev;
    for (std::size_t t = max_len; t-- > 0;) {
      active.clear();
      for (std::size_t s = 0; s < n; ++s)
        if (seg.length[s] > t) active.push_back(s);
      const std::size_t na = active.size();
      dpre.assign(na * g4, T(0));
      hprev.assign(na * h, T(0));
      for (std::size_t i = 0; i < na; ++i) {
        const std::size_t s = active[i];
        const std::size_t r = row_of(seg, s, t, reverse);
        const T* cg = cc->gates.data() + r * g4;
        const T* ct = cc->c.data() + r * h;
        const T* cprev;
        if (t == 0) {
          cprev = init.data() + h;
          std::copy_n(init.data(), h, hprev.data() + i * h);
        } else {
          const std::size_t rp = row_of(seg, s, t - 1, reverse);
          cprev = cc->c.data() + rp * h;
          std::copy_n(H.row(rp), h, hprev.data() + i * h);
        }
        const T* go = a.grad_out.row(r);
        T* dhc = dh_carry.data() + s * h;
        T* dcc = dc_carry.data() + s * h;
        T* dp = dpre.data() + i * g4;
        for (std::size_t j = 0; j < h; ++j) {
          const T ig = cg[j], fg = cg[h + j], gg = cg[2 * h + j], og = cg[3 * h + j];
          const T tc = num::tanh(ct[j]);
          const T dh = go[j] + dhc[j];
          const T dc = dh * og * (T(1) - tc * tc) + dcc[j];
          dp[j] = dc * gg * ig * (T(1) - ig);
          dp[h + j] = dc * cprev[j] * fg * (T(1) - fg);
          dp[2 * h + j] = dc * ig * (T(1) - gg * gg);
          dp[3 * h + j] = dh * tc * og * (T(1) - og);
          dcc[j] = dc * fg;
        }
        if (dGX) {
          T* d = dGX->row(r) + dir * g4;
          for (std::size_t j = 0; j < g4; ++j) d[j] += dp[j];
        }
        if (dB) {
          T* d = dB->row(dir);
          for (std::size_t j = 0; j < g4; ++j) d[j] += dp[j];
        }
      }
      if (dW) num::blas::gemm(true, false, h, g4, na, T(1), hprev.data(), h, dpre.data(), g4, T(1), dW->row(dir * h), g4);
      dhprev.assign(na * h, T(0));
      num::blas::gemm(false, true, na, h, g4, T(1), dpre.data(), g4, wd, g4, T(0), dhprev.data(), h);
      for (std::size_t i = 0; i < na; ++i) std::copy_n(dhprev.data() + i * h, h, dh_carry.data() + active[i] * h);
    }
  });
}

template <typename T>
Var head_scores(Graph<T>& g, Var a, Var v_a) {
  const Tensor<T>& A = g.value(a);
  const Tensor<T>& V = g.value(v_a);
  if (A.rank() != 2 || V.rank() != 2 || V.rows() * V.cols() != A.cols())
    throw ShapeError("head_scores: shape mismatch " + num::shape_str(A.shape) + " vs " + num::shape_str(V.shape));
  const std::size_t heads = V.rows(), da = V.cols(), rows = A.rows();
  Tensor<T> S(num::Shape{rows, heads});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < heads; ++i) {
      const T* ar = A.row(r) + i * da;
      const T* vr = V.row(i);
      T acc = 0;
      for (std::size_t k = 0; k < da; ++k) acc += ar[k] * vr[k];
      S(r, i) = acc;
    }
  return g.record(std::move(S), {a, v_a}, [=](const typename Graph<T>::BackwardArgs& b) {
    const Tensor<T>& A = *b.in[0];
    const Tensor<T>& V = *b.in[1];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < heads; ++i) {
        const T d = b.grad_out(r, i);
        if (d == T(0)) continue;
        if (b.grad_in[0]) {
          T* dar = b.grad_in[0]->row(r) + i * da;
          for (std::size_t k = 0; k < da; ++k) dar[k] += d * V(i, k);
        }
        if (b.grad_in[1]) {
          T* dv = b.grad_in[1]->row(i);
          const T* ar = A.row(r) + i * da;
          for (std::size_t k = 0; k < da; ++k) dv[k] += d * ar[k];
        }
      }
  });
}

template <typename T>
Var segment_softmax(Graph<T>& g, Var scores, const Segments& seg) {
  const Tensor<T>& S = g.value(scores);
  if (S.rank() != 2) throw ShapeError("segment_softmax: expected a matrix, got " + num::shape_str(S.shape));
  check_segments(seg, S.rows(), "segment_softmax");
  const std::size_t heads = S.cols();
  Tensor<T> P(S.shape);
  for (std::size_t s = 0; s < seg.count(); ++s) {
    const std::size_t b = seg.offset[s], e = b + seg.length[s];
    for (std::size_t i = 0; i < heads; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t r = b; r < e; ++r)
        if (row_valid(seg, r)) mx = std::max(mx, S(r, i));
      if (!std::isfinite(mx)) {
        bool any = false;
        for (std::size_t r = b; r < e && !any; ++r) any = row_valid(seg, r);
        throw Error(any ? "non-finite attention score in sequence " + std::to_string(s)
                        : std::string("attention pooling over a sequence with every position masked"));
      }
      T z = 0;
      for (std::size_t r = b; r < e; ++r)
        if (row_valid(seg, r)) z += (P(r, i) = std::exp(S(r, i) - mx));
      for (std::size_t r = b; r < e; ++r) P(r, i) /= z;
    }
  }
  return g.record(std::move(P), {scores}, [=](const typename Graph<T>::BackwardArgs& a) {
    const Tensor<T>& P = a.out;
    Tensor<T>& dS = *a.grad_in[0];
    for (std::size_t s = 0; s < seg.count(); ++s) {
      const std::size_t b = seg.offset[s], e = b + seg.length[s];
      for (std::size_t i = 0; i < heads; ++i) {
        T dot = 0;
        for (std::size_t r = b; r < e; ++r) dot += P(r, i) * a.grad_out(r, i);
        for (std::size_t r = b; r < e; ++r) dS(r, i) += P(r, i) * (a.grad_out(r, i) - dot);
      }
    }
  });
}

template <typename T>
Var weighted_pool(Graph<T>& g, Var alpha, Var h, const Segments& seg) {
  const Tensor<T>& A = g.value(alpha);
  const Tensor<T>& H = g.value(h);
  if (A.rank() != 2 || H.rank() != 2 || A.rows() != H.rows())
    throw ShapeError("weighted_pool: shape mismatch " + num::shape_str(A.shape) + " vs " + num::shape_str(H.shape));
  check_segments(seg, H.rows(), "weighted_pool");
  const std::size_t heads = A.cols(), d = H.cols();
  const T inv = T(1) / static_cast<T>(heads);
  std::vector<T> w(H.rows(), T(0));
  for (std::size_t r = 0; r < H.rows(); ++r) {
    T acc = 0;
    for (std::size_t i = 0; i < heads; ++i) acc += A(r, i);
    w[r] = acc * inv;
  }
  Tensor<T> out(num::Shape{seg.count(), d});
  for (std::size_t s = 0; s < seg.count(); ++s) {
    T* o = out.row(s);
    for (std::size_t r = seg.offset[s]; r < seg.offset[s] + seg.length[s]; ++r) {
      if (w[r] == T(0)) continue;
      const T* hr = H.row(r);
      for (std::size_t k = 0; k < d; ++k) o[k] += w[r] * hr[k];
    }
  }
  return g.record(std::move(out), {alpha, h}, [=](const typename Graph<T>::BackwardArgs& a) {
    const Tensor<T>& H = *a.in[1];
    for (std::size_t s = 0; s < seg.count(); ++s) {
      const T* go = a.grad_out.row(s);
      for (std::size_t r = seg.offset[s]; r < seg.offset[s] + seg.length[s]; ++r) {
        if (Tensor<T>* dA = a.grad_in[0]) {
          T dot = 0;
          const T* hr = H.row(r);
          for (std::size_t k = 0; k < d; ++k) dot += hr[k] * go[k];
          for (std::size_t i = 0; i < heads; ++i) (*dA)(r, i) += dot * inv;
        }
        if (Tensor<T>* dH = a.grad_in[1]) {
          T* dh = dH->row(r);
          for (std::size_t k = 0; k < d; ++k) dh[k] += w[r] * go[k];
        }
      }
    }
  });
}

// --- encoder ----------------------------------------------------------------

template <typename T>
Encoder<T>::Encoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t h = cfg.hidden, dirs = cfg.directions();
  std::size_t d_in = cfg.input_dim;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const double bound = std::sqrt(1.0 / static_cast<double>(d_in));
    if (cfg.cell == Cell::sru) {
      SruLayer<T> L;
      L.input_dim = d_in, L.hidden = h, L.directions = dirs, L.highway = highway_kind(cfg, d_in);
      L.weight = Tensor<T>(num::Shape{d_in, dirs * L.blocks() * h});
      fill_uniform(L.weight, rng, bound);
      L.gates = Tensor<T>(num::Shape{dirs, 4 * h});
      const double vb = std::sqrt(1.0 / static_cast<double>(h));
      for (std::size_t d = 0; d < dirs; ++d)
        for (std::size_t j = 0; j < 2 * h; ++j) L.gates(d, j) = static_cast<T>(rng.uniform(-vb, vb));
      sru_.push_back(std::move(L));
    } else {
      LstmLayer<T> L;
      L.input_dim = d_in, L.hidden = h, L.directions = dirs;
      L.w_ih = Tensor<T>(num::Shape{d_in, dirs * 4 * h});
      fill_uniform(L.w_ih, rng, bound);
      L.w_hh = Tensor<T>(num::Shape{dirs * h, 4 * h});
      fill_uniform(L.w_hh, rng, std::sqrt(1.0 / static_cast<double>(h)));
      L.bias = Tensor<T>(num::Shape{dirs, 4 * h});
      lstm_.push_back(std::move(L));
    }
    d_in = cfg.output_dim();
  }
  pool_.heads = cfg.heads;
  pool_.attn_dim = cfg.attn_dim;
  pool_.w_a = Tensor<T>(num::Shape{cfg.output_dim(), cfg.heads * cfg.attn_dim});
  fill_uniform(pool_.w_a, rng, std::sqrt(1.0 / static_cast<double>(cfg.output_dim())));
  pool_.v_a = Tensor<T>(num::Shape{cfg.heads, cfg.attn_dim});
  fill_uniform(pool_.v_a, rng, std::sqrt(1.0 / static_cast<double>(cfg.attn_dim)));
}

template <typename T>
Var Encoder<T>::recurrent(Graph<T>& g, Var x, const Segments& seg) const {
  const Tensor<T>& X = g.value(x);
  if (X.rank() != 2 || X.cols() != cfg_.input_dim)
    throw ShapeError("encoder: expected input with " + std::to_string(cfg_.input_dim) + " columns, got " +
                     num::shape_str(X.shape));
  Var cur = x;
  const std::size_t dirs = cfg_.directions();
  std::vector<Var> parts(dirs);
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    if (cfg_.cell == Cell::sru) {
      const auto& L = sru_[l];
      Var u = num::matmul(g, cur, bind(g, L.weight));
      Var gates = bind(g, L.gates);
      for (std::size_t d = 0; d < dirs; ++d) parts[d] = sru_recurrence(g, u, cur, gates, L, d, seg);
    } else {
      const auto& L = lstm_[l];
      Var gx = num::matmul(g, cur, bind(g, L.w_ih));
      Var whh = bind(g, L.w_hh), b = bind(g, L.bias);
      for (std::size_t d = 0; d < dirs; ++d) parts[d] = lstm_recurrence(g, gx, whh, b, L, d, seg);
    }
    cur = dirs == 1 ? parts[0] : num::concat(g, std::span<const Var>(parts), 1);
  }
  return cur;
}

template <typename T>
Var Encoder<T>::pool(Graph<T>& g, Var h, const Segments& seg) const {
  Var z = num::matmul(g, h, bind(g, pool_.w_a));
  switch (cfg_.activation) {
    case Activation::tanh: z = num::tanh(g, z); break;
    case Activation::sigmoid: z = num::sigmoid(g, z); break;
    case Activation::relu: z = num::relu(g, z); break;
  }
  Var scores = head_scores(g, z, bind(g, pool_.v_a));
  Var alpha = segment_softmax(g, scores, seg);
  return weighted_pool(g, alpha, h, seg);
}

template <typename T>
Var Encoder<T>::forward(Graph<T>& g, Var x, const Segments& seg) const {
  for (auto l : seg.length)
    if (l == 0) throw Error("encoder: cannot encode an empty sequence");
  return pool(g, recurrent(g, x, seg), seg);
}

template <typename T>
std::vector<num::NamedParam<T>> Encoder<T>::parameters(const std::string& p) {
  std::vector<num::NamedParam<T>> out;
  for (std::size_t l = 0; l < sru_.size(); ++l) {
    const std::string b = p + ".layer" + std::to_string(l);
    out.push_back({b + ".weight", &sru_[l].weight});
    out.push_back({b + ".gates", &sru_[l].gates});
  }
  for (std::size_t l = 0; l < lstm_.size(); ++l) {
    const std::string b = p + ".layer" + std::to_string(l);
    out.push_back({b + ".w_ih", &lstm_[l].w_ih});
    out.push_back({b + ".w_hh", &lstm_[l].w_hh});
    out.push_back({b + ".bias", &lstm_[l].bias});
  }
  out.push_back({p + ".pool.w_a", &pool_.w_a});
  out.push_back({p + ".pool.v_a", &pool_.v_a});
  return out;
}

template <typename T>
std::size_t Encoder<T>::parameter_count() const {
  std::size_t n = pool_.w_a.size() + pool_.v_a.size();
  for (const auto& L : sru_) n += L.weight.size() + L.gates.size();
  for (const auto& L : lstm_) n += L.w_ih.size() + L.w_hh.size() + L.bias.size();
  return n;
}

template <typename T>
void Encoder<T>::set_requires_grad(bool on) {
  for (auto& p : parameters("")) p.tensor->requires_grad = on;
}

template <typename T>
void Encoder<T>::zero_grad() {
  for (auto& p : parameters("")) p.tensor->zero_grad();
}

namespace {

// Column block [c0, c0 + n) of a row-major matrix, transposed: n x rows.
template <typename T>
Tensor<float> block_t(const Tensor<T>& m, std::size_t c0, std::size_t n) {
  Tensor<float> out(num::Shape{n, m.rows()});
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t j = 0; j < n; ++j) out(j, r) = static_cast<float>(m(r, c0 + j));
  return out;
}

template <typename T>
void put_block_t(Tensor<T>& m, std::size_t c0, const Tensor<float>& t, const std::string& name) {
  if (t.rank() != 2 || t.cols() != m.rows()) throw FormatError("tensor " + name + " has shape " + num::shape_str(t.shape));
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t j = 0; j < t.rows(); ++j) m(r, c0 + j) = static_cast<T>(t(j, r));
}

template <typename T>
Tensor<float> vec_of(const T* p, std::size_t n) {
  Tensor<float> out(num::Shape{n});
  for (std::size_t i = 0; i < n; ++i) out.data[i] = static_cast<float>(p[i]);
  return out;
}

template <typename T>
void put_vec(T* p, std::size_t n, const Tensor<float>& t, const std::string& name) {
  if (t.size() != n) throw FormatError("tensor " + name + " has shape " + num::shape_str(t.shape));
  for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<T>(t.data[i]);
}

const char* const kSruBlocks[4] = {"W", "W_f", "W_r", "P"};
const char* const kSruGates[4] = {"v_f", "v_r", "b_f", "b_r"};

}  // namespace

template <typename T>
void Encoder<T>::export_tensors(const std::string& p, num::TensorFile& out) const {
  const std::size_t h = cfg_.hidden;
  for (std::size_t l = 0; l < sru_.size(); ++l) {
    const auto& L = sru_[l];
    for (std::size_t d = 0; d < L.directions; ++d) {
      const std::string b = p + ".layer" + std::to_string(l) + "." + dir_name(d) + ".";
      for (std::size_t k = 0; k < L.blocks(); ++k)
        out.add(b + kSruBlocks[k], block_t(L.weight, (d * L.blocks() + k) * h, h));
      for (std::size_t k = 0; k < 4; ++k) out.add(b + kSruGates[k], vec_of(L.gates.row(d) + k * h, h));
    }
  }
  for (std::size_t l = 0; l < lstm_.size(); ++l) {
    const auto& L = lstm_[l];
    for (std::size_t d = 0; d < L.directions; ++d) {
      const std::string b = p + ".layer" + std::to_string(l) + "." + dir_name(d) + ".";
      out.add(b + "W_ih", block_t(L.w_ih, d * 4 * h, 4 * h));
      Tensor<float> whh(num::Shape{4 * h, h});
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t j = 0; j < 4 * h; ++j) whh(j, r) = static_cast<float>(L.w_hh(d * h + r, j));
      out.add(b + "W_hh", std::move(whh));
      out.add(b + "b", vec_of(L.bias.row(d), 4 * h));
    }
  }
  const std::size_t da = pool_.attn_dim;
  for (std::size_t i = 0; i < pool_.heads; ++i) {
    const std::string b = p + ".pool.head" + std::to_string(i) + ".";
    Tensor<float> wa(num::Shape{pool_.w_a.rows(), da});
    for (std::size_t r = 0; r < pool_.w_a.rows(); ++r)
      for (std::size_t k = 0; k < da; ++k) wa(r, k) = static_cast<float>(pool_.w_a(r, i * da + k));
    out.add(b + "W_a", std::move(wa));
    out.add(b + "v_a", vec_of(pool_.v_a.row(i), da));
  }
}

template <typename T>
Encoder<T> Encoder<T>::import_tensors(const EncoderConfig& cfg, const std::string& p, const num::TensorFile& in) {
  Rng rng(0);
  Encoder<T> e(cfg, rng);
  const std::size_t h = cfg.hidden;
  for (std::size_t l = 0; l < e.sru_.size(); ++l) {
    auto& L = e.sru_[l];
    for (std::size_t d = 0; d < L.directions; ++d) {
      const std::string b = p + ".layer" + std::to_string(l) + "." + dir_name(d) + ".";
      for (std::size_t k = 0; k < L.blocks(); ++k) {
        const std::string n = b + kSruBlocks[k];
        const auto& t = in.get(n);
        if (t.rank() != 2 || t.rows() != h) throw FormatError("tensor " + n + " has shape " + num::shape_str(t.shape));
        put_block_t(L.weight, (d * L.blocks() + k) * h, t, n);
      }
      for (std::size_t k = 0; k < 4; ++k) put_vec(L.gates.row(d) + k * h, h, in.get(b + kSruGates[k]), b + kSruGates[k]);
    }
  }
  for (std::size_t l = 0; l < e.lstm_.size(); ++l) {
    auto& L = e.lstm_[l];
    for (std::size_t d = 0; d < L.directions; ++d) {
      const std::string b = p + ".layer" + std::to_string(l) + "." + dir_name(d) + ".";
      const auto& wih = in.get(b + "W_ih");
      if (wih.rank() != 2 || wih.rows() != 4 * h) throw FormatError("tensor " + b + "W_ih has shape " + num::shape_str(wih.shape));
      put_block_t(L.w_ih, d * 4 * h, wih, b + "W_ih");
      const auto& whh = in.get(b + "W_hh");
      if (whh.rank() != 2 || whh.rows() != 4 * h || whh.cols() != h)
        throw FormatError("tensor " + b + "W_hh has shape " + num::shape_str(whh.shape));
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t j = 0; j < 4 * h; ++j) L.w_hh(d * h + r, j) = static_cast<T>(whh(j, r));
      put_vec(L.bias.row(d), 4 * h, in.get(b + "b"), b + "b");
    }
  }
  const std::size_t da = cfg.attn_dim;
  for (std::size_t i = 0; i < cfg.heads; ++i) {
    const std::string b = p + ".pool.head" + std::to_string(i) + ".";
    const auto& wa = in.get(b + "W_a");
    if (wa.rank() != 2 || wa.rows() != cfg.output_dim() || wa.cols() != da)
      throw FormatError("tensor " + b + "W_a has shape " + num::shape_str(wa.shape));
    for (std::size_t r = 0; r < wa.rows(); ++r)
      for (std::size_t k = 0; k < da; ++k) e.pool_.w_a(r, i * da + k) = static_cast<T>(wa(r, k));
    put_vec(e.pool_.v_a.row(i), da, in.get(b + "v_a"), b + "v_a");
  }
  return e;
}

template <typename T>
template <typename U>
Encoder<U> Encoder<T>::cast() const {
  Encoder<U> e;
  e.cfg_ = cfg_;
  for (const auto& L : sru_)
    e.sru_.push_back({L.input_dim, L.hidden, L.directions, L.highway, L.weight.template cast<U>(),
                      L.gates.template cast<U>()});
  for (const auto& L : lstm_)
    e.lstm_.push_back({L.input_dim, L.hidden, L.directions, L.w_ih.template cast<U>(), L.w_hh.template cast<U>(),
                       L.bias.template cast<U>()});
  e.pool_ = {pool_.heads, pool_.attn_dim, pool_.w_a.template cast<U>(), pool_.v_a.template cast<U>()};
  return e;
}

// --- single-sequence helpers ------------------------------------------------

template <typename T>
LayerOutput<T> sru_layer_forward(const Tensor<T>& x, const std::vector<T>& c0, const SruLayer<T>& layer,
                                 std::size_t dir) {
  if (x.rank() != 2 || x.cols() != layer.input_dim)
    throw ShapeError("sru: input " + num::shape_str(x.shape) + " does not match layer input width " +
                     std::to_string(layer.input_dim));
  if (c0.size() != layer.hidden) throw ShapeError("sru: initial state has wrong length");
  if (dir >= layer.directions) throw ShapeError("sru: direction out of range");
  const std::size_t n = x.rows(), h = layer.hidden;
  Tensor<T> u(num::Shape{n, layer.weight.cols()});
  if (n > 0)
    num::blas::gemm(false, false, n, u.cols(), x.cols(), T(1), x.data.data(), x.cols(), layer.weight.data.data(),
                    u.cols(), T(0), u.data.data(), u.cols());
  LayerOutput<T> out{Tensor<T>(num::Shape{n, h}), c0};
  const Segments seg = Segments::packed({n});
  auto scan = make_scan(layer, dir, u, x, layer.gates, out.h.data.data());
  scan.run(seg, 0, dir == 1, c0.data(), out.state.data());
  return out;
}

template <typename T>
LayerOutput<T> lstm_layer_forward(const Tensor<T>& x, const std::vector<T>& state0, const LstmLayer<T>& layer,
                                  std::size_t dir) {
  if (x.rank() != 2 || x.cols() != layer.input_dim)
    throw ShapeError("lstm: input " + num::shape_str(x.shape) + " does not match layer input width " +
                     std::to_string(layer.input_dim));
  if (state0.size() != 2 * layer.hidden) throw ShapeError("lstm: initial state has wrong length");
  if (dir >= layer.directions) throw ShapeError("lstm: direction out of range");
  const std::size_t n = x.rows(), h = layer.hidden;
  Tensor<T> gx(num::Shape{n, layer.w_ih.cols()});
  if (n > 0)
    num::blas::gemm(false, false, n, gx.cols(), x.cols(), T(1), x.data.data(), x.cols(), layer.w_ih.data.data(),
                    gx.cols(), T(0), gx.data.data(), gx.cols());
  LayerOutput<T> out{Tensor<T>(num::Shape{n, h}), state0};
  lstm_scan(gx, layer.w_hh.row(dir * h), layer.bias.row(dir), h, dir, Segments::packed({n}), &state0,
            out.h.data.data(), nullptr, nullptr, n > 0 ? &out.state : nullptr);
  return out;
}

template <typename T>
Tensor<T> attention_weights(const Tensor<T>& h, const std::vector<bool>& mask, const AttentionPool<T>& pool,
                            Activation act) {
  if (mask.size() != h.rows()) throw ShapeError("attention: mask length does not match sequence length");
  Graph<T> g(false);
  Segments seg = Segments::packed({h.rows()});
  seg.valid.assign(mask.begin(), mask.end());
  Var z = num::matmul(g, g.view(h), g.view(pool.w_a));
  z = act == Activation::tanh ? num::tanh(g, z) : act == Activation::sigmoid ? num::sigmoid(g, z) : num::relu(g, z);
  return g.value(segment_softmax(g, head_scores(g, z, g.view(pool.v_a)), seg));
}

template <typename T>
std::vector<T> attention_pool(const Tensor<T>& h, const std::vector<bool>& mask, const AttentionPool<T>& pool,
                              Activation act) {
  const Tensor<T> alpha = attention_weights(h, mask, pool, act);
  Graph<T> g(false);
  return g.value(weighted_pool(g, g.view(alpha), g.view(h), Segments::packed({h.rows()}))).data;
}

Tensor<float> embed_batch(const emb::SubwordEmbedding& e, const std::vector<std::vector<std::string>>& seqs,
                          Segments& seg) {
  std::vector<std::size_t> lengths;
  lengths.reserve(seqs.size());
  for (const auto& s : seqs) {
    if (s.empty()) throw Error("cannot encode an empty token sequence");
    lengths.push_back(s.size());
  }
  seg = Segments::packed(lengths);
  Tensor<float> x(num::Shape{seg.rows, e.dim()});
  std::size_t r = 0;
  for (const auto& s : seqs)
    for (const auto& tok : s) {
      const auto v = e.embed_token(tok);
      std::copy(v.begin(), v.end(), x.row(r++));
    }
  return x;
}

std::vector<float> encode(const Encoder<float>& enc, const emb::SubwordEmbedding& e,
                          const std::vector<std::string>& tokens) {
  return encode_batch(enc, e, {tokens}).data;
}

Tensor<float> encode_batch(const Encoder<float>& enc, const emb::SubwordEmbedding& e,
                           const std::vector<std::vector<std::string>>& seqs, std::size_t chunk) {
  if (e.dim() != enc.config().input_dim)
    throw ShapeError("embedding width " + std::to_string(e.dim()) + " does not match encoder input width " +
                     std::to_string(enc.config().input_dim));
  chunk = std::max<std::size_t>(chunk, 1);
  const std::size_t d = enc.config().output_dim();
  Tensor<float> out(num::Shape{seqs.size(), d});
  for (std::size_t b = 0; b < seqs.size(); b += chunk) {
    const std::size_t e_ = std::min(seqs.size(), b + chunk);
    std::vector<std::vector<std::string>> part(seqs.begin() + b, seqs.begin() + e_);
    Segments seg;
    Tensor<float> x = embed_batch(e, part, seg);
    Graph<float> g(false);
    const Tensor<float>& y = g.value(enc.forward(g, g.view(x), seg));
    std::copy(y.data.begin(), y.data.end(), out.row(b));
  }
  return out;
}

#define SUGGEST_INSTANTIATE(T)                                                                                  \
  template class Encoder<T>;                                                                                    \
  template Var sru_recurrence<T>(Graph<T>&, Var, Var, Var, const SruLayer<T>&, std::size_t, const Segments&,    \
                                 const std::vector<T>*);                                                        \
  template Var lstm_recurrence<T>(Graph<T>&, Var, Var, Var, const LstmLayer<T>&, std::size_t, const Segments&,  \
                                  const std::vector<T>*);                                                       \
  template Var head_scores<T>(Graph<T>&, Var, Var);                                                             \
  template Var segment_softmax<T>(Graph<T>&, Var, const Segments&);                                             \
  template Var weighted_pool<T>(Graph<T>&, Var, Var, const Segments&);                                          \
  template LayerOutput<T> sru_layer_forward<T>(const Tensor<T>&, const std::vector<T>&, const SruLayer<T>&,     \
                                               std::size_t);                                                    \
  template LayerOutput<T> lstm_layer_forward<T>(const Tensor<T>&, const std::vector<T>&, const LstmLayer<T>&,   \
                                                std::size_t);                                                   \
  template Tensor<T> attention_weights<T>(const Tensor<T>&, const std::vector<bool>&, const AttentionPool<T>&,  \
                                          Activation);                                                          \
  template std::vector<T> attention_pool<T>(const Tensor<T>&, const std::vector<bool>&, const AttentionPool<T>&, \
                                            Activation);

SUGGEST_INSTANTIATE(float)
SUGGEST_INSTANTIATE(double)

template Encoder<double> Encoder<float>::cast<double>() const;
template Encoder<float> Encoder<double>::cast<float>() const;
template Encoder<float> Encoder<float>::cast<float>() const;

}  // namespace suggest::enc
