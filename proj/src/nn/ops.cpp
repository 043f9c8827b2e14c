#include "safe/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "safe/error.hpp"
#include "safe/kernels/kernels.hpp"

namespace safe::nn {
namespace {

using kernels::gemm;
using kernels::Op;

void check2d(const Tensor& x, const char* what) {
  require(x.ndim() == 2, std::string(what) + ": expected a matrix, got " + shape_string(x.shape()),
          ErrorKind::ShapeMismatch);
}

void check3d(const Tensor& x, const char* what) {
  require(x.ndim() == 3, std::string(what) + ": expected {C,H,W}, got " + shape_string(x.shape()),
          ErrorKind::ShapeMismatch);
}

void add_into(Tensor& dst, const Tensor& src) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

// Per-axis bilinear sampling table with half-pixel centres.
struct Taps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w;  // weight of hi
};

Taps make_taps(std::size_t in, std::size_t out) {
  Taps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.w.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    t.lo[o] = lo;
    t.hi[o] = std::min(lo + 1, in - 1);
    t.w[o] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  check2d(A, "matmul");
  check2d(B, "matmul");
  require(A.cols() == B.rows(), "matmul inner dimension mismatch", ErrorKind::ShapeMismatch);
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor C({m, n});
  gemm(Op::N, Op::N, m, n, k, A.data(), B.data(), C.data());
  return t.record(std::move(C), {a, b}, [a, b, m, n, k](Tape& tp, const Tensor& g) {
    if (tp.needs_grad(a)) gemm(Op::N, Op::T, m, k, n, g.data(), tp.value(b).data(), tp.grad(a).data(), true);
    if (tp.needs_grad(b)) gemm(Op::T, Op::N, k, n, m, tp.value(a).data(), g.data(), tp.grad(b).data(), true);
  });
}

Var linear(Tape& t, Var x, Var w, Var b) {
  const Tensor& X = t.value(x);
  const Tensor& W = t.value(w);
  const Tensor& B = t.value(b);
  check2d(X, "linear");
  check2d(W, "linear");
  require(X.cols() == W.rows() && B.size() == W.cols(),
          "linear shape mismatch: x " + shape_string(X.shape()) + " w " + shape_string(W.shape()),
          ErrorKind::ShapeMismatch);
  const std::size_t n = X.rows(), in = X.cols(), out = W.cols();
  Tensor Y({n, out});
  for (std::size_t r = 0; r < n; ++r) std::copy(B.data(), B.data() + out, Y.data() + r * out);
  gemm(Op::N, Op::N, n, out, in, X.data(), W.data(), Y.data(), true);
  return t.record(std::move(Y), {x, w, b}, [x, w, b, n, in, out](Tape& tp, const Tensor& g) {
    if (tp.needs_grad(x)) gemm(Op::N, Op::T, n, in, out, g.data(), tp.value(w).data(), tp.grad(x).data(), true);
    if (tp.needs_grad(w)) gemm(Op::T, Op::N, in, out, n, tp.value(x).data(), g.data(), tp.grad(w).data(), true);
    if (tp.needs_grad(b)) {
      Tensor& gb = tp.grad(b);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < out; ++c) gb[c] += g[r * out + c];
    }
  });
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  require(A.shape() == B.shape(), "add shape mismatch", ErrorKind::ShapeMismatch);
  Tensor C = A;
  add_into(C, B);
  return t.record(std::move(C), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.needs_grad(a)) add_into(tp.grad(a), g);
    if (tp.needs_grad(b)) add_into(tp.grad(b), g);
  });
}

Var scale(Tape& t, Var x, double factor) {
  Tensor y = t.value(x);
  for (auto& v : y.values()) v *= factor;
  return t.record(std::move(y), {x}, [x, factor](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

Var gelu(Tape& t, Var x) {
  const Tensor& X = t.value(x);
  Tensor y(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) y[i] = gelu_value(X[i]);
  return t.record(std::move(y), {x}, [x](Tape& tp, const Tensor& g) {
    const Tensor& X = tp.value(x);
    Tensor& gx = tp.grad(x);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = X[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Var relu(Tape& t, Var x) {
  const Tensor& X = t.value(x);
  Tensor y(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) y[i] = X[i] > 0.0 ? X[i] : 0.0;
  return t.record(std::move(y), {x}, [x](Tape& tp, const Tensor& g) {
    const Tensor& X = tp.value(x);
    Tensor& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (X[i] > 0.0) gx[i] += g[i];
  });
}

Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps) {
  const Tensor& X = t.value(x);
  const Tensor& G = t.value(gamma);
  const Tensor& B = t.value(beta);
  check2d(X, "layer_norm");
  const std::size_t n = X.rows(), d = X.cols();
  require(G.size() == d && B.size() == d, "layer_norm affine size mismatch",
          ErrorKind::ShapeMismatch);
  Tensor xhat({n, d});
  std::vector<double> rstd(n);
  Tensor y({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = X.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mu) * rstd[r];
      xhat(r, c) = h;
      y(r, c) = h * G[c] + B[c];
    }
  }
  return t.record(std::move(y), {x, gamma, beta},
                  [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), n, d](
                      Tape& tp, const Tensor& g) {
                    const Tensor& G = tp.value(gamma);
                    if (tp.needs_grad(gamma)) {
                      Tensor& gg = tp.grad(gamma);
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < d; ++c) gg[c] += g(r, c) * xhat(r, c);
                    }
                    if (tp.needs_grad(beta)) {
                      Tensor& gb = tp.grad(beta);
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < d; ++c) gb[c] += g(r, c);
                    }
                    if (tp.needs_grad(x)) {
                      Tensor& gx = tp.grad(x);
                      std::vector<double> dh(d);
                      for (std::size_t r = 0; r < n; ++r) {
                        double mean_dh = 0.0, mean_dh_h = 0.0;
                        for (std::size_t c = 0; c < d; ++c) {
                          dh[c] = g(r, c) * G[c];
                          mean_dh += dh[c];
                          mean_dh_h += dh[c] * xhat(r, c);
                        }
                        mean_dh /= static_cast<double>(d);
                        mean_dh_h /= static_cast<double>(d);
                        for (std::size_t c = 0; c < d; ++c)
                          gx(r, c) += rstd[r] * (dh[c] - mean_dh - xhat(r, c) * mean_dh_h);
                      }
                    }
                  });
}

Var attention(Tape& t, Var qkv, std::size_t heads) {
  const Tensor& QKV = t.value(qkv);
  check2d(QKV, "attention");
  const std::size_t n = QKV.rows();
  require(QKV.cols() % 3 == 0, "attention expects packed qkv", ErrorKind::ShapeMismatch);
  const std::size_t d = QKV.cols() / 3;
  require(heads > 0 && d % heads == 0, "embed dim not divisible by heads",
          ErrorKind::ShapeMismatch);
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  // Per head: contiguous copies of Q, K, V and the attention matrix P.
  std::vector<Tensor> q(heads), k(heads), v(heads), p(heads);
  Tensor out({n, d});
  Tensor o({n, dh});
  for (std::size_t h = 0; h < heads; ++h) {
    q[h] = Tensor({n, dh});
    k[h] = Tensor({n, dh});
    v[h] = Tensor({n, dh});
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < dh; ++c) {
        q[h](r, c) = QKV(r, h * dh + c);
        k[h](r, c) = QKV(r, d + h * dh + c);
        v[h](r, c) = QKV(r, 2 * d + h * dh + c);
      }
    }
    p[h] = Tensor({n, n});
    Tensor& P = p[h];
    gemm(Op::N, Op::T, n, n, dh, q[h].data(), k[h].data(), P.data());
    for (std::size_t r = 0; r < n; ++r) {
      double* row = P.data() + r * n;
      double mx = row[0] * sc;
      for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, row[c] * sc);
      double z = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        row[c] = std::exp(row[c] * sc - mx);
        z += row[c];
      }
      for (std::size_t c = 0; c < n; ++c) row[c] /= z;
    }
    gemm(Op::N, Op::N, n, dh, n, P.data(), v[h].data(), o.data());
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < dh; ++c) out(r, h * dh + c) = o(r, c);
  }
  return t.record(
      std::move(out), {qkv},
      [qkv, n, d, dh, heads, sc, q = std::move(q), k = std::move(k), v = std::move(v),
       p = std::move(p)](Tape& tp, const Tensor& g) {
        Tensor& gq = tp.grad(qkv);
        Tensor go({n, dh}), dP({n, n}), dq({n, dh}), dk({n, dh}), dv({n, dh});
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < dh; ++c) go(r, c) = g(r, h * dh + c);
          const Tensor& P = p[h];
          gemm(Op::N, Op::T, n, n, dh, go.data(), v[h].data(), dP.data());
          gemm(Op::T, Op::N, n, dh, n, P.data(), go.data(), dv.data());
          for (std::size_t r = 0; r < n; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < n; ++c) dot += dP(r, c) * P(r, c);
            for (std::size_t c = 0; c < n; ++c) dP(r, c) = P(r, c) * (dP(r, c) - dot) * sc;
          }
          gemm(Op::N, Op::N, n, dh, n, dP.data(), k[h].data(), dq.data());
          gemm(Op::T, Op::N, n, dh, n, dP.data(), q[h].data(), dk.data());
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < dh; ++c) {
              gq(r, h * dh + c) += dq(r, c);
              gq(r, d + h * dh + c) += dk(r, c);
              gq(r, 2 * d + h * dh + c) += dv(r, c);
            }
          }
        }
      });
}

Var mean_rows(Tape& t, Var x) {
  const Tensor& X = t.value(x);
  check2d(X, "mean_rows");
  const std::size_t n = X.rows(), d = X.cols();
  require(n > 0, "mean_rows of an empty matrix");
  Tensor y({1, d});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) y[c] += X(r, c);
  for (std::size_t c = 0; c < d; ++c) y[c] /= static_cast<double>(n);
  return t.record(std::move(y), {x}, [x, n, d](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad(x);
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) gx(r, c) += g[c] * inv;
  });
}

Var gather_rows(Tape& t, Var x, std::vector<std::size_t> rows) {
  const Tensor& X = t.value(x);
  check2d(X, "gather_rows");
  const std::size_t d = X.cols();
  Tensor y({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < X.rows(), "gather_rows index out of range");
    std::copy(X.data() + rows[i] * d, X.data() + (rows[i] + 1) * d, y.data() + i * d);
  }
  return t.record(std::move(y), {x}, [x, rows = std::move(rows), d](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad(x);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) gx(rows[i], c) += g(i, c);
  });
}

Var patchify(Tape& t, Var image, std::size_t token) {
  const Tensor& img = t.value(image);
  require(img.ndim() == 3, "patchify expects an {h,w,c} image", ErrorKind::ShapeMismatch);
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  require(token > 0 && h % token == 0 && w % token == 0,
          "image size " + shape_string(img.shape()) + " not divisible by token size " +
              std::to_string(token),
          ErrorKind::ShapeMismatch);
  const std::size_t gh = h / token, gw = w / token, width = token * token * c;
  Tensor y({gh * gw, width});
  auto index = [=](std::size_t r, std::size_t col) {
    const std::size_t ty = r / gw, tx = r % gw;
    const std::size_t ch = col % c, pix = col / c;
    const std::size_t dy = pix / token, dx = pix % token;
    return ((ty * token + dy) * w + (tx * token + dx)) * c + ch;
  };
  for (std::size_t r = 0; r < gh * gw; ++r)
    for (std::size_t col = 0; col < width; ++col) y(r, col) = img[index(r, col)];
  return t.record(std::move(y), {image}, [image, gh, gw, width, index](Tape& tp, const Tensor& g) {
    Tensor& gi = tp.grad(image);
    for (std::size_t r = 0; r < gh * gw; ++r)
      for (std::size_t col = 0; col < width; ++col) gi[index(r, col)] += g(r, col);
  });
}

Var conv1x1(Tape& t, Var x, Var w, Var b) {
  const Tensor& X = t.value(x);
  const Tensor& W = t.value(w);
  check3d(X, "conv1x1");
  const std::size_t C = X.dim(0), H = X.dim(1), Wd = X.dim(2), hw = H * Wd;
  require(W.ndim() == 2 && W.cols() == C && t.value(b).size() == W.rows(),
          "conv1x1 weight shape mismatch", ErrorKind::ShapeMismatch);
  const std::size_t Co = W.rows();
  Tensor Y({Co, H, Wd});
  const Tensor& B = t.value(b);
  for (std::size_t o = 0; o < Co; ++o) std::fill(Y.data() + o * hw, Y.data() + (o + 1) * hw, B[o]);
  gemm(Op::N, Op::N, Co, hw, C, W.data(), X.data(), Y.data(), true);
  return t.record(std::move(Y), {x, w, b}, [x, w, b, C, Co, hw](Tape& tp, const Tensor& g) {
    if (tp.needs_grad(w)) gemm(Op::N, Op::T, Co, C, hw, g.data(), tp.value(x).data(), tp.grad(w).data(), true);
    if (tp.needs_grad(x)) gemm(Op::T, Op::N, C, hw, Co, tp.value(w).data(), g.data(), tp.grad(x).data(), true);
    if (tp.needs_grad(b)) {
      Tensor& gb = tp.grad(b);
      for (std::size_t o = 0; o < Co; ++o)
        for (std::size_t i = 0; i < hw; ++i) gb[o] += g[o * hw + i];
    }
  });
}

Var conv3x3(Tape& t, Var x, Var w, Var b) {
  const Tensor& X = t.value(x);
  const Tensor& W = t.value(w);
  check3d(X, "conv3x3");
  const std::size_t C = X.dim(0), H = X.dim(1), Wd = X.dim(2), hw = H * Wd;
  require(W.ndim() == 2 && W.cols() == C * 9 && t.value(b).size() == W.rows(),
          "conv3x3 weight shape mismatch", ErrorKind::ShapeMismatch);
  const std::size_t Co = W.rows();
  Tensor cols({C * 9, hw});
  kernels::im2col3x3(X.data(), C, H, Wd, cols.data());
  Tensor Y({Co, H, Wd});
  const Tensor& B = t.value(b);
  for (std::size_t o = 0; o < Co; ++o) std::fill(Y.data() + o * hw, Y.data() + (o + 1) * hw, B[o]);
  gemm(Op::N, Op::N, Co, hw, C * 9, W.data(), cols.data(), Y.data(), true);
  const bool keep_cols = t.needs_grad(w);
  return t.record(std::move(Y), {x, w, b},
                  [x, w, b, C, Co, H, Wd, hw, cols = keep_cols ? std::move(cols) : Tensor()](
                      Tape& tp, const Tensor& g) {
                    if (tp.needs_grad(w))
                      gemm(Op::N, Op::T, Co, C * 9, hw, g.data(), cols.data(), tp.grad(w).data(), true);
                    if (tp.needs_grad(x)) {
                      Tensor dcols({C * 9, hw});
                      gemm(Op::T, Op::N, C * 9, hw, Co, tp.value(w).data(), g.data(), dcols.data());
                      kernels::col2im3x3(dcols.data(), C, H, Wd, tp.grad(x).data());
                    }
                    if (tp.needs_grad(b)) {
                      Tensor& gb = tp.grad(b);
                      for (std::size_t o = 0; o < Co; ++o)
                        for (std::size_t i = 0; i < hw; ++i) gb[o] += g[o * hw + i];
                    }
                  });
}

Var conv_transpose2x2(Tape& t, Var x, Var w, Var b) {
  const Tensor& X = t.value(x);
  const Tensor& W = t.value(w);
  check3d(X, "conv_transpose2x2");
  const std::size_t C = X.dim(0), H = X.dim(1), Wd = X.dim(2), hw = H * Wd;
  require(W.ndim() == 2 && W.rows() == C && W.cols() % 4 == 0 &&
              t.value(b).size() == W.cols() / 4,
          "conv_transpose2x2 weight shape mismatch", ErrorKind::ShapeMismatch);
  const std::size_t Co = W.cols() / 4, W2 = 2 * Wd;
  Tensor Yp({Co * 4, hw});
  gemm(Op::T, Op::N, Co * 4, hw, C, W.data(), X.data(), Yp.data());
  Tensor Y({Co, 2 * H, W2});
  const Tensor& B = t.value(b);
  for (std::size_t o = 0; o < Co; ++o)
    for (std::size_t a = 0; a < 2; ++a)
      for (std::size_t bb = 0; bb < 2; ++bb)
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < Wd; ++j)
            Y[(o * 2 * H + 2 * i + a) * W2 + 2 * j + bb] = Yp(o * 4 + a * 2 + bb, i * Wd + j) + B[o];
  return t.record(std::move(Y), {x, w, b}, [x, w, b, C, Co, H, Wd, hw, W2](Tape& tp, const Tensor& g) {
    Tensor gp({Co * 4, hw});
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t bb = 0; bb < 2; ++bb)
          for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < Wd; ++j)
              gp(o * 4 + a * 2 + bb, i * Wd + j) = g[(o * 2 * H + 2 * i + a) * W2 + 2 * j + bb];
    if (tp.needs_grad(w)) gemm(Op::N, Op::T, C, Co * 4, hw, tp.value(x).data(), gp.data(), tp.grad(w).data(), true);
    if (tp.needs_grad(x)) gemm(Op::N, Op::N, C, hw, Co * 4, tp.value(w).data(), gp.data(), tp.grad(x).data(), true);
    if (tp.needs_grad(b)) {
      Tensor& gb = tp.grad(b);
      for (std::size_t o = 0; o < Co; ++o)
        for (std::size_t i = 0; i < 4 * hw; ++i) gb[o] += g[o * 4 * hw + i];
    }
  });
}

Var softmax_mix(Tape& t, std::span<const Var> scores, std::span<const Var> maps) {
  require(!maps.empty() && scores.size() == maps.size(), "softmax_mix needs one score per map",
          ErrorKind::ShapeMismatch);
  const Tensor& M0 = t.value(maps[0]);
  check3d(M0, "softmax_mix");
  const std::size_t C = M0.dim(0), H = M0.dim(1), W = M0.dim(2), hw = H * W, S = maps.size();
  for (std::size_t s = 0; s < S; ++s) {
    require(t.value(maps[s]).shape() == M0.shape(), "softmax_mix map shape mismatch",
            ErrorKind::ShapeMismatch);
    require(t.value(scores[s]).size() == hw, "softmax_mix score shape mismatch",
            ErrorKind::ShapeMismatch);
  }
  Tensor weights({S, hw});
  for (std::size_t p = 0; p < hw; ++p) {
    double mx = t.value(scores[0])[p];
    for (std::size_t s = 1; s < S; ++s) mx = std::max(mx, t.value(scores[s])[p]);
    double z = 0.0;
    for (std::size_t s = 0; s < S; ++s) {
      weights(s, p) = std::exp(t.value(scores[s])[p] - mx);
      z += weights(s, p);
    }
    for (std::size_t s = 0; s < S; ++s) weights(s, p) /= z;
  }
  Tensor out({C, H, W});
  for (std::size_t s = 0; s < S; ++s) {
    const Tensor& M = t.value(maps[s]);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < hw; ++p) out[c * hw + p] += weights(s, p) * M[c * hw + p];
  }
  std::vector<Var> parents(scores.begin(), scores.end());
  parents.insert(parents.end(), maps.begin(), maps.end());
  std::vector<Var> sv(scores.begin(), scores.end()), mv(maps.begin(), maps.end());
  return t.record(std::move(out), parents,
                  [sv, mv, weights = std::move(weights), C, hw, S](Tape& tp, const Tensor& g) {
                    Tensor dw({S, hw});
                    for (std::size_t s = 0; s < S; ++s) {
                      const Tensor& M = tp.value(mv[s]);
                      for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t p = 0; p < hw; ++p) dw(s, p) += g[c * hw + p] * M[c * hw + p];
                      if (tp.needs_grad(mv[s])) {
                        Tensor& gm = tp.grad(mv[s]);
                        for (std::size_t c = 0; c < C; ++c)
                          for (std::size_t p = 0; p < hw; ++p) gm[c * hw + p] += weights(s, p) * g[c * hw + p];
                      }
                    }
                    for (std::size_t p = 0; p < hw; ++p) {
                      double dot = 0.0;
                      for (std::size_t s = 0; s < S; ++s) dot += weights(s, p) * dw(s, p);
                      for (std::size_t s = 0; s < S; ++s) {
                        if (tp.needs_grad(sv[s])) tp.grad(sv[s])[p] += weights(s, p) * (dw(s, p) - dot);
                      }
                    }
                  });
}

Tensor bilinear_resize_value(const Tensor& x, std::size_t height, std::size_t width) {
  check3d(x, "bilinear_resize");
  const std::size_t C = x.dim(0), h = x.dim(1), w = x.dim(2);
  const Taps ty = make_taps(h, height), tx = make_taps(w, width);
  Tensor y({C, height, width});
#pragma omp parallel for schedule(static) if (C * height * width >= (1u << 15))
  for (std::ptrdiff_t cc = 0; cc < static_cast<std::ptrdiff_t>(C); ++cc) {
    const std::size_t c = static_cast<std::size_t>(cc);
    const double* src = x.data() + c * h * w;
    double* dst = y.data() + c * height * width;
    for (std::size_t i = 0; i < height; ++i) {
      const double* r0 = src + ty.lo[i] * w;
      const double* r1 = src + ty.hi[i] * w;
      const double wy = ty.w[i];
      for (std::size_t j = 0; j < width; ++j) {
        const double top = r0[tx.lo[j]] * (1.0 - tx.w[j]) + r0[tx.hi[j]] * tx.w[j];
        const double bot = r1[tx.lo[j]] * (1.0 - tx.w[j]) + r1[tx.hi[j]] * tx.w[j];
        dst[i * width + j] = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return y;
}

Var bilinear_resize(Tape& t, Var x, std::size_t height, std::size_t width) {
  const Tensor& X = t.value(x);
  Tensor y = bilinear_resize_value(X, height, width);
  const std::size_t C = X.dim(0), h = X.dim(1), w = X.dim(2);
  return t.record(std::move(y), {x}, [x, C, h, w, height, width](Tape& tp, const Tensor& g) {
    const Taps ty = make_taps(h, height), tx = make_taps(w, width);
    Tensor& gx = tp.grad(x);
    for (std::size_t c = 0; c < C; ++c) {
      double* dst = gx.data() + c * h * w;
      const double* src = g.data() + c * height * width;
      for (std::size_t i = 0; i < height; ++i) {
        const double wy = ty.w[i];
        for (std::size_t j = 0; j < width; ++j) {
          const double v = src[i * width + j];
          dst[ty.lo[i] * w + tx.lo[j]] += v * (1.0 - wy) * (1.0 - tx.w[j]);
          dst[ty.lo[i] * w + tx.hi[j]] += v * (1.0 - wy) * tx.w[j];
          dst[ty.hi[i] * w + tx.lo[j]] += v * wy * (1.0 - tx.w[j]);
          dst[ty.hi[i] * w + tx.hi[j]] += v * wy * tx.w[j];
        }
      }
    }
  });
}

Var pixel_cross_entropy(Tape& t, Var logits, std::span<const int> labels) {
  const Tensor& L = t.value(logits);
  check3d(L, "pixel_cross_entropy");
  const std::size_t K = L.dim(0), hw = L.dim(1) * L.dim(2);
  require(labels.size() == hw, "label count does not match logits", ErrorKind::ShapeMismatch);
  Tensor prob({K, hw});
  double loss = 0.0;
  for (std::size_t p = 0; p < hw; ++p) {
    require(labels[p] >= 0 && static_cast<std::size_t>(labels[p]) < K, "label out of range",
            ErrorKind::Data);
    double mx = L[p];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, L[k * hw + p]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      prob(k, p) = std::exp(L[k * hw + p] - mx);
      z += prob(k, p);
    }
    for (std::size_t k = 0; k < K; ++k) prob(k, p) /= z;
    loss -= (L[static_cast<std::size_t>(labels[p]) * hw + p] - mx) - std::log(z);
  }
  loss /= static_cast<double>(hw);
  std::vector<int> lab(labels.begin(), labels.end());
  return t.record(Tensor({1}, {loss}), {logits},
                  [logits, prob = std::move(prob), lab = std::move(lab), K, hw](Tape& tp, const Tensor& g) {
                    Tensor& gl = tp.grad(logits);
                    const double s = g[0] / static_cast<double>(hw);
                    for (std::size_t k = 0; k < K; ++k)
                      for (std::size_t p = 0; p < hw; ++p)
                        gl[k * hw + p] += s * (prob(k, p) - (lab[p] == static_cast<int>(k) ? 1.0 : 0.0));
                  });
}

}  // namespace safe::nn
