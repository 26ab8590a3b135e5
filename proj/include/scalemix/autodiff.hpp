#pragma once
// Reverse-mode automatic differentiation over an append-only node list.
// Every operation computes its forward value eagerly, then registers a node
// holding (op tag, parent ids, backprop closure over saved activations).
// Parents always precede children, so backward() is a single reverse sweep.
//
// Determinism: every summation loop below runs in a fixed left-to-right index
// order, so repeated forward/backward passes are bit-identical.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <utility>
#include <vector>

#include "scalemix/common.hpp"
#include "scalemix/tensor.hpp"

namespace scalemix {

class Graph {
 public:
  // ----- leaves -----

  // Trainable leaf: participates in the gradient store.
  Tensor param(const Tensor& t) {
    return emit("param", {}, t, /*needs_grad=*/true, nullptr);
  }

  // Non-trainable leaf: gradients are never propagated into it. Frozen model
  // parameters enter the graph through here, which also skips their backward
  // work entirely.
  Tensor constant(const Tensor& t) {
    return emit("const", {}, t, /*needs_grad=*/false, nullptr);
  }

  // ----- elementwise arithmetic -----

  Tensor add(const Tensor& a, const Tensor& b) {
    return binary_same_shape("add", a, b, [](double x, double y) { return x + y; },
                             /*da=*/[](double g, double, double) { return g; },
                             /*db=*/[](double g, double, double) { return g; });
  }

  Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_same_shape("sub", a, b, [](double x, double y) { return x - y; },
                             [](double g, double, double) { return g; },
                             [](double g, double, double) { return -g; });
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_same_shape("mul", a, b, [](double x, double y) { return x * y; },
                             [](double g, double, double y) { return g * y; },
                             [](double g, double x, double) { return g * x; });
  }

  Tensor scale(const Tensor& a, double c) {
    Tensor wa = wrap(a);
    std::vector<double> out(wa.data());
    for (auto& v : out) v *= c;
    const int64_t pa = wa.node();
    return emit("scale", {pa}, Tensor(wa.shape(), std::move(out), true),
                needs(pa), [pa, c](Graph& g, const std::vector<double>& gout) {
                  if (!g.needs(pa)) return;
                  auto& da = g.gbuf(pa);
                  for (size_t i = 0; i < gout.size(); ++i) da[i] += c * gout[i];
                });
  }

  Tensor gelu(const Tensor& a) {
    Tensor wa = wrap(a);
    std::vector<double> out(wa.data());
    for (auto& v : out) v = gelu_fwd(v);
    const int64_t pa = wa.node();
    return emit("gelu", {pa}, Tensor(wa.shape(), std::move(out), true), needs(pa),
                [pa, wa](Graph& g, const std::vector<double>& gout) {
                  if (!g.needs(pa)) return;
                  auto& da = g.gbuf(pa);
                  const auto& x = wa.data();
                  for (size_t i = 0; i < gout.size(); ++i)
                    da[i] += gout[i] * gelu_bwd(x[i]);
                });
  }

  Tensor sin(const Tensor& a) {
    return unary("sin", a, [](double x) { return std::sin(x); },
                 [](double x) { return std::cos(x); });
  }

  Tensor cos(const Tensor& a) {
    return unary("cos", a, [](double x) { return std::cos(x); },
                 [](double x) { return -std::sin(x); });
  }

  // Subgradient 0 at the kink.
  Tensor abs(const Tensor& a) {
    return unary("abs", a, [](double x) { return std::abs(x); },
                 [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
  }

  // Elementwise clamp to [lo, hi]; gradient passes through inside the closed
  // interval and is zero outside.
  Tensor clamp(const Tensor& a, double lo, double hi) {
    if (lo > hi) throw ContractError("clamp: lo > hi");
    Tensor wa = wrap(a);
    std::vector<double> out(wa.data());
    for (auto& v : out) v = std::min(std::max(v, lo), hi);
    const int64_t pa = wa.node();
    return emit("clamp", {pa}, Tensor(wa.shape(), std::move(out), true), needs(pa),
                [pa, wa, lo, hi](Graph& g, const std::vector<double>& gout) {
                  if (!g.needs(pa)) return;
                  auto& da = g.gbuf(pa);
                  const auto& x = wa.data();
                  for (size_t i = 0; i < gout.size(); ++i)
                    if (x[i] >= lo && x[i] <= hi) da[i] += gout[i];
                });
  }

  // ----- last-axis broadcasts -----

  Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    return rowvec_op("add_rowvec", x, v, /*additive=*/true);
  }

  Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
    return rowvec_op("mul_rowvec", x, v, /*additive=*/false);
  }

  // Scales row i of a 2-D tensor by s[i]; differentiable in both arguments.
  Tensor scale_rows(const Tensor& x, const Tensor& s) {
    Tensor wx = wrap(x), ws = wrap(s);
    if (wx.ndim() != 2)
      throw ShapeError("scale_rows: want 2-D input, got " + shape_str(wx.shape()));
    const int64_t n = wx.dim(0), d = wx.dim(1);
    if (ws.numel() != n)
      throw ShapeError("scale_rows: scale count " + std::to_string(ws.numel()) +
                       " != row count " + std::to_string(n));
    std::vector<double> out(static_cast<size_t>(n * d));
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < d; ++j)
        out[static_cast<size_t>(i * d + j)] = wx[i * d + j] * ws[i];
    const int64_t px = wx.node(), ps = ws.node();
    return emit("scale_rows", {px, ps}, Tensor(wx.shape(), std::move(out), true),
                needs(px) || needs(ps),
                [px, ps, wx, ws, n, d](Graph& g, const std::vector<double>& gout) {
                  if (g.needs(px)) {
                    auto& dx = g.gbuf(px);
                    for (int64_t i = 0; i < n; ++i)
                      for (int64_t j = 0; j < d; ++j)
                        dx[static_cast<size_t>(i * d + j)] +=
                            gout[static_cast<size_t>(i * d + j)] * ws[i];
                  }
                  if (g.needs(ps)) {
                    auto& ds = g.gbuf(ps);
                    for (int64_t i = 0; i < n; ++i) {
                      double acc = 0.0;
                      for (int64_t j = 0; j < d; ++j)
                        acc += gout[static_cast<size_t>(i * d + j)] * wx[i * d + j];
                      ds[static_cast<size_t>(i)] += acc;
                    }
                  }
                });
  }

  // ----- linear algebra -----

  Tensor matmul(const Tensor& a, const Tensor& b) {
    Tensor wa = wrap(a), wb = wrap(b);
    if (wa.ndim() != 2 || wb.ndim() != 2)
      throw ShapeError("matmul: want 2-D operands, got " + shape_str(wa.shape()) +
                       " and " + shape_str(wb.shape()));
    const int64_t m = wa.dim(0), k = wa.dim(1), n = wb.dim(1);
    if (wb.dim(0) != k)
      throw ShapeError("matmul: inner dims disagree, " + shape_str(wa.shape()) +
                       " vs " + shape_str(wb.shape()));
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    {
      const double* A = wa.data().data();
      const double* B = wb.data().data();
      double* C = out.data();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t kk = 0; kk < k; ++kk) {
          const double av = A[i * k + kk];
          const double* Brow = B + kk * n;
          double* Crow = C + i * n;
          for (int64_t j = 0; j < n; ++j) Crow[j] += av * Brow[j];
        }
    }
    const int64_t pa = wa.node(), pb = wb.node();
    return emit("matmul", {pa, pb}, Tensor({m, n}, std::move(out), true),
                needs(pa) || needs(pb),
                [pa, pb, wa, wb, m, k, n](Graph& g, const std::vector<double>& gout) {
                  if (g.needs(pa)) {  // dA = g . B^T
                    auto& da = g.gbuf(pa);
                    const double* B = wb.data().data();
                    for (int64_t i = 0; i < m; ++i)
                      for (int64_t kk = 0; kk < k; ++kk) {
                        double acc = 0.0;
                        const double* Brow = B + kk * n;
                        const double* Grow = gout.data() + i * n;
                        for (int64_t j = 0; j < n; ++j) acc += Grow[j] * Brow[j];
                        da[static_cast<size_t>(i * k + kk)] += acc;
                      }
                  }
                  if (g.needs(pb)) {  // dB = A^T . g
                    auto& db = g.gbuf(pb);
                    const double* A = wa.data().data();
                    for (int64_t i = 0; i < m; ++i)
                      for (int64_t kk = 0; kk < k; ++kk) {
                        const double av = A[i * k + kk];
                        const double* Grow = gout.data() + i * n;
                        double* Drow = db.data() + kk * n;
                        for (int64_t j = 0; j < n; ++j) Drow[j] += av * Grow[j];
                      }
                  }
                });
  }

  Tensor transpose(const Tensor& a) {
    Tensor wa = wrap(a);
    if (wa.ndim() != 2)
      throw ShapeError("transpose: want 2-D, got " + shape_str(wa.shape()));
    const int64_t m = wa.dim(0), n = wa.dim(1);
    std::vector<double> out(static_cast<size_t>(m * n));
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j)
        out[static_cast<size_t>(j * m + i)] = wa[i * n + j];
    const int64_t pa = wa.node();
    return emit("transpose", {pa}, Tensor({n, m}, std::move(out), true), needs(pa),
                [pa, m, n](Graph& g, const std::vector<double>& gout) {
                  if (!g.needs(pa)) return;
                  auto& da = g.gbuf(pa);
                  for (int64_t j = 0; j < n; ++j)
                    for (int64_t i = 0; i < m; ++i)
                      da[static_cast<size_t>(i * n + j)] +=
                          gout[static_cast<size_t>(j * m + i)];
                });
  }

  // Softmax over the last axis with max-subtraction for overflow safety.
  Tensor softmax_last(const Tensor& x) {
    Tensor wx = wrap(x);
    if (wx.ndim() < 1) throw ShapeError("softmax_last: want ndim >= 1");
    const int64_t d = wx.dim(-1);
    const int64_t rows = wx.numel() / d;
    std::vector<double> out(static_cast<size_t>(wx.numel()));
    for (int64_t r = 0; r < rows; ++r) {
      const double* xr = wx.data().data() + r * d;
      double* yr = out.data() + r * d;
      double mx = xr[0];
      for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
      double sum = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        yr[j] = std::exp(xr[j] - mx);
        sum += yr[j];
      }
      for (int64_t j = 0; j < d; ++j) yr[j] /= sum;
    }
    Tensor y(wx.shape(), std::move(out), true);
    const int64_t px = wx.node();
    return emit("softmax_last", {px}, y, needs(px),
                [px, y, rows, d](Graph& g, const std::vector<double>& gout) {
                  if (!g.needs(px)) return;
                  auto& dx = g.gbuf(px);
                  for (int64_t r = 0; r < rows; ++r) {
                    const double* yr = y.data().data() + r * d;
                    const double* gr = gout.data() + r * d;
                    double dot = 0.0;
                    for (int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
                    for (int64_t j = 0; j < d; ++j)
                      dx[static_cast<size_t>(r * d + j)] += yr[j] * (gr[j] - dot);
                  }
                });
  }

  // Normalizes the last axis to zero mean / unit variance (population), then
  // applies the learned affine gamma/beta.
  Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    double eps = 1e-5) {
    if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
    Tensor wx = wrap(x), wg = wrap(gamma), wb = wrap(beta);
    const int64_t d = wx.dim(-1);
    if (wg.numel() != d || wb.numel() != d)
      throw ShapeError("layer_norm: gamma/beta length must equal last axis " +
                       std::to_string(d));
    const int64_t rows = wx.numel() / d;
    std::vector<double> out(static_cast<size_t>(wx.numel()));
    std::vector<double> xhat(static_cast<size_t>(wx.numel()));
    std::vector<double> inv_std(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
      const double* xr = wx.data().data() + r * d;
      double mean = 0.0;
      for (int64_t j = 0; j < d; ++j) mean += xr[j];
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (int64_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<size_t>(r)] = inv;
      for (int64_t j = 0; j < d; ++j) {
        const double xh = (xr[j] - mean) * inv;
        xhat[static_cast<size_t>(r * d + j)] = xh;
        out[static_cast<size_t>(r * d + j)] = wg[j] * xh + wb[j];
      }
    }
    const int64_t px = wx.node(), pg = wg.node(), pb = wb.node();
    auto xhat_sp = std::make_shared<std::vector<double>>(std::move(xhat));
    auto inv_sp = std::make_shared<std::vector<double>>(std::move(inv_std));
    return emit(
        "layer_norm", {px, pg, pb}, Tensor(wx.shape(), std::move(out), true),
        needs(px) || needs(pg) || needs(pb),
        [px, pg, pb, wg, xhat_sp, inv_sp, rows, d](Graph& g,
                                                   const std::vector<double>& gout) {
          const auto& xh = *xhat_sp;
          if (g.needs(pg)) {
            auto& dg = g.gbuf(pg);
            for (int64_t r = 0; r < rows; ++r)
              for (int64_t j = 0; j < d; ++j)
                dg[static_cast<size_t>(j)] +=
                    gout[static_cast<size_t>(r * d + j)] * xh[static_cast<size_t>(r * d + j)];
          }
          if (g.needs(pb)) {
            auto& db = g.gbuf(pb);
            for (int64_t r = 0; r < rows; ++r)
              for (int64_t j = 0; j < d; ++j)
                db[static_cast<size_t>(j)] += gout[static_cast<size_t>(r * d + j)];
          }
          if (g.needs(px)) {
            auto& dx = g.gbuf(px);
            for (int64_t r = 0; r < rows; ++r) {
              const double inv = (*inv_sp)[static_cast<size_t>(r)];
              double mean_dxh = 0.0, mean_dxh_xh = 0.0;
              for (int64_t j = 0; j < d; ++j) {
                const double dxh = gout[static_cast<size_t>(r * d + j)] * wg[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[static_cast<size_t>(r * d + j)];
              }
              mean_dxh /= static_cast<double>(d);
              mean_dxh_xh /= static_cast<double>(d);
              for (int64_t j = 0; j < d; ++j) {
                const double dxh = gout[static_cast<size_t>(r * d + j)] * wg[j];
                dx[static_cast<size_t>(r * d + j)] +=
                    inv * (dxh - mean_dxh -
                           xh[static_cast<size_t>(r * d + j)] * mean_dxh_xh);
              }
            }
          }
        });
  }

  // ----- reductions and shape plumbing -----

  Tensor sum_all(const Tensor& x) {
    Tensor wx = wrap(x);
    double acc = 0.0;
    for (int64_t i = 0; i < wx.numel(); ++i) acc += wx[i];
    const int64_t px = wx.node();
    const int64_t n = wx.numel();
    return emit("sum_all", {px}, Tensor({1}, {acc}, true), needs(px),
                [px, n](Graph& g, const std::vector<double>& gout) {
                  if (!g.needs(px)) return;
                  auto& dx = g.gbuf(px);
                  for (int64_t i = 0; i < n; ++i) dx[static_cast<size_t>(i)] += gout[0];
                });
  }

  Tensor mean_all(const Tensor& x) {
    Tensor wx = wrap(x);
    return scale(sum_all(wx), 1.0 / static_cast<double>(wx.numel()));
  }

  Tensor reshape(const Tensor& x, const Shape& shape) {
    Tensor wx = wrap(x);
    Tensor y = wx.reshaped(shape);
    const int64_t px = wx.node();
    return emit("reshape", {px}, y, needs(px),
                [px](Graph& g, const std::vector<double>& gout) {
                  if (!g.needs(px)) return;
                  auto& dx = g.gbuf(px);
                  for (size_t i = 0; i < gout.size(); ++i) dx[i] += gout[i];
                });
  }

  // Concatenates two tensors along the last axis (leading dims must agree).
  Tensor concat_last(const Tensor& a, const Tensor& b) {
    Tensor wa = wrap(a), wb = wrap(b);
    if (wa.ndim() != wb.ndim())
      throw ShapeError("concat_last: rank mismatch");
    for (int i = 0; i + 1 < wa.ndim(); ++i)
      if (wa.dim(i) != wb.dim(i))
        throw ShapeError("concat_last: leading dims disagree, " +
                         shape_str(wa.shape()) + " vs " + shape_str(wb.shape()));
    const int64_t da = wa.dim(-1), db = wb.dim(-1);
    const int64_t rows = wa.numel() / da;
    Shape out_shape = wa.shape();
    out_shape.back() = da + db;
    std::vector<double> out(static_cast<size_t>(rows * (da + db)));
    for (int64_t r = 0; r < rows; ++r) {
      for (int64_t j = 0; j < da; ++j)
        out[static_cast<size_t>(r * (da + db) + j)] = wa[r * da + j];
      for (int64_t j = 0; j < db; ++j)
        out[static_cast<size_t>(r * (da + db) + da + j)] = wb[r * db + j];
    }
    const int64_t pa = wa.node(), pb = wb.node();
    return emit("concat_last", {pa, pb}, Tensor(out_shape, std::move(out), true),
                needs(pa) || needs(pb),
                [pa, pb, rows, da, db](Graph& g, const std::vector<double>& gout) {
                  if (g.needs(pa)) {
                    auto& ga = g.gbuf(pa);
                    for (int64_t r = 0; r < rows; ++r)
                      for (int64_t j = 0; j < da; ++j)
                        ga[static_cast<size_t>(r * da + j)] +=
                            gout[static_cast<size_t>(r * (da + db) + j)];
                  }
                  if (g.needs(pb)) {
                    auto& gb = g.gbuf(pb);
                    for (int64_t r = 0; r < rows; ++r)
                      for (int64_t j = 0; j < db; ++j)
                        gb[static_cast<size_t>(r * db + j)] +=
                            gout[static_cast<size_t>(r * (da + db) + da + j)];
                  }
                });
  }

  // Keeps columns [from, to) of the last axis.
  Tensor slice_last(const Tensor& x, int64_t from, int64_t to) {
    Tensor wx = wrap(x);
    const int64_t d = wx.dim(-1);
    if (from < 0 || from >= to || to > d)
      throw ShapeError("slice_last: bad range [" + std::to_string(from) + "," +
                       std::to_string(to) + ") for axis of " + std::to_string(d));
    const int64_t rows = wx.numel() / d, w = to - from;
    Shape out_shape = wx.shape();
    out_shape.back() = w;
    std::vector<double> out(static_cast<size_t>(rows * w));
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < w; ++j)
        out[static_cast<size_t>(r * w + j)] = wx[r * d + from + j];
    const int64_t px = wx.node();
    return emit("slice_last", {px}, Tensor(out_shape, std::move(out), true),
                needs(px),
                [px, rows, d, w, from](Graph& g, const std::vector<double>& gout) {
                  if (!g.needs(px)) return;
                  auto& dx = g.gbuf(px);
                  for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < w; ++j)
                      dx[static_cast<size_t>(r * d + from + j)] +=
                          gout[static_cast<size_t>(r * w + j)];
                });
  }

  // Gathers rows of a 2-D tensor; duplicate indices are allowed (gradients
  // accumulate). Indices are constants — selection is never differentiated.
  Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& idx) {
    Tensor wx = wrap(x);
    if (wx.ndim() != 2)
      throw ShapeError("gather_rows: want 2-D, got " + shape_str(wx.shape()));
    const int64_t n = wx.dim(0), d = wx.dim(1);
    for (int64_t i : idx)
      if (i < 0 || i >= n)
        throw ShapeError("gather_rows: index " + std::to_string(i) +
                         " out of range for " + std::to_string(n) + " rows");
    const int64_t m = static_cast<int64_t>(idx.size());
    if (m == 0) throw ShapeError("gather_rows: empty index list");
    std::vector<double> out(static_cast<size_t>(m * d));
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < d; ++j)
        out[static_cast<size_t>(i * d + j)] = wx[idx[static_cast<size_t>(i)] * d + j];
    const int64_t px = wx.node();
    return emit("gather_rows", {px}, Tensor({m, d}, std::move(out), true), needs(px),
                [px, idx, m, d](Graph& g, const std::vector<double>& gout) {
                  if (!g.needs(px)) return;
                  auto& dx = g.gbuf(px);
                  for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < d; ++j)
                      dx[static_cast<size_t>(idx[static_cast<size_t>(i)] * d + j)] +=
                          gout[static_cast<size_t>(i * d + j)];
                });
  }

  // Returns base with rows[i] written at idx[i]. Indices must be unique (the
  // replacement would otherwise be order-dependent).
  Tensor scatter_replace_rows(const Tensor& base, const std::vector<int64_t>& idx,
                              const Tensor& rows) {
    Tensor wb = wrap(base), wr = wrap(rows);
    if (wb.ndim() != 2 || wr.ndim() != 2)
      throw ShapeError("scatter_replace_rows: want 2-D operands");
    const int64_t n = wb.dim(0), d = wb.dim(1);
    const int64_t m = static_cast<int64_t>(idx.size());
    if (wr.dim(0) != m || wr.dim(1) != d)
      throw ShapeError("scatter_replace_rows: rows shape " + shape_str(wr.shape()) +
                       " does not match " + std::to_string(m) + "x" +
                       std::to_string(d));
    std::vector<bool> seen(static_cast<size_t>(n), false);
    for (int64_t i : idx) {
      if (i < 0 || i >= n)
        throw ShapeError("scatter_replace_rows: index out of range");
      if (seen[static_cast<size_t>(i)])
        throw ContractError("scatter_replace_rows: duplicate index " +
                            std::to_string(i));
      seen[static_cast<size_t>(i)] = true;
    }
    std::vector<double> out(wb.data());
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < d; ++j)
        out[static_cast<size_t>(idx[static_cast<size_t>(i)] * d + j)] = wr[i * d + j];
    const int64_t pb = wb.node(), pr = wr.node();
    return emit("scatter_replace_rows", {pb, pr},
                Tensor(wb.shape(), std::move(out), true), needs(pb) || needs(pr),
                [pb, pr, idx, n, d, m](Graph& g, const std::vector<double>& gout) {
                  if (g.needs(pb)) {
                    auto& db = g.gbuf(pb);
                    std::vector<bool> replaced(static_cast<size_t>(n), false);
                    for (int64_t i : idx) replaced[static_cast<size_t>(i)] = true;
                    for (int64_t r = 0; r < n; ++r)
                      if (!replaced[static_cast<size_t>(r)])
                        for (int64_t j = 0; j < d; ++j)
                          db[static_cast<size_t>(r * d + j)] +=
                              gout[static_cast<size_t>(r * d + j)];
                  }
                  if (g.needs(pr)) {
                    auto& dr = g.gbuf(pr);
                    for (int64_t i = 0; i < m; ++i)
                      for (int64_t j = 0; j < d; ++j)
                        dr[static_cast<size_t>(i * d + j)] +=
                            gout[static_cast<size_t>(idx[static_cast<size_t>(i)] * d + j)];
                  }
                });
  }

  // ----- patch geometry -----

  // Non-overlapping PxP patches of an HxWxC field, each mapped by one affine
  // projection to a d-vector. Token order is row-major over the patch grid.
  Tensor conv_patchify(const Tensor& field, const Tensor& kernel,
                       const Tensor& bias, int64_t P) {
    Tensor wf = wrap(field), wk = wrap(kernel), wb = wrap(bias);
    if (wf.ndim() != 3) throw ShapeError("conv_patchify: field must be HxWxC");
    if (wk.ndim() != 4) throw ShapeError("conv_patchify: kernel must be PxPxCxd");
    const int64_t H = wf.dim(0), W = wf.dim(1), C = wf.dim(2);
    const int64_t d = wk.dim(3);
    if (P <= 0 || wk.dim(0) != P || wk.dim(1) != P || wk.dim(2) != C)
      throw ShapeError("conv_patchify: kernel " + shape_str(wk.shape()) +
                       " inconsistent with patch " + std::to_string(P) +
                       " and channels " + std::to_string(C));
    if (H % P != 0 || W % P != 0)
      throw GeometryError("conv_patchify: patch " + std::to_string(P) +
                          " does not divide field " + std::to_string(H) + "x" +
                          std::to_string(W));
    if (wb.numel() != d) throw ShapeError("conv_patchify: bias length != d");
    const int64_t gh = H / P, gw = W / P, N = gh * gw;
    std::vector<double> out(static_cast<size_t>(N * d));
    const double* F = wf.data().data();
    const double* K = wk.data().data();
    for (int64_t gy = 0; gy < gh; ++gy)
      for (int64_t gx = 0; gx < gw; ++gx) {
        const int64_t t = gy * gw + gx;
        for (int64_t e = 0; e < d; ++e) {
          double acc = wb[e];
          for (int64_t py = 0; py < P; ++py)
            for (int64_t px = 0; px < P; ++px) {
              const double* frow = F + ((gy * P + py) * W + (gx * P + px)) * C;
              const double* krow = K + ((py * P + px) * C) * d + e;
              for (int64_t c = 0; c < C; ++c) acc += frow[c] * krow[c * d];
            }
          out[static_cast<size_t>(t * d + e)] = acc;
        }
      }
    const int64_t pf = wf.node(), pk = wk.node(), pb = wb.node();
    return emit(
        "conv_patchify", {pf, pk, pb}, Tensor({N, d}, std::move(out), true),
        needs(pf) || needs(pk) || needs(pb),
        [pf, pk, pb, wf, wk, P, H, W, C, d, gh, gw](Graph& g,
                                                    const std::vector<double>& gout) {
          const double* F = wf.data().data();
          const double* K = wk.data().data();
          for (int64_t gy = 0; gy < gh; ++gy)
            for (int64_t gx = 0; gx < gw; ++gx) {
              const int64_t t = gy * gw + gx;
              const double* grow = gout.data() + t * d;
              if (g.needs(pf)) {
                auto& df = g.gbuf(pf);
                for (int64_t py = 0; py < P; ++py)
                  for (int64_t px = 0; px < P; ++px) {
                    double* drow =
                        df.data() + ((gy * P + py) * W + (gx * P + px)) * C;
                    const double* kbase = K + ((py * P + px) * C) * d;
                    for (int64_t c = 0; c < C; ++c) {
                      double acc = 0.0;
                      for (int64_t e = 0; e < d; ++e) acc += kbase[c * d + e] * grow[e];
                      drow[c] += acc;
                    }
                  }
              }
              if (g.needs(pk)) {
                auto& dk = g.gbuf(pk);
                for (int64_t py = 0; py < P; ++py)
                  for (int64_t px = 0; px < P; ++px) {
                    const double* frow = F + ((gy * P + py) * W + (gx * P + px)) * C;
                    double* kbase = dk.data() + ((py * P + px) * C) * d;
                    for (int64_t c = 0; c < C; ++c)
                      for (int64_t e = 0; e < d; ++e)
                        kbase[c * d + e] += frow[c] * grow[e];
                  }
              }
              if (g.needs(pb)) {
                auto& db = g.gbuf(pb);
                for (int64_t e = 0; e < d; ++e) db[static_cast<size_t>(e)] += grow[e];
              }
            }
        });
  }

  // Exact inverse geometry of conv_patchify: each token paints its PxP patch.
  Tensor deconv_unpatchify(const Tensor& tokens, const Tensor& kernel,
                           const Tensor& bias, int64_t grid_h, int64_t grid_w) {
    Tensor wt = wrap(tokens), wk = wrap(kernel), wb = wrap(bias);
    if (wt.ndim() != 2) throw ShapeError("deconv_unpatchify: tokens must be Nxd");
    if (wk.ndim() != 4) throw ShapeError("deconv_unpatchify: kernel must be PxPxCxd");
    const int64_t N = wt.dim(0), d = wt.dim(1);
    const int64_t P = wk.dim(0), C = wk.dim(2);
    if (wk.dim(1) != P || wk.dim(3) != d)
      throw ShapeError("deconv_unpatchify: kernel " + shape_str(wk.shape()) +
                       " inconsistent with token dim " + std::to_string(d));
    if (N != grid_h * grid_w)
      throw GeometryError("deconv_unpatchify: " + std::to_string(N) +
                          " tokens != grid " + std::to_string(grid_h) + "x" +
                          std::to_string(grid_w));
    if (wb.numel() != C) throw ShapeError("deconv_unpatchify: bias length != C");
    const int64_t H = grid_h * P, W = grid_w * P;
    std::vector<double> out(static_cast<size_t>(H * W * C));
    const double* T = wt.data().data();
    const double* K = wk.data().data();
    for (int64_t gy = 0; gy < grid_h; ++gy)
      for (int64_t gx = 0; gx < grid_w; ++gx) {
        const int64_t t = gy * grid_w + gx;
        const double* trow = T + t * d;
        for (int64_t py = 0; py < P; ++py)
          for (int64_t px = 0; px < P; ++px) {
            double* orow = out.data() + ((gy * P + py) * W + (gx * P + px)) * C;
            const double* kbase = K + ((py * P + px) * C) * d;
            for (int64_t c = 0; c < C; ++c) {
              double acc = wb[c];
              for (int64_t e = 0; e < d; ++e) acc += trow[e] * kbase[c * d + e];
              orow[c] = acc;
            }
          }
      }
    const int64_t pt = wt.node(), pk = wk.node(), pb = wb.node();
    return emit(
        "deconv_unpatchify", {pt, pk, pb}, Tensor({H, W, C}, std::move(out), true),
        needs(pt) || needs(pk) || needs(pb),
        [pt, pk, pb, wt, wk, P, C, d, grid_h, grid_w, W](
            Graph& g, const std::vector<double>& gout) {
          const double* T = wt.data().data();
          const double* K = wk.data().data();
          for (int64_t gy = 0; gy < grid_h; ++gy)
            for (int64_t gx = 0; gx < grid_w; ++gx) {
              const int64_t t = gy * grid_w + gx;
              for (int64_t py = 0; py < P; ++py)
                for (int64_t px = 0; px < P; ++px) {
                  const double* grow =
                      gout.data() + ((gy * P + py) * W + (gx * P + px)) * C;
                  const double* kbase = K + ((py * P + px) * C) * d;
                  if (g.needs(pt)) {
                    auto& dt = g.gbuf(pt);
                    double* drow = dt.data() + t * d;
                    for (int64_t c = 0; c < C; ++c)
                      for (int64_t e = 0; e < d; ++e)
                        drow[e] += grow[c] * kbase[c * d + e];
                  }
                  if (g.needs(pk)) {
                    auto& dk = g.gbuf(pk);
                    const double* trow = T + t * d;
                    double* kgrad = dk.data() + ((py * P + px) * C) * d;
                    for (int64_t c = 0; c < C; ++c)
                      for (int64_t e = 0; e < d; ++e)
                        kgrad[c * d + e] += grow[c] * trow[e];
                  }
                  if (g.needs(pb)) {
                    auto& db = g.gbuf(pb);
                    for (int64_t c = 0; c < C; ++c) db[static_cast<size_t>(c)] += grow[c];
                  }
                }
            }
        });
  }

  // 3x3 same-padding convolution over an h x w x C_in grid (zero padding).
  // Zero padding: positions outside the grid contribute nothing.
  Tensor conv3x3_same(const Tensor& grid, const Tensor& kernel, const Tensor& bias) {
    return conv3x3_impl(grid, kernel, bias, false, "conv3x3_same");
  }

  // Circular padding: neighbour indices wrap modulo the grid extent, so every
  // position sees a full 3x3 neighbourhood and a constant grid maps to a
  // constant output.
  Tensor conv3x3_wrap(const Tensor& grid, const Tensor& kernel, const Tensor& bias) {
    return conv3x3_impl(grid, kernel, bias, true, "conv3x3_wrap");
  }

  Tensor conv3x3_impl(const Tensor& grid, const Tensor& kernel, const Tensor& bias,
                      bool wrap_pad, const char* tag) {
    Tensor wg = wrap(grid), wk = wrap(kernel), wb = wrap(bias);
    const std::string op(tag);
    if (wg.ndim() != 3) throw ShapeError(op + ": grid must be h x w x C");
    if (wk.ndim() != 4 || wk.dim(0) != 3 || wk.dim(1) != 3)
      throw ShapeError(op + ": kernel must be 3x3xCixCo");
    const int64_t h = wg.dim(0), w = wg.dim(1), ci = wg.dim(2), co = wk.dim(3);
    if (wk.dim(2) != ci) throw ShapeError(op + ": channel mismatch");
    if (wb.numel() != co) throw ShapeError(op + ": bias length != C_out");
    // Maps a neighbour offset to a grid index, or -1 when the tap falls off a
    // zero-padded edge.
    auto nb = [wrap_pad](int64_t i, int64_t extent) -> int64_t {
      if (wrap_pad) return ((i % extent) + extent) % extent;
      return (i < 0 || i >= extent) ? -1 : i;
    };
    std::vector<double> out(static_cast<size_t>(h * w * co));
    const double* G = wg.data().data();
    const double* K = wk.data().data();
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        for (int64_t o = 0; o < co; ++o) {
          double acc = wb[o];
          for (int64_t dy = 0; dy < 3; ++dy) {
            const int64_t yy = nb(y + dy - 1, h);
            if (yy < 0) continue;
            for (int64_t dx = 0; dx < 3; ++dx) {
              const int64_t xx = nb(x + dx - 1, w);
              if (xx < 0) continue;
              const double* grow = G + (yy * w + xx) * ci;
              const double* kbase = K + ((dy * 3 + dx) * ci) * co + o;
              for (int64_t c = 0; c < ci; ++c) acc += grow[c] * kbase[c * co];
            }
          }
          out[static_cast<size_t>((y * w + x) * co + o)] = acc;
        }
    const int64_t pg = wg.node(), pk = wk.node(), pb = wb.node();
    return emit(
        tag, {pg, pk, pb}, Tensor({h, w, co}, std::move(out), true),
        needs(pg) || needs(pk) || needs(pb),
        [pg, pk, pb, wg, wk, h, w, ci, co, nb](Graph& g,
                                               const std::vector<double>& gout) {
          const double* G = wg.data().data();
          const double* K = wk.data().data();
          for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
              const double* grow = gout.data() + (y * w + x) * co;
              for (int64_t dy = 0; dy < 3; ++dy) {
                const int64_t yy = nb(y + dy - 1, h);
                if (yy < 0) continue;
                for (int64_t dx = 0; dx < 3; ++dx) {
                  const int64_t xx = nb(x + dx - 1, w);
                  if (xx < 0) continue;
                  if (g.needs(pg)) {
                    auto& dgr = g.gbuf(pg);
                    double* drow = dgr.data() + (yy * w + xx) * ci;
                    const double* kbase = K + ((dy * 3 + dx) * ci) * co;
                    for (int64_t c = 0; c < ci; ++c) {
                      double acc = 0.0;
                      for (int64_t o = 0; o < co; ++o) acc += kbase[c * co + o] * grow[o];
                      drow[c] += acc;
                    }
                  }
                  if (g.needs(pk)) {
                    auto& dk = g.gbuf(pk);
                    const double* srow = G + (yy * w + xx) * ci;
                    double* kgrad = dk.data() + ((dy * 3 + dx) * ci) * co;
                    for (int64_t c = 0; c < ci; ++c)
                      for (int64_t o = 0; o < co; ++o)
                        kgrad[c * co + o] += srow[c] * grow[o];
                  }
                }
              }
              if (g.needs(pb)) {
                auto& db = g.gbuf(pb);
                for (int64_t o = 0; o < co; ++o) db[static_cast<size_t>(o)] += grow[o];
              }
            }
        });
  }

  // 4-neighbour bilinear interpolation of an h x w x d field at m continuous
  // (y, x) grid coordinates. Out-of-range coordinates clamp to the boundary;
  // beyond the boundary the coordinate gradient is zero (the sample is
  // constant there). Differentiable w.r.t. both field and coords.
  Tensor bilinear_sample(const Tensor& field, const Tensor& coords) {
    Tensor wf = wrap(field), wc = wrap(coords);
    if (wf.ndim() != 3) throw ShapeError("bilinear_sample: field must be h x w x d");
    if (wc.ndim() != 2 || wc.dim(1) != 2)
      throw ShapeError("bilinear_sample: coords must be m x 2");
    const int64_t h = wf.dim(0), w = wf.dim(1), d = wf.dim(2);
    const int64_t m = wc.dim(0);
    struct Corner {
      int64_t y0, x0;
      double ty, tx;
      bool dy_live, dx_live;
    };
    auto corners = std::make_shared<std::vector<Corner>>(static_cast<size_t>(m));
    std::vector<double> out(static_cast<size_t>(m * d));
    const double* F = wf.data().data();
    for (int64_t i = 0; i < m; ++i) {
      const double yraw = wc[i * 2 + 0], xraw = wc[i * 2 + 1];
      const double y = std::min(std::max(yraw, 0.0), static_cast<double>(h - 1));
      const double x = std::min(std::max(xraw, 0.0), static_cast<double>(w - 1));
      Corner c;
      c.y0 = h > 1 ? std::min(static_cast<int64_t>(std::floor(y)), h - 2) : 0;
      c.x0 = w > 1 ? std::min(static_cast<int64_t>(std::floor(x)), w - 2) : 0;
      c.ty = h > 1 ? y - static_cast<double>(c.y0) : 0.0;
      c.tx = w > 1 ? x - static_cast<double>(c.x0) : 0.0;
      c.dy_live = h > 1 && yraw >= 0.0 && yraw <= static_cast<double>(h - 1);
      c.dx_live = w > 1 && xraw >= 0.0 && xraw <= static_cast<double>(w - 1);
      (*corners)[static_cast<size_t>(i)] = c;
      const int64_t y1 = h > 1 ? c.y0 + 1 : c.y0;
      const int64_t x1 = w > 1 ? c.x0 + 1 : c.x0;
      const double* f00 = F + (c.y0 * w + c.x0) * d;
      const double* f01 = F + (c.y0 * w + x1) * d;
      const double* f10 = F + (y1 * w + c.x0) * d;
      const double* f11 = F + (y1 * w + x1) * d;
      for (int64_t ch = 0; ch < d; ++ch)
        out[static_cast<size_t>(i * d + ch)] =
            (1.0 - c.ty) * ((1.0 - c.tx) * f00[ch] + c.tx * f01[ch]) +
            c.ty * ((1.0 - c.tx) * f10[ch] + c.tx * f11[ch]);
    }
    const int64_t pf = wf.node(), pc = wc.node();
    return emit(
        "bilinear_sample", {pf, pc}, Tensor({m, d}, std::move(out), true),
        needs(pf) || needs(pc),
        [pf, pc, wf, corners, h, w, d, m](Graph& g, const std::vector<double>& gout) {
          const double* F = wf.data().data();
          for (int64_t i = 0; i < m; ++i) {
            const Corner& c = (*corners)[static_cast<size_t>(i)];
            const int64_t y1 = h > 1 ? c.y0 + 1 : c.y0;
            const int64_t x1 = w > 1 ? c.x0 + 1 : c.x0;
            const double* grow = gout.data() + i * d;
            if (g.needs(pf)) {
              auto& df = g.gbuf(pf);
              for (int64_t ch = 0; ch < d; ++ch) {
                const double gv = grow[ch];
                df[static_cast<size_t>((c.y0 * w + c.x0) * d + ch)] +=
                    (1.0 - c.ty) * (1.0 - c.tx) * gv;
                df[static_cast<size_t>((c.y0 * w + x1) * d + ch)] +=
                    (1.0 - c.ty) * c.tx * gv;
                df[static_cast<size_t>((y1 * w + c.x0) * d + ch)] +=
                    c.ty * (1.0 - c.tx) * gv;
                df[static_cast<size_t>((y1 * w + x1) * d + ch)] += c.ty * c.tx * gv;
              }
            }
            if (g.needs(pc)) {
              auto& dc = g.gbuf(pc);
              const double* f00 = F + (c.y0 * w + c.x0) * d;
              const double* f01 = F + (c.y0 * w + x1) * d;
              const double* f10 = F + (y1 * w + c.x0) * d;
              const double* f11 = F + (y1 * w + x1) * d;
              double dy = 0.0, dx = 0.0;
              for (int64_t ch = 0; ch < d; ++ch) {
                const double gv = grow[ch];
                dy += gv * ((1.0 - c.tx) * (f10[ch] - f00[ch]) +
                            c.tx * (f11[ch] - f01[ch]));
                dx += gv * ((1.0 - c.ty) * (f01[ch] - f00[ch]) +
                            c.ty * (f11[ch] - f10[ch]));
              }
              if (c.dy_live) dc[static_cast<size_t>(i * 2 + 0)] += dy;
              if (c.dx_live) dc[static_cast<size_t>(i * 2 + 1)] += dx;
            }
          }
        });
  }

  // ----- backward -----

  void backward(const Tensor& loss) {
    if (!loss.has_node() || loss.node() >= static_cast<int64_t>(nodes_.size()))
      throw ContractError("backward: loss is not a node of this graph");
    if (shape_numel(nodes_[static_cast<size_t>(loss.node())].shape) != 1)
      throw ContractError("backward: loss must be a scalar node");
    grads_.assign(nodes_.size(), {});
    gbuf(loss.node())[0] = 1.0;
    for (int64_t id = loss.node(); id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.needs_grad || !n.backprop || grads_[static_cast<size_t>(id)].empty())
        continue;
      n.backprop(*this, grads_[static_cast<size_t>(id)]);
    }
  }

  bool has_grad(const Tensor& t) const {
    return t.has_node() && t.node() < static_cast<int64_t>(grads_.size()) &&
           !grads_[static_cast<size_t>(t.node())].empty();
  }

  // Gradient of the last backward() w.r.t. t; throws if absent (absent means
  // the node was unreachable from the loss and its gradient is zero).
  Tensor grad(const Tensor& t) const {
    if (!has_grad(t)) throw ContractError("grad: no gradient recorded for node");
    const Node& n = nodes_[static_cast<size_t>(t.node())];
    return Tensor(n.shape, grads_[static_cast<size_t>(t.node())], true);
  }

  Tensor grad_or_zero(const Tensor& t) const {
    if (!t.has_node()) throw ContractError("grad_or_zero: tensor has no node");
    return has_grad(t) ? grad(t)
                       : Tensor::zeros(nodes_[static_cast<size_t>(t.node())].shape);
  }

  size_t node_count() const { return nodes_.size(); }

  bool requires_grad(const Tensor& t) const {
    if (!t.has_node()) throw ContractError("requires_grad: tensor has no node");
    return needs(t.node());
  }

  const char* op_tag(int64_t id) const { return nodes_[static_cast<size_t>(id)].op; }

 private:
  struct Node {
    const char* op;
    std::vector<int64_t> parents;
    Shape shape;
    bool needs_grad;
    std::function<void(Graph&, const std::vector<double>&)> backprop;
  };

  friend struct GraphAccess;

  static double gelu_fwd(double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
  }
  static double gelu_bwd(double x) {
    const double phi_cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double phi_pdf =
        std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return phi_cdf + x * phi_pdf;
  }

  // Tensors without a node handle are auto-wrapped as constants of this graph.
  Tensor wrap(const Tensor& t) {
    if (!t.valid()) throw ContractError("op on default-constructed tensor");
    if (!t.has_node()) return constant(t);
    if (t.node() >= static_cast<int64_t>(nodes_.size()))
      throw ContractError("tensor node handle does not belong to this graph");
    return t;
  }

  bool needs(int64_t id) const {
    return id >= 0 && nodes_[static_cast<size_t>(id)].needs_grad;
  }

  std::vector<double>& gbuf(int64_t id) {
    auto& buf = grads_[static_cast<size_t>(id)];
    if (buf.empty())
      buf.assign(static_cast<size_t>(shape_numel(nodes_[static_cast<size_t>(id)].shape)),
                 0.0);
    return buf;
  }

  Tensor emit(const char* op, std::vector<int64_t> parents, Tensor value,
              bool needs_grad,
              std::function<void(Graph&, const std::vector<double>&)> backprop) {
    Node n;
    n.op = op;
    n.parents = std::move(parents);
    n.shape = value.shape();
    n.needs_grad = needs_grad;
    if (needs_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return value.with_node(static_cast<int64_t>(nodes_.size()) - 1);
  }

  template <class F, class DA, class DB>
  Tensor binary_same_shape(const char* op, const Tensor& a, const Tensor& b, F f,
                           DA da_fn, DB db_fn) {
    Tensor wa = wrap(a), wb = wrap(b);
    if (!wa.same_shape(wb))
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(wa.shape()) +
                       " vs " + shape_str(wb.shape()));
    std::vector<double> out(static_cast<size_t>(wa.numel()));
    for (int64_t i = 0; i < wa.numel(); ++i) out[static_cast<size_t>(i)] = f(wa[i], wb[i]);
    const int64_t pa = wa.node(), pb = wb.node();
    return emit(op, {pa, pb}, Tensor(wa.shape(), std::move(out), true),
                needs(pa) || needs(pb),
                [pa, pb, wa, wb, da_fn, db_fn](Graph& g,
                                               const std::vector<double>& gout) {
                  if (g.needs(pa)) {
                    auto& da = g.gbuf(pa);
                    for (size_t i = 0; i < gout.size(); ++i)
                      da[i] += da_fn(gout[i], wa[static_cast<int64_t>(i)],
                                     wb[static_cast<int64_t>(i)]);
                  }
                  if (g.needs(pb)) {
                    auto& db = g.gbuf(pb);
                    for (size_t i = 0; i < gout.size(); ++i)
                      db[i] += db_fn(gout[i], wa[static_cast<int64_t>(i)],
                                     wb[static_cast<int64_t>(i)]);
                  }
                });
  }

  template <class F, class D>
  Tensor unary(const char* op, const Tensor& a, F f, D dfn) {
    Tensor wa = wrap(a);
    std::vector<double> out(wa.data());
    for (auto& v : out) v = f(v);
    const int64_t pa = wa.node();
    return emit(op, {pa}, Tensor(wa.shape(), std::move(out), true), needs(pa),
                [pa, wa, dfn](Graph& g, const std::vector<double>& gout) {
                  if (!g.needs(pa)) return;
                  auto& da = g.gbuf(pa);
                  for (size_t i = 0; i < gout.size(); ++i)
                    da[i] += gout[i] * dfn(wa[static_cast<int64_t>(i)]);
                });
  }

  // x is [..., d], v is [d]; either adds v to every row or multiplies rows.
  Tensor rowvec_op(const char* op, const Tensor& x, const Tensor& v, bool additive) {
    Tensor wx = wrap(x), wv = wrap(v);
    const int64_t d = wx.dim(-1);
    if (wv.numel() != d)
      throw ShapeError(std::string(op) + ": vector length " +
                       std::to_string(wv.numel()) + " != last axis " +
                       std::to_string(d));
    const int64_t rows = wx.numel() / d;
    std::vector<double> out(static_cast<size_t>(wx.numel()));
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < d; ++j)
        out[static_cast<size_t>(r * d + j)] =
            additive ? wx[r * d + j] + wv[j] : wx[r * d + j] * wv[j];
    const int64_t px = wx.node(), pv = wv.node();
    return emit(op, {px, pv}, Tensor(wx.shape(), std::move(out), true),
                needs(px) || needs(pv),
                [px, pv, wx, wv, rows, d, additive](Graph& g,
                                                    const std::vector<double>& gout) {
                  if (g.needs(px)) {
                    auto& dx = g.gbuf(px);
                    for (int64_t r = 0; r < rows; ++r)
                      for (int64_t j = 0; j < d; ++j)
                        dx[static_cast<size_t>(r * d + j)] +=
                            additive ? gout[static_cast<size_t>(r * d + j)]
                                     : gout[static_cast<size_t>(r * d + j)] * wv[j];
                  }
                  if (g.needs(pv)) {
                    auto& dv = g.gbuf(pv);
                    for (int64_t r = 0; r < rows; ++r)
                      for (int64_t j = 0; j < d; ++j)
                        dv[static_cast<size_t>(j)] +=
                            additive ? gout[static_cast<size_t>(r * d + j)]
                                     : gout[static_cast<size_t>(r * d + j)] * wx[r * d + j];
                  }
                });
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

// Central-difference gradient oracle: (f(x+eps e_i) - f(x-eps e_i)) / (2 eps).
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                               const Tensor& x, double eps) {
  if (eps <= 0.0) throw ContractError("finite_diff_grad: eps must be positive");
  std::vector<double> grad(static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < x.numel(); ++i) {
    std::vector<double> plus(x.data()), minus(x.data());
    plus[static_cast<size_t>(i)] += eps;
    minus[static_cast<size_t>(i)] -= eps;
    const double fp = f(Tensor(x.shape(), std::move(plus), true));
    const double fm = f(Tensor(x.shape(), std::move(minus), true));
    grad[static_cast<size_t>(i)] = (fp - fm) / (2.0 * eps);
  }
  return Tensor(x.shape(), std::move(grad), true);
}

}  // namespace scalemix
