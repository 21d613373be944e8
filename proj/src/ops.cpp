#include "ulsa/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "ulsa/error.hpp"

namespace ulsa::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

Tape& same_tape(Var a, Var b, const char* op) {
  if (&a.tape() != &b.tape()) throw Error(std::string(op) + ": operands live on different tapes");
  return a.tape();
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeMismatch(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

void require_rank(const char* op, Var x, std::size_t rank) {
  if (x.shape().size() != rank)
    throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                        shape_str(x.shape()));
}

Var emit(Tape& tape, const char* op, Tensor value, std::vector<std::size_t> parents, Tape::BackwardFn fn) {
  value.check_finite(op);
  return tape.record(std::move(value), std::move(parents), std::move(fn));
}

/// Adds `g` (scaled) into the parent's gradient if the parent is tracked.
void accumulate(Tape& t, std::size_t id, const Tensor& g, double k = 1.0) {
  if (!t.requires_grad(id)) return;
  Tensor& slot = t.grad_slot(id);
  for (std::size_t i = 0; i < g.size(); ++i) slot[i] += k * g[i];
}

/// Product of all extents after axis 1.
std::size_t inner_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b, "add");
  if (a.shape() != b.shape()) mismatch("add", a.shape(), b.shape());
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const auto ia = a.id(), ib = b.id();
  return emit(t, "add", std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_slot(self);
    accumulate(tp, ia, g);
    accumulate(tp, ib, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b, "sub");
  if (a.shape() != b.shape()) mismatch("sub", a.shape(), b.shape());
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const auto ia = a.id(), ib = b.id();
  return emit(t, "sub", std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_slot(self);
    accumulate(tp, ia, g);
    accumulate(tp, ib, g, -1.0);
  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b, "mul");
  if (a.shape() != b.shape()) mismatch("mul", a.shape(), b.shape());
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const auto ia = a.id(), ib = b.id();
  return emit(t, "mul", std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_slot(self);
    const Tensor& av = tp.value(ia);
    const Tensor& bv = tp.value(ib);
    if (tp.requires_grad(ia)) {
      Tensor& ga = tp.grad_slot(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(ib)) {
      Tensor& gb = tp.grad_slot(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double k) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v *= k;
  const auto ia = a.id();
  return emit(a.tape(), "scale", std::move(out), {ia},
              [ia, k](Tape& tp, std::size_t self) { accumulate(tp, ia, tp.grad_slot(self), k); });
}

Var add_bias(Var x, Var bias) {
  Tape& t = same_tape(x, bias, "add_bias");
  const Shape& s = x.shape();
  if (s.size() < 2 || bias.shape().size() != 1 || bias.shape()[0] != s[1]) mismatch("add_bias", s, bias.shape());
  const std::size_t n = s[0], c = s[1], inner = inner_size(s);
  Tensor out = x.value();
  const auto& bv = bias.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* p = &out[(i * c + ch) * inner];
      for (std::size_t k = 0; k < inner; ++k) p[k] += bv[ch];
    }
  const auto ix = x.id(), ib = bias.id();
  return emit(t, "add_bias", std::move(out), {ix, ib}, [ix, ib, n, c, inner](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_slot(self);
    accumulate(tp, ix, g);
    if (tp.requires_grad(ib)) {
      Tensor& gb = tp.grad_slot(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double* p = &g[(i * c + ch) * inner];
          double acc = 0.0;
          for (std::size_t k = 0; k < inner; ++k) acc += p[k];
          gb[ch] += acc;
        }
    }
  });
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) mismatch("matmul", sa, sb);
  const auto m = static_cast<Eigen::Index>(sa[0]), k = static_cast<Eigen::Index>(sa[1]),
             n = static_cast<Eigen::Index>(sb[1]);
  Tensor out({sa[0], sb[1]});
  MapMat(out.data().data(), m, n).noalias() =
      ConstMapMat(a.value().data().data(), m, k) * ConstMapMat(b.value().data().data(), k, n);
  const auto ia = a.id(), ib = b.id();
  return emit(t, "matmul", std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& tp, std::size_t self) {
    ConstMapMat g(tp.grad_slot(self).data().data(), m, n);
    if (tp.requires_grad(ia))
      MapMat(tp.grad_slot(ia).data().data(), m, k).noalias() += g * ConstMapMat(tp.value(ib).data().data(), k, n).transpose();
    if (tp.requires_grad(ib))
      MapMat(tp.grad_slot(ib).data().data(), k, n).noalias() += ConstMapMat(tp.value(ia).data().data(), m, k).transpose() * g;
  });
}

Var conv2d(Var x, Var w, std::size_t stride, std::size_t pad) {
  Tape& t = same_tape(x, w, "conv2d");
  require_rank("conv2d", x, 4);
  require_rank("conv2d", w, 4);
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws[1] != xs[1] || ws[2] != ws[3] || stride == 0) mismatch("conv2d", xs, ws);
  const std::size_t n = xs[0], cin = xs[1], h = xs[2], wd = xs[3];
  const std::size_t cout = ws[0], k = ws[2];
  if (h + 2 * pad < k || wd + 2 * pad < k) mismatch("conv2d", xs, ws);
  const std::size_t ho = (h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - k) / stride + 1;
  const std::size_t rows = cin * k * k, cols = ho * wo;

  // im2col per sample; kept for the weight gradient.
  auto col = std::make_shared<std::vector<double>>(n * rows * cols, 0.0);
  const auto& xv = x.value();
  for (std::size_t b = 0; b < n; ++b) {
    double* cb = col->data() + b * rows * cols;
    for (std::size_t c = 0; c < cin; ++c) {
      const double* img = &xv[(b * cin + c) * h * wd];
      for (std::size_t ki = 0; ki < k; ++ki)
        for (std::size_t kj = 0; kj < k; ++kj) {
          double* row = cb + ((c * k + ki) * k + kj) * cols;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
              row[oy * wo + ox] = img[static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)];
            }
          }
        }
    }
  }

  Tensor out({n, cout, ho, wo});
  const auto er = static_cast<Eigen::Index>(rows), ec = static_cast<Eigen::Index>(cols),
             eo = static_cast<Eigen::Index>(cout);
  ConstMapMat wm(w.value().data().data(), eo, er);
  for (std::size_t b = 0; b < n; ++b)
    MapMat(out.data().data() + b * cout * cols, eo, ec).noalias() = wm * ConstMapMat(col->data() + b * rows * cols, er, ec);

  const auto ix = x.id(), iw = w.id();
  return emit(t, "conv2d", std::move(out), {ix, iw},
              [=](Tape& tp, std::size_t self) {
                const Tensor& g = tp.grad_slot(self);
                if (tp.requires_grad(iw)) {
                  MapMat gw(tp.grad_slot(iw).data().data(), eo, er);
                  for (std::size_t b = 0; b < n; ++b)
                    gw.noalias() += ConstMapMat(g.data().data() + b * cout * cols, eo, ec) *
                                    ConstMapMat(col->data() + b * rows * cols, er, ec).transpose();
                }
                if (!tp.requires_grad(ix)) return;
                Tensor& gx = tp.grad_slot(ix);
                ConstMapMat wmat(tp.value(iw).data().data(), eo, er);
                RowMat dcol(er, ec);
                for (std::size_t b = 0; b < n; ++b) {
                  dcol.noalias() = wmat.transpose() * ConstMapMat(g.data().data() + b * cout * cols, eo, ec);
                  for (std::size_t c = 0; c < cin; ++c) {
                    double* img = &gx[(b * cin + c) * h * wd];
                    for (std::size_t ki = 0; ki < k; ++ki)
                      for (std::size_t kj = 0; kj < k; ++kj) {
                        const double* row = dcol.data() + ((c * k + ki) * k + kj) * cols;
                        for (std::size_t oy = 0; oy < ho; ++oy) {
                          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(pad);
                          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                          for (std::size_t ox = 0; ox < wo; ++ox) {
                            const std::ptrdiff_t ixx = static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(pad);
                            if (ixx < 0 || ixx >= static_cast<std::ptrdiff_t>(wd)) continue;
                            img[static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ixx)] += row[oy * wo + ox];
                          }
                        }
                      }
                  }
                }
              });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.vec()) v = v > 0.0 ? v : 0.0;
  const auto ix = x.id();
  return emit(x.tape(), "relu", std::move(out), {ix}, [ix](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ix)) return;
    const Tensor& g = tp.grad_slot(self);
    const Tensor& xv = tp.value(ix);
    Tensor& gx = tp.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) gx[i] += g[i];
  });
}

Var max_pool2d(Var x, std::size_t kernel, std::size_t stride) {
  require_rank("max_pool2d", x, 4);
  const Shape& s = x.shape();
  if (kernel == 0 || stride == 0 || s[2] < kernel || s[3] < kernel)
    throw ShapeMismatch("max_pool2d: kernel " + std::to_string(kernel) + " does not fit input " + shape_str(s));
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  const std::size_t ho = (h - kernel) / stride + 1, wo = (w - kernel) / stride + 1;
  Tensor out({n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto& xv = x.value();
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = p * h * w + oy * stride * w + ox * stride;
        for (std::size_t ki = 0; ki < kernel; ++ki)
          for (std::size_t kj = 0; kj < kernel; ++kj) {
            const std::size_t idx = p * h * w + (oy * stride + ki) * w + ox * stride + kj;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (p * ho + oy) * wo + ox;
        out[o] = xv[best];
        (*argmax)[o] = best;
      }
  const auto ix = x.id();
  return emit(x.tape(), "max_pool2d", std::move(out), {ix}, [ix, argmax](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ix)) return;
    const Tensor& g = tp.grad_slot(self);
    Tensor& gx = tp.grad_slot(ix);
    for (std::size_t o = 0; o < g.size(); ++o) gx[(*argmax)[o]] += g[o];
  });
}

Var group_norm(Var x, Var gamma, Var beta, std::size_t groups, double eps) {
  Tape& t = same_tape(x, gamma, "group_norm");
  same_tape(x, beta, "group_norm");
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeMismatch("group_norm: expected rank >= 2, got " + shape_str(s));
  const std::size_t n = s[0], c = s[1], inner = inner_size(s);
  if (gamma.shape() != Shape{c}) mismatch("group_norm", s, gamma.shape());
  if (beta.shape() != Shape{c}) mismatch("group_norm", s, beta.shape());
  if (groups == 0 || c % groups != 0)
    throw ShapeMismatch("group_norm: " + std::to_string(groups) + " groups do not divide " + std::to_string(c) +
                        " channels");
  const std::size_t per = c / groups, m = per * inner;

  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  auto xhat = std::make_shared<Tensor>(s);
  auto invstd = std::make_shared<std::vector<double>>(n * groups);
  Tensor out(s);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t base = (b * c + g * per) * inner;
      double mu = 0.0;
      for (std::size_t i = 0; i < m; ++i) mu += xv[base + i];
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double d = xv[base + i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(m);
      const double is = 1.0 / std::sqrt(var + eps);
      (*invstd)[b * groups + g] = is;
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t ch = g * per + i / inner;
        const double xh = (xv[base + i] - mu) * is;
        (*xhat)[base + i] = xh;
        out[base + i] = xh * gv[ch] + bv[ch];
      }
    }
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return emit(t, "group_norm", std::move(out), {ix, ig, ib},
              [=](Tape& tp, std::size_t self) {
                const Tensor& g = tp.grad_slot(self);
                const Tensor& gam = tp.value(ig);
                if (tp.requires_grad(ig) || tp.requires_grad(ib)) {
                  std::vector<double> dg(c, 0.0), db(c, 0.0);
                  for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      const std::size_t base = (b * c + ch) * inner;
                      for (std::size_t i = 0; i < inner; ++i) {
                        dg[ch] += g[base + i] * (*xhat)[base + i];
                        db[ch] += g[base + i];
                      }
                    }
                  if (tp.requires_grad(ig)) {
                    Tensor& gg = tp.grad_slot(ig);
                    for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += dg[ch];
                  }
                  if (tp.requires_grad(ib)) {
                    Tensor& gb = tp.grad_slot(ib);
                    for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += db[ch];
                  }
                }
                if (!tp.requires_grad(ix)) return;
                Tensor& gx = tp.grad_slot(ix);
                std::vector<double> dxhat(m);
                const double md = static_cast<double>(m);
                for (std::size_t b = 0; b < n; ++b)
                  for (std::size_t grp = 0; grp < groups; ++grp) {
                    const std::size_t base = (b * c + grp * per) * inner;
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t i = 0; i < m; ++i) {
                      dxhat[i] = g[base + i] * gam[grp * per + i / inner];
                      s1 += dxhat[i];
                      s2 += dxhat[i] * (*xhat)[base + i];
                    }
                    const double is = (*invstd)[b * groups + grp];
                    for (std::size_t i = 0; i < m; ++i)
                      gx[base + i] += is / md * (md * dxhat[i] - s1 - (*xhat)[base + i] * s2);
                  }
              });
}

namespace {

// Visits each (sample, position) lane along axis 1: fn(offset, stride, K).
template <typename Fn>
void for_each_class_lane(const Shape& s, Fn&& fn) {
  const std::size_t n = s[0], k = s[1], inner = inner_size(s);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < inner; ++p) fn(b * k * inner + p, inner, k);
}

}  // namespace

Var softmax(Var x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeMismatch("softmax: expected rank >= 2, got " + shape_str(s));
  const auto& xv = x.value();
  Tensor out(s);
  for_each_class_lane(s, [&](std::size_t off, std::size_t st, std::size_t k) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, xv[off + j * st]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(xv[off + j * st] - mx);
    for (std::size_t j = 0; j < k; ++j) out[off + j * st] = std::exp(xv[off + j * st] - mx) / z;
  });
  const auto ix = x.id();
  Shape shape = s;
  return emit(x.tape(), "softmax", std::move(out), {ix}, [ix, shape](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ix)) return;
    const Tensor& g = tp.grad_slot(self);
    const Tensor& y = tp.value(self);
    Tensor& gx = tp.grad_slot(ix);
    for_each_class_lane(shape, [&](std::size_t off, std::size_t st, std::size_t k) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += g[off + j * st] * y[off + j * st];
      for (std::size_t j = 0; j < k; ++j) gx[off + j * st] += y[off + j * st] * (g[off + j * st] - dot);
    });
  });
}

Var log_softmax(Var x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeMismatch("log_softmax: expected rank >= 2, got " + shape_str(s));
  const auto& xv = x.value();
  Tensor out(s);
  for_each_class_lane(s, [&](std::size_t off, std::size_t st, std::size_t k) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, xv[off + j * st]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(xv[off + j * st] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) out[off + j * st] = xv[off + j * st] - lse;
  });
  const auto ix = x.id();
  Shape shape = s;
  return emit(x.tape(), "log_softmax", std::move(out), {ix}, [ix, shape](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ix)) return;
    const Tensor& g = tp.grad_slot(self);
    const Tensor& y = tp.value(self);
    Tensor& gx = tp.grad_slot(ix);
    for_each_class_lane(shape, [&](std::size_t off, std::size_t st, std::size_t k) {
      double gs = 0.0;
      for (std::size_t j = 0; j < k; ++j) gs += g[off + j * st];
      for (std::size_t j = 0; j < k; ++j) gx[off + j * st] += g[off + j * st] - std::exp(y[off + j * st]) * gs;
    });
  });
}

Var log(Var x) {
  Tensor out = x.value();
  for (auto& v : out.vec()) v = std::log(v);
  const auto ix = x.id();
  return emit(x.tape(), "log", std::move(out), {ix}, [ix](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ix)) return;
    const Tensor& g = tp.grad_slot(self);
    const Tensor& xv = tp.value(ix);
    Tensor& gx = tp.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xv[i];
  });
}

Var sum(Var x) {
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  const auto ix = x.id();
  return emit(x.tape(), "sum", Tensor::scalar(acc), {ix}, [ix](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ix)) return;
    const double g = tp.grad_slot(self)[0];
    for (auto& v : tp.grad_slot(ix).vec()) v += g;
  });
}

Var mean(Var x) {
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  const double n = static_cast<double>(x.value().size());
  const auto ix = x.id();
  return emit(x.tape(), "mean", Tensor::scalar(acc / n), {ix}, [ix, n](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ix)) return;
    const double g = tp.grad_slot(self)[0] / n;
    for (auto& v : tp.grad_slot(ix).vec()) v += g;
  });
}

Var adaptive_avg_pool(Var x) {
  require_rank("adaptive_avg_pool", x, 4);
  const Shape& s = x.shape();
  const std::size_t bc = s[0] * s[1], hw = s[2] * s[3];
  const auto& xv = x.value();
  Tensor out({s[0], s[1]});
  for (std::size_t p = 0; p < bc; ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += xv[p * hw + i];
    out[p] = acc / static_cast<double>(hw);
  }
  const auto ix = x.id();
  return emit(x.tape(), "adaptive_avg_pool", std::move(out), {ix}, [ix, bc, hw](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ix)) return;
    const Tensor& g = tp.grad_slot(self);
    Tensor& gx = tp.grad_slot(ix);
    for (std::size_t p = 0; p < bc; ++p) {
      const double v = g[p] / static_cast<double>(hw);
      for (std::size_t i = 0; i < hw; ++i) gx[p * hw + i] += v;
    }
  });
}

Var cosine_similarity(Var a, Var b) {
  Tape& t = same_tape(a, b, "cosine_similarity");
  if (a.shape().size() != 2 || a.shape() != b.shape()) mismatch("cosine_similarity", a.shape(), b.shape());
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  const auto& av = a.value();
  const auto& bv = b.value();
  // Per row: floored norms and whether each norm was floored (then it is a constant).
  auto na = std::make_shared<std::vector<double>>(rows);
  auto nb = std::make_shared<std::vector<double>>(rows);
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double x = av[r * cols + j], y = bv[r * cols + j];
      dot += x * y;
      sa += x * x;
      sb += y * y;
    }
    // sqrt of the product keeps cos(a, a) exactly 1.
    const double floor2 = kCosineNormFloor * kCosineNormFloor;
    sa = std::max(sa, floor2);
    sb = std::max(sb, floor2);
    (*na)[r] = std::sqrt(sa);
    (*nb)[r] = std::sqrt(sb);
    out[r] = dot / std::sqrt(sa * sb);
  }
  const auto ia = a.id(), ib = b.id();
  return emit(t, "cosine_similarity", std::move(out), {ia, ib},
              [=](Tape& tp, std::size_t self) {
                const Tensor& g = tp.grad_slot(self);
                const Tensor& y = tp.value(self);
                const Tensor& avv = tp.value(ia);
                const Tensor& bvv = tp.value(ib);
                for (int side = 0; side < 2; ++side) {
                  const std::size_t id = side == 0 ? ia : ib;
                  if (!tp.requires_grad(id)) continue;
                  const Tensor& self_v = side == 0 ? avv : bvv;
                  const Tensor& other_v = side == 0 ? bvv : avv;
                  const auto& self_n = side == 0 ? *na : *nb;
                  Tensor& gx = tp.grad_slot(id);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double inv = 1.0 / ((*na)[r] * (*nb)[r]);
                    const bool floored = self_n[r] <= kCosineNormFloor;
                    const double radial = floored ? 0.0 : y[r] / (self_n[r] * self_n[r]);
                    for (std::size_t j = 0; j < cols; ++j)
                      gx[r * cols + j] += g[r] * (other_v[r * cols + j] * inv - radial * self_v[r * cols + j]);
                  }
                }
              });
}

Var detach(Var x) { return x.tape().constant(x.value()); }

Var upsample2x(Var x) {
  require_rank("upsample2x", x, 4);
  const Shape& s = x.shape();
  const std::size_t p = s[0] * s[1], h = s[2], w = s[3];
  const auto& xv = x.value();
  Tensor out({s[0], s[1], 2 * h, 2 * w});
  for (std::size_t q = 0; q < p; ++q)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) out[(q * 2 * h + y) * 2 * w + xx] = xv[(q * h + y / 2) * w + xx / 2];
  const auto ix = x.id();
  return emit(x.tape(), "upsample2x", std::move(out), {ix}, [ix, p, h, w](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ix)) return;
    const Tensor& g = tp.grad_slot(self);
    Tensor& gx = tp.grad_slot(ix);
    for (std::size_t q = 0; q < p; ++q)
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t xx = 0; xx < 2 * w; ++xx) gx[(q * h + y / 2) * w + xx / 2] += g[(q * 2 * h + y) * 2 * w + xx];
  });
}

Var concat_channels(Var a, Var b) {
  Tape& t = same_tape(a, b, "concat_channels");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool ok = sa.size() >= 2 && sa.size() == sb.size() && sa[0] == sb[0];
  for (std::size_t i = 2; ok && i < sa.size(); ++i) ok = sa[i] == sb[i];
  if (!ok) mismatch("concat_channels", sa, sb);
  const std::size_t n = sa[0], ca = sa[1], cb = sb[1], inner = inner_size(sa);
  Shape so = sa;
  so[1] = ca + cb;
  Tensor out(so);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(&av[i * ca * inner], ca * inner, &out[i * (ca + cb) * inner]);
    std::copy_n(&bv[i * cb * inner], cb * inner, &out[(i * (ca + cb) + ca) * inner]);
  }
  const auto ia = a.id(), ib = b.id();
  return emit(t, "concat_channels", std::move(out), {ia, ib}, [=](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_slot(self);
    if (tp.requires_grad(ia)) {
      Tensor& ga = tp.grad_slot(ia);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < ca * inner; ++j) ga[i * ca * inner + j] += g[i * (ca + cb) * inner + j];
    }
    if (tp.requires_grad(ib)) {
      Tensor& gb = tp.grad_slot(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < cb * inner; ++j) gb[i * cb * inner + j] += g[(i * (ca + cb) + ca) * inner + j];
    }
  });
}

Var nll_mean(Var log_probs, std::span<const int> targets) {
  const Shape& s = log_probs.shape();
  if (s.size() < 2) throw ShapeMismatch("nll_mean: expected rank >= 2, got " + shape_str(s));
  const std::size_t n = s[0], k = s[1], inner = inner_size(s);
  if (targets.size() != n * inner)
    throw ShapeMismatch("nll_mean: " + std::to_string(targets.size()) + " targets for log-probs " + shape_str(s));
  for (int tgt : targets)
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= k)
      throw Error("nll_mean: label " + std::to_string(tgt) + " outside [0, " + std::to_string(k) + ")");
  auto idx = std::make_shared<std::vector<std::size_t>>(targets.size());
  const auto& lp = log_probs.value();
  double acc = 0.0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < inner; ++p) {
      const std::size_t flat = (b * k + static_cast<std::size_t>(targets[b * inner + p])) * inner + p;
      (*idx)[b * inner + p] = flat;
      acc += lp[flat];
    }
  const double count = static_cast<double>(targets.size());
  const auto il = log_probs.id();
  return emit(log_probs.tape(), "nll_mean", Tensor::scalar(-acc / count), {il},
              [il, idx, count](Tape& tp, std::size_t self) {
                if (!tp.requires_grad(il)) return;
                const double g = tp.grad_slot(self)[0] / count;
                Tensor& gl = tp.grad_slot(il);
                for (auto flat : *idx) gl[flat] -= g;
              });
}

}  // namespace ulsa::ops
