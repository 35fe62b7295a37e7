#include "cxrfuse/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cxrfuse/errors.hpp"

namespace cxrfuse {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double swish(double x) { return x * sigmoid(x); }

double bce_with_logit(double z, double t) {
  return std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
}

namespace ops {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw DomainError(std::string(what) + ": non-finite input");
}

}  // namespace

Var swish(Var x) {
  const Tensor& in = x.value();
  require_finite(in, "swish");
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * sigmoid(in[i]);
  const std::size_t xid = x.id();
  return x.tape()->record(std::move(out), {x}, [xid](Tape& t, std::size_t self) {
    const Tensor& xv = t.value(xid);
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double s = sigmoid(xv[i]);
      gx[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
  });
}

Var relu(Var x) {
  const Tensor& in = x.value();
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0 ? in[i] : 0.0;
  const std::size_t xid = x.id();
  return x.tape()->record(std::move(out), {x}, [xid](Tape& t, std::size_t self) {
    const Tensor& xv = t.value(xid);
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > 0) gx[i] += g[i];
    }
  });
}

Var add(Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape()->record(std::move(out), {a, b}, [aid, bid](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t id : {aid, bid}) {
      if (!t.requires_grad(id)) continue;
      Tensor& gi = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var sum(Var x) {
  double s = 0;
  for (double v : x.value().values()) s += v;
  const std::size_t xid = x.id();
  return x.tape()->record(Tensor({1}, s), {x}, [xid](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& v : t.grad_buffer(xid).values()) v += g;
  });
}

Var flatten(Var x) {
  Tensor out = x.value().reshaped({x.value().size()});
  const std::size_t xid = x.id();
  return x.tape()->record(std::move(out), {x}, [xid](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var affine(Var x, Var weight, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& w = weight.value();
  const Tensor& b = bias.value();
  require_rank(xv, 1, "affine input");
  require_rank(w, 2, "affine weight");
  require_rank(b, 1, "affine bias");
  const std::size_t n_out = w.dim(0), n_in = w.dim(1);
  if (xv.dim(0) != n_in || b.dim(0) != n_out) {
    throw ShapeError("affine: weight " + shape_string(w.shape()) + ", input " +
                     shape_string(xv.shape()) + ", bias " + shape_string(b.shape()));
  }
  Tensor out({n_out});
  for (std::size_t o = 0; o < n_out; ++o) {
    const double* row = w.data() + o * n_in;
    double acc = b[o];
    for (std::size_t i = 0; i < n_in; ++i) acc += row[i] * xv[i];
    out[o] = acc;
  }
  const std::size_t xid = x.id(), wid = weight.id(), bid = bias.id();
  return x.tape()->record(
      std::move(out), {x, weight, bias}, [xid, wid, bid, n_in, n_out](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(bid)) {
          Tensor& gb = t.grad_buffer(bid);
          for (std::size_t o = 0; o < n_out; ++o) gb[o] += g[o];
        }
        if (t.requires_grad(wid)) {
          const Tensor& xv = t.value(xid);
          Tensor& gw = t.grad_buffer(wid);
          for (std::size_t o = 0; o < n_out; ++o) {
            double* row = gw.data() + o * n_in;
            for (std::size_t i = 0; i < n_in; ++i) row[i] += g[o] * xv[i];
          }
        }
        if (t.requires_grad(xid)) {
          const Tensor& w = t.value(wid);
          Tensor& gx = t.grad_buffer(xid);
          for (std::size_t o = 0; o < n_out; ++o) {
            const double* row = w.data() + o * n_in;
            for (std::size_t i = 0; i < n_in; ++i) gx[i] += g[o] * row[i];
          }
        }
      });
}

namespace {

struct ConvGeometry {
  std::size_t c_in, h, w, c_out, k, stride, pad, oh, ow;

  // Output rows/cols [lo, hi) whose tap at kernel offset `kk` lands inside the input.
  std::pair<std::size_t, std::size_t> valid(std::size_t kk, std::size_t extent,
                                            std::size_t out_extent) const {
    const long p = static_cast<long>(pad), s = static_cast<long>(stride), off = static_cast<long>(kk);
    long lo = 0;
    if (p - off > 0) lo = (p - off + s - 1) / s;
    long hi = (static_cast<long>(extent) - 1 + p - off);
    hi = hi < 0 ? 0 : hi / s + 1;
    hi = std::min<long>(hi, static_cast<long>(out_extent));
    if (lo > hi) lo = hi;
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
  }
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& kernel, std::size_t stride,
                           std::size_t pad) {
  require_rank(x, 3, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
  ConvGeometry g{};
  g.c_in = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.c_out = kernel.dim(0);
  g.k = kernel.dim(2);
  g.stride = stride;
  g.pad = pad;
  if (kernel.dim(1) != g.c_in || kernel.dim(3) != g.k) {
    throw ShapeError("conv2d: kernel " + shape_string(kernel.shape()) + " vs input " +
                     shape_string(x.shape()));
  }
  if (g.k > g.h + 2 * pad || g.k > g.w + 2 * pad) {
    throw ShapeError("conv2d: kernel " + std::to_string(g.k) + " larger than padded input " +
                     shape_string(x.shape()));
  }
  g.oh = (g.h + 2 * pad - g.k) / stride + 1;
  g.ow = (g.w + 2 * pad - g.k) / stride + 1;
  return g;
}

}  // namespace

Var conv2d(Var x, Var kernel, Var bias, std::size_t stride, std::size_t pad) {
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  const ConvGeometry geo = conv_geometry(xv, kv, stride, pad);
  const bool has_bias = bias.valid();
  if (has_bias && bias.shape() != Shape{geo.c_out}) {
    throw ShapeError("conv2d bias " + shape_string(bias.shape()) + " vs " +
                     std::to_string(geo.c_out) + " output channels");
  }

  Tensor out({geo.c_out, geo.oh, geo.ow});
  const std::size_t in_plane = geo.h * geo.w, out_plane = geo.oh * geo.ow, kk = geo.k * geo.k;
  for (std::size_t co = 0; co < geo.c_out; ++co) {
    double* o = out.data() + co * out_plane;
    if (has_bias) std::fill(o, o + out_plane, bias.value()[co]);
    for (std::size_t ci = 0; ci < geo.c_in; ++ci) {
      const double* in = xv.data() + ci * in_plane;
      const double* kern = kv.data() + (co * geo.c_in + ci) * kk;
      for (std::size_t kh = 0; kh < geo.k; ++kh) {
        const auto [r0, r1] = geo.valid(kh, geo.h, geo.oh);
        for (std::size_t kw = 0; kw < geo.k; ++kw) {
          const double wv = kern[kh * geo.k + kw];
          if (wv == 0.0) continue;
          const auto [c0, c1] = geo.valid(kw, geo.w, geo.ow);
          for (std::size_t r = r0; r < r1; ++r) {
            const double* irow = in + (r * geo.stride + kh - geo.pad) * geo.w;
            double* orow = o + r * geo.ow;
            for (std::size_t c = c0; c < c1; ++c) orow[c] += wv * irow[c * geo.stride + kw - geo.pad];
          }
        }
      }
    }
  }

  const std::size_t xid = x.id(), kid = kernel.id(), bid = has_bias ? bias.id() : 0;
  auto backward = [geo, xid, kid, bid, has_bias](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const std::size_t in_plane = geo.h * geo.w, out_plane = geo.oh * geo.ow, kk = geo.k * geo.k;
    if (has_bias && t.requires_grad(bid)) {
      Tensor& gb = t.grad_buffer(bid);
      for (std::size_t co = 0; co < geo.c_out; ++co) {
        const double* go = g.data() + co * out_plane;
        double s = 0;
        for (std::size_t i = 0; i < out_plane; ++i) s += go[i];
        gb[co] += s;
      }
    }
    const bool need_x = t.requires_grad(xid), need_k = t.requires_grad(kid);
    if (!need_x && !need_k) return;
    const Tensor& xv = t.value(xid);
    const Tensor& kv = t.value(kid);
    double* gx = need_x ? t.grad_buffer(xid).data() : nullptr;
    double* gk = need_k ? t.grad_buffer(kid).data() : nullptr;
    for (std::size_t co = 0; co < geo.c_out; ++co) {
      const double* go = g.data() + co * out_plane;
      for (std::size_t ci = 0; ci < geo.c_in; ++ci) {
        const double* in = xv.data() + ci * in_plane;
        const double* kern = kv.data() + (co * geo.c_in + ci) * kk;
        for (std::size_t kh = 0; kh < geo.k; ++kh) {
          const auto [r0, r1] = geo.valid(kh, geo.h, geo.oh);
          for (std::size_t kw = 0; kw < geo.k; ++kw) {
            const auto [c0, c1] = geo.valid(kw, geo.w, geo.ow);
            double acc = 0;
            const double wv = kern[kh * geo.k + kw];
            for (std::size_t r = r0; r < r1; ++r) {
              const std::size_t row_off = (r * geo.stride + kh - geo.pad) * geo.w;
              const double* grow = go + r * geo.ow;
              if (gk) {
                const double* irow = in + row_off;
                for (std::size_t c = c0; c < c1; ++c) {
                  acc += grow[c] * irow[c * geo.stride + kw - geo.pad];
                }
              }
              if (gx) {
                double* gxrow = gx + ci * in_plane + row_off;
                for (std::size_t c = c0; c < c1; ++c) {
                  gxrow[c * geo.stride + kw - geo.pad] += wv * grow[c];
                }
              }
            }
            if (gk) gk[(co * geo.c_in + ci) * kk + kh * geo.k + kw] += acc;
          }
        }
      }
    }
  };
  if (has_bias) return x.tape()->record(std::move(out), {x, kernel, bias}, std::move(backward));
  return x.tape()->record(std::move(out), {x, kernel}, std::move(backward));
}

Var conv2d(Var x, Var kernel, std::size_t stride, std::size_t pad) {
  return conv2d(x, kernel, Var{}, stride, pad);
}

Var global_avg_pool(Var x) {
  const Tensor& xv = x.value();
  require_rank(xv, 3, "global_avg_pool");
  const std::size_t c = xv.dim(0), plane = xv.dim(1) * xv.dim(2);
  Tensor out({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* p = xv.data() + ch * plane;
    double s = 0;
    for (std::size_t i = 0; i < plane; ++i) s += p[i];
    out[ch] = s / static_cast<double>(plane);
  }
  const std::size_t xid = x.id();
  return x.tape()->record(std::move(out), {x}, [xid, c, plane](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    double* gx = t.grad_buffer(xid).data();
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double v = g[ch] * inv;
      for (std::size_t i = 0; i < plane; ++i) gx[ch * plane + i] += v;
    }
  });
}

Var concat(Var a, Var b) {
  require_rank(a.value(), 1, "concat");
  require_rank(b.value(), 1, "concat");
  const std::size_t na = a.value().size(), nb = b.value().size();
  std::vector<double> v(a.value().values().begin(), a.value().values().end());
  v.insert(v.end(), b.value().values().begin(), b.value().values().end());
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape()->record(Tensor({na + nb}, std::move(v)), {a, b},
                          [aid, bid, na, nb](Tape& t, std::size_t self) {
                            const Tensor& g = t.grad(self);
                            if (t.requires_grad(aid)) {
                              Tensor& ga = t.grad_buffer(aid);
                              for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
                            }
                            if (t.requires_grad(bid)) {
                              Tensor& gb = t.grad_buffer(bid);
                              for (std::size_t i = 0; i < nb; ++i) gb[i] += g[na + i];
                            }
                          });
}

Var masked_bce(Var logits, const Tensor& targets, const Tensor& mask) {
  const Tensor& z = logits.value();
  require_rank(z, 1, "masked_bce logits");
  if (targets.shape() != z.shape() || mask.shape() != z.shape()) {
    throw ShapeError("masked_bce: logits " + shape_string(z.shape()) + ", targets " +
                     shape_string(targets.shape()) + ", mask " + shape_string(mask.shape()));
  }
  require_finite(z, "masked_bce");
  std::size_t count = 0;
  double total = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (targets[i] != 0.0 && targets[i] != 1.0) {
      throw DomainError("masked_bce: target " + std::to_string(targets[i]) + " not in {0,1}");
    }
    if (mask[i] != 0.0 && mask[i] != 1.0) {
      throw DomainError("masked_bce: mask " + std::to_string(mask[i]) + " not in {0,1}");
    }
    if (mask[i] == 1.0) {
      total += bce_with_logit(z[i], targets[i]);
      ++count;
    }
  }
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  const std::size_t zid = logits.id();
  return logits.tape()->record(
      Tensor({1}, loss), {logits}, [zid, targets, mask, count](Tape& t, std::size_t self) {
        if (count == 0) return;
        const double g = t.grad(self)[0] / static_cast<double>(count);
        const Tensor& zv = t.value(zid);
        Tensor& gz = t.grad_buffer(zid);
        for (std::size_t i = 0; i < zv.size(); ++i) {
          if (mask[i] == 1.0) gz[i] += g * (sigmoid(zv[i]) - targets[i]);
        }
      });
}

}  // namespace ops

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps) {
  if (!(eps > 0)) throw DomainError("finite_diff_grad: eps must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = f(probe);
    probe[i] = x[i] - eps;
    const double down = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw DomainError("finite_diff_grad: function is not finite near element " +
                        std::to_string(i));
    }
    grad[i] = (up - down) / (2 * eps);
  }
  return grad;
}

}  // namespace cxrfuse
