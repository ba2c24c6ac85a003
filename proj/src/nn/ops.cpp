#include "nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "nn/conv.hpp"
#include "nn/gemm.hpp"

namespace voxelseg::nn {
namespace {

void expect_rank(const Shape& s, std::size_t rank, const char* op) {
  VOXELSEG_REQUIRE(s.size() == rank, ErrorCode::ShapeMismatch,
          std::string(op) + " expects rank " + std::to_string(rank) + ", got " + shape_string(s));
}

Dims3 spatial(const Shape& s) { return {s[2], s[3], s[4]}; }

template <typename T>
void add_into(Tensor<T>* dst, const Tensor<T>& src) {
  if (!dst) return;
  T* d = dst->data();
  const T* s = src.data();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += s[i];
}

}  // namespace

template <typename T>
Var<T> conv3d(Var<T> x, Var<T> w, Var<T> bias, int stride) {
  Graph<T>& g = *x.graph();
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  expect_rank(xs, 5, "conv3d input");
  expect_rank(ws, 5, "conv3d weight");
  require(ws[2] == ws[3] && ws[3] == ws[4], ErrorCode::ShapeMismatch, "conv3d kernel must be cubic");
  VOXELSEG_REQUIRE(xs[1] == ws[1], ErrorCode::ShapeMismatch,
          "conv3d input has " + std::to_string(xs[1]) + " channels, weight expects " + std::to_string(ws[1]));
  if (bias) {
    require(bias.value().size() == static_cast<std::size_t>(ws[0]), ErrorCode::ShapeMismatch, "conv3d bias size mismatch");
  }
  if (stride == 2) {
    VOXELSEG_REQUIRE(xs[2] % 2 == 0 && xs[3] % 2 == 0 && xs[4] % 2 == 0, ErrorCode::ShapeMismatch,
            "stride-2 conv3d needs even spatial dims, got " + shape_string(xs));
  }
  const ConvGeometry geo = ConvGeometry::make(static_cast<int>(ws[1]), static_cast<int>(ws[0]), static_cast<int>(ws[2]), stride, spatial(xs));
  const std::int64_t batch = xs[0];
  Tensor<T> out({batch, ws[0], geo.out.d, geo.out.h, geo.out.w});
  const std::int64_t in_stride = xs[1] * geo.in.voxels();
  const std::int64_t out_stride = ws[0] * geo.out.voxels();
  const T* bptr = bias ? bias.value().data() : nullptr;
  for (std::int64_t n = 0; n < batch; ++n) {
    conv3d_forward<T>(geo, x.value().data() + n * in_stride, w.value().data(), bptr, out.data() + n * out_stride);
  }
  const int xid = x.id(), wid = w.id(), bid = bias ? bias.id() : -1;
  auto backward = [=](Graph<T>& gr, int self) {
    const Tensor<T>& dy = gr.grad(self);
    if (Tensor<T>* gx = gr.grad_buffer(xid)) {
      std::vector<T> tmp(static_cast<std::size_t>(in_stride));
      for (std::int64_t n = 0; n < batch; ++n) {
        conv3d_backward_input<T>(geo, dy.data() + n * out_stride, gr.value(wid).data(), tmp.data());
        T* dst = gx->data() + n * in_stride;
        for (std::int64_t i = 0; i < in_stride; ++i) dst[i] += tmp[i];
      }
    }
    Tensor<T>* gw = gr.grad_buffer(wid);
    Tensor<T>* gb = bid >= 0 ? gr.grad_buffer(bid) : nullptr;
    if (gw || gb) {
      std::vector<T> dw_scratch;
      T* dw = gw ? gw->data() : nullptr;
      if (!dw) {
        dw_scratch.assign(gr.value(wid).size(), T(0));
        dw = dw_scratch.data();
      }
      for (std::int64_t n = 0; n < batch; ++n) {
        conv3d_backward_params<T>(geo, gr.value(xid).data() + n * in_stride, dy.data() + n * out_stride, dw,
                                  gb ? gb->data() : nullptr);
      }
    }
  };
  if (bias) return g.record("conv3d", std::move(out), {x, w, bias}, backward);
  return g.record("conv3d", std::move(out), {x, w}, backward);
}

template <typename T>
Var<T> instance_norm(Var<T> x, Var<T> gain, Var<T> offset, double eps) {
  Graph<T>& g = *x.graph();
  const Shape& xs = x.shape();
  expect_rank(xs, 5, "instance_norm");
  const std::int64_t N = xs[0], C = xs[1];
  const std::int64_t S = xs[2] * xs[3] * xs[4];
  require(S >= 2, ErrorCode::ShapeMismatch, "instance_norm needs at least 2 spatial voxels");
  require(gain.value().size() == static_cast<std::size_t>(C) && offset.value().size() == static_cast<std::size_t>(C),
          ErrorCode::ShapeMismatch, "instance_norm gain/offset must have one entry per channel");
  auto inv_std = std::make_shared<std::vector<double>>(N * C);
  auto means = std::make_shared<std::vector<double>>(N * C);
  Tensor<T> out(xs);
  const T* xv = x.value().data();
  const T* gv = gain.value().data();
  const T* ov = offset.value().data();
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const T* p = xv + nc * S;
    double sum = 0.0;
    for (std::int64_t i = 0; i < S; ++i) sum += p[i];
    const double mean = sum / static_cast<double>(S);
    double ss = 0.0;
    for (std::int64_t i = 0; i < S; ++i) {
      const double d = p[i] - mean;
      ss += d * d;
    }
    const double is = 1.0 / std::sqrt(ss / static_cast<double>(S) + eps);
    (*means)[nc] = mean;
    (*inv_std)[nc] = is;
    const std::int64_t c = nc % C;
    T* o = out.data() + nc * S;
    const double gc = gv[c], oc = ov[c];
    for (std::int64_t i = 0; i < S; ++i) o[i] = static_cast<T>((p[i] - mean) * is * gc + oc);
  }
  const int xid = x.id(), gid = gain.id(), oid = offset.id();
  return g.record("instance_norm", std::move(out), {x, gain, offset}, [=](Graph<T>& gr, int self) {
    const Tensor<T>& dy = gr.grad(self);
    const T* xp = gr.value(xid).data();
    const T* gp = gr.value(gid).data();
    Tensor<T>* gx = gr.grad_buffer(xid);
    Tensor<T>* gg = gr.grad_buffer(gid);
    Tensor<T>* go = gr.grad_buffer(oid);
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const std::int64_t c = nc % C;
      const T* d = dy.data() + nc * S;
      const T* p = xp + nc * S;
      const double mean = (*means)[nc], is = (*inv_std)[nc];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::int64_t i = 0; i < S; ++i) {
        sum_dy += d[i];
        sum_dy_xhat += d[i] * (p[i] - mean) * is;
      }
      if (gg) (*gg)[c] += static_cast<T>(sum_dy_xhat);
      if (go) (*go)[c] += static_cast<T>(sum_dy);
      if (gx) {
        const double gc = gp[c];
        const double m_dy = sum_dy / static_cast<double>(S);
        const double m_dy_xhat = sum_dy_xhat / static_cast<double>(S);
        T* dx = gx->data() + nc * S;
        for (std::int64_t i = 0; i < S; ++i) {
          const double xhat = (p[i] - mean) * is;
          dx[i] += static_cast<T>(gc * is * (d[i] - m_dy - xhat * m_dy_xhat));
        }
      }
    }
  });
}

template <typename T>
Var<T> leaky_relu(Var<T> x, double slope) {
  Graph<T>& g = *x.graph();
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  const T s = static_cast<T>(slope);
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] >= T(0) ? xv[i] : s * xv[i];
  const int xid = x.id();
  return g.record("leaky_relu", std::move(out), {x}, [=](Graph<T>& gr, int self) {
    const Tensor<T>& dy = gr.grad(self);
    const Tensor<T>& xin = gr.value(xid);
    Tensor<T>* gx = gr.grad_buffer(xid);
    for (std::size_t i = 0; i < dy.size(); ++i) (*gx)[i] += xin[i] > T(0) ? dy[i] : s * dy[i];
  });
}

template <typename T>
Var<T> dropout(Var<T> x, double p, Rng* rng) {
  require(p >= 0.0 && p < 1.0, ErrorCode::InvalidArgument, "dropout probability must be in [0, 1)");
  if (!rng || p == 0.0) return x;
  Graph<T>& g = *x.graph();
  const Tensor<T>& xv = x.value();
  auto scale = std::make_shared<std::vector<T>>(xv.size());
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    (*scale)[i] = rng->uniform() < p ? T(0) : keep;
    out[i] = xv[i] * (*scale)[i];
  }
  const int xid = x.id();
  return g.record("dropout", std::move(out), {x}, [=](Graph<T>& gr, int self) {
    const Tensor<T>& dy = gr.grad(self);
    Tensor<T>* gx = gr.grad_buffer(xid);
    for (std::size_t i = 0; i < dy.size(); ++i) (*gx)[i] += dy[i] * (*scale)[i];
  });
}

template <typename T>
Var<T> upsample_repeat(Var<T> x) {
  Graph<T>& g = *x.graph();
  const Shape& xs = x.shape();
  expect_rank(xs, 5, "upsample_repeat");
  const std::int64_t NC = xs[0] * xs[1], D = xs[2], H = xs[3], W = xs[4];
  Tensor<T> out({xs[0], xs[1], 2 * D, 2 * H, 2 * W});
  const T* src = x.value().data();
  T* dst = out.data();
  for (std::int64_t nc = 0; nc < NC; ++nc)
    for (std::int64_t z = 0; z < 2 * D; ++z)
      for (std::int64_t y = 0; y < 2 * H; ++y) {
        const T* s = src + ((nc * D + z / 2) * H + y / 2) * W;
        T* o = dst + ((nc * 2 * D + z) * 2 * H + y) * 2 * W;
        for (std::int64_t xx = 0; xx < 2 * W; ++xx) o[xx] = s[xx / 2];
      }
  const int xid = x.id();
  return g.record("upsample_repeat", std::move(out), {x}, [=](Graph<T>& gr, int self) {
    const T* dy = gr.grad(self).data();
    T* gx = gr.grad_buffer(xid)->data();
    for (std::int64_t nc = 0; nc < NC; ++nc)
      for (std::int64_t z = 0; z < 2 * D; ++z)
        for (std::int64_t y = 0; y < 2 * H; ++y) {
          T* s = gx + ((nc * D + z / 2) * H + y / 2) * W;
          const T* o = dy + ((nc * 2 * D + z) * 2 * H + y) * 2 * W;
          for (std::int64_t xx = 0; xx < 2 * W; ++xx) s[xx / 2] += o[xx];
        }
  });
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  Graph<T>& g = *a.graph();
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  VOXELSEG_REQUIRE(as.size() >= 2 && as.size() == bs.size() && as[0] == bs[0] &&
              std::equal(as.begin() + 2, as.end(), bs.begin() + 2),
          ErrorCode::ShapeMismatch, "concat_channels shapes " + shape_string(as) + " and " + shape_string(bs));
  Shape os = as;
  os[1] = as[1] + bs[1];
  const std::int64_t N = as[0];
  const std::int64_t inner = shape_numel(as) / (as[0] * as[1]);
  const std::int64_t na = as[1] * inner, nb = bs[1] * inner;
  Tensor<T> out(os);
  for (std::int64_t n = 0; n < N; ++n) {
    std::copy_n(a.value().data() + n * na, na, out.data() + n * (na + nb));
    std::copy_n(b.value().data() + n * nb, nb, out.data() + n * (na + nb) + na);
  }
  const int aid = a.id(), bid = b.id();
  return g.record("concat_channels", std::move(out), {a, b}, [=](Graph<T>& gr, int self) {
    const T* dy = gr.grad(self).data();
    if (Tensor<T>* ga = gr.grad_buffer(aid))
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < na; ++i) (*ga)[n * na + i] += dy[n * (na + nb) + i];
    if (Tensor<T>* gb = gr.grad_buffer(bid))
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < nb; ++i) (*gb)[n * nb + i] += dy[n * (na + nb) + na + i];
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Graph<T>& g = *a.graph();
  VOXELSEG_REQUIRE(a.shape() == b.shape(), ErrorCode::ShapeMismatch, "add shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  Tensor<T> out = a.value();
  add_into(&out, b.value());
  const int aid = a.id(), bid = b.id();
  return g.record("add", std::move(out), {a, b}, [=](Graph<T>& gr, int self) {
    const Tensor<T>& dy = gr.grad(self);
    add_into(gr.grad_buffer(aid), dy);
    add_into(gr.grad_buffer(bid), dy);
  });
}

template <typename T>
Var<T> softmax_channels(Var<T> x) {
  Graph<T>& g = *x.graph();
  const Shape& xs = x.shape();
  require(xs.size() >= 2, ErrorCode::ShapeMismatch, "softmax_channels needs rank >= 2");
  const std::int64_t N = xs[0], K = xs[1];
  const std::int64_t S = shape_numel(xs) / (N * K);
  Tensor<T> out(xs);
  const T* xv = x.value().data();
  for (std::int64_t n = 0; n < N; ++n) {
    const T* xp = xv + n * K * S;
    T* op = out.data() + n * K * S;
    for (std::int64_t i = 0; i < S; ++i) {
      double mx = xp[i];
      for (std::int64_t k = 1; k < K; ++k) mx = std::max<double>(mx, xp[k * S + i]);
      double z = 0.0;
      for (std::int64_t k = 0; k < K; ++k) z += std::exp(xp[k * S + i] - mx);
      for (std::int64_t k = 0; k < K; ++k) op[k * S + i] = static_cast<T>(std::exp(xp[k * S + i] - mx) / z);
    }
  }
  const int xid = x.id();
  return g.record("softmax_channels", std::move(out), {x}, [=](Graph<T>& gr, int self) {
    const T* dy = gr.grad(self).data();
    const T* u = gr.value(self).data();
    T* gx = gr.grad_buffer(xid)->data();
    for (std::int64_t n = 0; n < N; ++n) {
      const std::int64_t base = n * K * S;
      for (std::int64_t i = 0; i < S; ++i) {
        double dot = 0.0;
        for (std::int64_t k = 0; k < K; ++k) dot += static_cast<double>(dy[base + k * S + i]) * u[base + k * S + i];
        for (std::int64_t k = 0; k < K; ++k) {
          const std::int64_t j = base + k * S + i;
          gx[j] += static_cast<T>(u[j] * (dy[j] - dot));
        }
      }
    }
  });
}

namespace {

struct DiceSums {
  std::vector<double> intersect, sum_u, sum_v;
};

template <typename T>
DiceSums dice_sums(const Tensor<T>& u, const Tensor<T>& v) {
  VOXELSEG_REQUIRE(u.shape() == v.shape(), ErrorCode::ShapeMismatch,
          "dice_loss shapes " + shape_string(u.shape()) + " and " + shape_string(v.shape()));
  require(u.rank() >= 2, ErrorCode::ShapeMismatch, "dice_loss needs [N, K, ...] inputs");
  const std::int64_t N = u.dim(0), K = u.dim(1);
  const std::int64_t S = static_cast<std::int64_t>(u.size()) / (N * K);
  DiceSums s{std::vector<double>(K, 0.0), std::vector<double>(K, 0.0), std::vector<double>(K, 0.0)};
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t k = 0; k < K; ++k) {
      const T* up = u.data() + (n * K + k) * S;
      const T* vp = v.data() + (n * K + k) * S;
      double si = 0.0, su = 0.0, sv = 0.0;
      for (std::int64_t i = 0; i < S; ++i) {
        si += static_cast<double>(up[i]) * vp[i];
        su += up[i];
        sv += vp[i];
      }
      s.intersect[k] += si;
      s.sum_u[k] += su;
      s.sum_v[k] += sv;
    }
  return s;
}

}  // namespace

template <typename T>
double dice_loss_value(const Tensor<T>& u, const Tensor<T>& v, double eps, bool include_background) {
  const DiceSums s = dice_sums(u, v);
  const std::size_t K = s.intersect.size();
  const std::size_t k0 = include_background ? 0 : 1;
  require(K > k0, ErrorCode::ShapeMismatch, "dice_loss needs at least one class");
  double total = 0.0;
  for (std::size_t k = k0; k < K; ++k) total += (2.0 * s.intersect[k] + eps) / (s.sum_u[k] + s.sum_v[k] + eps);
  return -total / static_cast<double>(K - k0);
}

template <typename T>
Var<T> dice_loss(Var<T> u, const Tensor<T>& v, double eps, bool include_background) {
  Graph<T>& g = *u.graph();
  const double loss = dice_loss_value(u.value(), v, eps, include_background);
  const DiceSums s = dice_sums(u.value(), v);
  Tensor<T> out({1}, static_cast<T>(loss));
  auto target = std::make_shared<Tensor<T>>(v);
  const int uid = u.id();
  return g.record("dice_loss", std::move(out), {u}, [=](Graph<T>& gr, int self) {
    const double up = gr.grad(self)[0];
    const Tensor<T>& uv = gr.value(uid);
    Tensor<T>* gu = gr.grad_buffer(uid);
    const std::int64_t N = uv.dim(0), K = uv.dim(1);
    const std::int64_t S = static_cast<std::int64_t>(uv.size()) / (N * K);
    const std::int64_t k0 = include_background ? 0 : 1;
    const double scale = -up / static_cast<double>(K - k0);
    for (std::int64_t k = k0; k < K; ++k) {
      const double den = s.sum_u[k] + s.sum_v[k] + eps;
      const double num = 2.0 * s.intersect[k] + eps;
      for (std::int64_t n = 0; n < N; ++n) {
        const std::int64_t base = (n * K + k) * S;
        const T* vp = target->data() + base;
        T* gp = gu->data() + base;
        for (std::int64_t i = 0; i < S; ++i) gp[i] += static_cast<T>(scale * (2.0 * vp[i] * den - num) / (den * den));
      }
    }
  });
}

template <typename T>
Var<T> weighted_sum(Var<T> x, const Tensor<T>& w) {
  Graph<T>& g = *x.graph();
  require(x.value().size() == w.size(), ErrorCode::ShapeMismatch, "weighted_sum size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += static_cast<double>(x.value()[i]) * w[i];
  auto wp = std::make_shared<Tensor<T>>(w);
  const int xid = x.id();
  return g.record("weighted_sum", Tensor<T>({1}, static_cast<T>(s)), {x}, [=](Graph<T>& gr, int self) {
    const T up = gr.grad(self)[0];
    Tensor<T>* gx = gr.grad_buffer(xid);
    for (std::size_t i = 0; i < wp->size(); ++i) (*gx)[i] += up * (*wp)[i];
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias) {
  Graph<T>& g = *x.graph();
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  expect_rank(xs, 2, "linear input");
  expect_rank(ws, 2, "linear weight");
  VOXELSEG_REQUIRE(xs[1] == ws[1], ErrorCode::DimensionMismatch,
          "linear input has " + std::to_string(xs[1]) + " features, weight expects " + std::to_string(ws[1]));
  require(bias.value().size() == static_cast<std::size_t>(ws[0]), ErrorCode::ShapeMismatch, "linear bias size mismatch");
  const std::int64_t N = xs[0], F = xs[1], O = ws[0];
  Tensor<T> out({N, O});
  const T* xv = x.value().data();
  const T* wv = w.value().data();
  const T* bv = bias.value().data();
  for (std::int64_t n = 0; n < N; ++n) std::copy_n(bv, O, out.data() + n * O);
  gemm_abt<T>(static_cast<int>(N), static_cast<int>(O), static_cast<int>(F), xv, static_cast<int>(F), wv,
              static_cast<int>(F), out.data(), static_cast<int>(O));
  const int xid = x.id(), wid = w.id(), bid = bias.id();
  return g.record("linear", std::move(out), {x, w, bias}, [=](Graph<T>& gr, int self) {
    const T* dy = gr.grad(self).data();
    const T* xp = gr.value(xid).data();
    const T* wp = gr.value(wid).data();
    const int n = static_cast<int>(N), f = static_cast<int>(F), o = static_cast<int>(O);
    if (Tensor<T>* gx = gr.grad_buffer(xid)) gemm<T>(n, f, o, dy, o, wp, f, gx->data(), f, true);
    if (Tensor<T>* gw = gr.grad_buffer(wid)) {
      std::vector<T> dyt(static_cast<std::size_t>(N * O));
      for (std::int64_t r = 0; r < N; ++r)
        for (std::int64_t c = 0; c < O; ++c) dyt[c * N + r] = dy[r * O + c];
      gemm<T>(o, f, n, dyt.data(), n, xp, f, gw->data(), f, true);
    }
    if (Tensor<T>* gb = gr.grad_buffer(bid))
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t o = 0; o < O; ++o) (*gb)[o] += dy[n * O + o];
  });
}

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gain, Var<T> offset, BatchNormStats& running, bool training, double momentum, double eps) {
  Graph<T>& g = *x.graph();
  const Shape& xs = x.shape();
  expect_rank(xs, 2, "batch_norm");
  const std::int64_t N = xs[0], F = xs[1];
  if (running.mean.empty()) {
    running.mean.assign(F, 0.0);
    running.var.assign(F, 1.0);
  }
  require(static_cast<std::int64_t>(running.mean.size()) == F, ErrorCode::DimensionMismatch, "batch_norm running stats size mismatch");
  auto mean = std::make_shared<std::vector<double>>(F);
  auto inv_std = std::make_shared<std::vector<double>>(F);
  const T* xv = x.value().data();
  for (std::int64_t f = 0; f < F; ++f) {
    if (training) {
      double s = 0.0;
      for (std::int64_t n = 0; n < N; ++n) s += xv[n * F + f];
      const double m = s / static_cast<double>(N);
      double ss = 0.0;
      for (std::int64_t n = 0; n < N; ++n) ss += (xv[n * F + f] - m) * (xv[n * F + f] - m);
      const double var = ss / static_cast<double>(N);
      (*mean)[f] = m;
      (*inv_std)[f] = 1.0 / std::sqrt(var + eps);
      const double unbiased = N > 1 ? ss / static_cast<double>(N - 1) : var;
      running.mean[f] = (1.0 - momentum) * running.mean[f] + momentum * m;
      running.var[f] = (1.0 - momentum) * running.var[f] + momentum * unbiased;
    } else {
      (*mean)[f] = running.mean[f];
      (*inv_std)[f] = 1.0 / std::sqrt(running.var[f] + eps);
    }
  }
  Tensor<T> out(xs);
  const T* gv = gain.value().data();
  const T* ov = offset.value().data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t f = 0; f < F; ++f)
      out[n * F + f] = static_cast<T>((xv[n * F + f] - (*mean)[f]) * (*inv_std)[f] * gv[f] + ov[f]);
  const int xid = x.id(), gid = gain.id(), oid = offset.id();
  return g.record("batch_norm", std::move(out), {x, gain, offset}, [=](Graph<T>& gr, int self) {
    const T* dy = gr.grad(self).data();
    const T* xp = gr.value(xid).data();
    const T* gp = gr.value(gid).data();
    Tensor<T>* gx = gr.grad_buffer(xid);
    Tensor<T>* gg = gr.grad_buffer(gid);
    Tensor<T>* go = gr.grad_buffer(oid);
    for (std::int64_t f = 0; f < F; ++f) {
      const double m = (*mean)[f], is = (*inv_std)[f];
      double sdy = 0.0, sdyx = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        sdy += dy[n * F + f];
        sdyx += dy[n * F + f] * (xp[n * F + f] - m) * is;
      }
      if (gg) (*gg)[f] += static_cast<T>(sdyx);
      if (go) (*go)[f] += static_cast<T>(sdy);
      if (!gx) continue;
      for (std::int64_t n = 0; n < N; ++n) {
        const double xhat = (xp[n * F + f] - m) * is;
        double d;
        if (training) {
          d = gp[f] * is * (dy[n * F + f] - sdy / N - xhat * sdyx / N);
        } else {
          d = gp[f] * is * dy[n * F + f];
        }
        (*gx)[n * F + f] += static_cast<T>(d);
      }
    }
  });
}

template <typename T>
Var<T> gaussian_noise(Var<T> x, double sigma, Rng* rng) {
  if (!rng || sigma == 0.0) return x;
  Graph<T>& g = *x.graph();
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += static_cast<T>(rng->normal(0.0, sigma));
  const int xid = x.id();
  return g.record("gaussian_noise", std::move(out), {x}, [=](Graph<T>& gr, int self) { add_into(gr.grad_buffer(xid), gr.grad(self)); });
}

template <typename T>
Var<T> mse_loss(Var<T> pred, const Tensor<T>& target) {
  Graph<T>& g = *pred.graph();
  require(pred.value().size() == target.size(), ErrorCode::DimensionMismatch, "mse_loss size mismatch");
  const std::size_t n = target.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred.value()[i]) - target[i];
    s += d * d;
  }
  auto tp = std::make_shared<Tensor<T>>(target);
  const int pid = pred.id();
  return g.record("mse_loss", Tensor<T>({1}, static_cast<T>(s / static_cast<double>(n))), {pred}, [=](Graph<T>& gr, int self) {
    const double up = gr.grad(self)[0];
    const Tensor<T>& p = gr.value(pid);
    Tensor<T>* gp = gr.grad_buffer(pid);
    for (std::size_t i = 0; i < n; ++i) (*gp)[i] += static_cast<T>(up * 2.0 * (static_cast<double>(p[i]) - (*tp)[i]) / static_cast<double>(n));
  });
}

#define VOXELSEG_INSTANTIATE_OPS(T)                                                                      \
  template Var<T> conv3d<T>(Var<T>, Var<T>, Var<T>, int);                                               \
  template Var<T> instance_norm<T>(Var<T>, Var<T>, Var<T>, double);                                     \
  template Var<T> leaky_relu<T>(Var<T>, double);                                                        \
  template Var<T> dropout<T>(Var<T>, double, Rng*);                                                     \
  template Var<T> upsample_repeat<T>(Var<T>);                                                           \
  template Var<T> concat_channels<T>(Var<T>, Var<T>);                                                   \
  template Var<T> add<T>(Var<T>, Var<T>);                                                               \
  template Var<T> softmax_channels<T>(Var<T>);                                                          \
  template Var<T> dice_loss<T>(Var<T>, const Tensor<T>&, double, bool);                                 \
  template double dice_loss_value<T>(const Tensor<T>&, const Tensor<T>&, double, bool);                 \
  template Var<T> weighted_sum<T>(Var<T>, const Tensor<T>&);                                            \
  template Var<T> linear<T>(Var<T>, Var<T>, Var<T>);                                                    \
  template Var<T> batch_norm<T>(Var<T>, Var<T>, Var<T>, BatchNormStats&, bool, double, double);         \
  template Var<T> gaussian_noise<T>(Var<T>, double, Rng*);                                              \
  template Var<T> mse_loss<T>(Var<T>, const Tensor<T>&);

VOXELSEG_INSTANTIATE_OPS(float)
VOXELSEG_INSTANTIATE_OPS(double)

}  // namespace voxelseg::nn
