#include "nn/conv.hpp"

#include <algorithm>
#include <vector>

#include "common/parallel.hpp"
#include "nn/gemm.hpp"

namespace voxelseg::nn {
namespace {

constexpr std::int64_t kChunkVoxels = 256;
constexpr std::size_t kWeightGroups = 8;

// Output (z, y) rows are processed in fixed-size chunks of whole rows.
struct RowChunks {
  std::int64_t rows_per_chunk;
  std::int64_t total_rows;
  std::size_t count;
};

RowChunks row_chunks(const Dims3& d) {
  RowChunks c;
  c.rows_per_chunk = std::max<std::int64_t>(1, (kChunkVoxels + d.w - 1) / d.w);
  c.total_rows = d.d * d.h;
  c.count = static_cast<std::size_t>((c.total_rows + c.rows_per_chunk - 1) / c.rows_per_chunk);
  return c;
}

// For each tap t and destination index i along one axis: the source index
// or -1 when it falls in the zero padding.
using AxisTable = std::vector<std::vector<std::int64_t>>;

AxisTable forward_table(int kernel, int stride, int pad, std::int64_t in, std::int64_t out) {
  AxisTable tab(kernel, std::vector<std::int64_t>(out, -1));
  for (int t = 0; t < kernel; ++t)
    for (std::int64_t q = 0; q < out; ++q) {
      const std::int64_t p = q * stride + t - pad;
      if (p >= 0 && p < in) tab[t][q] = p;
    }
  return tab;
}

// Gather form of the transposed convolution: input index p receives from
// output q where q * stride + t - pad == p.
AxisTable backward_table(int kernel, int stride, int pad, std::int64_t in, std::int64_t out) {
  AxisTable tab(kernel, std::vector<std::int64_t>(in, -1));
  for (int t = 0; t < kernel; ++t)
    for (std::int64_t p = 0; p < in; ++p) {
      const std::int64_t num = p + pad - t;
      if (num < 0 || num % stride != 0) continue;
      const std::int64_t q = num / stride;
      if (q < out) tab[t][p] = q;
    }
  return tab;
}

// Fills col[(c * k^3 + tap)][j] for destination rows [row0, row1) of a grid
// with extent dst; sources are read from src (extent src_dims).
template <typename T>
void gather_columns(const T* src, int channels, const Dims3& src_dims, const Dims3& dst, int kernel, const AxisTable& tz,
                    const AxisTable& ty, const AxisTable& tx, std::int64_t row0, std::int64_t row1, T* col) {
  const std::int64_t n = (row1 - row0) * dst.w;
  const std::int64_t plane = src_dims.h * src_dims.w;
  const std::int64_t src_vox = src_dims.voxels();
  std::int64_t r = 0;
  for (int c = 0; c < channels; ++c) {
    const T* sc = src + c * src_vox;
    for (int kz = 0; kz < kernel; ++kz)
      for (int ky = 0; ky < kernel; ++ky)
        for (int kx = 0; kx < kernel; ++kx, ++r) {
          T* out = col + r * n;
          const auto& tabx = tx[kx];
          for (std::int64_t row = row0; row < row1; ++row) {
            const std::int64_t z = row / dst.h;
            const std::int64_t y = row % dst.h;
            T* o = out + (row - row0) * dst.w;
            const std::int64_t sz = tz[kz][z];
            const std::int64_t sy = ty[ky][y];
            if (sz < 0 || sy < 0) {
              std::fill(o, o + dst.w, T(0));
              continue;
            }
            const T* s = sc + sz * plane + sy * src_dims.w;
            for (std::int64_t x = 0; x < dst.w; ++x) {
              const std::int64_t sx = tabx[x];
              o[x] = sx >= 0 ? s[sx] : T(0);
            }
          }
        }
  }
}

template <typename T>
thread_local std::vector<T> t_col;

bool is_pointwise(const ConvGeometry& g) { return g.kernel == 1 && g.stride == 1; }

}  // namespace

ConvGeometry ConvGeometry::make(int in_channels, int out_channels, int kernel, int stride, Dims3 in) {
  require(kernel == 1 || kernel == 3, ErrorCode::InvalidArgument, "conv kernel must be 1 or 3");
  require(stride == 1 || stride == 2, ErrorCode::InvalidArgument, "conv stride must be 1 or 2");
  ConvGeometry g;
  g.in_channels = in_channels;
  g.out_channels = out_channels;
  g.kernel = kernel;
  g.stride = stride;
  g.in = in;
  const int pad = kernel / 2;
  auto out_len = [&](std::int64_t n) { return (n + 2 * pad - kernel) / stride + 1; };
  g.out = {out_len(in.d), out_len(in.h), out_len(in.w)};
  VOXELSEG_REQUIRE(g.out.valid(), ErrorCode::ShapeMismatch, "conv output would be empty for input " + dims_string(in));
  return g;
}

template <typename T>
void conv3d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
  const int K = g.in_channels * g.taps();
  const std::int64_t n_out = g.out.voxels();
  const RowChunks rc = row_chunks(g.out);
  const int pad = g.pad();
  const AxisTable tz = forward_table(g.kernel, g.stride, pad, g.in.d, g.out.d);
  const AxisTable ty = forward_table(g.kernel, g.stride, pad, g.in.h, g.out.h);
  const AxisTable tx = forward_table(g.kernel, g.stride, pad, g.in.w, g.out.w);
  parallel_for(rc.count, [&](std::size_t ci) {
    const std::int64_t row0 = static_cast<std::int64_t>(ci) * rc.rows_per_chunk;
    const std::int64_t row1 = std::min(rc.total_rows, row0 + rc.rows_per_chunk);
    const std::int64_t j0 = row0 * g.out.w;
    const int n = static_cast<int>((row1 - row0) * g.out.w);
    T* yc = y + j0;
    if (is_pointwise(g)) {
      gemm<T>(g.out_channels, n, K, w, K, x + j0, static_cast<int>(n_out), yc, static_cast<int>(n_out), false);
    } else {
      auto& col = t_col<T>;
      col.resize(static_cast<std::size_t>(K) * n);
      gather_columns(x, g.in_channels, g.in, g.out, g.kernel, tz, ty, tx, row0, row1, col.data());
      gemm<T>(g.out_channels, n, K, w, K, col.data(), n, yc, static_cast<int>(n_out), false);
    }
    if (bias) {
      for (int co = 0; co < g.out_channels; ++co) {
        T* yr = yc + co * n_out;
        for (int j = 0; j < n; ++j) yr[j] += bias[co];
      }
    }
  });
}

template <typename T>
void conv3d_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx) {
  const int taps = g.taps();
  const int K = g.out_channels * taps;
  // wt[ci][co * taps + t] = w[co][ci][t]
  std::vector<T> wt(static_cast<std::size_t>(g.in_channels) * K);
  for (int co = 0; co < g.out_channels; ++co)
    for (int ci = 0; ci < g.in_channels; ++ci)
      for (int t = 0; t < taps; ++t)
        wt[static_cast<std::size_t>(ci) * K + co * taps + t] = w[(static_cast<std::size_t>(co) * g.in_channels + ci) * taps + t];

  const std::int64_t n_in = g.in.voxels();
  const std::int64_t n_out = g.out.voxels();
  const RowChunks rc = row_chunks(g.in);
  const int pad = g.pad();
  const AxisTable tz = backward_table(g.kernel, g.stride, pad, g.in.d, g.out.d);
  const AxisTable ty = backward_table(g.kernel, g.stride, pad, g.in.h, g.out.h);
  const AxisTable tx = backward_table(g.kernel, g.stride, pad, g.in.w, g.out.w);
  parallel_for(rc.count, [&](std::size_t ci) {
    const std::int64_t row0 = static_cast<std::int64_t>(ci) * rc.rows_per_chunk;
    const std::int64_t row1 = std::min(rc.total_rows, row0 + rc.rows_per_chunk);
    const std::int64_t j0 = row0 * g.in.w;
    const int n = static_cast<int>((row1 - row0) * g.in.w);
    if (is_pointwise(g)) {
      gemm<T>(g.in_channels, n, K, wt.data(), K, dy + j0, static_cast<int>(n_out), dx + j0, static_cast<int>(n_in), false);
    } else {
      auto& col = t_col<T>;
      col.resize(static_cast<std::size_t>(K) * n);
      gather_columns(dy, g.out_channels, g.out, g.in, g.kernel, tz, ty, tx, row0, row1, col.data());
      gemm<T>(g.in_channels, n, K, wt.data(), K, col.data(), n, dx + j0, static_cast<int>(n_in), false);
    }
  });
}

template <typename T>
void conv3d_backward_params(const ConvGeometry& g, const T* x, const T* dy, T* dw, T* dbias) {
  const int K = g.in_channels * g.taps();
  const std::int64_t n_out = g.out.voxels();
  const RowChunks rc = row_chunks(g.out);
  const int pad = g.pad();
  const AxisTable tz = forward_table(g.kernel, g.stride, pad, g.in.d, g.out.d);
  const AxisTable ty = forward_table(g.kernel, g.stride, pad, g.in.h, g.out.h);
  const AxisTable tx = forward_table(g.kernel, g.stride, pad, g.in.w, g.out.w);

  // Chunks are assigned to a fixed number of groups; each group sums its
  // chunks in order and the group partials are added in order.
  const std::size_t groups = std::min(kWeightGroups, rc.count);
  const std::size_t wsize = static_cast<std::size_t>(g.out_channels) * K;
  std::vector<T> partial(groups * wsize, T(0));
  parallel_for(groups, [&](std::size_t gi) {
    T* pw = partial.data() + gi * wsize;
    const std::size_t c0 = rc.count * gi / groups;
    const std::size_t c1 = rc.count * (gi + 1) / groups;
    for (std::size_t ci = c0; ci < c1; ++ci) {
      const std::int64_t row0 = static_cast<std::int64_t>(ci) * rc.rows_per_chunk;
      const std::int64_t row1 = std::min(rc.total_rows, row0 + rc.rows_per_chunk);
      const std::int64_t j0 = row0 * g.out.w;
      const int n = static_cast<int>((row1 - row0) * g.out.w);
      if (is_pointwise(g)) {
        gemm_abt<T>(g.out_channels, K, n, dy + j0, static_cast<int>(n_out), x + j0, static_cast<int>(n_out), pw, K);
      } else {
        auto& col = t_col<T>;
        col.resize(static_cast<std::size_t>(K) * n);
        gather_columns(x, g.in_channels, g.in, g.out, g.kernel, tz, ty, tx, row0, row1, col.data());
        gemm_abt<T>(g.out_channels, K, n, dy + j0, static_cast<int>(n_out), col.data(), n, pw, K);
      }
    }
  });
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const T* pw = partial.data() + gi * wsize;
    for (std::size_t i = 0; i < wsize; ++i) dw[i] += pw[i];
  }
  if (dbias) {
    for (int co = 0; co < g.out_channels; ++co) {
      const T* d = dy + co * n_out;
      double s = 0.0;
      for (std::int64_t j = 0; j < n_out; ++j) s += d[j];
      dbias[co] += static_cast<T>(s);
    }
  }
}


#define VOXELSEG_INSTANTIATE_CONV(T)                                                           \
  template void conv3d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*);     \
  template void conv3d_backward_input<T>(const ConvGeometry&, const T*, const T*, T*);        \
  template void conv3d_backward_params<T>(const ConvGeometry&, const T*, const T*, T*, T*);

VOXELSEG_INSTANTIATE_CONV(float)
VOXELSEG_INSTANTIATE_CONV(double)

}  // namespace voxelseg::nn
