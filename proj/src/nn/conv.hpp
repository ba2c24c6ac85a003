#pragma once

#include <cstdint>

#include "volume/volume.hpp"

namespace voxelseg::nn {

/// Cubic-kernel 3D convolution with symmetric zero padding kernel/2.
struct ConvGeometry {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;  // 1 or 3
  int stride = 1;  // 1 or 2
  Dims3 in;
  Dims3 out;

  static ConvGeometry make(int in_channels, int out_channels, int kernel, int stride, Dims3 in);
  int pad() const noexcept { return kernel / 2; }
  int taps() const noexcept { return kernel * kernel * kernel; }
};

// Single-sample kernels. Layouts: x [Cin][in], w [Cout][Cin][k^3], y [Cout][out].

template <typename T>
void conv3d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y);

/// dx = d(loss)/dx for one sample; dx is overwritten.
template <typename T>
void conv3d_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx);

/// Accumulates d(loss)/dw and d(loss)/dbias for one sample.
template <typename T>
void conv3d_backward_params(const ConvGeometry& g, const T* x, const T* dy, T* dw, T* dbias);

}  // namespace voxelseg::nn
