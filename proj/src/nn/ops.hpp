#pragma once

#include <vector>

#include "common/rng.hpp"
#include "nn/graph.hpp"

namespace voxelseg::nn {

// Volumetric ops take [N, C, D, H, W] tensors.

/// Cubic convolution; kernel size (1 or 3) is read from w [Cout, Cin, k, k, k].
template <typename T>
Var<T> conv3d(Var<T> x, Var<T> w, Var<T> bias, int stride);

/// Per (sample, channel) standardization followed by per-channel gain/offset.
template <typename T>
Var<T> instance_norm(Var<T> x, Var<T> gain, Var<T> offset, double eps = 1e-5);

template <typename T>
Var<T> leaky_relu(Var<T> x, double slope);

/// Inverted dropout. A null rng makes this the identity.
template <typename T>
Var<T> dropout(Var<T> x, double p, Rng* rng);

/// Nearest-neighbour upscale repeating every voxel twice along each spatial axis.
template <typename T>
Var<T> upsample_repeat(Var<T> x);

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

/// Softmax over axis 1.
template <typename T>
Var<T> softmax_channels(Var<T> x);

/// Multiclass soft dice loss over u, v of shape [N, K, ...]. Voxels of all
/// samples form one index set; per class the smoothed ratio
/// (2 sum(u v) + eps) / (sum(u) + sum(v) + eps) is averaged over the classes
/// used and negated. include_background=false drops channel 0.
template <typename T>
Var<T> dice_loss(Var<T> u, const Tensor<T>& v, double eps, bool include_background = true);

template <typename T>
double dice_loss_value(const Tensor<T>& u, const Tensor<T>& v, double eps, bool include_background = true);

/// sum(x * w) as a scalar; used to build test objectives.
template <typename T>
Var<T> weighted_sum(Var<T> x, const Tensor<T>& w);

// Dense ops take [N, F] tensors.

/// x [N, F] * w[O, F]^T + b[O].
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias);

struct BatchNormStats {
  std::vector<double> mean;
  std::vector<double> var;
};

/// Training: batch statistics, running stats updated with momentum.
/// Inference: running stats.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gain, Var<T> offset, BatchNormStats& running, bool training, double momentum = 0.1,
                  double eps = 1e-5);

/// Adds N(0, sigma^2) noise; identity when rng is null.
template <typename T>
Var<T> gaussian_noise(Var<T> x, double sigma, Rng* rng);

/// mean((pred - target)^2) over all elements.
template <typename T>
Var<T> mse_loss(Var<T> pred, const Tensor<T>& target);

}  // namespace voxelseg::nn
