#pragma once

// Deterministic image kernels with explicit backward passes.
//
// All convolutions use zero padding. Kernel weights are laid out as
// [out_channel][in_channel][ky][kx]; each output element is accumulated in a
// fixed order (in_channel, ky, kx) and the bias is added last, so results do
// not depend on how callers partition the work.

#include <concepts>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "deepcap/grid.hpp"

namespace deepcap {

template <std::floating_point T>
struct KernelRef {
  int out_channels = 0;
  int in_channels = 0;
  int k = 0;
  std::span<const T> weights;
  std::span<const T> bias;  // empty means no bias

  std::size_t weight_count() const noexcept {
    return static_cast<std::size_t>(out_channels) * in_channels * k * k;
  }
  T w(int o, int i, int ky, int kx) const {
    return weights[((static_cast<std::size_t>(o) * in_channels + i) * k + ky) * k + kx];
  }
};

template <std::floating_point T>
struct KernelStack {
  int out_channels = 0;
  int in_channels = 0;
  int k = 0;
  std::vector<T> weights;
  std::vector<T> bias;

  KernelStack() = default;
  KernelStack(int out_c, int in_c, int side, bool with_bias = true);

  T& w(int o, int i, int ky, int kx) {
    return weights[((static_cast<std::size_t>(o) * in_channels + i) * k + ky) * k + kx];
  }
  KernelRef<T> ref() const { return {out_channels, in_channels, k, weights, bias}; }
  operator KernelRef<T>() const { return ref(); }  // NOLINT(google-explicit-constructor)
};

inline int conv_output_side(int side, int k, int stride, int padding) {
  return (side + 2 * padding - k) / stride + 1;
}

template <std::floating_point T>
Grid2D<T> conv2d(const Grid2D<T>& input, KernelRef<T> kernels, int stride, int padding);

// Accumulates weight/bias gradients into the given spans (may be empty to skip)
// and returns the input gradient.
template <std::floating_point T>
Grid2D<T> conv2d_backward(const Grid2D<T>& input, KernelRef<T> kernels, int stride, int padding,
                          const Grid2D<T>& grad_output, std::span<T> grad_weights, std::span<T> grad_bias);

// Adjoint of conv2d with the same kernels. The input has kernels.out_channels
// channels and the result has kernels.in_channels channels; the optional bias
// must therefore hold kernels.in_channels entries. Without an explicit output
// size the minimal (side - 1) * stride - 2 * padding + k is used.
template <std::floating_point T>
Grid2D<T> conv2d_transpose(const Grid2D<T>& input, KernelRef<T> kernels, int stride, int padding,
                           std::optional<std::pair<int, int>> output_size = std::nullopt);

template <std::floating_point T>
Grid2D<T> conv2d_transpose_backward(const Grid2D<T>& input, KernelRef<T> kernels, int stride, int padding,
                                    const Grid2D<T>& grad_output, std::span<T> grad_weights,
                                    std::span<T> grad_bias);

// Corner-aligned bilinear resampling: output corners land on input corners.
template <std::floating_point T>
Grid2D<T> bilinear_resize(const Grid2D<T>& input, int out_h, int out_w);

template <std::floating_point T>
Grid2D<T> bilinear_resize_backward(const Grid2D<T>& grad_output, int in_h, int in_w);

// Interpolation taps for one output coordinate under corner alignment.
struct LerpTap {
  int lo = 0;
  int hi = 0;
  double frac = 0.0;
};
LerpTap corner_aligned_tap(int out_index, int out_size, int in_size);

// Normalized k x k Gaussian, single channel, no bias.
template <std::floating_point T>
KernelStack<T> gaussian_kernel2d(int k, T sigma);

// Applies a single-channel kernel to every channel independently.
template <std::floating_point T>
Grid2D<T> depthwise_conv2d(const Grid2D<T>& input, KernelRef<T> kernel, int padding);

template <std::floating_point T>
Grid2D<T> depthwise_conv2d_backward(const Grid2D<T>& grad_output, KernelRef<T> kernel, int padding);

template <std::floating_point T>
std::vector<T> softmax_axis(std::span<const T> logits);

template <std::floating_point T>
std::vector<T> softmax_axis_backward(std::span<const T> probs, std::span<const T> grad_probs);

struct GradReport {
  double max_rel_error = 0.0;
  std::size_t worst_coordinate = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

// f(x, grad) returns f(x) and, when grad is non-empty, writes df/dx into it.
using DifferentiableFn = std::function<double(std::span<const double> x, std::span<double> grad)>;

// Central differences (f(x+eps)-f(x-eps))/(2 eps) per coordinate against the
// analytic gradient; relative error uses max(|analytic|, |numeric|, 1e-8).
GradReport grad_check(const DifferentiableFn& f, std::span<const double> point, double eps = 1e-4);

}  // namespace deepcap
