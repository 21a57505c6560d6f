#include "deepcap/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace deepcap {
namespace {

template <typename T>
void require_finite(const Grid2D<T>& g, const char* what) {
  if (!all_finite<T>(g.values)) throw NumericError(std::string(what) + ": non-finite input");
}

template <typename T>
void check_conv_args(const Grid2D<T>& input, KernelRef<T> kr, int stride, int padding, int in_channels,
                     const char* what) {
  if (stride < 1) throw ParameterError(std::string(what) + ": stride must be >= 1");
  if (padding < 0) throw ParameterError(std::string(what) + ": padding must be >= 0");
  if (kr.k < 1) throw ParameterError(std::string(what) + ": kernel side must be positive");
  if (kr.weights.size() != kr.weight_count()) throw DimensionError(std::string(what) + ": weight count mismatch");
  if (input.channels != in_channels) {
    throw DimensionError(std::string(what) + ": input has " + std::to_string(input.channels) +
                         " channels, kernels expect " + std::to_string(in_channels));
  }
}

}  // namespace

template <std::floating_point T>
KernelStack<T>::KernelStack(int out_c, int in_c, int side, bool with_bias)
    : out_channels(out_c), in_channels(in_c), k(side) {
  if (out_c <= 0 || in_c <= 0 || side <= 0) throw ParameterError("KernelStack: dimensions must be positive");
  if (side % 2 == 0) throw ParameterError("KernelStack: kernel side must be odd");
  weights.assign(static_cast<std::size_t>(out_c) * in_c * side * side, T{0});
  if (with_bias) bias.assign(out_c, T{0});
}

template <std::floating_point T>
Grid2D<T> conv2d(const Grid2D<T>& input, KernelRef<T> kr, int stride, int padding) {
  check_conv_args(input, kr, stride, padding, kr.in_channels, "conv2d");
  if (kr.k > input.height + 2 * padding || kr.k > input.width + 2 * padding) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  if (!kr.bias.empty() && kr.bias.size() != static_cast<std::size_t>(kr.out_channels)) {
    throw DimensionError("conv2d: bias size mismatch");
  }
  require_finite(input, "conv2d");

  const int oh = conv_output_side(input.height, kr.k, stride, padding);
  const int ow = conv_output_side(input.width, kr.k, stride, padding);
  Grid2D<T> out(kr.out_channels, oh, ow);
  for (int o = 0; o < kr.out_channels; ++o) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        T acc{0};
        for (int i = 0; i < kr.in_channels; ++i) {
          for (int ky = 0; ky < kr.k; ++ky) {
            const int iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= input.height) continue;
            for (int kx = 0; kx < kr.k; ++kx) {
              const int ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= input.width) continue;
              acc += kr.w(o, i, ky, kx) * input(i, iy, ix);
            }
          }
        }
        out(o, oy, ox) = kr.bias.empty() ? acc : acc + kr.bias[o];
      }
    }
  }
  return out;
}

template <std::floating_point T>
Grid2D<T> conv2d_backward(const Grid2D<T>& input, KernelRef<T> kr, int stride, int padding,
                          const Grid2D<T>& grad_output, std::span<T> grad_weights, std::span<T> grad_bias) {
  const int oh = conv_output_side(input.height, kr.k, stride, padding);
  const int ow = conv_output_side(input.width, kr.k, stride, padding);
  if (grad_output.channels != kr.out_channels || grad_output.height != oh || grad_output.width != ow) {
    throw DimensionError("conv2d_backward: grad_output shape mismatch");
  }
  const bool want_w = !grad_weights.empty();
  const bool want_b = !grad_bias.empty();
  if (want_w && grad_weights.size() != kr.weight_count()) throw DimensionError("conv2d_backward: grad_weights size");
  if (want_b && grad_bias.size() != static_cast<std::size_t>(kr.out_channels)) {
    throw DimensionError("conv2d_backward: grad_bias size");
  }

  Grid2D<T> grad_in(input.channels, input.height, input.width);
  const std::size_t kk = static_cast<std::size_t>(kr.k) * kr.k;
  for (int o = 0; o < kr.out_channels; ++o) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const T g = grad_output(o, oy, ox);
        if (want_b) grad_bias[o] += g;
        if (g == T{0}) continue;
        for (int i = 0; i < kr.in_channels; ++i) {
          const std::size_t wbase = (static_cast<std::size_t>(o) * kr.in_channels + i) * kk;
          for (int ky = 0; ky < kr.k; ++ky) {
            const int iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= input.height) continue;
            for (int kx = 0; kx < kr.k; ++kx) {
              const int ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= input.width) continue;
              const std::size_t wi = wbase + static_cast<std::size_t>(ky) * kr.k + kx;
              grad_in(i, iy, ix) += kr.weights[wi] * g;
              if (want_w) grad_weights[wi] += input(i, iy, ix) * g;
            }
          }
        }
      }
    }
  }
  return grad_in;
}

template <std::floating_point T>
Grid2D<T> conv2d_transpose(const Grid2D<T>& input, KernelRef<T> kr, int stride, int padding,
                           std::optional<std::pair<int, int>> output_size) {
  check_conv_args(input, kr, stride, padding, kr.out_channels, "conv2d_transpose");
  if (!kr.bias.empty() && kr.bias.size() != static_cast<std::size_t>(kr.in_channels)) {
    throw DimensionError("conv2d_transpose: bias must have one entry per output channel");
  }
  require_finite(input, "conv2d_transpose");

  const int min_h = (input.height - 1) * stride - 2 * padding + kr.k;
  const int min_w = (input.width - 1) * stride - 2 * padding + kr.k;
  const int oh = output_size ? output_size->first : min_h;
  const int ow = output_size ? output_size->second : min_w;
  if (oh < 1 || ow < 1) throw DimensionError("conv2d_transpose: kernel larger than padded output");
  if (conv_output_side(oh, kr.k, stride, padding) != input.height ||
      conv_output_side(ow, kr.k, stride, padding) != input.width) {
    throw DimensionError("conv2d_transpose: output size is not an adjoint shape of the input");
  }

  Grid2D<T> out(kr.in_channels, oh, ow);
  const std::size_t kk = static_cast<std::size_t>(kr.k) * kr.k;
  for (int o = 0; o < kr.out_channels; ++o) {
    for (int y = 0; y < input.height; ++y) {
      for (int x = 0; x < input.width; ++x) {
        const T v = input(o, y, x);
        for (int i = 0; i < kr.in_channels; ++i) {
          const std::size_t wbase = (static_cast<std::size_t>(o) * kr.in_channels + i) * kk;
          for (int ky = 0; ky < kr.k; ++ky) {
            const int ty = y * stride - padding + ky;
            if (ty < 0 || ty >= oh) continue;
            for (int kx = 0; kx < kr.k; ++kx) {
              const int tx = x * stride - padding + kx;
              if (tx < 0 || tx >= ow) continue;
              out(i, ty, tx) += kr.weights[wbase + static_cast<std::size_t>(ky) * kr.k + kx] * v;
            }
          }
        }
      }
    }
  }
  if (!kr.bias.empty()) {
    for (int i = 0; i < kr.in_channels; ++i) {
      for (T& v : out.plane(i)) v += kr.bias[i];
    }
  }
  return out;
}

template <std::floating_point T>
Grid2D<T> conv2d_transpose_backward(const Grid2D<T>& input, KernelRef<T> kr, int stride, int padding,
                                    const Grid2D<T>& grad_output, std::span<T> grad_weights,
                                    std::span<T> grad_bias) {
  if (grad_output.channels != kr.in_channels) throw DimensionError("conv2d_transpose_backward: channel mismatch");
  const bool want_w = !grad_weights.empty();
  if (want_w && grad_weights.size() != kr.weight_count()) {
    throw DimensionError("conv2d_transpose_backward: grad_weights size");
  }
  if (!grad_bias.empty()) {
    if (grad_bias.size() != static_cast<std::size_t>(kr.in_channels)) {
      throw DimensionError("conv2d_transpose_backward: grad_bias size");
    }
    for (int i = 0; i < kr.in_channels; ++i) {
      for (T g : grad_output.plane(i)) grad_bias[i] += g;
    }
  }

  Grid2D<T> grad_in(input.channels, input.height, input.width);
  const std::size_t kk = static_cast<std::size_t>(kr.k) * kr.k;
  const int oh = grad_output.height;
  const int ow = grad_output.width;
  for (int o = 0; o < kr.out_channels; ++o) {
    for (int y = 0; y < input.height; ++y) {
      for (int x = 0; x < input.width; ++x) {
        T acc{0};
        const T v = input(o, y, x);
        for (int i = 0; i < kr.in_channels; ++i) {
          const std::size_t wbase = (static_cast<std::size_t>(o) * kr.in_channels + i) * kk;
          for (int ky = 0; ky < kr.k; ++ky) {
            const int ty = y * stride - padding + ky;
            if (ty < 0 || ty >= oh) continue;
            for (int kx = 0; kx < kr.k; ++kx) {
              const int tx = x * stride - padding + kx;
              if (tx < 0 || tx >= ow) continue;
              const std::size_t wi = wbase + static_cast<std::size_t>(ky) * kr.k + kx;
              const T g = grad_output(i, ty, tx);
              acc += kr.weights[wi] * g;
              if (want_w) grad_weights[wi] += v * g;
            }
          }
        }
        grad_in(o, y, x) = acc;
      }
    }
  }
  return grad_in;
}

LerpTap corner_aligned_tap(int out_index, int out_size, int in_size) {
  if (out_size == 1 || in_size == 1) return {0, 0, 0.0};
  const double src = static_cast<double>(out_index) * (in_size - 1) / (out_size - 1);
  int lo = static_cast<int>(std::floor(src));
  lo = std::clamp(lo, 0, in_size - 1);
  const int hi = std::min(lo + 1, in_size - 1);
  return {lo, hi, src - lo};
}

template <std::floating_point T>
Grid2D<T> bilinear_resize(const Grid2D<T>& input, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw DimensionError("bilinear_resize: output size must be positive");
  Grid2D<T> out(input.channels, out_h, out_w);
  std::vector<LerpTap> ty(out_h), tx(out_w);
  for (int y = 0; y < out_h; ++y) ty[y] = corner_aligned_tap(y, out_h, input.height);
  for (int x = 0; x < out_w; ++x) tx[x] = corner_aligned_tap(x, out_w, input.width);
  for (int c = 0; c < input.channels; ++c) {
    for (int y = 0; y < out_h; ++y) {
      const T fy = static_cast<T>(ty[y].frac);
      for (int x = 0; x < out_w; ++x) {
        const T fx = static_cast<T>(tx[x].frac);
        const T top = input(c, ty[y].lo, tx[x].lo) * (1 - fx) + input(c, ty[y].lo, tx[x].hi) * fx;
        const T bot = input(c, ty[y].hi, tx[x].lo) * (1 - fx) + input(c, ty[y].hi, tx[x].hi) * fx;
        out(c, y, x) = top * (1 - fy) + bot * fy;
      }
    }
  }
  return out;
}

template <std::floating_point T>
Grid2D<T> bilinear_resize_backward(const Grid2D<T>& grad_output, int in_h, int in_w) {
  Grid2D<T> grad_in(grad_output.channels, in_h, in_w);
  const int out_h = grad_output.height;
  const int out_w = grad_output.width;
  for (int c = 0; c < grad_output.channels; ++c) {
    for (int y = 0; y < out_h; ++y) {
      const LerpTap ty = corner_aligned_tap(y, out_h, in_h);
      const T fy = static_cast<T>(ty.frac);
      for (int x = 0; x < out_w; ++x) {
        const LerpTap tx = corner_aligned_tap(x, out_w, in_w);
        const T fx = static_cast<T>(tx.frac);
        const T g = grad_output(c, y, x);
        grad_in(c, ty.lo, tx.lo) += g * (1 - fy) * (1 - fx);
        grad_in(c, ty.lo, tx.hi) += g * (1 - fy) * fx;
        grad_in(c, ty.hi, tx.lo) += g * fy * (1 - fx);
        grad_in(c, ty.hi, tx.hi) += g * fy * fx;
      }
    }
  }
  return grad_in;
}

template <std::floating_point T>
KernelStack<T> gaussian_kernel2d(int k, T sigma) {
  if (k < 1 || k % 2 == 0) throw ParameterError("gaussian_kernel2d: kernel side must be odd and positive");
  if (!(sigma > 0)) throw ParameterError("gaussian_kernel2d: sigma must be positive");
  KernelStack<T> ks(1, 1, k, false);
  const int r = k / 2;
  double total = 0.0;
  std::vector<double> raw(static_cast<std::size_t>(k) * k);
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      raw[static_cast<std::size_t>(dy + r) * k + (dx + r)] = v;
      total += v;
    }
  }
  for (std::size_t i = 0; i < raw.size(); ++i) ks.weights[i] = static_cast<T>(raw[i] / total);
  return ks;
}

template <std::floating_point T>
Grid2D<T> depthwise_conv2d(const Grid2D<T>& input, KernelRef<T> kernel, int padding) {
  if (kernel.in_channels != 1 || kernel.out_channels != 1) {
    throw DimensionError("depthwise_conv2d: expects a single-channel kernel");
  }
  const int oh = conv_output_side(input.height, kernel.k, 1, padding);
  const int ow = conv_output_side(input.width, kernel.k, 1, padding);
  Grid2D<T> out(input.channels, oh, ow);
  for (int c = 0; c < input.channels; ++c) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        T acc{0};
        for (int ky = 0; ky < kernel.k; ++ky) {
          const int iy = oy - padding + ky;
          if (iy < 0 || iy >= input.height) continue;
          for (int kx = 0; kx < kernel.k; ++kx) {
            const int ix = ox - padding + kx;
            if (ix < 0 || ix >= input.width) continue;
            acc += kernel.w(0, 0, ky, kx) * input(c, iy, ix);
          }
        }
        out(c, oy, ox) = acc;
      }
    }
  }
  return out;
}

template <std::floating_point T>
Grid2D<T> depthwise_conv2d_backward(const Grid2D<T>& grad_output, KernelRef<T> kernel, int padding) {
  // Stride-1 same-size padding: the adjoint is correlation with the flipped kernel.
  const int ih = grad_output.height - 2 * padding + kernel.k - 1;
  const int iw = grad_output.width - 2 * padding + kernel.k - 1;
  Grid2D<T> grad_in(grad_output.channels, ih, iw);
  for (int c = 0; c < grad_output.channels; ++c) {
    for (int oy = 0; oy < grad_output.height; ++oy) {
      for (int ox = 0; ox < grad_output.width; ++ox) {
        const T g = grad_output(c, oy, ox);
        for (int ky = 0; ky < kernel.k; ++ky) {
          const int iy = oy - padding + ky;
          if (iy < 0 || iy >= ih) continue;
          for (int kx = 0; kx < kernel.k; ++kx) {
            const int ix = ox - padding + kx;
            if (ix < 0 || ix >= iw) continue;
            grad_in(c, iy, ix) += kernel.w(0, 0, ky, kx) * g;
          }
        }
      }
    }
  }
  return grad_in;
}

template <std::floating_point T>
std::vector<T> softmax_axis(std::span<const T> logits) {
  std::vector<T> out(logits.size());
  if (logits.empty()) return out;
  const T peak = *std::max_element(logits.begin(), logits.end());
  T total{0};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - peak);
    total += out[i];
  }
  for (T& v : out) v /= total;
  return out;
}

template <std::floating_point T>
std::vector<T> softmax_axis_backward(std::span<const T> probs, std::span<const T> grad_probs) {
  T dot{0};
  for (std::size_t i = 0; i < probs.size(); ++i) dot += probs[i] * grad_probs[i];
  std::vector<T> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] * (grad_probs[i] - dot);
  return out;
}

GradReport grad_check(const DifferentiableFn& f, std::span<const double> point, double eps) {
  if (!(eps > 0)) throw ParameterError("grad_check: eps must be positive");
  std::vector<double> x(point.begin(), point.end());
  std::vector<double> analytic(x.size(), 0.0);
  f(x, analytic);
  if (!all_finite<double>(analytic)) throw NumericError("grad_check: non-finite analytic gradient");

  GradReport report;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double up = f(x, {});
    x[i] = saved - eps;
    const double down = f(x, {});
    x[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (i == 0 || rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_coordinate = i;
      report.analytic_at_worst = analytic[i];
      report.numeric_at_worst = numeric;
    }
  }
  return report;
}

#define DEEPCAP_INSTANTIATE(T)                                                                              \
  template struct KernelStack<T>;                                                                           \
  template Grid2D<T> conv2d(const Grid2D<T>&, KernelRef<T>, int, int);                                      \
  template Grid2D<T> conv2d_backward(const Grid2D<T>&, KernelRef<T>, int, int, const Grid2D<T>&,            \
                                     std::span<T>, std::span<T>);                                           \
  template Grid2D<T> conv2d_transpose(const Grid2D<T>&, KernelRef<T>, int, int,                             \
                                      std::optional<std::pair<int, int>>);                                  \
  template Grid2D<T> conv2d_transpose_backward(const Grid2D<T>&, KernelRef<T>, int, int, const Grid2D<T>&,  \
                                               std::span<T>, std::span<T>);                                 \
  template Grid2D<T> bilinear_resize(const Grid2D<T>&, int, int);                                           \
  template Grid2D<T> bilinear_resize_backward(const Grid2D<T>&, int, int);                                  \
  template KernelStack<T> gaussian_kernel2d(int, T);                                                        \
  template Grid2D<T> depthwise_conv2d(const Grid2D<T>&, KernelRef<T>, int);                                 \
  template Grid2D<T> depthwise_conv2d_backward(const Grid2D<T>&, KernelRef<T>, int);                        \
  template std::vector<T> softmax_axis(std::span<const T>);                                                 \
  template std::vector<T> softmax_axis_backward(std::span<const T>, std::span<const T>);

DEEPCAP_INSTANTIATE(float)
DEEPCAP_INSTANTIATE(double)
#undef DEEPCAP_INSTANTIATE

}  // namespace deepcap
