#pragma once

// Capsule primitives: squash, locally constrained dynamic routing and the
// primary / convolutional / upsampling capsule layers.
//
// Transformation weights of a capsule layer are stored as
//   [in_map][ky][kx][in_dim][out_map][out_dim]
// so that the prediction vectors of one child for every parent come out of a
// single contiguous axpy per input component.

#include <concepts>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deepcap/grid.hpp"
#include "deepcap/numerics.hpp"

namespace deepcap {

inline constexpr int kDefaultRoutingIterations = 3;

enum class UpsampleMode { Transposed, Bilinear };

UpsampleMode parse_upsample_mode(std::string_view text);
std::string to_string(UpsampleMode mode);

struct CapsuleConvShape {
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  int in_maps = 1;
  int in_dim = 1;
  int out_maps = 1;
  int out_dim = 1;

  std::size_t weight_count() const noexcept {
    return static_cast<std::size_t>(in_maps) * out_maps * kernel * kernel * in_dim * out_dim;
  }
  void validate() const;
  bool operator==(const CapsuleConvShape&) const = default;
};

template <std::floating_point T>
struct CapsuleConvRef {
  CapsuleConvShape shape;
  std::span<const T> weights;
};

template <std::floating_point T>
struct CapsuleConvParams {
  CapsuleConvShape shape;
  std::vector<T> weights;

  CapsuleConvParams() = default;
  explicit CapsuleConvParams(const CapsuleConvShape& s) : shape(s), weights(s.weight_count(), T{0}) {
    s.validate();
  }
  CapsuleConvRef<T> ref() const { return {shape, weights}; }
  operator CapsuleConvRef<T>() const { return ref(); }  // NOLINT(google-explicit-constructor)
};

// v = (|p|^2 / (1 + |p|^2)) * p / |p|, with squash(0) = 0.
template <std::floating_point T>
void squash(std::span<const T> p, std::span<T> out);

template <std::floating_point T>
std::vector<T> squash(std::span<const T> p);

// Writes dL/dp given dL/dv.
template <std::floating_point T>
void squash_backward(std::span<const T> p, std::span<const T> grad_v, std::span<T> grad_p);

template <std::floating_point T>
struct RoutingState {
  int children = 0;
  int parents = 0;
  int iterations = 0;
  std::vector<T> logits;   // [child][parent], after the last agreement update
  std::vector<T> weights;  // [child][parent], coupling used in the last iteration
};

template <std::floating_point T>
struct RoutingResult {
  std::vector<T> capsules;  // [parent][dim]
  RoutingState<T> state;
};

// Per-iteration record of the routing loop, for inspection and tests.
template <std::floating_point T>
struct RoutingTrace {
  std::vector<std::vector<T>> weights;      // per iteration, [child][parent]
  std::vector<std::vector<T>> preactivation;  // per iteration, [parent][dim]
  std::vector<std::vector<T>> capsules;     // per iteration, [parent][dim]
};

// Dynamic routing of predictions laid out [child][parent][dim]. Logits start
// at zero on every call.
template <std::floating_point T>
RoutingResult<T> route(std::span<const T> predictions, int children, int parents, int dim, int iterations,
                       RoutingTrace<T>* trace = nullptr);

// Gradient of the routed capsules w.r.t. the predictions, differentiating
// through every unrolled iteration.
template <std::floating_point T>
std::vector<T> route_backward(std::span<const T> predictions, int children, int parents, int dim, int iterations,
                              std::span<const T> grad_capsules);

// conv2d, reshape channels c = m * dim + d into capsules, squash. No routing.
template <std::floating_point T>
CapsuleGrid<T> primary_capsules(const Grid2D<T>& input, KernelRef<T> params, int stride, int padding, int maps,
                                int dim);

template <std::floating_point T>
Grid2D<T> primary_capsules_backward(const Grid2D<T>& input, KernelRef<T> params, int stride, int padding, int maps,
                                    int dim, const CapsuleGrid<T>& grad_output, std::span<T> grad_weights,
                                    std::span<T> grad_bias);

template <std::floating_point T>
CapsuleGrid<T> conv_capsule(const CapsuleGrid<T>& input, CapsuleConvRef<T> params,
                            int iterations = kDefaultRoutingIterations);

// Returns dL/dinput and accumulates dL/dweights (skipped when empty).
template <std::floating_point T>
CapsuleGrid<T> conv_capsule_backward(const CapsuleGrid<T>& input, CapsuleConvRef<T> params, int iterations,
                                     const CapsuleGrid<T>& grad_output, std::span<T> grad_weights);

// Doubles (or scales by params.shape.stride) the grid. Transposed mode routes
// predictions gathered through a strided transposed stencil; bilinear mode
// resizes every (map, dim) plane and then applies a stride-1 conv_capsule.
template <std::floating_point T>
CapsuleGrid<T> upsample_capsule(const CapsuleGrid<T>& input, CapsuleConvRef<T> params, UpsampleMode mode,
                                int iterations = kDefaultRoutingIterations);

template <std::floating_point T>
CapsuleGrid<T> upsample_capsule_backward(const CapsuleGrid<T>& input, CapsuleConvRef<T> params, UpsampleMode mode,
                                         int iterations, const CapsuleGrid<T>& grad_output,
                                         std::span<T> grad_weights);

template <std::floating_point T>
CapsuleGrid<T> resize_capsules_bilinear(const CapsuleGrid<T>& input, int out_h, int out_w);

template <std::floating_point T>
CapsuleGrid<T> resize_capsules_bilinear_backward(const CapsuleGrid<T>& grad_output, int in_h, int in_w);

// Concatenation along the map axis; both grids must agree on H, W and D.
template <std::floating_point T>
CapsuleGrid<T> concat_maps(const CapsuleGrid<T>& first, const CapsuleGrid<T>& second);

template <std::floating_point T>
std::pair<CapsuleGrid<T>, CapsuleGrid<T>> split_maps(const CapsuleGrid<T>& grid, int first_maps);

}  // namespace deepcap
