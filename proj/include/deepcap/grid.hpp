#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "deepcap/errors.hpp"

namespace deepcap {

// Channel-major image stack: values[(c * height + y) * width + x].
template <std::floating_point T>
struct Grid2D {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<T> values;

  Grid2D() = default;
  Grid2D(int c, int h, int w, T fill = T{0}) : channels(c), height(h), width(w) {
    if (c <= 0 || h <= 0 || w <= 0) {
      throw DimensionError("Grid2D: dimensions must be positive, got " + std::to_string(c) + "x" +
                           std::to_string(h) + "x" + std::to_string(w));
    }
    values.assign(static_cast<std::size_t>(c) * h * w, fill);
  }

  std::size_t size() const noexcept { return values.size(); }
  std::size_t plane_size() const noexcept { return static_cast<std::size_t>(height) * width; }

  T& operator()(int c, int y, int x) { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  T operator()(int c, int y, int x) const {
    return values[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  std::span<T> plane(int c) { return {values.data() + c * plane_size(), plane_size()}; }
  std::span<const T> plane(int c) const { return {values.data() + c * plane_size(), plane_size()}; }

  bool same_shape(const Grid2D& o) const noexcept {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

// Capsule tensor of shape (maps, height, width, dim); each capsule vector is contiguous.
template <std::floating_point T>
struct CapsuleGrid {
  int maps = 0;
  int height = 0;
  int width = 0;
  int dim = 0;
  std::vector<T> values;

  CapsuleGrid() = default;
  CapsuleGrid(int m, int h, int w, int d, T fill = T{0}) : maps(m), height(h), width(w), dim(d) {
    if (m <= 0 || h <= 0 || w <= 0 || d <= 0) {
      throw DimensionError("CapsuleGrid: dimensions must be positive");
    }
    values.assign(static_cast<std::size_t>(m) * h * w * d, fill);
  }

  std::size_t size() const noexcept { return values.size(); }
  std::size_t offset(int m, int y, int x) const noexcept {
    return ((static_cast<std::size_t>(m) * height + y) * width + x) * dim;
  }

  std::span<T> capsule(int m, int y, int x) { return {values.data() + offset(m, y, x), static_cast<std::size_t>(dim)}; }
  std::span<const T> capsule(int m, int y, int x) const {
    return {values.data() + offset(m, y, x), static_cast<std::size_t>(dim)};
  }

  bool same_shape(const CapsuleGrid& o) const noexcept {
    return maps == o.maps && height == o.height && width == o.width && dim == o.dim;
  }
};

// Binary image, values in {0, 1}.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  Mask() = default;
  Mask(int h, int w, std::uint8_t fill = 0) : height(h), width(w) {
    if (h <= 0 || w <= 0) throw DimensionError("Mask: dimensions must be positive");
    values.assign(static_cast<std::size_t>(h) * w, fill);
  }

  std::size_t size() const noexcept { return values.size(); }
  std::uint8_t& operator()(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t operator()(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  bool same_shape(const Mask& o) const noexcept { return height == o.height && width == o.width; }
  bool operator==(const Mask&) const = default;
};

template <std::floating_point T>
bool all_finite(std::span<const T> v) {
  for (T x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

template <std::floating_point To, std::floating_point From>
Grid2D<To> grid_cast(const Grid2D<From>& g) {
  Grid2D<To> out;
  out.channels = g.channels;
  out.height = g.height;
  out.width = g.width;
  out.values.assign(g.values.begin(), g.values.end());
  return out;
}

}  // namespace deepcap
