#pragma once

// Training loss and evaluation metrics over lumen probability maps and
// binary masks.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "deepcap/grid.hpp"

namespace deepcap {

inline constexpr double kDiceEps = 1e-6;
inline constexpr double kProbClamp = 1e-7;
inline constexpr double kDefaultLambda = 0.05;

// p and y are flattened maps of equal length; y holds 0 or 1.
template <std::floating_point T>
double soft_dice(std::span<const T> p, std::span<const T> y);
template <std::floating_point T>
double bce(std::span<const T> p, std::span<const T> y);
// bce + lambda * (1 - soft_dice)
template <std::floating_point T>
double combined_loss(std::span<const T> p, std::span<const T> y, double lambda);
// Writes d(combined_loss)/dp into grad (overwrites). The clamp in bce is
// treated as the identity inside (1e-7, 1 - 1e-7) and as constant outside.
template <std::floating_point T>
double combined_loss_grad(std::span<const T> p, std::span<const T> y, double lambda, std::span<T> grad);

double soft_dice(const Mask& pred, const Mask& truth);

struct Confusion {
  std::int64_t tp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;
  std::int64_t fp = 0;
};

Confusion confusion(const Mask& pred, const Mask& truth);

struct SensSpec {
  double sensitivity = 1.0;
  double specificity = 1.0;
};

// A metric whose truth class is empty is reported as 1.
SensSpec sensitivity_specificity(const Confusion& c);
SensSpec sensitivity_specificity(const Mask& pred, const Mask& truth);

// A mask pixel is on the boundary when a 4-neighbor is background or it
// touches the image border.
std::vector<std::pair<int, int>> boundary_pixels(const Mask& mask);

// Symmetric Hausdorff distance in pixels between the two boundary sets.
// Throws DataError when either mask is empty.
double hausdorff(const Mask& a, const Mask& b);

struct LumenArea {
  std::int64_t pixels = 0;
  double mm2 = 0.0;
};

LumenArea lumen_area(const Mask& mask, double pixel_spacing_um);

struct MetricsRecord {
  double sds = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double hausdorff_px = 0.0;
  std::int64_t area_px = 0;
  double area_mm2 = 0.0;
};

// Hausdorff falls back to 0 when both masks are empty and to the image
// diagonal when exactly one is.
MetricsRecord compute_metrics(const Mask& pred, const Mask& truth, double pixel_spacing_um);

struct SummaryStats {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  double median = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::size_t count = 0;
};

SummaryStats summarize(std::vector<double> values);

// "0.9712 ± 0.0123 | median 0.9750 | min-max 0.9400-0.9900"
std::string format_summary(const SummaryStats& s, int precision = 4);

}  // namespace deepcap
