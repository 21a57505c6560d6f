#include "deepcap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "deepcap/errors.hpp"

namespace deepcap {

namespace {

template <std::floating_point T>
void check_pair(std::span<const T> p, std::span<const T> y, const char* what) {
  if (p.size() != y.size()) {
    throw DimensionError(std::string(what) + ": prediction has " + std::to_string(p.size()) +
                         " values but target has " + std::to_string(y.size()));
  }
  if (p.empty()) throw DimensionError(std::string(what) + ": empty input");
}

void check_masks(const Mask& a, const Mask& b, const char* what) {
  if (!a.same_shape(b)) throw DimensionError(std::string(what) + ": mask shapes differ");
}

// Squared Euclidean distance transform (Felzenszwalb-Huttenlocher lower envelope)
// of a 1-D sampled function, in place.
void edt_1d(std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  const double inf = std::numeric_limits<double>::infinity();
  int k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (int q = 1; q < n; ++q) {
    if (f[q] == inf) continue;
    if (f[v[k]] == inf) {
      v[k] = q;
      continue;
    }
    double s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k]);
    while (s <= z[k]) {
      --k;
      s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (f[v[0]] == inf) {
    std::fill(d.begin(), d.end(), inf);
    return;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

// Squared distance from every pixel to the nearest set pixel.
std::vector<double> squared_edt(const std::vector<std::uint8_t>& set, int h, int w) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> grid(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) grid[i] = set[i] ? 0.0 : inf;
  const int n = std::max(h, w);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);
  f.resize(h);
  d.resize(h);
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = grid[static_cast<std::size_t>(y) * w + x];
    edt_1d(f, d, v, z);
    for (int y = 0; y < h; ++y) grid[static_cast<std::size_t>(y) * w + x] = d[y];
  }
  f.resize(w);
  d.resize(w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) f[x] = grid[static_cast<std::size_t>(y) * w + x];
    edt_1d(f, d, v, z);
    for (int x = 0; x < w; ++x) grid[static_cast<std::size_t>(y) * w + x] = d[x];
  }
  return grid;
}

double directed_hausdorff(const std::vector<std::pair<int, int>>& from, const std::vector<double>& sq_to, int w) {
  double worst = 0;
  for (auto [y, x] : from) worst = std::max(worst, sq_to[static_cast<std::size_t>(y) * w + x]);
  return worst;
}

}  // namespace

template <std::floating_point T>
double soft_dice(std::span<const T> p, std::span<const T> y) {
  check_pair(p, y, "soft_dice");
  double inter = 0, sp = 0, sy = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += static_cast<double>(p[i]) * static_cast<double>(y[i]);
    sp += static_cast<double>(p[i]);
    sy += static_cast<double>(y[i]);
  }
  return (2.0 * inter + kDiceEps) / (sp + sy + kDiceEps);
}

template <std::floating_point T>
double bce(std::span<const T> p, std::span<const T> y) {
  check_pair(p, y, "bce");
  double sum = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pc = std::clamp(static_cast<double>(p[i]), kProbClamp, 1.0 - kProbClamp);
    const double yi = static_cast<double>(y[i]);
    sum -= yi * std::log(pc) + (1.0 - yi) * std::log(1.0 - pc);
  }
  return sum / static_cast<double>(p.size());
}

template <std::floating_point T>
double combined_loss(std::span<const T> p, std::span<const T> y, double lambda) {
  if (lambda < 0) throw ParameterError("combined_loss: lambda must be non-negative");
  return bce(p, y) + lambda * (1.0 - soft_dice(p, y));
}

template <std::floating_point T>
double combined_loss_grad(std::span<const T> p, std::span<const T> y, double lambda, std::span<T> grad) {
  if (lambda < 0) throw ParameterError("combined_loss: lambda must be non-negative");
  check_pair(p, y, "combined_loss_grad");
  if (grad.size() != p.size()) throw DimensionError("combined_loss_grad: gradient buffer size mismatch");
  double inter = 0, sp = 0, sy = 0, sum = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = static_cast<double>(p[i]);
    const double yi = static_cast<double>(y[i]);
    inter += pi * yi;
    sp += pi;
    sy += yi;
    const double pc = std::clamp(pi, kProbClamp, 1.0 - kProbClamp);
    sum -= yi * std::log(pc) + (1.0 - yi) * std::log(1.0 - pc);
  }
  const double n = static_cast<double>(p.size());
  const double num = 2.0 * inter + kDiceEps;
  const double den = sp + sy + kDiceEps;
  const double dice = num / den;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = static_cast<double>(p[i]);
    const double yi = static_cast<double>(y[i]);
    double g = 0;
    if (pi > kProbClamp && pi < 1.0 - kProbClamp) g = (-yi / pi + (1.0 - yi) / (1.0 - pi)) / n;
    const double ddice = (2.0 * yi * den - num) / (den * den);
    g -= lambda * ddice;
    grad[i] = static_cast<T>(g);
  }
  return sum / n + lambda * (1.0 - dice);
}

double soft_dice(const Mask& pred, const Mask& truth) {
  check_masks(pred, truth, "soft_dice");
  std::int64_t inter = 0, sp = 0, sy = 0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    inter += pred.values[i] & truth.values[i];
    sp += pred.values[i];
    sy += truth.values[i];
  }
  return (2.0 * static_cast<double>(inter) + kDiceEps) / (static_cast<double>(sp + sy) + kDiceEps);
}

Confusion confusion(const Mask& pred, const Mask& truth) {
  check_masks(pred, truth, "confusion");
  Confusion c;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const bool p = pred.values[i] != 0;
    const bool t = truth.values[i] != 0;
    if (t) {
      (p ? c.tp : c.fn)++;
    } else {
      (p ? c.fp : c.tn)++;
    }
  }
  return c;
}

SensSpec sensitivity_specificity(const Confusion& c) {
  SensSpec s;
  if (c.tp + c.fn > 0) s.sensitivity = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (c.tn + c.fp > 0) s.specificity = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  return s;
}

SensSpec sensitivity_specificity(const Mask& pred, const Mask& truth) {
  return sensitivity_specificity(confusion(pred, truth));
}

std::vector<std::pair<int, int>> boundary_pixels(const Mask& mask) {
  std::vector<std::pair<int, int>> out;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y == mask.height - 1 || x == mask.width - 1 || !mask(y - 1, x) ||
                        !mask(y + 1, x) || !mask(y, x - 1) || !mask(y, x + 1);
      if (edge) out.emplace_back(y, x);
    }
  }
  return out;
}

double hausdorff(const Mask& a, const Mask& b) {
  check_masks(a, b, "hausdorff");
  const auto ba = boundary_pixels(a);
  const auto bb = boundary_pixels(b);
  if (ba.empty() || bb.empty()) throw DataError("hausdorff: distance to an empty mask is undefined");
  std::vector<std::uint8_t> set_a(a.size()), set_b(b.size());
  for (auto [y, x] : ba) set_a[static_cast<std::size_t>(y) * a.width + x] = 1;
  for (auto [y, x] : bb) set_b[static_cast<std::size_t>(y) * b.width + x] = 1;
  const std::vector<double> to_a = squared_edt(set_a, a.height, a.width);
  const std::vector<double> to_b = squared_edt(set_b, b.height, b.width);
  const double sq = std::max(directed_hausdorff(ba, to_b, a.width), directed_hausdorff(bb, to_a, b.width));
  return std::sqrt(sq);
}

LumenArea lumen_area(const Mask& mask, double pixel_spacing_um) {
  if (!(pixel_spacing_um > 0)) throw ParameterError("lumen_area: pixel spacing must be positive");
  LumenArea a;
  for (std::uint8_t v : mask.values) a.pixels += v ? 1 : 0;
  const double mm = pixel_spacing_um / 1000.0;
  a.mm2 = static_cast<double>(a.pixels) * mm * mm;
  return a;
}

MetricsRecord compute_metrics(const Mask& pred, const Mask& truth, double pixel_spacing_um) {
  check_masks(pred, truth, "compute_metrics");
  MetricsRecord r;
  r.sds = soft_dice(pred, truth);
  const SensSpec ss = sensitivity_specificity(pred, truth);
  r.sensitivity = ss.sensitivity;
  r.specificity = ss.specificity;
  const bool pe = std::none_of(pred.values.begin(), pred.values.end(), [](std::uint8_t v) { return v != 0; });
  const bool te = std::none_of(truth.values.begin(), truth.values.end(), [](std::uint8_t v) { return v != 0; });
  if (pe && te) {
    r.hausdorff_px = 0.0;
  } else if (pe || te) {
    r.hausdorff_px = std::hypot(static_cast<double>(pred.height), static_cast<double>(pred.width));
  } else {
    r.hausdorff_px = hausdorff(pred, truth);
  }
  const LumenArea area = lumen_area(pred, pixel_spacing_um);
  r.area_px = area.pixels;
  r.area_mm2 = area.mm2;
  return r;
}

SummaryStats summarize(std::vector<double> values) {
  SummaryStats s;
  s.count = values.size();
  if (values.empty()) return s;
  double sum = 0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  double ss = 0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(values.size()));
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  s.median = n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  s.min = values.front();
  s.max = values.back();
  return s;
}

std::string format_summary(const SummaryStats& s, int precision) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.*f \xC2\xB1 %.*f | median %.*f | min-max %.*f-%.*f", precision, s.mean, precision,
                s.std, precision, s.median, precision, s.min, precision, s.max);
  return buf;
}

#define DEEPCAP_INSTANTIATE(T)                                                                     \
  template double soft_dice(std::span<const T>, std::span<const T>);                               \
  template double bce(std::span<const T>, std::span<const T>);                                     \
  template double combined_loss(std::span<const T>, std::span<const T>, double);                   \
  template double combined_loss_grad(std::span<const T>, std::span<const T>, double, std::span<T>);

DEEPCAP_INSTANTIATE(float)
DEEPCAP_INSTANTIATE(double)

}  // namespace deepcap
