#include "deepcap/preprocess.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <vector>

#include "deepcap/errors.hpp"
#include "deepcap/random.hpp"

namespace deepcap {

namespace {

template <std::floating_point T>
T sample_bilinear_zero(std::span<const T> plane, int h, int w, double sy, double sx) {
  const double fy0 = std::floor(sy);
  const double fx0 = std::floor(sx);
  const int y0 = static_cast<int>(fy0);
  const int x0 = static_cast<int>(fx0);
  const double ty = sy - fy0;
  const double tx = sx - fx0;
  auto at = [&](int y, int x) -> double {
    if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
    return static_cast<double>(plane[static_cast<std::size_t>(y) * w + x]);
  };
  const double top = at(y0, x0) * (1 - tx) + at(y0, x0 + 1) * tx;
  const double bottom = at(y0 + 1, x0) * (1 - tx) + at(y0 + 1, x0 + 1) * tx;
  return static_cast<T>(top * (1 - ty) + bottom * ty);
}

std::vector<double> gaussian_taps(double sigma, int& radius) {
  if (!(sigma > 0)) throw ParameterError("gaussian sigma must be positive");
  radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> g(2 * radius + 1);
  double sum = 0;
  for (int k = -radius; k <= radius; ++k) {
    g[k + radius] = std::exp(-(k * k) / (2.0 * sigma * sigma));
    sum += g[k + radius];
  }
  for (double& v : g) v /= sum;
  return g;
}

// k * g[k] scaled so that sum_k k * d[k] = 1: correlating a ramp of slope a
// gives exactly a.
std::vector<double> derivative_taps(double sigma, int& radius) {
  std::vector<double> g = gaussian_taps(sigma, radius);
  double moment = 0;
  for (int k = -radius; k <= radius; ++k) moment += k * k * g[k + radius];
  std::vector<double> d(g.size());
  for (int k = -radius; k <= radius; ++k) d[k + radius] = k * g[k + radius] / moment;
  return d;
}

// Correlation along x (axis 1) or y (axis 0) with replicated edges.
template <std::floating_point T>
void filter_axis(std::span<const T> in, std::span<T> out, int h, int w, const std::vector<double>& taps,
                 int radius, int axis) {
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int k = -radius; k <= radius; ++k) {
        const int yy = axis == 0 ? std::clamp(y + k, 0, h - 1) : y;
        const int xx = axis == 1 ? std::clamp(x + k, 0, w - 1) : x;
        acc += taps[k + radius] * static_cast<double>(in[static_cast<std::size_t>(yy) * w + xx]);
      }
      out[static_cast<std::size_t>(y) * w + x] = static_cast<T>(acc);
    }
  }
}

template <std::floating_point T>
Grid2D<T> crop_impl(const Grid2D<T>& image, int y0, int x0, int size) {
  if (size <= 0 || y0 < 0 || x0 < 0 || y0 + size > image.height || x0 + size > image.width) {
    throw DimensionError("crop: window " + std::to_string(size) + " at (" + std::to_string(y0) + "," +
                         std::to_string(x0) + ") exceeds " + std::to_string(image.height) + "x" +
                         std::to_string(image.width));
  }
  Grid2D<T> out(image.channels, size, size);
  for (int c = 0; c < image.channels; ++c) {
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) out(c, y, x) = image(c, y0 + y, x0 + x);
    }
  }
  return out;
}

void check_crop_size(int size, int h, int w) {
  if (size <= 0 || size > h || size > w) {
    throw DimensionError("center_crop: size " + std::to_string(size) + " exceeds " + std::to_string(h) + "x" +
                         std::to_string(w));
  }
}

void salt_and_pepper(Grid2D<float>& image, double density, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = image.plane_size();
  const auto count = static_cast<std::size_t>(std::llround(density * static_cast<double>(n)));
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t idx = uniform_index(rng, n);
    image.values[idx] = (i % 2 == 0) ? 1.0f : 0.0f;
  }
}

}  // namespace

template <std::floating_point T>
Grid2D<T> polar_to_cartesian(const Grid2D<T>& polar, int out_side) {
  if (out_side <= 0 || out_side % 2 != 0) throw ParameterError("polar_to_cartesian: out_side must be even");
  const int rows = polar.height;
  const int cols = polar.width;
  const double c = out_side / 2.0;
  Grid2D<T> out(polar.channels, out_side, out_side);
  for (int ch = 0; ch < polar.channels; ++ch) {
    std::span<const T> src = polar.plane(ch);
    for (int y = 0; y < out_side; ++y) {
      for (int x = 0; x < out_side; ++x) {
        const double dx = x + 0.5 - c;
        const double dy = y + 0.5 - c;
        const double r = std::hypot(dx, dy);
        if (r > c) continue;
        double theta = std::atan2(dy, dx);
        if (theta < 0) theta += 2 * std::numbers::pi;
        const double row = theta * rows / (2 * std::numbers::pi);
        const double col = std::min(r * cols / c, static_cast<double>(cols - 1));
        const int r0 = static_cast<int>(std::floor(row));
        const double tr = row - r0;
        const int ra = ((r0 % rows) + rows) % rows;
        const int rb = (ra + 1) % rows;
        const int c0 = static_cast<int>(std::floor(col));
        const double tc = col - c0;
        const int c1 = std::min(c0 + 1, cols - 1);
        auto at = [&](int rr, int cc) { return static_cast<double>(src[static_cast<std::size_t>(rr) * cols + cc]); };
        const double v = (at(ra, c0) * (1 - tc) + at(ra, c1) * tc) * (1 - tr) +
                         (at(rb, c0) * (1 - tc) + at(rb, c1) * tc) * tr;
        out(ch, y, x) = static_cast<T>(v);
      }
    }
  }
  return out;
}

template <std::floating_point T>
Grid2D<T> cartesian_to_polar(const Grid2D<T>& image, int rows, int cols) {
  if (image.height != image.width) throw DimensionError("cartesian_to_polar: image must be square");
  const double c = image.width / 2.0;
  Grid2D<T> out(image.channels, rows, cols);
  for (int ch = 0; ch < image.channels; ++ch) {
    std::span<const T> src = image.plane(ch);
    for (int i = 0; i < rows; ++i) {
      const double theta = 2 * std::numbers::pi * i / rows;
      for (int j = 0; j < cols; ++j) {
        const double r = static_cast<double>(j) * c / cols;
        out(ch, i, j) = sample_bilinear_zero<T>(src, image.height, image.width, c + r * std::sin(theta) - 0.5,
                                                c + r * std::cos(theta) - 0.5);
      }
    }
  }
  return out;
}

template <std::floating_point T>
Grid2D<T> crop(const Grid2D<T>& image, int y0, int x0, int size) {
  return crop_impl(image, y0, x0, size);
}

Mask crop(const Mask& mask, int y0, int x0, int size) {
  if (size <= 0 || y0 < 0 || x0 < 0 || y0 + size > mask.height || x0 + size > mask.width) {
    throw DimensionError("crop: window exceeds mask bounds");
  }
  Mask out(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) out(y, x) = mask(y0 + y, x0 + x);
  }
  return out;
}

template <std::floating_point T>
Grid2D<T> center_crop(const Grid2D<T>& image, int size) {
  check_crop_size(size, image.height, image.width);
  return crop_impl(image, (image.height - size) / 2, (image.width - size) / 2, size);
}

Mask center_crop(const Mask& mask, int size) {
  check_crop_size(size, mask.height, mask.width);
  return crop(mask, (mask.height - size) / 2, (mask.width - size) / 2, size);
}

double gaussian_step_peak(double sigma) {
  int radius = 0;
  const std::vector<double> d = derivative_taps(sigma, radius);
  double peak = 0;
  for (int k = 1; k <= radius; ++k) peak += d[k + radius];
  return peak;
}

template <std::floating_point T>
Grid2D<T> gaussian_gradient_magnitude(const Grid2D<T>& image, double sigma) {
  int radius = 0;
  const std::vector<double> g = gaussian_taps(sigma, radius);
  const std::vector<double> d = derivative_taps(sigma, radius);
  const int h = image.height;
  const int w = image.width;
  std::span<const T> src = image.plane(0);
  std::vector<T> tmp(image.plane_size());
  std::vector<T> gx(image.plane_size());
  std::vector<T> gy(image.plane_size());
  filter_axis<T>(src, tmp, h, w, d, radius, 1);
  filter_axis<T>(tmp, gx, h, w, g, radius, 0);
  filter_axis<T>(src, tmp, h, w, g, radius, 1);
  filter_axis<T>(tmp, gy, h, w, d, radius, 0);
  Grid2D<T> out(1, h, w);
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = std::hypot(gx[i], gy[i]);
  return out;
}

template <std::floating_point T>
Grid2D<T> gaussian_derivative(const Grid2D<T>& image, double sigma) {
  Grid2D<T> out = gaussian_gradient_magnitude(image, sigma);
  const double peak = gaussian_step_peak(sigma);
  for (T& v : out.values) v = static_cast<T>(std::min(1.0, static_cast<double>(v) / peak));
  return out;
}

template <std::floating_point T>
Grid2D<T> axial_difference(const Grid2D<T>& prev, const Grid2D<T>& next) {
  if (!prev.same_shape(next)) throw DimensionError("axial_difference: neighbor frames differ in shape");
  Grid2D<T> out(prev.channels, prev.height, prev.width);
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = next.values[i] - prev.values[i];
  return out;
}

template <std::floating_point T>
Grid2D<T> gaussian_blur(const Grid2D<T>& image, double sigma) {
  int radius = 0;
  const std::vector<double> g = gaussian_taps(sigma, radius);
  Grid2D<T> out(image.channels, image.height, image.width);
  std::vector<T> tmp(image.plane_size());
  for (int c = 0; c < image.channels; ++c) {
    filter_axis<T>(image.plane(c), tmp, image.height, image.width, g, radius, 1);
    filter_axis<T>(tmp, out.plane(c), image.height, image.width, g, radius, 0);
  }
  return out;
}

template <std::floating_point T>
Grid2D<T> rotate_bilinear(const Grid2D<T>& image, double angle_deg) {
  const double a = angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(a);
  const double sn = std::sin(a);
  const double cy = (image.height - 1) / 2.0;
  const double cx = (image.width - 1) / 2.0;
  Grid2D<T> out(image.channels, image.height, image.width);
  for (int c = 0; c < image.channels; ++c) {
    std::span<const T> src = image.plane(c);
    for (int y = 0; y < image.height; ++y) {
      for (int x = 0; x < image.width; ++x) {
        const double dx = x - cx;
        const double dy = y - cy;
        out(c, y, x) = sample_bilinear_zero<T>(src, image.height, image.width, cy - sn * dx + cs * dy,
                                               cx + cs * dx + sn * dy);
      }
    }
  }
  return out;
}

Mask rotate_nearest(const Mask& mask, double angle_deg) {
  const double a = angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(a);
  const double sn = std::sin(a);
  const double cy = (mask.height - 1) / 2.0;
  const double cx = (mask.width - 1) / 2.0;
  Mask out(mask.height, mask.width);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      const double dx = x - cx;
      const double dy = y - cy;
      const auto sy = static_cast<int>(std::lround(cy - sn * dx + cs * dy));
      const auto sx = static_cast<int>(std::lround(cx + cs * dx + sn * dy));
      if (sy >= 0 && sy < mask.height && sx >= 0 && sx < mask.width) out(y, x) = mask(sy, sx);
    }
  }
  return out;
}

template <std::floating_point T>
Grid2D<T> flip_horizontal(const Grid2D<T>& image) {
  Grid2D<T> out(image.channels, image.height, image.width);
  for (int c = 0; c < image.channels; ++c) {
    for (int y = 0; y < image.height; ++y) {
      for (int x = 0; x < image.width; ++x) out(c, y, x) = image(c, y, image.width - 1 - x);
    }
  }
  return out;
}

template <std::floating_point T>
Grid2D<T> flip_vertical(const Grid2D<T>& image) {
  Grid2D<T> out(image.channels, image.height, image.width);
  for (int c = 0; c < image.channels; ++c) {
    for (int y = 0; y < image.height; ++y) {
      for (int x = 0; x < image.width; ++x) out(c, y, x) = image(c, image.height - 1 - y, x);
    }
  }
  return out;
}

Mask flip_horizontal(const Mask& mask) {
  Mask out(mask.height, mask.width);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) out(y, x) = mask(y, mask.width - 1 - x);
  }
  return out;
}

Mask flip_vertical(const Mask& mask) {
  Mask out(mask.height, mask.width);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) out(y, x) = mask(mask.height - 1 - y, x);
  }
  return out;
}

InputVariant parse_input_variant(const std::string& text) {
  std::string t;
  for (char ch : text) t.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
  if (t == "IM") return InputVariant::IM;
  if (t == "2DG") return InputVariant::G2D;
  if (t == "ADM") return InputVariant::ADM;
  if (t == "ALL") return InputVariant::ALL;
  throw ParameterError("unknown input variant '" + text + "' (expected IM, 2DG, ADM or ALL)");
}

std::string to_string(InputVariant v) {
  switch (v) {
    case InputVariant::IM: return "IM";
    case InputVariant::G2D: return "2DG";
    case InputVariant::ADM: return "ADM";
    case InputVariant::ALL: return "ALL";
  }
  return "?";
}

int channel_count(InputVariant v) {
  switch (v) {
    case InputVariant::IM: return 1;
    case InputVariant::G2D:
    case InputVariant::ADM: return 2;
    case InputVariant::ALL: return 3;
  }
  return 0;
}

std::uint64_t augment_seed(std::uint64_t seed, const std::string& pullback_id, int frame_index, int epoch) {
  std::uint64_t h = mix64(seed);
  h = hash_combine(h, hash_string(pullback_id));
  h = hash_combine(h, static_cast<std::uint64_t>(static_cast<std::int64_t>(frame_index)));
  h = hash_combine(h, static_cast<std::uint64_t>(static_cast<std::int64_t>(epoch)));
  return h;
}

AugmentDraw draw_augmentation(std::uint64_t seed, int side, const AugmentOptions& options) {
  if (options.crop > side) throw DimensionError("augment: crop larger than frame");
  Rng rng(seed);
  const auto span = static_cast<std::size_t>(side - options.crop + 1);
  AugmentDraw d;
  d.crop_y = static_cast<int>(uniform_index(rng, span));
  d.crop_x = static_cast<int>(uniform_index(rng, span));
  d.hflip = uniform01(rng) < options.probability;
  d.vflip = uniform01(rng) < options.probability;
  d.blur = uniform01(rng) < options.probability;
  d.rotate = uniform01(rng) < options.probability;
  d.angle_deg = uniform(rng, 0.0, 360.0);
  d.noise = uniform01(rng) < options.probability;
  d.noise_seed = rng();
  return d;
}

CroppedSample apply_augmentation(const Sample& sample, const AugmentDraw& draw, const AugmentOptions& options) {
  if (!sample.frame.same_shape(sample.prev_frame) || !sample.frame.same_shape(sample.next_frame) ||
      sample.mask.height != sample.frame.height || sample.mask.width != sample.frame.width) {
    throw DimensionError("augment: frame, neighbors and mask must share a shape");
  }
  const int n = options.crop;
  CroppedSample s{crop(sample.frame, draw.crop_y, draw.crop_x, n), crop(sample.prev_frame, draw.crop_y, draw.crop_x, n),
                  crop(sample.next_frame, draw.crop_y, draw.crop_x, n), crop(sample.mask, draw.crop_y, draw.crop_x, n)};
  if (draw.hflip) {
    s.frame = flip_horizontal(s.frame);
    s.prev_frame = flip_horizontal(s.prev_frame);
    s.next_frame = flip_horizontal(s.next_frame);
    s.mask = flip_horizontal(s.mask);
  }
  if (draw.vflip) {
    s.frame = flip_vertical(s.frame);
    s.prev_frame = flip_vertical(s.prev_frame);
    s.next_frame = flip_vertical(s.next_frame);
    s.mask = flip_vertical(s.mask);
  }
  if (draw.blur && options.photometric) s.frame = gaussian_blur(s.frame, options.blur_sigma);
  if (draw.rotate) {
    s.frame = rotate_bilinear(s.frame, draw.angle_deg);
    s.prev_frame = rotate_bilinear(s.prev_frame, draw.angle_deg);
    s.next_frame = rotate_bilinear(s.next_frame, draw.angle_deg);
    s.mask = rotate_nearest(s.mask, draw.angle_deg);
  }
  if (draw.noise && options.photometric) salt_and_pepper(s.frame, options.noise_density, draw.noise_seed);
  return s;
}

CroppedSample augment(const Sample& sample, std::uint64_t seed, const AugmentOptions& options) {
  if (sample.frame.height != sample.frame.width) throw DimensionError("augment: frames must be square");
  return apply_augmentation(sample, draw_augmentation(seed, sample.frame.height, options), options);
}

CroppedSample center_sample(const Sample& sample, int crop_side) {
  return {center_crop(sample.frame, crop_side), center_crop(sample.prev_frame, crop_side),
          center_crop(sample.next_frame, crop_side), center_crop(sample.mask, crop_side)};
}

Grid2D<float> assemble_input(const CroppedSample& sample, InputVariant variant) {
  const int h = sample.frame.height;
  const int w = sample.frame.width;
  Grid2D<float> out(channel_count(variant), h, w);
  const std::size_t n = out.plane_size();
  std::copy_n(sample.frame.values.begin(), n, out.values.begin());
  int ch = 1;
  if (variant == InputVariant::G2D || variant == InputVariant::ALL) {
    const Grid2D<float> g = gaussian_derivative(sample.frame);
    std::copy_n(g.values.begin(), n, out.values.begin() + ch * n);
    ++ch;
  }
  if (variant == InputVariant::ADM || variant == InputVariant::ALL) {
    const Grid2D<float> d = axial_difference(sample.prev_frame, sample.next_frame);
    std::copy_n(d.values.begin(), n, out.values.begin() + ch * n);
  }
  return out;
}

#define DEEPCAP_INSTANTIATE(T)                                                                  \
  template Grid2D<T> polar_to_cartesian(const Grid2D<T>&, int);                                 \
  template Grid2D<T> cartesian_to_polar(const Grid2D<T>&, int, int);                            \
  template Grid2D<T> center_crop(const Grid2D<T>&, int);                                        \
  template Grid2D<T> crop(const Grid2D<T>&, int, int, int);                                     \
  template Grid2D<T> gaussian_gradient_magnitude(const Grid2D<T>&, double);                     \
  template Grid2D<T> gaussian_derivative(const Grid2D<T>&, double);                             \
  template Grid2D<T> axial_difference(const Grid2D<T>&, const Grid2D<T>&);                      \
  template Grid2D<T> gaussian_blur(const Grid2D<T>&, double);                                   \
  template Grid2D<T> rotate_bilinear(const Grid2D<T>&, double);                                 \
  template Grid2D<T> flip_horizontal(const Grid2D<T>&);                                         \
  template Grid2D<T> flip_vertical(const Grid2D<T>&);

DEEPCAP_INSTANTIATE(float)
DEEPCAP_INSTANTIATE(double)

}  // namespace deepcap
