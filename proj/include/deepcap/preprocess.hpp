#pragma once

// Frame preparation: polar to Cartesian resampling, cropping, seeded
// augmentation, and assembly of the 1-3 channel network input.

#include <cstdint>
#include <string>

#include "deepcap/grid.hpp"

namespace deepcap {

inline constexpr int kPolarRows = 360;   // angle samples
inline constexpr int kPolarCols = 720;   // depth samples
inline constexpr int kCanvasSide = 360;  // Cartesian canvas before the frame crop
inline constexpr int kFrameSide = 300;
inline constexpr int kCropSide = 256;

// Rows index angle (row i at 2*pi*i/rows), columns index depth. Pixels
// outside the inscribed disk are 0. Angles wrap; depth is clamped to the
// last column.
template <std::floating_point T>
Grid2D<T> polar_to_cartesian(const Grid2D<T>& polar, int out_side = kCanvasSide);

// Inverse sampling used for round-trip checks.
template <std::floating_point T>
Grid2D<T> cartesian_to_polar(const Grid2D<T>& image, int rows = kPolarRows, int cols = kPolarCols);

// Centered window; when the margin is odd the extra pixel is left on the
// bottom/right (offset rounded down).
template <std::floating_point T>
Grid2D<T> center_crop(const Grid2D<T>& image, int size);
Mask center_crop(const Mask& mask, int size);

template <std::floating_point T>
Grid2D<T> crop(const Grid2D<T>& image, int y0, int x0, int size);
Mask crop(const Mask& mask, int y0, int x0, int size);

// Gradient magnitude of channel 0 after Gaussian first-derivative filtering
// (taps to radius ceil(3 sigma), replicated edges). The raw form responds to
// a ramp of slope a with |a|; the scaled form divides by the peak response
// to a unit step and clamps to [0, 1].
template <std::floating_point T>
Grid2D<T> gaussian_gradient_magnitude(const Grid2D<T>& image, double sigma = 1.0);
template <std::floating_point T>
Grid2D<T> gaussian_derivative(const Grid2D<T>& image, double sigma = 1.0);
double gaussian_step_peak(double sigma);

// next - prev, pixelwise.
template <std::floating_point T>
Grid2D<T> axial_difference(const Grid2D<T>& prev, const Grid2D<T>& next);

// Separable Gaussian blur with replicated edges, channel by channel.
template <std::floating_point T>
Grid2D<T> gaussian_blur(const Grid2D<T>& image, double sigma);

enum class InputVariant { IM, G2D, ADM, ALL };

InputVariant parse_input_variant(const std::string& text);  // "IM", "2DG", "ADM", "ALL"
std::string to_string(InputVariant v);
int channel_count(InputVariant v);

struct Sample {
  std::string pullback_id;
  int frame_index = 0;
  double frame_spacing_um = 0.0;
  Grid2D<float> frame;
  Grid2D<float> prev_frame;  // equals frame at the start of a pullback
  Grid2D<float> next_frame;  // equals frame at the end of a pullback
  Mask mask;
};

// Co-registered crops of a sample, ready for channel assembly.
struct CroppedSample {
  Grid2D<float> frame;
  Grid2D<float> prev_frame;
  Grid2D<float> next_frame;
  Mask mask;
};

struct AugmentOptions {
  int crop = kCropSide;
  double probability = 0.5;  // per transform; 0 leaves a pure random crop
  bool photometric = true;   // blur and salt-and-pepper on the main frame
  double blur_sigma = 1.0;
  double noise_density = 0.01;
};

struct AugmentDraw {
  int crop_y = 0;
  int crop_x = 0;
  bool hflip = false;
  bool vflip = false;
  bool blur = false;
  bool rotate = false;
  bool noise = false;
  double angle_deg = 0.0;
  std::uint64_t noise_seed = 0;
};

std::uint64_t augment_seed(std::uint64_t seed, const std::string& pullback_id, int frame_index, int epoch);
AugmentDraw draw_augmentation(std::uint64_t seed, int side, const AugmentOptions& options);
CroppedSample apply_augmentation(const Sample& sample, const AugmentDraw& draw, const AugmentOptions& options);
CroppedSample augment(const Sample& sample, std::uint64_t seed, const AugmentOptions& options = {});

// Deterministic path for validation and test data.
CroppedSample center_sample(const Sample& sample, int crop = kCropSide);

// Channels [frame, gaussian_derivative?, axial_difference?].
Grid2D<float> assemble_input(const CroppedSample& sample, InputVariant variant);

// Rotation about the image center, counterclockwise in degrees; samples
// falling outside the source are 0.
template <std::floating_point T>
Grid2D<T> rotate_bilinear(const Grid2D<T>& image, double angle_deg);
Mask rotate_nearest(const Mask& mask, double angle_deg);

template <std::floating_point T>
Grid2D<T> flip_horizontal(const Grid2D<T>& image);
template <std::floating_point T>
Grid2D<T> flip_vertical(const Grid2D<T>& image);
Mask flip_horizontal(const Mask& mask);
Mask flip_vertical(const Mask& mask);

}  // namespace deepcap
