#pragma once

// Synthetic intravascular phantoms: a dark lumen inside a bright wall on a
// speckled background, with optional guidewire shadow, blood haze, light
// streaks, stent struts and side-branch openings. Rendering is a pure
// function of (spec, pullback index, frame index).

#include <cstdint>
#include <string>
#include <vector>

#include "deepcap/dataset.hpp"
#include "deepcap/grid.hpp"

namespace deepcap {

inline constexpr double kLumenLevel = 10.0 / 255.0;
inline constexpr double kBackgroundLevel = 30.0 / 255.0;

struct PhantomSpec {
  int n_frames = 64;
  int side = 300;
  std::uint64_t seed = 0;
  double base_radius = 55.0;        // pixels
  double radius_amplitude = 12.0;   // slow variation along the pullback
  double radius_period = 40.0;      // frames
  double center_drift = 8.0;        // pixels
  double wall_thickness = 18.0;
  double shadow_width_deg = 14.0;
  double artifact_rate = 0.228;     // blood haze or light streak
  double stent_rate = 0.231;
  double bifurcation_rate = 0.10;
  double noise_level = 0.35;        // multiplicative speckle half-width
  double pixel_spacing_um = 10.0;
  double frame_spacing_um = 200.0;

  void validate() const;
};

struct FrameLabels {
  bool blood = false;
  bool light = false;
  bool stent = false;
  bool bifurcation = false;
};

struct PhantomFrame {
  Grid2D<float> image;  // 8-bit quantized, values k/255
  Mask mask;
  FrameLabels labels;
};

struct PhantomPullback {
  std::string id;
  double frame_spacing_um = 0.0;
  std::vector<PhantomFrame> frames;
};

// With clean = true, noise and all artifacts are left out; thresholding that
// render between the lumen and background levels recovers the mask exactly.
PhantomFrame render_phantom_frame(const PhantomSpec& spec, int pullback, int frame, bool clean = false);
PhantomPullback generate_phantom(const PhantomSpec& spec, int pullback = 0);

// Lumen boundary radius at angle theta (radians) for one frame, in pixels,
// plus the lumen center.
struct LumenGeometry {
  double cy = 0;
  double cx = 0;
  double radius = 0;
  double harmonics[3][2] = {};
  double radius_at(double theta) const;
};
LumenGeometry lumen_geometry(const PhantomSpec& spec, int pullback, int frame);

enum class ImageFormat { Png, Pgm };

// Writes <dir>/<id>/frame_NNNN.<ext> and mask_NNNN.<ext> for every pullback
// plus <dir>/manifest.tsv with paths relative to dir. Returns the records
// with those relative paths.
std::vector<FrameRecord> render_manifest(const std::vector<PhantomPullback>& pullbacks, const std::string& dir,
                                         ImageFormat format = ImageFormat::Png);

// Splits n_frames across the given number of pullbacks (earlier pullbacks
// take the remainder) and renders them.
std::vector<PhantomPullback> generate_dataset(const PhantomSpec& spec, int pullbacks);

}  // namespace deepcap
