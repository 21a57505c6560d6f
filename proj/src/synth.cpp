#include "deepcap/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>

#include "deepcap/errors.hpp"
#include "deepcap/image_io.hpp"
#include "deepcap/parallel.hpp"
#include "deepcap/random.hpp"

namespace deepcap {

namespace {

constexpr double kTwoPi = 2 * std::numbers::pi;
constexpr double kHarmonicMax = 0.06;
constexpr double kRadiusJitter = 0.1;

std::uint64_t stream_seed(std::uint64_t seed, int pullback, int frame, std::uint64_t salt) {
  return hash_combine(hash_combine(hash_combine(mix64(seed), static_cast<std::uint64_t>(pullback)),
                                   static_cast<std::uint64_t>(static_cast<std::int64_t>(frame))),
                      salt);
}

struct PullbackParams {
  double radius = 0;
  double phase = 0;
  double drift_phase_y = 0;
  double drift_phase_x = 0;
  double amp[3] = {};
  double harm_phase[3] = {};
  double harm_speed = 0;
  double wire_angle = 0;
  double wire_speed = 0;
};

PullbackParams pullback_params(const PhantomSpec& spec, int pullback) {
  Rng rng(stream_seed(spec.seed, pullback, -1, 0x70626b));
  PullbackParams p;
  p.radius = spec.base_radius * (1.0 + kRadiusJitter * (2 * uniform01(rng) - 1));
  p.phase = uniform(rng, 0, kTwoPi);
  p.drift_phase_y = uniform(rng, 0, kTwoPi);
  p.drift_phase_x = uniform(rng, 0, kTwoPi);
  for (int k = 0; k < 3; ++k) {
    p.amp[k] = uniform(rng, 0, kHarmonicMax);
    p.harm_phase[k] = uniform(rng, 0, kTwoPi);
  }
  p.harm_speed = uniform(rng, -0.03, 0.03);
  p.wire_angle = uniform(rng, 0, kTwoPi);
  p.wire_speed = uniform(rng, -0.02, 0.02);
  return p;
}

double angle_distance(double a, double b) {
  double d = std::fmod(std::abs(a - b), kTwoPi);
  return d > std::numbers::pi ? kTwoPi - d : d;
}

double wall_profile(double t, double wall) {
  if (t < wall) return 0.55 + 0.35 * std::exp(-t / 6.0);
  return kBackgroundLevel + (0.55 + 0.35 * std::exp(-wall / 6.0) - kBackgroundLevel) * std::exp(-(t - wall) / 25.0);
}

}  // namespace

void PhantomSpec::validate() const {
  if (n_frames <= 0) throw ParameterError("phantom: n_frames must be positive");
  if (side < 32) throw ParameterError("phantom: side must be at least 32");
  for (double r : {artifact_rate, stent_rate, bifurcation_rate}) {
    if (!(r >= 0 && r <= 1)) throw ParameterError("phantom: artifact probabilities must lie in [0, 1]");
  }
  if (!(noise_level >= 0 && noise_level < 1)) throw ParameterError("phantom: noise level must lie in [0, 1)");
  if (!(base_radius > 0) || radius_amplitude < 0 || !(radius_period > 0) || center_drift < 0 || !(wall_thickness > 0)) {
    throw ParameterError("phantom: geometry parameters must be positive");
  }
  if (!(pixel_spacing_um > 0) || !(frame_spacing_um > 0)) throw ParameterError("phantom: spacings must be positive");
  const double max_r = (base_radius * (1 + kRadiusJitter) + radius_amplitude) * (1 + 3 * kHarmonicMax);
  const double min_r = (base_radius * (1 - kRadiusJitter) - radius_amplitude) * (1 - 3 * kHarmonicMax);
  if (min_r < 2) throw ParameterError("phantom: lumen radius path collapses below 2 pixels");
  if (max_r + center_drift + 1 >= side / 2.0) {
    throw ParameterError("phantom: lumen radius path leaves the " + std::to_string(side) + "x" +
                         std::to_string(side) + " frame");
  }
}

double LumenGeometry::radius_at(double theta) const {
  double f = 1.0;
  for (int k = 0; k < 3; ++k) f += harmonics[k][0] * std::cos((k + 2) * theta + harmonics[k][1]);
  return radius * f;
}

LumenGeometry lumen_geometry(const PhantomSpec& spec, int pullback, int frame) {
  const PullbackParams p = pullback_params(spec, pullback);
  LumenGeometry g;
  const double z = static_cast<double>(frame);
  g.radius = p.radius + spec.radius_amplitude * std::sin(kTwoPi * z / spec.radius_period + p.phase);
  g.cy = spec.side / 2.0 + spec.center_drift * std::sin(kTwoPi * z / 70.0 + p.drift_phase_y);
  g.cx = spec.side / 2.0 + spec.center_drift * std::sin(kTwoPi * z / 90.0 + p.drift_phase_x);
  for (int k = 0; k < 3; ++k) {
    g.harmonics[k][0] = p.amp[k];
    g.harmonics[k][1] = p.harm_phase[k] + p.harm_speed * z;
  }
  return g;
}

PhantomFrame render_phantom_frame(const PhantomSpec& spec, int pullback, int frame, bool clean) {
  spec.validate();
  const PullbackParams pp = pullback_params(spec, pullback);
  const LumenGeometry geo = lumen_geometry(spec, pullback, frame);
  const int n = spec.side;

  Rng rng(stream_seed(spec.seed, pullback, frame, 0x6672616d65));
  FrameLabels labels;
  const double u_art = uniform01(rng);
  const double u_kind = uniform01(rng);
  const double u_stent = uniform01(rng);
  const double u_bif = uniform01(rng);
  if (u_art < spec.artifact_rate) (u_kind < 0.5 ? labels.blood : labels.light) = true;
  labels.stent = u_stent < spec.stent_rate;
  labels.bifurcation = u_bif < spec.bifurcation_rate;

  const double wire = pp.wire_angle + pp.wire_speed * frame;
  const double shadow_half = spec.shadow_width_deg * std::numbers::pi / 360.0;
  const int struts = 8 + static_cast<int>(uniform_index(rng, 5));
  std::vector<double> strut_angles(struts);
  const double strut_offset = uniform(rng, 0, kTwoPi);
  for (int s = 0; s < struts; ++s) strut_angles[s] = strut_offset + kTwoPi * (s + uniform(rng, -0.2, 0.2)) / struts;
  std::vector<double> strut_r(struts), strut_y(struts), strut_x(struts);
  for (int s = 0; s < struts; ++s) {
    strut_r[s] = geo.radius_at(strut_angles[s]) + 2.0;
    strut_y[s] = geo.cy + strut_r[s] * std::sin(strut_angles[s]);
    strut_x[s] = geo.cx + strut_r[s] * std::cos(strut_angles[s]);
  }
  const double bif_angle = uniform(rng, 0, kTwoPi);
  const double bif_radius = geo.radius * uniform(rng, 0.45, 0.7);
  const double streak_angle = uniform(rng, 0, std::numbers::pi);
  const double gain = 1.3;

  const double bif_r = geo.radius_at(bif_angle) + 0.6 * bif_radius;
  const double bif_cy = geo.cy + bif_r * std::sin(bif_angle);
  const double bif_cx = geo.cx + bif_r * std::cos(bif_angle);
  const double wire_r = geo.radius_at(wire) - 5.0;
  const double wire_cy = geo.cy + wire_r * std::sin(wire);
  const double wire_cx = geo.cx + wire_r * std::cos(wire);

  PhantomFrame out{Grid2D<float>(1, n, n), Mask(n, n), labels};
  Rng noise(stream_seed(spec.seed, pullback, frame, 0x6e6f697365));
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double dy = y - geo.cy;
      const double dx = x - geo.cx;
      const double d = std::hypot(dy, dx);
      double theta = std::atan2(dy, dx);
      if (theta < 0) theta += kTwoPi;
      const double rl = geo.radius_at(theta);
      const bool lumen = d < rl;
      out.mask(y, x) = lumen ? 1 : 0;
      double v = lumen ? kLumenLevel : wall_profile(d - rl, spec.wall_thickness);
      if (!clean) {
        if (labels.bifurcation && !lumen && std::hypot(y - bif_cy, x - bif_cx) < bif_radius) v = kLumenLevel;
        if (labels.stent && !lumen) {
          for (int s = 0; s < struts; ++s) {
            if (std::hypot(y - strut_y[s], x - strut_x[s]) < 2.2) {
              v = 1.0;
            } else if (d > strut_r[s] + 2.2 && angle_distance(theta, strut_angles[s]) * d < 2.0) {
              v *= 0.1;
            }
          }
        }
        if (!lumen && angle_distance(theta, wire) < shadow_half) v = 0.0;
        if (std::hypot(y - wire_cy, x - wire_cx) < 3.0) v = 0.95;
        if (labels.blood && lumen) v += 0.12 * uniform01(noise) * uniform01(noise);
        if (labels.light) {
          v = std::min(1.0, v * gain);
          const double along = dx * std::sin(streak_angle) - dy * std::cos(streak_angle);
          if (std::abs(along) < 1.5) v = std::min(1.0, v + 0.35);
        }
        v *= 1.0 + spec.noise_level * (2.0 * uniform01(noise) - 1.0);
      }
      out.image(0, y, x) = static_cast<float>(std::clamp(std::round(std::clamp(v, 0.0, 1.0) * 255.0), 0.0, 255.0) / 255.0);
    }
  }
  return out;
}

PhantomPullback generate_phantom(const PhantomSpec& spec, int pullback) {
  spec.validate();
  char id[32];
  std::snprintf(id, sizeof id, "pb%03d", pullback);
  PhantomPullback pb{id, spec.frame_spacing_um, std::vector<PhantomFrame>(spec.n_frames)};
  parallel_for(0, static_cast<std::size_t>(spec.n_frames), [&](std::size_t f) {
    pb.frames[f] = render_phantom_frame(spec, pullback, static_cast<int>(f));
  });
  return pb;
}

std::vector<PhantomPullback> generate_dataset(const PhantomSpec& spec, int pullbacks) {
  spec.validate();
  if (pullbacks <= 0 || pullbacks > spec.n_frames) {
    throw ParameterError("phantom: pullback count must lie in [1, n_frames]");
  }
  std::vector<PhantomPullback> out;
  for (int p = 0; p < pullbacks; ++p) {
    PhantomSpec s = spec;
    s.n_frames = spec.n_frames / pullbacks + (p < spec.n_frames % pullbacks ? 1 : 0);
    out.push_back(generate_phantom(s, p));
  }
  return out;
}

std::vector<FrameRecord> render_manifest(const std::vector<PhantomPullback>& pullbacks, const std::string& dir,
                                         ImageFormat format) {
  namespace fs = std::filesystem;
  const char* ext = format == ImageFormat::Png ? "png" : "pgm";
  std::vector<FrameRecord> records;
  try {
    fs::create_directories(dir);
  } catch (const fs::filesystem_error& e) {
    throw IoError("cannot create '" + dir + "': " + e.what());
  }
  for (const PhantomPullback& pb : pullbacks) {
    try {
      fs::create_directories(fs::path(dir) / pb.id);
    } catch (const fs::filesystem_error& e) {
      throw IoError("cannot create '" + (fs::path(dir) / pb.id).string() + "': " + e.what());
    }
    for (std::size_t f = 0; f < pb.frames.size(); ++f) {
      char name[64];
      FrameRecord r;
      r.pullback_id = pb.id;
      r.frame_index = static_cast<int>(f);
      std::snprintf(name, sizeof name, "frame_%04zu.%s", f, ext);
      r.image_path = pb.id + "/" + name;
      std::snprintf(name, sizeof name, "mask_%04zu.%s", f, ext);
      r.mask_path = pb.id + "/" + name;
      r.frame_spacing_um = pb.frame_spacing_um;
      write_image((fs::path(dir) / r.image_path).string(), grid_to_image(pb.frames[f].image));
      write_image((fs::path(dir) / r.mask_path).string(), mask_to_image(pb.frames[f].mask));
      records.push_back(std::move(r));
    }
  }
  write_manifest((fs::path(dir) / "manifest.tsv").string(), records);
  return records;
}

}  // namespace deepcap
