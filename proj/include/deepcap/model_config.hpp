#pragma once

// Declarative description of a DeepCap network and its key = value text form.
//
//   name = deepcap-default
//   input_channels = 3
//   input_side = 256
//   primary.kernel = 5
//   primary.stride = 4
//   primary.hidden = 32        # 0 disables the 1x1 expansion
//   primary.maps = 4
//   primary.dim = 16
//   kernel = 3
//   down = 4x16 8x16 8x41      # maps x dim per stage
//   up = 8x41@2:1 4x16@1:1 4x16@0:1 2x8:0 2x4:0
//   head = 2x4 2x1
//   upsample = transposed
//   routing_iterations = 3
//   blur.enabled = 1
//   blur.kernel = 3
//   blur.sigma = 2
//   input_variant = ALL       # optional
//
// An up stage "MxD@S:C" doubles the grid into M maps of dimension D,
// concatenates the feature output of down stage S (optional) and then applies
// C stride-1 capsule convolutions back to M x D.

#include <string>
#include <string_view>
#include <vector>

#include "deepcap/capsules.hpp"

namespace deepcap {

struct CapsuleWidth {
  int maps = 1;
  int dim = 1;
  bool operator==(const CapsuleWidth&) const = default;
};

struct UpStage {
  CapsuleWidth width;
  int skip = -1;  // down stage index, -1 for none
  int convs = 0;
  bool operator==(const UpStage&) const = default;
};

struct ModelConfig {
  std::string name = "custom";
  int input_channels = 3;
  int input_side = 256;
  int primary_kernel = 5;
  int primary_stride = 4;
  int primary_hidden = 32;
  CapsuleWidth primary{4, 16};
  int kernel = 3;
  std::vector<CapsuleWidth> down;
  std::vector<UpStage> up;
  std::vector<CapsuleWidth> head;
  UpsampleMode upsample = UpsampleMode::Transposed;
  int routing_iterations = kDefaultRoutingIterations;
  bool blur_enabled = true;
  int blur_kernel = 3;
  double blur_sigma = 2.0;
  // Input channel recipe the weights were trained for (IM, 2DG, ADM, ALL);
  // empty when unknown.
  std::string input_variant;

  // Checks every field and the spatial chain; errors name the offending stage.
  void validate() const;

  // Grid side after the primary layer.
  int primary_side() const;

  std::string to_text() const;
  static ModelConfig from_text(std::string_view text);

  bool operator==(const ModelConfig&) const = default;
};

// Named presets: deepcap-default, deepcap-small, deepcap-tiny.
ModelConfig preset_config(std::string_view name);
std::vector<std::string> preset_names();

ModelConfig load_config_file(const std::string& path);

}  // namespace deepcap
