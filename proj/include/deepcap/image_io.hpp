#pragma once

// 8-bit grayscale frames and masks on disk: binary PGM (P5) or PNG, chosen
// by file extension when writing and by signature when reading.

#include <cstdint>
#include <string>
#include <vector>

#include "deepcap/grid.hpp"

namespace deepcap {

struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  bool operator==(const GrayImage&) const = default;
};

GrayImage read_image(const std::string& path);
void write_image(const std::string& path, const GrayImage& image);

// Intensities scaled to [0, 1] as a single-channel grid.
Grid2D<float> image_to_grid(const GrayImage& image);
// Rounds and clamps channel 0 back to 8 bits.
GrayImage grid_to_image(const Grid2D<float>& grid);

// Masks are stored as {0, 255}; any nonzero pixel reads back as 1.
Mask image_to_mask(const GrayImage& image);
GrayImage mask_to_image(const Mask& mask);

}  // namespace deepcap
