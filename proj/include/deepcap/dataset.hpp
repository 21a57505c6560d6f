#pragma once

// Manifest-driven frame collections grouped into pullbacks.
//
// Manifest: one record per line,
//   pullback_id <TAB> frame_index <TAB> image_path <TAB> mask_path <TAB> frame_spacing_um
// Relative paths are resolved against the manifest's directory.

#include <cstddef>
#include <string>
#include <vector>

#include "deepcap/grid.hpp"
#include "deepcap/preprocess.hpp"

namespace deepcap {

struct FrameRecord {
  std::string pullback_id;
  int frame_index = 0;
  std::string image_path;
  std::string mask_path;
  double frame_spacing_um = 0.0;

  bool operator==(const FrameRecord&) const = default;
};

// Paths are returned as written in the file.
std::vector<FrameRecord> read_manifest_records(const std::string& path);
// Paths are resolved against the manifest directory.
std::vector<FrameRecord> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<FrameRecord>& records);

std::string format_spacing(double um);

struct Pullback {
  std::string id;
  std::vector<FrameRecord> frames;  // ascending frame_index
};

// Groups by pullback id in order of first appearance; rejects duplicate frames.
std::vector<Pullback> group_pullbacks(const std::vector<FrameRecord>& records);

// Frames and masks held in memory, addressed by (pullback, position).
class Dataset {
 public:
  struct FrameRef {
    std::size_t pullback = 0;
    std::size_t position = 0;
  };

  static Dataset load(const std::string& manifest_path);
  static Dataset from_records(const std::vector<FrameRecord>& records);

  const std::vector<Pullback>& pullbacks() const noexcept { return pullbacks_; }
  std::size_t frame_count() const noexcept;
  std::vector<std::size_t> pullback_sizes() const;

  // All frames of the given pullbacks, in pullback then position order.
  std::vector<FrameRef> frames_of(const std::vector<std::size_t>& pullback_indices) const;

  // Neighbors are the adjacent positions, clamped at the pullback ends.
  Sample sample(FrameRef ref) const;
  const FrameRecord& record(FrameRef ref) const { return pullbacks_[ref.pullback].frames[ref.position]; }

 private:
  std::vector<Pullback> pullbacks_;
  std::vector<std::vector<Grid2D<float>>> images_;
  std::vector<std::vector<Mask>> masks_;
};

}  // namespace deepcap
