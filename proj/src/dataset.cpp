#include "deepcap/dataset.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <algorithm>

#include "deepcap/errors.hpp"
#include "deepcap/image_io.hpp"

namespace deepcap {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

std::string resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path.string() : (base / path).lexically_normal().string();
}

}  // namespace

std::string format_spacing(double um) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, um);
  return std::string(buf, res.ptr);
}

std::vector<FrameRecord> read_manifest_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path + "'");
  std::vector<FrameRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> f = split_tabs(line);
    const std::string where = path + ":" + std::to_string(line_no);
    if (f.size() != 5) throw DataError(where + ": expected 5 tab-separated fields, got " + std::to_string(f.size()));
    FrameRecord r;
    r.pullback_id = f[0];
    if (r.pullback_id.empty()) throw DataError(where + ": empty pullback id");
    const auto idx = std::from_chars(f[1].data(), f[1].data() + f[1].size(), r.frame_index);
    if (idx.ec != std::errc{} || idx.ptr != f[1].data() + f[1].size()) {
      throw DataError(where + ": invalid frame index '" + f[1] + "'");
    }
    r.image_path = f[2];
    r.mask_path = f[3];
    const auto sp = std::from_chars(f[4].data(), f[4].data() + f[4].size(), r.frame_spacing_um);
    if (sp.ec != std::errc{} || sp.ptr != f[4].data() + f[4].size() || !(r.frame_spacing_um > 0) ||
        !std::isfinite(r.frame_spacing_um)) {
      throw DataError(where + ": invalid frame spacing '" + f[4] + "'");
    }
    if (r.image_path.empty() || r.mask_path.empty()) throw DataError(where + ": empty path");
    records.push_back(std::move(r));
  }
  if (records.empty()) throw DataError("manifest '" + path + "' has no records");
  return records;
}

std::vector<FrameRecord> read_manifest(const std::string& path) {
  std::vector<FrameRecord> records = read_manifest_records(path);
  const fs::path base = fs::path(path).parent_path();
  for (FrameRecord& r : records) {
    r.image_path = resolve(base, r.image_path);
    r.mask_path = resolve(base, r.mask_path);
  }
  return records;
}

void write_manifest(const std::string& path, const std::vector<FrameRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest '" + path + "'");
  for (const FrameRecord& r : records) {
    out << r.pullback_id << '\t' << r.frame_index << '\t' << r.image_path << '\t' << r.mask_path << '\t'
        << format_spacing(r.frame_spacing_um) << '\n';
  }
  if (!out) throw IoError("failed writing manifest '" + path + "'");
}

std::vector<Pullback> group_pullbacks(const std::vector<FrameRecord>& records) {
  std::vector<Pullback> out;
  std::map<std::string, std::size_t> index;
  for (const FrameRecord& r : records) {
    auto [it, inserted] = index.emplace(r.pullback_id, out.size());
    if (inserted) out.push_back({r.pullback_id, {}});
    out[it->second].frames.push_back(r);
  }
  for (Pullback& pb : out) {
    std::stable_sort(pb.frames.begin(), pb.frames.end(),
                     [](const FrameRecord& a, const FrameRecord& b) { return a.frame_index < b.frame_index; });
    for (std::size_t i = 1; i < pb.frames.size(); ++i) {
      if (pb.frames[i].frame_index == pb.frames[i - 1].frame_index) {
        throw DataError("pullback '" + pb.id + "' lists frame " + std::to_string(pb.frames[i].frame_index) +
                        " twice");
      }
    }
  }
  return out;
}

Dataset Dataset::load(const std::string& manifest_path) { return from_records(read_manifest(manifest_path)); }

Dataset Dataset::from_records(const std::vector<FrameRecord>& records) {
  Dataset ds;
  ds.pullbacks_ = group_pullbacks(records);
  int side = -1;
  for (const Pullback& pb : ds.pullbacks_) {
    std::vector<Grid2D<float>> imgs;
    std::vector<Mask> masks;
    for (const FrameRecord& r : pb.frames) {
      const GrayImage img = read_image(r.image_path);
      const GrayImage msk = read_image(r.mask_path);
      if (img.width != img.height) throw DataError("'" + r.image_path + "': frames must be square");
      if (msk.width != img.width || msk.height != img.height) {
        throw DataError("'" + r.mask_path + "': mask shape differs from its frame");
      }
      if (side < 0) side = img.width;
      if (img.width != side) throw DataError("'" + r.image_path + "': all frames must share one size");
      imgs.push_back(image_to_grid(img));
      masks.push_back(image_to_mask(msk));
    }
    ds.images_.push_back(std::move(imgs));
    ds.masks_.push_back(std::move(masks));
  }
  return ds;
}

std::size_t Dataset::frame_count() const noexcept {
  std::size_t n = 0;
  for (const Pullback& pb : pullbacks_) n += pb.frames.size();
  return n;
}

std::vector<std::size_t> Dataset::pullback_sizes() const {
  std::vector<std::size_t> sizes;
  for (const Pullback& pb : pullbacks_) sizes.push_back(pb.frames.size());
  return sizes;
}

std::vector<Dataset::FrameRef> Dataset::frames_of(const std::vector<std::size_t>& pullback_indices) const {
  std::vector<FrameRef> out;
  for (std::size_t p : pullback_indices) {
    if (p >= pullbacks_.size()) throw DataError("pullback index out of range");
    for (std::size_t i = 0; i < pullbacks_[p].frames.size(); ++i) out.push_back({p, i});
  }
  return out;
}

Sample Dataset::sample(FrameRef ref) const {
  const std::vector<Grid2D<float>>& imgs = images_.at(ref.pullback);
  const std::size_t n = imgs.size();
  const std::size_t prev = ref.position == 0 ? 0 : ref.position - 1;
  const std::size_t next = std::min(ref.position + 1, n - 1);
  const FrameRecord& r = record(ref);
  return Sample{r.pullback_id, r.frame_index, r.frame_spacing_um, imgs[ref.position], imgs[prev], imgs[next],
                masks_[ref.pullback][ref.position]};
}

}  // namespace deepcap
