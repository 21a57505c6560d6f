#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "deepcap/errors.hpp"
#include "deepcap/model.hpp"

namespace deepcap {

namespace {

constexpr char kMagic[4] = {'D', 'C', 'A', 'P'};

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint32_t crc_of(const unsigned char* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large payloads in pieces.
  while (size > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  const std::string header = model.config().to_text();
  std::vector<unsigned char> bytes;
  bytes.reserve(16 + header.size() + 4 * model.param_count());
  bytes.insert(bytes.end(), kMagic, kMagic + 4);
  put_u32(bytes, kCheckpointVersion);
  put_u32(bytes, static_cast<std::uint32_t>(header.size()));
  bytes.insert(bytes.end(), header.begin(), header.end());
  const std::size_t payload_start = bytes.size();
  for (float v : model.parameters()) put_u32(bytes, std::bit_cast<std::uint32_t>(v));
  put_u32(bytes, crc_of(bytes.data() + payload_start, bytes.size() - payload_start));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::NotACheckpoint, path);
  }
  if (bytes.size() < 12) throw CheckpointError(CheckpointError::Kind::CorruptPayload, path + " is truncated");
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::UnsupportedVersion,
                          path + " has version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
  }
  const std::size_t header_len = get_u32(bytes.data() + 8);
  if (bytes.size() < 12 + header_len + 4) {
    throw CheckpointError(CheckpointError::Kind::CorruptPayload, path + " is truncated");
  }
  const std::string header(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
  ModelConfig config;
  try {
    config = ModelConfig::from_text(header);
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointError::Kind::CorruptPayload, path + ": bad config header (" + e.what() + ")");
  }
  const NetworkPlan plan = NetworkPlan::build(config);
  const std::size_t payload_start = 12 + header_len;
  const std::size_t payload_bytes = 4 * plan.param_count;
  if (bytes.size() != payload_start + payload_bytes + 4) {
    throw CheckpointError(CheckpointError::Kind::CorruptPayload,
                          path + " holds " + std::to_string(bytes.size()) + " bytes, expected " +
                              std::to_string(payload_start + payload_bytes + 4));
  }
  const std::uint32_t stored = get_u32(bytes.data() + payload_start + payload_bytes);
  if (crc_of(bytes.data() + payload_start, payload_bytes) != stored) {
    throw CheckpointError(CheckpointError::Kind::CorruptPayload, path + ": CRC mismatch");
  }
  std::vector<float> params(plan.param_count);
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i] = std::bit_cast<float>(get_u32(bytes.data() + payload_start + 4 * i));
  }
  return Model::from_parameters(config, std::move(params));
}

std::uintmax_t expected_checkpoint_size(const ModelConfig& config) {
  return 16 + config.to_text().size() + 4 * NetworkPlan::build(config).param_count;
}

std::uintmax_t disk_size(const std::string& path) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) throw IoError("cannot stat '" + path + "': " + ec.message());
  return size;
}

}  // namespace deepcap
