#include "deepcap/errors.hpp"

namespace deepcap {
namespace {

std::string kind_text(CheckpointError::Kind kind) {
  switch (kind) {
    case CheckpointError::Kind::NotACheckpoint:
      return "not a checkpoint";
    case CheckpointError::Kind::UnsupportedVersion:
      return "unsupported version";
    case CheckpointError::Kind::CorruptPayload:
      return "corrupt payload";
  }
  return "checkpoint error";
}

}  // namespace

CheckpointError::CheckpointError(Kind kind, const std::string& detail)
    : Error(detail.empty() ? kind_text(kind) : kind_text(kind) + ": " + detail), kind_(kind) {}

}  // namespace deepcap
