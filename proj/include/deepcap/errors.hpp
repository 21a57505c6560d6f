#pragma once

#include <stdexcept>
#include <string>

namespace deepcap {

// Base for every error the engine raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or size mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or other floating point failures.
class NumericError : public Error {
 public:
  using Error::Error;
};

// An argument outside its admissible domain (even kernel side, unknown mode, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// A model or layer configuration that cannot be materialized.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// File system and decoding failures, always carrying the offending path.
class IoError : public Error {
 public:
  using Error::Error;
};

// Dataset-level problems (empty subsets, malformed manifests, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  enum class Kind { NotACheckpoint, UnsupportedVersion, CorruptPayload };

  CheckpointError(Kind kind, const std::string& detail);

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace deepcap
