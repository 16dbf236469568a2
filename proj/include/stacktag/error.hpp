#pragma once

#include <stdexcept>
#include <string>

namespace stacktag {

/// Reason codes for rejected input data. Kept distinct so callers (and tests)
/// can tell a malformed column from an unknown tag without parsing messages.
enum class DataErrc {
  kEmptyInput,
  kMalformedLine,
  kUnknownTag,
  kBadLabel,
  kDimensionMismatch,
  kDuplicateEntry,
  kBadFormat,
  kMisaligned,
  kOverlap,
  kChecksum,
  kShape,
  kVersion,
  kInvalidArgument,
};

/// Bad or inconsistent configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or misaligned input data (CLI exit code 3).
class DataError : public std::runtime_error {
 public:
  DataError(DataErrc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  DataErrc code() const noexcept { return code_; }

 private:
  DataErrc code_;
};

/// Failure while running an otherwise valid job (CLI exit code 4).
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace stacktag
