#pragma once

#include <stdexcept>
#include <string>

namespace mseg {

/// Caller broke a documented precondition (shape mismatch, bad one-hot, ...).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration (network depth, patch divisibility, tiling).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Training diverged or produced non-finite values.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DataErrorKind {
  missing_file,
  dimension_mismatch,
  non_binary_mask,
  overlapping_masks,
  bad_manifest,
  duplicate_id,
  too_small,
  empty_val_pool,
  unreadable_image,
  infeasible_packing,
};

const char* to_string(DataErrorKind kind);

/// Problem with input data: manifests, images, masks, splits.
class DataError : public std::runtime_error {
 public:
  DataError(DataErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  DataErrorKind kind() const noexcept { return kind_; }

 private:
  DataErrorKind kind_;
};

enum class CheckpointErrorKind { bad_magic, bad_version, truncated, malformed };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  CheckpointErrorKind kind() const noexcept { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

}  // namespace mseg
