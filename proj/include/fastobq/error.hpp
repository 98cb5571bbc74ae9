#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fastobq {

enum class ErrorCode {
  // tensor_io
  bad_magic,
  truncated_payload,
  unsupported_dtype,
  invalid_tensor,
  io_failure,
  missing_file,
  shape_mismatch,
  bad_manifest,
  // linalg / grid / quantizers
  non_finite,
  empty_calibration,
  not_positive_definite,
  dead_index,
  singular_pivot,
  invalid_argument,
  // harness
  mixed_grids,
  bad_config,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::bad_magic: return "BadMagic";
    case ErrorCode::truncated_payload: return "TruncatedPayload";
    case ErrorCode::unsupported_dtype: return "UnsupportedDtype";
    case ErrorCode::invalid_tensor: return "InvalidTensor";
    case ErrorCode::io_failure: return "IoFailure";
    case ErrorCode::missing_file: return "MissingFile";
    case ErrorCode::shape_mismatch: return "ShapeMismatch";
    case ErrorCode::bad_manifest: return "BadManifest";
    case ErrorCode::non_finite: return "NonFinite";
    case ErrorCode::empty_calibration: return "EmptyCalibration";
    case ErrorCode::not_positive_definite: return "NotPositiveDefinite";
    case ErrorCode::dead_index: return "DeadIndex";
    case ErrorCode::singular_pivot: return "SingularPivot";
    case ErrorCode::invalid_argument: return "InvalidArgument";
    case ErrorCode::mixed_grids: return "MixedGrids";
    case ErrorCode::bad_config: return "BadConfig";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and the harness's run isolation) can branch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace fastobq
