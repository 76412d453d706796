#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace maladv {

enum class ErrorCode {
  invalid_config,
  invalid_token,
  shape,
  empty_dataset,
  divergence,
  not_a_pe,
  truncated_file,
  bounds,
  malformed_sections,
  not_attackable,
  no_donor,
  no_slack,
  empty_candidates,
  empty_outcomes,
  incompatible_checkpoint,
  corrupt_checkpoint,
  manifest_format,
  duplicate_path,
  digest_mismatch,
  incompatible_models,
  report_format,
  io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_config: return "invalid-config";
    case ErrorCode::invalid_token: return "invalid-token";
    case ErrorCode::shape: return "shape";
    case ErrorCode::empty_dataset: return "empty-dataset";
    case ErrorCode::divergence: return "divergence";
    case ErrorCode::not_a_pe: return "not-a-pe";
    case ErrorCode::truncated_file: return "truncated-file";
    case ErrorCode::bounds: return "bounds";
    case ErrorCode::malformed_sections: return "malformed-sections";
    case ErrorCode::not_attackable: return "not-attackable";
    case ErrorCode::no_donor: return "no-donor";
    case ErrorCode::no_slack: return "no-slack";
    case ErrorCode::empty_candidates: return "empty-candidates";
    case ErrorCode::empty_outcomes: return "empty-outcomes";
    case ErrorCode::incompatible_checkpoint: return "incompatible-checkpoint";
    case ErrorCode::corrupt_checkpoint: return "corrupt-checkpoint";
    case ErrorCode::manifest_format: return "manifest-format";
    case ErrorCode::duplicate_path: return "duplicate-path";
    case ErrorCode::digest_mismatch: return "digest-mismatch";
    case ErrorCode::incompatible_models: return "incompatible-models";
    case ErrorCode::report_format: return "report-format";
    case ErrorCode::io: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace maladv
