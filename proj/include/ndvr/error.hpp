#pragma once

#include <stdexcept>
#include <string>

namespace ndvr {

enum class ErrorCode {
  kFormat,          // bad magic or version
  kCorruption,      // truncated or inconsistent container
  kValidation,      // non-finite values, mismatched frame dimensions
  kDimension,       // operand sizes disagree
  kIo,              // sink/source failure
  kEmptyVideo,
  kDegenerateDescriptor,
  kDegenerateSample,
  kRankDeficiency,
  kSingularity,
  kEmptySignature,
  kParameter,
  kMapping,
  kUndefinedRecall,
  kState,
  kOrdering,
  kStale,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kFormat: return "format error";
    case ErrorCode::kCorruption: return "corruption error";
    case ErrorCode::kValidation: return "validation error";
    case ErrorCode::kDimension: return "dimension error";
    case ErrorCode::kIo: return "I/O error";
    case ErrorCode::kEmptyVideo: return "empty-video error";
    case ErrorCode::kDegenerateDescriptor: return "degenerate-descriptor error";
    case ErrorCode::kDegenerateSample: return "degenerate-sample error";
    case ErrorCode::kRankDeficiency: return "rank-deficiency error";
    case ErrorCode::kSingularity: return "singularity error";
    case ErrorCode::kEmptySignature: return "empty-signature error";
    case ErrorCode::kParameter: return "parameter error";
    case ErrorCode::kMapping: return "mapping error";
    case ErrorCode::kUndefinedRecall: return "undefined-recall error";
    case ErrorCode::kState: return "state error";
    case ErrorCode::kOrdering: return "ordering error";
    case ErrorCode::kStale: return "stale-artifact error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace ndvr
