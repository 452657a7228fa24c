#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gfv {

enum class ErrorCode {
  FileNotFound,
  UnsupportedFormat,
  CorruptImage,
  InvalidDimensions,
  InvalidBlockSize,
  RegionMismatch,
  OutOfBounds,
  DegenerateCopy,
  EmptyCorpus,
  UnknownCountryDirectory,
  NoCandidateZones,
  StratumTooSmall,
  InsufficientDocuments,
  InvalidArgument,
  ShapeMismatch,
  LengthMismatch,
  EmptyTrainingSet,
  DivergenceDetected,
  FingerprintMismatch,
  CorruptCheckpoint,
  EmptyList,
  UnknownCountry,
  IoError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::FileNotFound: return "FileNotFound";
    case ErrorCode::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorCode::CorruptImage: return "CorruptImage";
    case ErrorCode::InvalidDimensions: return "InvalidDimensions";
    case ErrorCode::InvalidBlockSize: return "InvalidBlockSize";
    case ErrorCode::RegionMismatch: return "RegionMismatch";
    case ErrorCode::OutOfBounds: return "OutOfBounds";
    case ErrorCode::DegenerateCopy: return "DegenerateCopy";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::UnknownCountryDirectory: return "UnknownCountryDirectory";
    case ErrorCode::NoCandidateZones: return "NoCandidateZones";
    case ErrorCode::StratumTooSmall: return "StratumTooSmall";
    case ErrorCode::InsufficientDocuments: return "InsufficientDocuments";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::EmptyTrainingSet: return "EmptyTrainingSet";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::FingerprintMismatch: return "FingerprintMismatch";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::EmptyList: return "EmptyList";
    case ErrorCode::UnknownCountry: return "UnknownCountry";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

// Every failure raised by the library carries a machine-readable code; the
// CLI prints it verbatim so scripts can branch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace gfv
