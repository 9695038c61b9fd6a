#include "cadenza/core/error.hpp"

namespace cadenza {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedMarker: return "MalformedMarker";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::DegenerateFrame: return "DegenerateFrame";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::TooLong: return "TooLong";
    case ErrorCode::ConfigMismatch: return "ConfigMismatch";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::GroupTooSmall: return "GroupTooSmall";
    case ErrorCode::CapacityExceeded: return "CapacityExceeded";
    case ErrorCode::SessionExhausted: return "SessionExhausted";
    case ErrorCode::BatchMismatch: return "BatchMismatch";
    case ErrorCode::BadCheckpoint: return "BadCheckpoint";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::MissingPrerequisite: return "MissingPrerequisite";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace cadenza
