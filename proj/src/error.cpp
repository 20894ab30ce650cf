// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#include "conceptguard/error.hpp"

namespace cg {

const char* to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Reject: return "REJECT";
    case ErrorKind::Format: return "FORMAT";
    case ErrorKind::Corrupt: return "CORRUPT";
    case ErrorKind::Validation: return "VALIDATION";
    case ErrorKind::Config: return "CONFIG";
    case ErrorKind::Shape: return "SHAPE";
    case ErrorKind::Degenerate: return "DEGENERATE";
    case ErrorKind::Numeric: return "NUMERIC";
    case ErrorKind::Range: return "RANGE";
    case ErrorKind::Calibration: return "CALIBRATION";
    case ErrorKind::Io: return "IO";
    case ErrorKind::LocalizationUndefined: return "LOCALIZATION_UNDEFINED";
    }
    return "UNKNOWN";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind), detail_(message) {}

void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

}  // namespace cg
