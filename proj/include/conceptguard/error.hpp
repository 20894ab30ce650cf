// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace cg {

/// Error classes surfaced by every module. The CLI maps these onto exit codes.
enum class ErrorKind {
    Reject,
    Format,
    Corrupt,
    Validation,
    Config,
    Shape,
    Degenerate,
    Numeric,
    Range,
    Calibration,
    Io,
    LocalizationUndefined,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message);

    ErrorKind kind() const noexcept { return kind_; }
    /// Message without the kind prefix.
    const std::string& detail() const noexcept { return detail_; }

private:
    ErrorKind kind_;
    std::string detail_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

}  // namespace cg
