// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>

namespace cg {

/// Lowercase hex SHA-256 of a byte buffer.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& bytes);

/// SHA-256 of a file's contents. Throws Error(Io) if unreadable.
std::string sha256_file(const std::string& path);

}  // namespace cg
