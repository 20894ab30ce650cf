// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

namespace cg::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitValidation = 3;
inline constexpr int kExitNumeric = 4;

/// Runs one `cg` invocation. `args` excludes the program name.
int run(const std::vector<std::string>& args);

int main(int argc, char** argv);

}  // namespace cg::cli
