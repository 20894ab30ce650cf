// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

#include "conceptguard/cli.hpp"

int main(int argc, char** argv) { return cg::cli::main(argc, argv); }
