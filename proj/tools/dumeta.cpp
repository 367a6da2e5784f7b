// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "dumeta/cli.hpp"

int main(int argc, char** argv) { return dumeta::cli::run_cli(argc, argv, std::cout, std::cerr); }
