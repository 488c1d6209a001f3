// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include "idxshare/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return idxshare::cli::run(args, std::cout, std::cerr);
}
