// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver. Settings come from an optional flat key=value file,
// then `--set key=value` pairs, then dedicated flags, later sources winning.
// Every command writes `<command>.run.txt` with the resolved settings.

#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace idxshare::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;

inline constexpr int kReportVersion = 1;

// Flat key=value text; '#' starts a comment. Throws std::invalid_argument on
// malformed lines.
std::map<std::string, std::string> read_config_file(const std::string& path);

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace idxshare::cli
