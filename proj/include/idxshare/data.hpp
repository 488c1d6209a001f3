// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0
//
// Seeded synthetic sequences with a planted long-range copy dependency.
//
// A copy-task record of length L (even) is L/2 uniformly random tokens
// followed by an exact copy of them. Predicting token t in the second half
// requires attending L/2 positions back, so a top-k selection that misses the
// source position loses the answer.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "idxshare/tensor.hpp"

namespace idxshare {

struct CopyTaskConfig {
  std::size_t length = 256;
  std::size_t vocab_size = 256;
  void validate() const;
};

struct Dataset {
  std::string task = "copy";
  std::size_t length = 0;
  std::size_t vocab_size = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<int>> sequences;
};

inline constexpr int kDatasetVersion = 1;

// Draws from the "data" sub-stream of `seed`.
Dataset generate_copy_dataset(const CopyTaskConfig& task, std::size_t count, std::uint64_t seed);

// Recovers the planted source span of a record; throws std::invalid_argument
// if the second half is not a copy of the first.
std::vector<int> decode_copy_answers(std::span<const int> sequence);

// Fraction of copy-half positions whose argmax next-token prediction is
// correct. logits is L x vocab for `tokens`.
double copy_task_accuracy(const Tensor& logits, std::span<const int> tokens);

// Text format: two header comment lines then one record per line of
// space-separated token ids.
void write_dataset(const std::string& path, const Dataset& data);
Dataset read_dataset(const std::string& path);

}  // namespace idxshare
