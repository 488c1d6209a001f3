// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training-free pattern discovery over frozen weights.
//
// greedy_search starts from all-F and, K times, commits the single F->S flip
// (layer 1 excluded) with the lowest calibration loss. The blocked variant
// splits layers into P contiguous blocks whose first layers stay F and, within
// each step, commits the best flip of every block in order. dp_similarity_search
// maximizes the summed reuse similarity exactly.

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "idxshare/data.hpp"
#include "idxshare/model.hpp"
#include "idxshare/pattern.hpp"

namespace idxshare {

// Fixed mini-batches; every candidate is scored on exactly these sequences.
struct CalibrationSet {
  std::vector<std::vector<std::vector<int>>> batches;
  std::size_t sequence_count() const;
};

// Takes batches * batch_size sequences from the front of `data`, in order.
CalibrationSet make_calibration_set(const Dataset& data, std::size_t batches, std::size_t batch_size);

// Mean next-token cross-entropy over every predicted token of every batch
// under the pattern forward.
double eval_loss(const Model& model, const CalibrationSet& calib, const Pattern& pattern);

using PatternLoss = std::function<double(const Pattern&)>;

struct SearchStep {
  std::size_t step = 0;   // 1-based; repeated for each block in blocked mode
  std::size_t layer = 0;  // layer flipped to S
  double loss = 0.0;      // loss of the committed pattern
  Pattern pattern;
};

struct SearchResult {
  Pattern pattern;
  std::vector<SearchStep> trace;
  std::size_t evaluations = 0;  // loss function calls
};

// Requires 0 <= target_shared <= n_layers - 1. Ties go to the lower layer.
SearchResult greedy_search(std::size_t n_layers, std::size_t target_shared, const PatternLoss& loss);
SearchResult greedy_search(const Model& model, const CalibrationSet& calib, std::size_t target_shared);

// First layer of each block; block b starts at 1 + floor(b * n_layers / blocks).
std::vector<std::size_t> block_starts(std::size_t n_layers, std::size_t blocks);

// Requires 1 <= blocks <= n_layers and target_shared <= n_layers - blocks.
SearchResult greedy_search_blocked(std::size_t n_layers, std::size_t target_shared, std::size_t blocks,
                                   const PatternLoss& loss);
SearchResult greedy_search_blocked(const Model& model, const CalibrationSet& calib, std::size_t target_shared,
                                   std::size_t blocks);

// Loss calls the blocked search makes. Block b has c_b = size_b - 1
// candidates; each step visits blocks in order, and a block with budget left
// costs its remaining candidate count then loses one candidate. With equal
// blocks of c candidates and K = s * P this is P * sum_{i<s} (c - i).
std::size_t blocked_evaluation_count(std::size_t n_layers, std::size_t target_shared, std::size_t blocks);

// Lower-triangular reuse scores: at(i, j) for 1 <= j < i <= n is how well
// layer j's indices stand in for layer i's own.
struct SimilarityMatrix {
  std::size_t n = 0;
  std::vector<double> values;  // n x n row-major, 0-based storage
  double at(std::size_t i, std::size_t j) const { return values[(i - 1) * n + (j - 1)]; }
  double& at(std::size_t i, std::size_t j) { return values[(i - 1) * n + (j - 1)]; }
};

// Sum over S layers of S[l][src(l)], accumulated in ascending layer order.
double similarity_objective(const SimilarityMatrix& s, const Pattern& pattern);

// Exact maximizer over patterns with `keep_full` F layers (layer 1 forced F).
Pattern dp_similarity_search(const SimilarityMatrix& s, std::size_t keep_full);

enum class Goal { minimize, maximize };

// Enumerates every pattern with `keep_full` F layers; guarded at 1e6 patterns.
// Ties keep the first pattern in lexicographic order of F positions.
Pattern brute_force_pattern_search(std::size_t n_layers, std::size_t keep_full,
                                   const PatternLoss& objective, Goal goal);

void write_search_trace(const std::string& path, const SearchResult& result);

}  // namespace idxshare
