// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0
//
// Cross-layer diagnostics (index overlap, reuse similarity) and the
// analytical MAC model.

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "idxshare/model.hpp"
#include "idxshare/pattern.hpp"
#include "idxshare/search.hpp"

namespace idxshare {

// Mean pairwise top-k overlap; symmetric with unit diagonal.
struct OverlapMatrix {
  std::size_t n = 0;
  std::size_t k = 0;
  std::size_t samples = 0;
  std::vector<double> values;  // n x n, 0-based
  double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }
};

// records[sample][layer]. Entry (i, j) averages |T_i,t ∩ T_j,t| / |T_t| over
// samples and positions. Sets at the same position must have equal size.
OverlapMatrix overlap_matrix(std::span<const std::vector<TopKIndexSet>> records, std::size_t k);

// Per-layer index sets of the standard all-F forward, one entry per sample.
std::vector<std::vector<TopKIndexSet>> record_indices(const Model& model, std::span<const std::vector<int>> samples);

// Overlap of two independent uniform k-subsets of t positions.
struct NullOverlap {
  double mean = 0.0;
  double std_error = 0.0;
  double expected = 0.0;  // k / t
  std::size_t trials = 0;
};
NullOverlap random_overlap_null(std::size_t t, std::size_t k, std::size_t trials, std::mt19937_64& rng);

struct SimilarityReport {
  SimilarityMatrix matrix;
  std::size_t samples = 0;
  std::size_t k = 0;
  std::size_t zero_norm = 0;  // cosine pairs with a zero vector, counted as 0
};

// Cosine of layer i's attention output with its own indices vs. with layer
// j's, per position, layer inputs fixed at the all-F forward. Mean over
// positions and samples; the diagonal is 1 and the upper triangle 0.
SimilarityReport similarity_matrix(const Model& model, std::span<const std::vector<int>> samples);

// Row-mean cosine similarity between two L x d outputs.
double mean_row_cosine(const Tensor& a, const Tensor& b, std::size_t* zero_norm = nullptr);

struct CostReport {
  std::size_t n_layers = 0;
  std::size_t full_layers = 0;
  std::size_t length = 0;
  std::uint64_t indexer_macs = 0;
  std::uint64_t core_macs = 0;
  std::uint64_t baseline_indexer_macs = 0;  // all-F
  std::uint64_t baseline_core_macs = 0;
  std::uint64_t indexer_calls = 0;
  double indexer_reduction = 0.0;  // 1 - indexer / baseline
  double total_reduction = 0.0;    // over indexer + core
  std::string pattern;
};

CostReport cost_model(const ModelConfig& config, const Pattern& pattern, std::size_t length);

void write_overlap_csv(const std::string& path, const OverlapMatrix& m);
void write_similarity_csv(const std::string& path, const SimilarityReport& s);
SimilarityMatrix read_similarity_csv(const std::string& path);
std::string format_cost_report(const CostReport& c);

}  // namespace idxshare
