// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0
//
// Pattern-driven forward pass with cross-layer index reuse. F layers run the
// indexer and overwrite the single index buffer; S layers read the buffer and
// skip the indexer. Core attention and FFN run identically at every layer.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "idxshare/model.hpp"
#include "idxshare/pattern.hpp"

namespace idxshare {

// Tracks live index buffers across one forward invocation.
struct BufferLedger {
  int live = 0;
  int peak = 0;
};

// Holds exactly one layer's index set; overwritten at each F layer.
class IndexCacheBuffer {
 public:
  explicit IndexCacheBuffer(BufferLedger& ledger);
  ~IndexCacheBuffer();
  IndexCacheBuffer(const IndexCacheBuffer&) = delete;
  IndexCacheBuffer& operator=(const IndexCacheBuffer&) = delete;

  void store(TopKIndexSet indices) { indices_ = std::move(indices); filled_ = true; }
  const TopKIndexSet& load() const;
  bool filled() const { return filled_; }

 private:
  BufferLedger& ledger_;
  TopKIndexSet indices_;
  bool filled_ = false;
};

struct EngineOptions {
  // Per-layer effective index sets; costs O(N * L * k) memory.
  bool record_indices = true;
  // Head-averaged attention weights over each layer's index set.
  bool record_attention = false;
  // Keep F-layer indexer score tensors (graph-attached, for distillation).
  bool keep_scores = false;
  bool detach_indexer_input = true;
};

struct EngineResult {
  Tensor logits;
  std::vector<TopKIndexSet> indices;          // per layer, when recorded
  std::vector<IndexerScores> scores;          // per layer; undefined for S layers
  std::vector<CausalDistribution> attention;  // per layer, when recorded
  MacCounter macs;
  int peak_index_buffers = 0;
};

EngineResult forward_with_pattern(const Model& model, std::span<const int> tokens, const Pattern& pattern,
                                  const EngineOptions& options = {});

}  // namespace idxshare
