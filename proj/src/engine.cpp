// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0

#include "idxshare/engine.hpp"

#include <algorithm>
#include <stdexcept>

namespace idxshare {

IndexCacheBuffer::IndexCacheBuffer(BufferLedger& ledger) : ledger_(ledger) {
  ++ledger_.live;
  ledger_.peak = std::max(ledger_.peak, ledger_.live);
}

IndexCacheBuffer::~IndexCacheBuffer() { --ledger_.live; }

const TopKIndexSet& IndexCacheBuffer::load() const {
  if (!filled_) throw std::logic_error("index buffer read before any F layer wrote it");
  return indices_;
}

EngineResult forward_with_pattern(const Model& model, std::span<const int> tokens, const Pattern& pattern,
                                  const EngineOptions& options) {
  if (pattern.size() != model.n_layers()) {
    throw PatternError("pattern: wrong length " + std::to_string(pattern.size()) + ", model has " +
                       std::to_string(model.n_layers()) + " layers");
  }
  EngineResult r;
  BufferLedger ledger;
  {
    IndexCacheBuffer cache(ledger);
    auto h = embed(model, tokens);
    if (options.keep_scores) r.scores.resize(model.n_layers());
    for (std::size_t l = 0; l < model.n_layers(); ++l) {
      const auto& layer = model.layer(l);
      auto x = attention_input(layer, h);
      if (pattern.is_full(l + 1)) {
        auto scores = indexer_forward(layer, options.detach_indexer_input ? detach(x) : x, &r.macs);
        cache.store(topk_select(scores, model.config().top_k));
        if (options.keep_scores) r.scores[l] = std::move(scores);
      }
      const auto& indices = cache.load();
      if (options.record_indices) r.indices.push_back(indices);
      CausalDistribution probs;
      auto attn = sparse_attention(layer, x, indices, options.record_attention ? &probs : nullptr, &r.macs);
      if (options.record_attention) r.attention.push_back(std::move(probs));
      h = add(h, attn);
      h = add(h, feed_forward(layer, h));
    }
    r.logits = output_logits(model, h);
  }
  r.peak_index_buffers = ledger.peak;
  return r;
}

}  // namespace idxshare
