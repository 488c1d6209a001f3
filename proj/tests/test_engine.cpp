// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <map>

#include "idxshare/engine.hpp"
#include "idxshare/random.hpp"
#include "test_util.hpp"

using namespace idxshare;
using namespace idxshare::testing;

namespace {

// Forward that keeps every F layer's indices in a map and looks up S layers by
// source_layer, with attention as dense softmax under an index mask.
Tensor substitution_oracle(const Model& m, const std::vector<int>& tokens, const Pattern& p) {
  NoGradGuard g;
  std::map<std::size_t, TopKIndexSet> by_layer;
  auto h = embed(m, tokens);
  for (std::size_t l = 1; l <= m.n_layers(); ++l) {
    const auto& layer = m.layer(l - 1);
    auto x = attention_input(layer, h);
    if (p.is_full(l)) by_layer[l] = topk_select(indexer_forward(layer, x), m.config().top_k);
    const auto& idx = by_layer.at(p.is_full(l) ? l : source_layer(p, l));
    const auto mask = index_mask(idx);
    const double sc = 1.0 / std::sqrt(static_cast<double>(m.config().d_head()));
    Tensor attn;
    for (const auto& head : layer.heads) {
      auto w = softmax_rows(scale(matmul(matmul(x, head.wq), transpose(matmul(x, head.wk))), sc), mask);
      auto o = matmul(matmul(w, matmul(x, head.wv)), head.wo);
      attn = attn.defined() ? add(attn, o) : o;
    }
    h = add(h, attn);
    h = add(h, feed_forward(layer, h));
  }
  return output_logits(m, h);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double w = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) w = std::max(w, std::abs(a.data()[i] - b.data()[i]));
  return w;
}

Pattern random_pattern(std::size_t n, std::mt19937_64& rng) {
  std::bernoulli_distribution full(0.4);
  std::vector<LayerRole> roles(n, LayerRole::shared);
  roles[0] = LayerRole::full;
  for (std::size_t i = 1; i < n; ++i) roles[i] = full(rng) ? LayerRole::full : LayerRole::shared;
  return Pattern(roles);
}

}  // namespace

TEST_CASE("all-F pattern reproduces the standard per-layer forward") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Model m(toy_config(4, seed));
    auto rng = seeded_stream(seed, "tokens");
    auto tokens = random_tokens(12, 8, rng);
    auto ref = model_forward(m, tokens, AttentionMode::sparse);
    auto got = forward_with_pattern(m, tokens, Pattern::all_full(4));
    CHECK(max_abs_diff(ref.logits, got.logits) <= 1e-12);
    CHECK(got.indices == ref.indices);
    CHECK(got.macs.indexer_macs == ref.macs.indexer_macs);
    CHECK(got.macs.core_macs == ref.macs.core_macs);
  }
}

TEST_CASE("shared layers reuse exactly their source layer's indices") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto rng = seeded_stream(seed, "patterns");
    const std::size_t n = 4 + seed % 5;
    Model m(toy_config(n, seed));
    auto tokens = random_tokens(12, 8, rng);
    auto p = random_pattern(n, rng);
    CAPTURE(p.str());
    auto r = forward_with_pattern(m, tokens, p);
    CHECK(max_abs_diff(r.logits, substitution_oracle(m, tokens, p)) <= 1e-12);
    CHECK(r.peak_index_buffers == 1);
    CHECK(r.macs.indexer_calls == p.full_count());
    for (std::size_t l = 2; l <= n; ++l)
      if (!p.is_full(l)) CHECK(r.indices[l - 1] == r.indices[source_layer(p, l) - 1]);
  }
}

TEST_CASE("engine rejects mismatched patterns and unfilled buffers") {
  Model m(toy_config(4));
  std::vector<int> tokens{1, 2, 3};
  CHECK_THROWS_AS(forward_with_pattern(m, tokens, Pattern::all_full(5)), PatternError);
  BufferLedger ledger;
  {
    IndexCacheBuffer b(ledger);
    CHECK(ledger.live == 1);
    CHECK_THROWS_AS(b.load(), std::logic_error);
  }
  CHECK(ledger.live == 0);
  CHECK(ledger.peak == 1);
}

TEST_CASE("recorded attention rows are distributions over the index set") {
  Model m(toy_config(4, 3));
  auto rng = seeded_stream(3, "tokens");
  auto tokens = random_tokens(10, 8, rng);
  auto r = forward_with_pattern(m, tokens, parse_pattern("FSFS"), {.record_attention = true});
  REQUIRE(r.attention.size() == 4);
  for (std::size_t l = 0; l < 4; ++l)
    for (std::size_t t = 0; t < 10; ++t) {
      double total = 0, outside = 0;
      const auto& row = r.indices[l].rows[t];
      for (std::size_t s = 0; s < 10; ++s) {
        const double v = r.attention[l].at(t, s);
        total += v;
        if (std::find(row.begin(), row.end(), s) == row.end()) outside += std::abs(v);
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(outside == 0.0);
    }
}
