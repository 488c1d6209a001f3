// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "idxshare/analysis.hpp"
#include "idxshare/engine.hpp"
#include "idxshare/random.hpp"
#include "test_util.hpp"

using namespace idxshare;
using namespace idxshare::testing;

namespace {

TopKIndexSet full_prefix(std::size_t n) {
  TopKIndexSet s;
  for (std::size_t t = 0; t < n; ++t) {
    s.rows.emplace_back();
    for (std::size_t j = 0; j <= t; ++j) s.rows.back().push_back(j);
  }
  return s;
}

void check_overlap_invariants(const OverlapMatrix& m) {
  for (std::size_t i = 0; i < m.n; ++i) {
    CHECK(m.at(i, i) == 1.0);
    for (std::size_t j = 0; j < m.n; ++j) {
      CHECK(m.at(i, j) == m.at(j, i));
      CHECK(m.at(i, j) >= 0.0);
      CHECK(m.at(i, j) <= 1.0);
    }
  }
}

}  // namespace

TEST_CASE("overlap of identical and disjoint sets") {
  TopKIndexSet a{{{0, 1}, {4, 5}}}, b{{{2, 3}, {6, 7}}};
  std::vector<std::vector<TopKIndexSet>> rec{{a, a, b}};
  auto m = overlap_matrix(rec, 2);
  CHECK(m.at(0, 1) == 1.0);
  CHECK(m.at(0, 2) == 0.0);
  check_overlap_invariants(m);
  CHECK_THROWS_AS(overlap_matrix(std::vector<std::vector<TopKIndexSet>>{}, 2), std::invalid_argument);
  TopKIndexSet c{{{0}, {4, 5}}};
  std::vector<std::vector<TopKIndexSet>> uneven{{a, c}};
  CHECK_THROWS_AS(overlap_matrix(uneven, 2), std::invalid_argument);
}

TEST_CASE("overlap matrices of model forwards satisfy the invariants") {
  Model m(toy_config(5, 2));
  auto rng = seeded_stream(2, "tokens");
  std::vector<std::vector<int>> samples;
  for (int i = 0; i < 4; ++i) samples.push_back(random_tokens(12, 8, rng));
  auto om = overlap_matrix(record_indices(m, samples), m.config().top_k);
  CHECK(om.samples == 4);
  check_overlap_invariants(om);
}

TEST_CASE("random selection overlap matches the hypergeometric mean") {
  auto rng = seeded_stream(9, "null");
  for (auto [t, k] : std::vector<std::pair<std::size_t, std::size_t>>{{64, 8}, {100, 30}, {16, 16}, {10, 1}}) {
    auto r = random_overlap_null(t, k, 4000, rng);
    CHECK(r.expected == doctest::Approx(static_cast<double>(k) / t));
    CHECK(std::abs(r.mean - r.expected) <= 3.0 * r.std_error + 1e-12);
  }
}

TEST_CASE("similarity is one for matching indices and everywhere when k >= L") {
  auto c = toy_config(4, 1);
  c.top_k = c.max_len;
  Model m(c);
  auto rng = seeded_stream(1, "tokens");
  std::vector<std::vector<int>> samples{random_tokens(10, 8, rng), random_tokens(10, 8, rng)};
  auto rep = similarity_matrix(m, samples);
  for (std::size_t i = 2; i <= 4; ++i)
    for (std::size_t j = 1; j < i; ++j) CHECK(rep.matrix.at(i, j) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rep.zero_norm == 0);
}

TEST_CASE("similarity entry agrees with a masked dense recomputation") {
  Model m(toy_config(4, 7));
  auto rng = seeded_stream(7, "tokens");
  std::vector<std::vector<int>> samples{random_tokens(12, 8, rng)};
  auto rep = similarity_matrix(m, samples);
  for (std::size_t i = 2; i <= 4; ++i)
    for (std::size_t j = 1; j < i; ++j) {
      CHECK(rep.matrix.at(i, j) >= -1.0);
      CHECK(rep.matrix.at(i, j) <= 1.0);
    }
  // Oracle for entry (3, 1).
  NoGradGuard g;
  auto base = model_forward(m, samples[0], AttentionMode::sparse, {.record_layer_inputs = true});
  const auto& layer = m.layer(2);
  const auto& x = base.layer_inputs[2];
  auto attend = [&](const TopKIndexSet& idx) {
    Tensor out;
    const double sc = 1.0 / std::sqrt(static_cast<double>(m.config().d_head()));
    for (const auto& h : layer.heads) {
      auto w = softmax_rows(scale(matmul(matmul(x, h.wq), transpose(matmul(x, h.wk))), sc), index_mask(idx));
      auto o = matmul(matmul(w, matmul(x, h.wv)), h.wo);
      out = out.defined() ? add(out, o) : o;
    }
    return out;
  };
  auto own = attend(base.indices[2]), reused = attend(base.indices[0]);
  double total = 0;
  for (std::size_t t = 0; t < own.rows(); ++t) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t c = 0; c < own.cols(); ++c) {
      dot += own.at(t, c) * reused.at(t, c);
      na += own.at(t, c) * own.at(t, c);
      nb += reused.at(t, c) * reused.at(t, c);
    }
    total += dot / std::sqrt(na * nb);
  }
  CHECK(std::abs(rep.matrix.at(3, 1) - total / own.rows()) < 1e-9);
}

TEST_CASE("zero-norm rows count as cosine zero") {
  auto a = Tensor::from({2, 2}, {0, 0, 1, 0}), b = Tensor::from({2, 2}, {1, 1, 1, 0});
  std::size_t zeros = 0;
  CHECK(mean_row_cosine(a, b, &zeros) == 0.5);
  CHECK(zeros == 1);
}

TEST_CASE("cost model matches instrumented counters exactly") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const std::size_t n = 4 + seed % 4, len = 5 + seed;
    Model m(toy_config(n, seed));
    auto rng = seeded_stream(seed, "patterns");
    std::bernoulli_distribution full(0.5);
    std::string s(n, 'S');
    s[0] = 'F';
    for (std::size_t i = 1; i < n; ++i) s[i] = full(rng) ? 'F' : 'S';
    auto p = parse_pattern(s);
    auto r = forward_with_pattern(m, random_tokens(len, 8, rng), p);
    auto c = cost_model(m.config(), p, len);
    CHECK(c.indexer_macs == r.macs.indexer_macs);
    CHECK(c.core_macs == r.macs.core_macs);
    CHECK(c.indexer_calls == r.macs.indexer_calls);
  }
}

TEST_CASE("cost reductions follow the F count") {
  ModelConfig c;
  c.n_layers = 8;
  auto all = cost_model(c, Pattern::all_full(8), 128);
  CHECK(all.indexer_reduction == 0.0);
  auto quarter = cost_model(c, parse_pattern("FSSSFSSS"), 128);
  CHECK(quarter.indexer_macs * 4 == all.indexer_macs);
  CHECK(quarter.indexer_reduction == doctest::Approx(0.75));
  CHECK(format_cost_report(quarter).find("indexer_macs = ") != std::string::npos);
}

TEST_CASE("matrix CSV round trip") {
  SimilarityReport rep;
  rep.matrix = {3, {1, 0, 0, 0.5, 1, 0, -0.25, 0.125, 1}};
  rep.samples = 2;
  rep.k = 4;
  const auto path = (std::filesystem::temp_directory_path() / "idxshare_sim.csv").string();
  write_similarity_csv(path, rep);
  auto back = read_similarity_csv(path);
  CHECK(back.n == 3);
  CHECK(back.values == rep.matrix.values);
  std::filesystem::remove(path);
}
