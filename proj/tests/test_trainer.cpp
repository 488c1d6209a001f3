// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "idxshare/random.hpp"
#include "idxshare/trainer.hpp"
#include "test_util.hpp"

using namespace idxshare;
using namespace idxshare::testing;

namespace {

// Random causal distribution with some exact zeros inside the support.
CausalDistribution random_causal(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  CausalDistribution p{n, std::vector<double>(n * n, 0.0)};
  for (std::size_t t = 0; t < n; ++t) {
    double s = 0;
    for (std::size_t j = 0; j <= t; ++j) s += p.values[t * n + j] = (u(rng) < 0.2 && j != t) ? 0.0 : u(rng);
    for (std::size_t j = 0; j <= t; ++j) p.values[t * n + j] /= s;
  }
  return p;
}

std::vector<double> snapshot(const std::vector<Tensor>& ts) {
  std::vector<double> out;
  for (const auto& t : ts) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

Dataset toy_data(std::uint64_t seed) { return generate_copy_dataset({8, 8}, 16, seed); }

}  // namespace

TEST_CASE("served groups partition the layers by source") {
  auto g = served_groups(parse_pattern("FSSFFS"));
  REQUIRE(g.size() == 3);
  CHECK(g[0].layers == std::vector<std::size_t>{1, 2, 3});
  CHECK(g[1].layers == std::vector<std::size_t>{4});
  CHECK(g[2].layers == std::vector<std::size_t>{5, 6});
  CHECK(g[0].served_shared() == 2);
}

TEST_CASE("distillation loss equals the summed row KL") {
  auto rng = seeded_stream(1, "test");
  const std::size_t n = 6;
  auto p = random_causal(n, rng);
  auto scores = random_tensor({n, n}, rng, 2.0, false);
  auto log_q = indexer_log_probs(scores);
  double ref = 0;
  for (std::size_t t = 0; t < n; ++t) {
    std::vector<double> q(n);
    for (std::size_t s = 0; s < n; ++s) q[s] = std::exp(log_q.at(t, s));
    ref += kl_divergence(p.row(t), q);
  }
  CHECK(distill_kl(p, log_q).item() == doctest::Approx(ref).epsilon(1e-12));
  std::vector<double> self(n * n);
  for (std::size_t i = 0; i < self.size(); ++i) self[i] = p.values[i] > 0 ? std::log(p.values[i]) : kMaskedLogit;
  CHECK(std::abs(distill_kl(p, Tensor::from({n, n}, self)).item()) < 1e-12);
}

TEST_CASE("distillation rejects unnormalized inputs") {
  auto rng = seeded_stream(2, "test");
  auto p = random_causal(4, rng);
  auto log_q = indexer_log_probs(random_tensor({4, 4}, rng, 1.0, false));
  auto bad = p;
  bad.values[5] += 1e-3;
  CHECK_THROWS_AS(distill_kl(bad, log_q), std::invalid_argument);
  CHECK_THROWS_AS(distill_kl(p, add_scalar(log_q, 1e-3)), std::invalid_argument);
}

TEST_CASE("distillation gradient matches central differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto rng = seeded_stream(seed, "kl-fd");
    Model m(toy_config(2, seed));
    auto x = random_tensor({5, 8}, rng, 1.0, false);
    std::vector<CausalDistribution> targets{random_causal(5, rng), random_causal(5, rng)};
    const auto& layer = m.layer(0);
    auto r = finite_difference_check(
        [&] { return multi_layer_distill_loss(targets, indexer_log_probs(indexer_score_tensor(layer, x))); },
        m.indexer_parameters(0));
    INFO(r.first_failure);
    CHECK(r.failures == 0);
  }
}

TEST_CASE("multi-layer and averaged-target losses share gradients") {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    auto rng = seeded_stream(seed, "equivalence");
    Model m(toy_config(2, seed));
    const std::size_t n = 6, group = 1 + seed % 4;
    auto x = random_tensor({n, 8}, rng, 1.0, false);
    std::vector<CausalDistribution> targets;
    for (std::size_t j = 0; j < group; ++j) targets.push_back(random_causal(n, rng));
    CHECK(check_gradient_equivalence(targets, m.layer(0), x) < 1e-9);
    auto lq = indexer_log_probs(indexer_score_tensor(m.layer(0), x));
    // The two losses differ by a parameter-free constant (Jensen gap >= 0).
    CHECK(multi_layer_distill_loss(targets, lq).item() >= averaged_target_loss(targets, lq).item() - 1e-12);
  }
}

TEST_CASE("Adam first step moves each weight by about lr against its gradient") {
  auto w = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  Adam opt({w}, {.lr = 0.1});
  sum(mul(w, Tensor::from({3}, {2.0, -3.0, 0.0}))).backward();
  opt.step();
  CHECK(w.data()[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(w.data()[1] == doctest::Approx(-1.9).epsilon(1e-6));
  CHECK(w.data()[2] == 0.5);
  auto frozen = Tensor::from({1}, {3.0}, true);
  Adam idle({frozen}, {});
  idle.step();
  CHECK(frozen.data()[0] == 3.0);
}

TEST_CASE("warm-up trains only the retained indexers") {
  Model m(toy_config(4, 1));
  TrainConfig tc(parse_pattern("FSFS"));
  tc.warmup_steps = 3;
  tc.batch_size = 2;
  const auto rest = snapshot(m.non_indexer_parameters());
  const auto idx_s = snapshot(m.indexer_parameters(1));
  const auto idx_f = snapshot(m.indexer_parameters(0));
  auto log = warmup_phase(m, toy_data(1), tc);
  CHECK(log.rows.size() == 3);
  CHECK(snapshot(m.non_indexer_parameters()) == rest);
  CHECK(snapshot(m.indexer_parameters(1)) == idx_s);
  CHECK(snapshot(m.indexer_parameters(0)) != idx_f);
}

TEST_CASE("sparse phase leaves shared-layer indexers alone and is deterministic") {
  auto run = [](bool cross) {
    Model m(toy_config(4, 2));
    TrainConfig tc(parse_pattern("FSFS"));
    tc.dense_steps = 2;
    tc.warmup_steps = 2;
    tc.sparse_steps = 3;
    tc.batch_size = 2;
    tc.seed = 5;
    tc.use_cross_layer_loss = cross;
    const auto idx_s = snapshot(m.indexer_parameters(3));
    auto log = train(m, toy_data(2), tc);
    CHECK(snapshot(m.indexer_parameters(3)) == idx_s);
    CHECK(log.rows.size() == 7);
    for (const auto& r : log.rows) CHECK(std::isfinite(r.lm_loss));
    auto all = m.non_indexer_parameters();
    for (auto& t : m.indexer_parameters()) all.push_back(t);
    return snapshot(all);
  };
  CHECK(run(true) == run(true));
  CHECK(run(true) != run(false));
}

TEST_CASE("non-finite losses abort with a numerical error") {
  Model m(toy_config(4, 3));
  m.lm_head.mutable_data()[0] = std::nan("");
  TrainConfig tc(Pattern::all_full(4));
  tc.dense_steps = 1;
  CHECK_THROWS_AS(dense_phase(m, toy_data(3), tc), NumericalError);
}

TEST_CASE("training log is CSV with one distillation column per group") {
  TrainLog log{served_groups(parse_pattern("FSF")), {{"warmup", 0, 1.5, {0.25, 0.5}}}};
  const auto path = (std::filesystem::temp_directory_path() / "idxshare_log.csv").string();
  write_train_log(path, log);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "phase,step,lm_loss,distill_g1,distill_g3");
  CHECK(row == "warmup,0,1.5,0.25,0.5");
  std::filesystem::remove(path);
}

TEST_CASE("two-layer group against a uniform indexer row") {
  // L = 2: row 0 is a point mass, row 1 carries the example distributions.
  CausalDistribution a{2, {1.0, 0.0, 0.8, 0.2}}, b{2, {1.0, 0.0, 0.2, 0.8}};
  auto log_q = indexer_log_probs(Tensor::from({2, 2}, {0.0, 0.0, 0.0, 0.0}));
  const double kl = 0.8 * std::log(0.8 / 0.5) + 0.2 * std::log(0.2 / 0.5);
  std::vector<CausalDistribution> group{a, b};
  CHECK(multi_layer_distill_loss(group, log_q).item() == doctest::Approx(kl).epsilon(1e-12));
  CHECK(std::abs(averaged_target_loss(group, log_q).item()) < 1e-15);
  std::vector<CausalDistribution> single{a};
  CHECK(multi_layer_distill_loss(single, log_q).item() == averaged_target_loss(single, log_q).item());
}

TEST_CASE("warm-up with zero steps changes nothing and longer warm-up lowers the loss") {
  Model m(toy_config(4, 4));
  TrainConfig tc(parse_pattern("FSFS"));
  tc.batch_size = 4;
  auto all = m.non_indexer_parameters();
  for (auto& t : m.indexer_parameters()) all.push_back(t);
  const auto before = snapshot(all);
  CHECK(warmup_phase(m, toy_data(4), tc).rows.empty());
  CHECK(snapshot(all) == before);

  tc.warmup_steps = 200;
  auto log = warmup_phase(m, toy_data(4), tc);
  auto window = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 20; ++i)
      for (double d : log.rows[i].distill) s += d;
    return s;
  };
  CHECK(window(180) < window(0));
}

TEST_CASE("LM loss sends no gradient into the indexers") {
  Model m(toy_config(4, 5));
  auto rng = seeded_stream(5, "tokens");
  auto tokens = random_tokens(12, 8, rng);
  lm_loss(model_forward(m, tokens, AttentionMode::sparse).logits, tokens).backward();
  for (const auto& t : m.indexer_parameters()) CHECK_FALSE(t.has_grad());
  bool any = false;
  for (const auto& t : m.non_indexer_parameters()) any = any || t.has_grad();
  CHECK(any);

  // With the distillation weight at zero the sparse phase leaves indexers bit-identical.
  TrainConfig tc(parse_pattern("FSFS"));
  tc.sparse_steps = 3;
  tc.batch_size = 2;
  tc.distill_weight = 0.0;
  const auto idx = snapshot(m.indexer_parameters());
  sparse_phase(m, toy_data(5), tc);
  CHECK(snapshot(m.indexer_parameters()) == idx);
}

TEST_CASE("sparse phase lowers the LM loss") {
  Model m(toy_config(4, 6));
  TrainConfig tc(parse_pattern("FSFS"));
  tc.sparse_steps = 200;
  tc.batch_size = 4;
  auto log = sparse_phase(m, toy_data(6), tc);
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    head += log.rows[i].lm_loss;
    tail += log.rows[180 + i].lm_loss;
  }
  CHECK(tail < head);
}
