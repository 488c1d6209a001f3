// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0
//
// Indexer distillation and the training schedule:
//   dense   - optional LM pre-training with full attention (produces the
//             starting model whose attention the indexers imitate)
//   warm-up - only F-layer indexers train, against the dense attention of
//             every layer they serve; all other weights stay frozen
//   sparse  - the pattern forward is active; LM loss trains the network and
//             a restricted multi-layer KL trains the indexers on a detached
//             graph

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "idxshare/data.hpp"
#include "idxshare/model.hpp"
#include "idxshare/pattern.hpp"

namespace idxshare {

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An F layer and the S layers that reuse its indices (source first).
struct ServedGroup {
  std::size_t source = 0;           // 1-based F layer
  std::vector<std::size_t> layers;  // source, source+1, ..., source+m
  std::size_t served_shared() const { return layers.size() - 1; }
};

std::vector<ServedGroup> served_groups(const Pattern& pattern);

// ---- losses ------------------------------------------------------------------

// sum_s p(s) log(p(s)/q(s)) over the support of p.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// sum_t KL(p_t || q_t) with q given as row-wise log-probabilities (L x L,
// differentiable). Rows of p must sum to 1 within 1e-6, as must exp(log_q).
Tensor distill_kl(const CausalDistribution& p, const Tensor& log_q);

// sum_j 1/(m+1) sum_t KL(p^(j)_t || q_t) over the group's targets.
Tensor multi_layer_distill_loss(std::span<const CausalDistribution> targets, const Tensor& log_q);

// sum_t KL(pbar_t || q_t), pbar the mean of the targets.
Tensor averaged_target_loss(std::span<const CausalDistribution> targets, const Tensor& log_q);

CausalDistribution average_distribution(std::span<const CausalDistribution> targets);

// Log-probabilities of the indexer softmax over each row's causal prefix.
Tensor indexer_log_probs(const Tensor& scores);
// Same, restricted to (and renormalized over) each row's index set.
Tensor restricted_log_probs(const Tensor& scores, const TopKIndexSet& indices);

// Differentiates both losses w.r.t. the layer's indexer parameters on input
// x and returns max_i |g_multi - g_avg| / max(|g_multi|, |g_avg|, 1e-300).
double check_gradient_equivalence(std::span<const CausalDistribution> targets, const LayerParameters& layer,
                                  const Tensor& x);

// ---- optimizer -----------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config);
  void zero_grad();
  // Parameters without an accumulated gradient are left untouched.
  void step();
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

// ---- schedule -----------------------------------------------------------------

struct TrainConfig {
  explicit TrainConfig(Pattern p) : pattern(std::move(p)) {}

  std::size_t dense_steps = 0;
  std::size_t warmup_steps = 0;
  std::size_t sparse_steps = 0;
  std::size_t batch_size = 8;
  double lr_dense = 3e-3;
  double lr_warmup = 3e-3;
  double lr_sparse = 1e-3;
  double lm_weight = 1.0;
  double distill_weight = 1.0;
  Pattern pattern;
  // false keeps only each F layer's own term (standard per-layer distillation).
  bool use_cross_layer_loss = true;
  std::uint64_t seed = 0;

  void validate(std::size_t n_layers) const;
};

struct TrainLogRow {
  std::string phase;
  std::size_t step = 0;
  double lm_loss = 0.0;
  std::vector<double> distill;  // per served group, batch mean
};

struct TrainLog {
  std::vector<ServedGroup> groups;
  std::vector<TrainLogRow> rows;
};

// Each phase draws its batches from its own named sub-stream of config.seed.
TrainLog dense_phase(Model& model, const Dataset& data, const TrainConfig& config);
TrainLog warmup_phase(Model& model, const Dataset& data, const TrainConfig& config);
TrainLog sparse_phase(Model& model, const Dataset& data, const TrainConfig& config);
// dense -> warm-up -> sparse.
TrainLog train(Model& model, const Dataset& data, const TrainConfig& config);

void write_train_log(const std::string& path, const TrainLog& log);

// Mean copy-task accuracy of the pattern forward over `sequences`.
double copy_accuracy(const Model& model, std::span<const std::vector<int>> sequences, const Pattern& pattern);

}  // namespace idxshare
