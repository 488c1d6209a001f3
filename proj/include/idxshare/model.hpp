// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy decoder-only transformer whose attention layers follow the sparse
// attention recipe: a lightning indexer scores every preceding token, the
// top-k positions are selected, and core attention runs on that subset only.
//
// Token positions are 0-based: query t attends over positions 0..t.
// Layer numbers in names and patterns are 1-based.

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "idxshare/tensor.hpp"

namespace idxshare {

struct ModelConfig {
  std::size_t n_layers = 8;
  std::size_t max_len = 512;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_idx_heads = 2;
  std::size_t d_idx = 32;
  std::size_t top_k = 64;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 256;
  std::uint64_t seed = 0;

  std::size_t d_head() const { return d_model / n_heads; }
  // Throws std::invalid_argument naming the violated constraint.
  void validate() const;

  std::map<std::string, std::string> to_kv() const;
  static ModelConfig from_kv(const std::map<std::string, std::string>& kv);

  bool operator==(const ModelConfig&) const = default;
};

struct AttentionHead {
  Tensor wq, wk, wv;  // d_model x d_head
  Tensor wo;          // d_head x d_model
};

struct IndexerHead {
  Tensor wq, wk;  // d_model x d_idx
  Tensor gate;    // scalar w_h
};

struct LayerParameters {
  Tensor ln1_gain, ln1_bias;
  std::vector<AttentionHead> heads;
  std::vector<IndexerHead> indexer;
  Tensor ln2_gain, ln2_bias;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class Model {
 public:
  Model() = default;
  // Seeded initialization from config.seed (sub-stream "init").
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const LayerParameters& layer(std::size_t index) const { return layers_.at(index); }
  std::size_t n_layers() const { return layers_.size(); }

  // Stable, deterministic order. Tensors share storage with the model.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> indexer_parameters() const;
  std::vector<Tensor> indexer_parameters(std::size_t layer_index) const;
  std::vector<Tensor> non_indexer_parameters() const;

  // Deep copy with independent storage.
  Model clone() const;

  Tensor tok_emb, pos_emb;
  Tensor final_gain, final_bias;
  Tensor lm_head;  // d_model x vocab

 private:
  friend Model load_checkpoint(const std::string& path);
  ModelConfig config_;
  std::vector<LayerParameters> layers_;
};

// ---- per-layer building blocks -------------------------------------------

// Multiply-accumulate counters filled by the scoring and attention kernels.
struct MacCounter {
  std::uint64_t indexer_macs = 0;
  std::uint64_t core_macs = 0;
  std::uint64_t indexer_calls = 0;
};

// Raw indexer output: row t holds I_t over positions 0..t; entries s > t are
// zero and never read.
struct IndexerScores {
  Tensor values;  // L x L
  std::size_t length() const { return values.rows(); }
  double at(std::size_t t, std::size_t s) const { return values.at(t, s); }
};

// Row t lists min(k, t + 1) distinct positions in [0, t], strictly increasing.
struct TopKIndexSet {
  std::vector<std::vector<std::size_t>> rows;
  std::size_t length() const { return rows.size(); }
  // Throws std::out_of_range if any row breaks the causal/ordering contract.
  void validate(std::size_t length) const;
  bool operator==(const TopKIndexSet&) const = default;
};

// L x L row-major; row t is a probability vector supported on positions <= t.
// Used both for head-averaged attention weights and indexer distributions.
struct CausalDistribution {
  std::size_t length = 0;
  std::vector<double> values;
  std::span<const double> row(std::size_t t) const { return {values.data() + t * length, length}; }
  double at(std::size_t t, std::size_t s) const { return values[t * length + s]; }
};
using AttentionDistribution = CausalDistribution;
using IndexerDistribution = CausalDistribution;

// Constant L x L mask with 0 on s <= t and kMaskedLogit above the diagonal.
Tensor causal_mask(std::size_t length);
// Constant mask with 0 on the positions of each row of `indices`.
Tensor index_mask(const TopKIndexSet& indices);

// out[t][s] = q_t . k_s for s <= t, 0 otherwise. Counts d * L(L+1)/2 MACs.
Tensor causal_dot_scores(const Tensor& q, const Tensor& k, MacCounter* macs = nullptr);

// Differentiable I_{t,s} = sum_h w_h * relu(q_{t,h} . k_{s,h}), s <= t.
Tensor indexer_score_tensor(const LayerParameters& layer, const Tensor& x, MacCounter* macs = nullptr);
IndexerScores indexer_forward(const LayerParameters& layer, const Tensor& x, MacCounter* macs = nullptr);

// Highest scores first, ties to the lower position; rows sorted ascending.
TopKIndexSet topk_select(const IndexerScores& scores, std::size_t k);

// Single-head softmax attention restricted to `indices`:
//   out_t = sum_{s in T_t} softmax_s(scale * q_t . k_s) v_s.
// Fills `probs` (L x L, zero off-support) when non-null.
Tensor sparse_attend(const Tensor& q, const Tensor& k, const Tensor& v, const TopKIndexSet& indices,
                     double scale, std::vector<double>* probs = nullptr, MacCounter* macs = nullptr);

// Multi-head core attention over the index sets, including output projection.
// `avg_probs` receives the head-averaged weights over each T_t.
Tensor sparse_attention(const LayerParameters& layer, const Tensor& x, const TopKIndexSet& indices,
                        CausalDistribution* avg_probs = nullptr, MacCounter* macs = nullptr);

// Full causal attention through masked softmax (independent of the sparse
// kernel). `avg_probs` receives the head-averaged distribution p_t.
Tensor dense_attention(const LayerParameters& layer, const Tensor& x,
                       AttentionDistribution* avg_probs = nullptr);

// Head-averaged dense attention weights for normalized layer input x.
AttentionDistribution aggregate_attention(const LayerParameters& layer, const Tensor& x);

// Row-wise softmax over each row's causal prefix.
IndexerDistribution indexer_distribution(const IndexerScores& scores);

Tensor attention_input(const LayerParameters& layer, const Tensor& h);
Tensor feed_forward(const LayerParameters& layer, const Tensor& h);
Tensor embed(const Model& model, std::span<const int> tokens);
Tensor output_logits(const Model& model, const Tensor& h);

// ---- whole-model forward ---------------------------------------------------

enum class AttentionMode { dense, sparse };

struct ForwardOptions {
  // Run the indexer in dense mode too (sparse mode always runs it).
  bool dense_indexer = false;
  bool record_attention = false;    // head-averaged weights per layer
  bool record_layer_inputs = false;  // normalized attention inputs per layer
  // The indexer reads a detached copy of its input so its distillation loss
  // cannot push gradients into the rest of the network.
  bool detach_indexer_input = true;
};

struct ForwardResult {
  Tensor logits;                               // L x vocab
  std::vector<IndexerScores> scores;           // per layer, when computed
  std::vector<TopKIndexSet> indices;           // sparse mode
  std::vector<CausalDistribution> attention;   // when record_attention
  std::vector<Tensor> layer_inputs;            // when record_layer_inputs
  MacCounter macs;
};

// Standard per-layer sparse forward (every layer runs its own indexer), or
// dense causal attention everywhere.
ForwardResult model_forward(const Model& model, std::span<const int> tokens, AttentionMode mode,
                            const ForwardOptions& options = {});

// Mean next-token cross-entropy over positions 0..L-2.
Tensor lm_loss(const Tensor& logits, std::span<const int> tokens);

void check_tokens(const ModelConfig& config, std::span<const int> tokens);

// ---- checkpoints -------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Model& model);
Model load_checkpoint(const std::string& path);

}  // namespace idxshare
