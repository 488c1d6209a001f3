// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0

#include "idxshare/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <type_traits>

#include "idxshare/random.hpp"

namespace idxshare {

// ---- config ------------------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("ModelConfig: " + what); };
  if (n_layers < 2) fail("n_layers must be >= 2");
  if (max_len < 1) fail("max_len must be >= 1");
  if (top_k < 1 || top_k > max_len) fail("top_k must satisfy 1 <= top_k <= max_len");
  if (n_heads < 1 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (n_idx_heads < 1) fail("n_idx_heads must be >= 1");
  if (d_idx < 1) fail("d_idx must be >= 1");
  if (d_ff < 1) fail("d_ff must be >= 1");
  if (vocab_size < 2) fail("vocab_size must be >= 2");
}

std::map<std::string, std::string> ModelConfig::to_kv() const {
  return {{"n_layers", std::to_string(n_layers)},       {"max_len", std::to_string(max_len)},
          {"d_model", std::to_string(d_model)},         {"n_heads", std::to_string(n_heads)},
          {"n_idx_heads", std::to_string(n_idx_heads)}, {"d_idx", std::to_string(d_idx)},
          {"top_k", std::to_string(top_k)},             {"d_ff", std::to_string(d_ff)},
          {"vocab_size", std::to_string(vocab_size)},   {"seed", std::to_string(seed)}};
}

ModelConfig ModelConfig::from_kv(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    try {
      std::size_t used = 0;
      field = static_cast<std::remove_reference_t<decltype(field)>>(std::stoull(it->second, &used));
      if (used != it->second.size()) throw std::invalid_argument(key);
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string("ModelConfig: bad value for ") + key + ": '" + it->second + "'");
    }
  };
  get("n_layers", c.n_layers);
  get("max_len", c.max_len);
  get("d_model", c.d_model);
  get("n_heads", c.n_heads);
  get("n_idx_heads", c.n_idx_heads);
  get("d_idx", c.d_idx);
  get("top_k", c.top_k);
  get("d_ff", c.d_ff);
  get("vocab_size", c.vocab_size);
  get("seed", c.seed);
  return c;
}

// ---- parameters ----------------------------------------------------------------

namespace {

Tensor normal(std::mt19937_64& rng, Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor copy_of(const Tensor& t) {
  return Tensor::from(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), t.requires_grad());
}

}  // namespace

Model::Model(const ModelConfig& config) : config_(config) {
  config.validate();
  auto rng = seeded_stream(config.seed, "init");
  const std::size_t d = config.d_model, dh = config.d_head();
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
  // Residual-branch outputs start small so depth does not blow up activations.
  const double out_std = in_std / std::sqrt(2.0 * static_cast<double>(config.n_layers));

  tok_emb = normal(rng, {config.vocab_size, d}, 1.0);
  pos_emb = normal(rng, {config.max_len, d}, 1.0);
  layers_.resize(config.n_layers);
  for (auto& layer : layers_) {
    layer.ln1_gain = Tensor::full({d}, 1.0, true);
    layer.ln1_bias = Tensor::zeros({d}, true);
    layer.heads.resize(config.n_heads);
    for (auto& h : layer.heads) {
      h.wq = normal(rng, {d, dh}, in_std);
      h.wk = normal(rng, {d, dh}, in_std);
      h.wv = normal(rng, {d, dh}, in_std);
      h.wo = normal(rng, {dh, d}, out_std);
    }
    layer.indexer.resize(config.n_idx_heads);
    for (auto& h : layer.indexer) {
      h.wq = normal(rng, {d, config.d_idx}, in_std);
      h.wk = normal(rng, {d, config.d_idx}, in_std);
      h.gate = Tensor::scalar(1.0 / std::sqrt(static_cast<double>(config.d_idx)), true);
    }
    layer.ln2_gain = Tensor::full({d}, 1.0, true);
    layer.ln2_bias = Tensor::zeros({d}, true);
    layer.ff_w1 = normal(rng, {d, config.d_ff}, in_std);
    layer.ff_b1 = Tensor::zeros({config.d_ff}, true);
    layer.ff_w2 = normal(rng, {config.d_ff, d}, out_std);
    layer.ff_b2 = Tensor::zeros({d}, true);
  }
  final_gain = Tensor::full({d}, 1.0, true);
  final_bias = Tensor::zeros({d}, true);
  // Small head keeps initial logits near uniform (loss ~ ln vocab).
  lm_head = normal(rng, {d, config.vocab_size}, 0.02);
}

std::vector<NamedTensor> Model::named_parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"tok_emb", tok_emb});
  out.push_back({"pos_emb", pos_emb});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    const std::string p = "layers." + std::to_string(l + 1) + ".";
    out.push_back({p + "ln1.gain", layer.ln1_gain});
    out.push_back({p + "ln1.bias", layer.ln1_bias});
    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
      const std::string q = p + "attn." + std::to_string(h) + ".";
      out.push_back({q + "wq", layer.heads[h].wq});
      out.push_back({q + "wk", layer.heads[h].wk});
      out.push_back({q + "wv", layer.heads[h].wv});
      out.push_back({q + "wo", layer.heads[h].wo});
    }
    for (std::size_t h = 0; h < layer.indexer.size(); ++h) {
      const std::string q = p + "indexer." + std::to_string(h) + ".";
      out.push_back({q + "wq", layer.indexer[h].wq});
      out.push_back({q + "wk", layer.indexer[h].wk});
      out.push_back({q + "gate", layer.indexer[h].gate});
    }
    out.push_back({p + "ln2.gain", layer.ln2_gain});
    out.push_back({p + "ln2.bias", layer.ln2_bias});
    out.push_back({p + "ffn.w1", layer.ff_w1});
    out.push_back({p + "ffn.b1", layer.ff_b1});
    out.push_back({p + "ffn.w2", layer.ff_w2});
    out.push_back({p + "ffn.b2", layer.ff_b2});
  }
  out.push_back({"final_ln.gain", final_gain});
  out.push_back({"final_ln.bias", final_bias});
  out.push_back({"lm_head", lm_head});
  return out;
}

std::vector<Tensor> Model::indexer_parameters(std::size_t layer_index) const {
  std::vector<Tensor> out;
  for (const auto& h : layers_.at(layer_index).indexer) {
    out.push_back(h.wq);
    out.push_back(h.wk);
    out.push_back(h.gate);
  }
  return out;
}

std::vector<Tensor> Model::indexer_parameters() const {
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto part = indexer_parameters(l);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

std::vector<Tensor> Model::non_indexer_parameters() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : named_parameters()) {
    if (name.find(".indexer.") == std::string::npos) out.push_back(t);
  }
  return out;
}

Model Model::clone() const {
  Model m;
  m.config_ = config_;
  m.tok_emb = copy_of(tok_emb);
  m.pos_emb = copy_of(pos_emb);
  m.final_gain = copy_of(final_gain);
  m.final_bias = copy_of(final_bias);
  m.lm_head = copy_of(lm_head);
  m.layers_.reserve(layers_.size());
  for (const auto& src : layers_) {
    LayerParameters l;
    l.ln1_gain = copy_of(src.ln1_gain);
    l.ln1_bias = copy_of(src.ln1_bias);
    for (const auto& h : src.heads) l.heads.push_back({copy_of(h.wq), copy_of(h.wk), copy_of(h.wv), copy_of(h.wo)});
    for (const auto& h : src.indexer) l.indexer.push_back({copy_of(h.wq), copy_of(h.wk), copy_of(h.gate)});
    l.ln2_gain = copy_of(src.ln2_gain);
    l.ln2_bias = copy_of(src.ln2_bias);
    l.ff_w1 = copy_of(src.ff_w1);
    l.ff_b1 = copy_of(src.ff_b1);
    l.ff_w2 = copy_of(src.ff_w2);
    l.ff_b2 = copy_of(src.ff_b2);
    m.layers_.push_back(std::move(l));
  }
  return m;
}

// ---- index sets and masks ------------------------------------------------------

void TopKIndexSet::validate(std::size_t length) const {
  if (rows.size() != length) {
    throw std::out_of_range("TopKIndexSet: " + std::to_string(rows.size()) + " rows for sequence length " +
                            std::to_string(length));
  }
  for (std::size_t t = 0; t < rows.size(); ++t) {
    const auto& r = rows[t];
    if (r.empty()) throw std::out_of_range("TopKIndexSet: empty row " + std::to_string(t));
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (r[i] > t) {
        throw std::out_of_range("TopKIndexSet: position " + std::to_string(r[i]) + " outside causal range of query " +
                                std::to_string(t));
      }
      if (i > 0 && r[i] <= r[i - 1]) {
        throw std::out_of_range("TopKIndexSet: row " + std::to_string(t) + " is not strictly increasing");
      }
    }
  }
}

Tensor causal_mask(std::size_t length) {
  std::vector<double> m(length * length, 0.0);
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t s = t + 1; s < length; ++s) m[t * length + s] = kMaskedLogit;
  return Tensor::from({length, length}, std::move(m));
}

Tensor index_mask(const TopKIndexSet& indices) {
  const std::size_t n = indices.length();
  std::vector<double> m(n * n, kMaskedLogit);
  for (std::size_t t = 0; t < n; ++t)
    for (auto s : indices.rows[t]) m[t * n + s] = 0.0;
  return Tensor::from({n, n}, std::move(m));
}

// ---- kernels -------------------------------------------------------------------

Tensor causal_dot_scores(const Tensor& q, const Tensor& k, MacCounter* macs) {
  if (q.shape() != k.shape() || q.shape().size() != 2) throw ShapeError("causal_dot_scores", q.shape(), k.shape());
  const std::size_t n = q.rows(), d = q.cols();
  std::vector<double> out(n * n, 0.0);
  auto Q = q.data();
  auto K = k.data();
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t s = 0; s <= t; ++s) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += Q[t * d + j] * K[s * d + j];
      out[t * n + s] = acc;
    }
  if (macs) macs->indexer_macs += static_cast<std::uint64_t>(d) * n * (n + 1) / 2;
  return Tensor::make_result({n, n}, std::move(out), {q, k}, [n, d](detail::Node& o) {
    auto& qn = *o.parents[0];
    auto& kn = *o.parents[1];
    if (qn.requires_grad) {
      auto& g = qn.grad_buffer();
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t s = 0; s <= t; ++s) {
          const double go = o.grad[t * n + s];
          for (std::size_t j = 0; j < d; ++j) g[t * d + j] += go * kn.data[s * d + j];
        }
    }
    if (kn.requires_grad) {
      auto& g = kn.grad_buffer();
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t s = 0; s <= t; ++s) {
          const double go = o.grad[t * n + s];
          for (std::size_t j = 0; j < d; ++j) g[s * d + j] += go * qn.data[t * d + j];
        }
    }
  });
}

Tensor indexer_score_tensor(const LayerParameters& layer, const Tensor& x, MacCounter* macs) {
  Tensor total;
  for (const auto& h : layer.indexer) {
    auto dots = causal_dot_scores(matmul(x, h.wq), matmul(x, h.wk), macs);
    auto term = scale_by(relu(dots), h.gate);
    total = total.defined() ? add(total, term) : term;
  }
  if (macs) ++macs->indexer_calls;
  return total;
}

IndexerScores indexer_forward(const LayerParameters& layer, const Tensor& x, MacCounter* macs) {
  return IndexerScores{indexer_score_tensor(layer, x, macs)};
}

TopKIndexSet topk_select(const IndexerScores& scores, std::size_t k) {
  const std::size_t n = scores.length();
  TopKIndexSet out;
  out.rows.resize(n);
  std::vector<std::size_t> cand;
  for (std::size_t t = 0; t < n; ++t) {
    cand.resize(t + 1);
    std::iota(cand.begin(), cand.end(), 0);
    const std::size_t take = std::min(k, t + 1);
    auto better = [&](std::size_t a, std::size_t b) {
      const double sa = scores.at(t, a), sb = scores.at(t, b);
      return sa != sb ? sa > sb : a < b;
    };
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end(), better);
    cand.resize(take);
    std::sort(cand.begin(), cand.end());
    out.rows[t] = cand;
  }
  return out;
}

Tensor sparse_attend(const Tensor& q, const Tensor& k, const Tensor& v, const TopKIndexSet& indices,
                     double scale, std::vector<double>* probs, MacCounter* macs) {
  if (q.shape() != k.shape() || q.shape().size() != 2) throw ShapeError("sparse_attend", q.shape(), k.shape());
  if (v.shape().size() != 2 || v.rows() != q.rows()) throw ShapeError("sparse_attend", q.shape(), v.shape());
  const std::size_t n = q.rows(), d = q.cols(), dv = v.cols();
  indices.validate(n);
  auto Q = q.data();
  auto K = k.data();
  auto V = v.data();
  std::vector<double> out(n * dv, 0.0);
  // Per-query softmax weights, flattened in index-set order.
  std::vector<double> weights;
  std::vector<std::size_t> offsets(n + 1, 0);
  for (std::size_t t = 0; t < n; ++t) offsets[t + 1] = offsets[t] + indices.rows[t].size();
  weights.resize(offsets[n]);
  std::uint64_t count = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const auto& row = indices.rows[t];
    double* w = &weights[offsets[t]];
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < row.size(); ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += Q[t * d + j] * K[row[i] * d + j];
      w[i] = acc * scale;
      mx = std::max(mx, w[i]);
    }
    double z = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) {
      w[i] = std::exp(w[i] - mx);
      z += w[i];
    }
    for (std::size_t i = 0; i < row.size(); ++i) {
      w[i] /= z;
      for (std::size_t j = 0; j < dv; ++j) out[t * dv + j] += w[i] * V[row[i] * dv + j];
    }
    count += row.size();
  }
  if (macs) macs->core_macs += count * d + count * dv;
  if (probs) {
    probs->assign(n * n, 0.0);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t i = 0; i < indices.rows[t].size(); ++i)
        (*probs)[t * n + indices.rows[t][i]] = weights[offsets[t] + i];
  }
  return Tensor::make_result(
      {n, dv}, std::move(out), {q, k, v},
      [n, d, dv, scale, rows = indices.rows, weights = std::move(weights), offsets = std::move(offsets)](
          detail::Node& o) {
        auto& qn = *o.parents[0];
        auto& kn = *o.parents[1];
        auto& vn = *o.parents[2];
        std::vector<double> dlogit;
        for (std::size_t t = 0; t < n; ++t) {
          const auto& row = rows[t];
          const double* w = &weights[offsets[t]];
          const double* go = &o.grad[t * dv];
          dlogit.assign(row.size(), 0.0);
          double dot = 0.0;
          for (std::size_t i = 0; i < row.size(); ++i) {
            double dp = 0.0;
            for (std::size_t j = 0; j < dv; ++j) dp += go[j] * vn.data[row[i] * dv + j];
            dlogit[i] = dp;
            dot += w[i] * dp;
          }
          for (std::size_t i = 0; i < row.size(); ++i) dlogit[i] = w[i] * (dlogit[i] - dot) * scale;
          if (vn.requires_grad) {
            auto& g = vn.grad_buffer();
            for (std::size_t i = 0; i < row.size(); ++i)
              for (std::size_t j = 0; j < dv; ++j) g[row[i] * dv + j] += w[i] * go[j];
          }
          if (qn.requires_grad) {
            auto& g = qn.grad_buffer();
            for (std::size_t i = 0; i < row.size(); ++i)
              for (std::size_t j = 0; j < d; ++j) g[t * d + j] += dlogit[i] * kn.data[row[i] * d + j];
          }
          if (kn.requires_grad) {
            auto& g = kn.grad_buffer();
            for (std::size_t i = 0; i < row.size(); ++i)
              for (std::size_t j = 0; j < d; ++j) g[row[i] * d + j] += dlogit[i] * qn.data[t * d + j];
          }
        }
      });
}

namespace {

void accumulate_average(CausalDistribution* avg, const std::vector<double>& probs, std::size_t n,
                        std::size_t heads) {
  if (!avg) return;
  if (avg->values.empty()) {
    avg->length = n;
    avg->values.assign(n * n, 0.0);
  }
  const double w = 1.0 / static_cast<double>(heads);
  for (std::size_t i = 0; i < probs.size(); ++i) avg->values[i] += w * probs[i];
}

}  // namespace

Tensor sparse_attention(const LayerParameters& layer, const Tensor& x, const TopKIndexSet& indices,
                        CausalDistribution* avg_probs, MacCounter* macs) {
  const std::size_t n = x.rows();
  indices.validate(n);
  const double sc = 1.0 / std::sqrt(static_cast<double>(layer.heads.front().wq.cols()));
  if (avg_probs) *avg_probs = CausalDistribution{};
  Tensor out;
  std::vector<double> probs;
  for (const auto& h : layer.heads) {
    auto o = sparse_attend(matmul(x, h.wq), matmul(x, h.wk), matmul(x, h.wv), indices, sc,
                           avg_probs ? &probs : nullptr, macs);
    accumulate_average(avg_probs, probs, n, layer.heads.size());
    auto proj = matmul(o, h.wo);
    out = out.defined() ? add(out, proj) : proj;
  }
  return out;
}

Tensor dense_attention(const LayerParameters& layer, const Tensor& x, AttentionDistribution* avg_probs) {
  const std::size_t n = x.rows();
  const double sc = 1.0 / std::sqrt(static_cast<double>(layer.heads.front().wq.cols()));
  const auto mask = causal_mask(n);
  if (avg_probs) *avg_probs = CausalDistribution{};
  Tensor out;
  for (const auto& h : layer.heads) {
    auto logits = scale(matmul(matmul(x, h.wq), transpose(matmul(x, h.wk))), sc);
    auto p = softmax_rows(logits, mask);
    if (avg_probs) {
      accumulate_average(avg_probs, std::vector<double>(p.data().begin(), p.data().end()), n, layer.heads.size());
    }
    auto proj = matmul(matmul(p, matmul(x, h.wv)), h.wo);
    out = out.defined() ? add(out, proj) : proj;
  }
  return out;
}

AttentionDistribution aggregate_attention(const LayerParameters& layer, const Tensor& x) {
  NoGradGuard no_grad;
  AttentionDistribution p;
  dense_attention(layer, x, &p);
  return p;
}

IndexerDistribution indexer_distribution(const IndexerScores& scores) {
  NoGradGuard no_grad;
  const std::size_t n = scores.length();
  auto q = softmax_rows(scores.values, causal_mask(n));
  return IndexerDistribution{n, std::vector<double>(q.data().begin(), q.data().end())};
}

Tensor attention_input(const LayerParameters& layer, const Tensor& h) {
  return layer_norm_rows(h, layer.ln1_gain, layer.ln1_bias);
}

Tensor feed_forward(const LayerParameters& layer, const Tensor& h) {
  auto x = layer_norm_rows(h, layer.ln2_gain, layer.ln2_bias);
  auto hidden = relu(add_row(matmul(x, layer.ff_w1), layer.ff_b1));
  return add_row(matmul(hidden, layer.ff_w2), layer.ff_b2);
}

void check_tokens(const ModelConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) throw std::invalid_argument("empty token sequence");
  if (tokens.size() > config.max_len) {
    throw std::invalid_argument("sequence length " + std::to_string(tokens.size()) + " exceeds max_len " +
                                std::to_string(config.max_len));
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(t) + " outside vocabulary of size " +
                                  std::to_string(config.vocab_size));
    }
  }
}

Tensor embed(const Model& model, std::span<const int> tokens) {
  check_tokens(model.config(), tokens);
  std::vector<std::size_t> ids(tokens.begin(), tokens.end());
  std::vector<std::size_t> pos(tokens.size());
  std::iota(pos.begin(), pos.end(), 0);
  return add(gather_rows(model.tok_emb, ids), gather_rows(model.pos_emb, pos));
}

Tensor output_logits(const Model& model, const Tensor& h) {
  return matmul(layer_norm_rows(h, model.final_gain, model.final_bias), model.lm_head);
}

ForwardResult model_forward(const Model& model, std::span<const int> tokens, AttentionMode mode,
                            const ForwardOptions& options) {
  ForwardResult r;
  auto h = embed(model, tokens);
  const bool run_indexer = mode == AttentionMode::sparse || options.dense_indexer;
  for (std::size_t l = 0; l < model.n_layers(); ++l) {
    const auto& layer = model.layer(l);
    auto x = attention_input(layer, h);
    if (options.record_layer_inputs) r.layer_inputs.push_back(x);
    CausalDistribution probs;
    CausalDistribution* rec = options.record_attention ? &probs : nullptr;
    Tensor attn;
    if (run_indexer) {
      r.scores.push_back(indexer_forward(layer, options.detach_indexer_input ? detach(x) : x, &r.macs));
    }
    if (mode == AttentionMode::sparse) {
      r.indices.push_back(topk_select(r.scores.back(), model.config().top_k));
      attn = sparse_attention(layer, x, r.indices.back(), rec, &r.macs);
    } else {
      attn = dense_attention(layer, x, rec);
    }
    if (rec) r.attention.push_back(std::move(probs));
    h = add(h, attn);
    h = add(h, feed_forward(layer, h));
  }
  r.logits = output_logits(model, h);
  return r;
}

Tensor lm_loss(const Tensor& logits, std::span<const int> tokens) {
  if (logits.rows() != tokens.size()) {
    throw ShapeError("lm_loss: " + std::to_string(tokens.size()) + " tokens vs logits " + shape_str(logits.shape()));
  }
  if (tokens.size() < 2) throw std::invalid_argument("lm_loss: need at least two tokens");
  const std::size_t n = tokens.size() - 1;
  std::vector<std::size_t> rows(n), cols(n);
  for (std::size_t t = 0; t < n; ++t) {
    rows[t] = t;
    cols[t] = static_cast<std::size_t>(tokens[t + 1]);
  }
  return scale(mean(gather_elements(log_softmax_rows(logits), rows, cols)), -1.0);
}

}  // namespace idxshare
