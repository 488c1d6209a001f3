// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0

#include "idxshare/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "idxshare/engine.hpp"
#include "idxshare/random.hpp"

namespace idxshare {

std::vector<ServedGroup> served_groups(const Pattern& pattern) {
  std::vector<ServedGroup> groups;
  for (std::size_t l = 1; l <= pattern.size(); ++l) {
    if (pattern.is_full(l)) groups.push_back({l, {l}});
    else groups.back().layers.push_back(l);
  }
  return groups;
}

// ---- losses ------------------------------------------------------------------

namespace {

constexpr double kNormTolerance = 1e-6;

void check_rows_normalized(const char* what, std::span<const double> values, std::size_t length) {
  for (std::size_t t = 0; t < length; ++t) {
    double s = 0.0;
    for (std::size_t j = 0; j < length; ++j) s += values[t * length + j];
    if (std::abs(s - 1.0) > kNormTolerance) {
      std::ostringstream os;
      os << what << ": row " << t << " sums to " << std::setprecision(12) << s << ", not 1";
      throw std::invalid_argument(os.str());
    }
  }
}

void check_log_q(const Tensor& log_q) {
  const std::size_t n = log_q.rows();
  std::vector<double> q(log_q.data().begin(), log_q.data().end());
  for (auto& v : q) v = std::exp(v);
  check_rows_normalized("indexer distribution", q, n);
}

}  // namespace

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  return kl;
}

Tensor distill_kl(const CausalDistribution& p, const Tensor& log_q) {
  if (log_q.shape() != Shape{p.length, p.length}) throw ShapeError("distill_kl", {p.length, p.length}, log_q.shape());
  check_rows_normalized("target distribution", p.values, p.length);
  check_log_q(log_q);
  double neg_entropy = 0.0;
  for (double v : p.values)
    if (v > 0.0) neg_entropy += v * std::log(v);
  auto target = Tensor::from(log_q.shape(), p.values);
  return add_scalar(scale(sum(mul(target, log_q)), -1.0), neg_entropy);
}

Tensor multi_layer_distill_loss(std::span<const CausalDistribution> targets, const Tensor& log_q) {
  if (targets.empty()) throw std::invalid_argument("multi_layer_distill_loss: empty group");
  const double w = 1.0 / static_cast<double>(targets.size());
  Tensor total;
  for (const auto& p : targets) {
    auto term = scale(distill_kl(p, log_q), w);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

CausalDistribution average_distribution(std::span<const CausalDistribution> targets) {
  if (targets.empty()) throw std::invalid_argument("average_distribution: empty group");
  CausalDistribution avg{targets.front().length, std::vector<double>(targets.front().values.size(), 0.0)};
  const double w = 1.0 / static_cast<double>(targets.size());
  for (const auto& p : targets) {
    if (p.length != avg.length) throw std::invalid_argument("average_distribution: length mismatch");
    for (std::size_t i = 0; i < avg.values.size(); ++i) avg.values[i] += w * p.values[i];
  }
  return avg;
}

Tensor averaged_target_loss(std::span<const CausalDistribution> targets, const Tensor& log_q) {
  return distill_kl(average_distribution(targets), log_q);
}

Tensor indexer_log_probs(const Tensor& scores) { return log_softmax_rows(scores, causal_mask(scores.rows())); }

Tensor restricted_log_probs(const Tensor& scores, const TopKIndexSet& indices) {
  return log_softmax_rows(scores, index_mask(indices));
}

double check_gradient_equivalence(std::span<const CausalDistribution> targets, const LayerParameters& layer,
                                  const Tensor& x) {
  std::vector<Tensor> theta;
  for (const auto& h : layer.indexer) theta.insert(theta.end(), {h.wq, h.wk, h.gate});
  auto grads_of = [&](auto&& loss_fn) {
    for (auto& t : theta) t.zero_grad();
    auto log_q = indexer_log_probs(indexer_score_tensor(layer, detach(x)));
    loss_fn(log_q).backward();
    std::vector<double> g;
    for (const auto& t : theta) {
      if (t.has_grad()) g.insert(g.end(), t.grad().begin(), t.grad().end());
      else g.insert(g.end(), t.numel(), 0.0);
    }
    return g;
  };
  const auto g_multi = grads_of([&](const Tensor& lq) { return multi_layer_distill_loss(targets, lq); });
  const auto g_avg = grads_of([&](const Tensor& lq) { return averaged_target_loss(targets, lq); });
  for (auto& t : theta) t.zero_grad();

  double worst = 0.0;
  for (std::size_t i = 0; i < g_multi.size(); ++i) {
    const double diff = std::abs(g_multi[i] - g_avg[i]);
    if (diff == 0.0) continue;
    const double denom = std::max({std::abs(g_multi[i]), std::abs(g_avg[i]), 1e-300});
    worst = std::max(worst, diff / denom);
  }
  return worst;
}

// ---- optimizer -----------------------------------------------------------------

Adam::Adam(std::vector<Tensor> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m_[i][j] = config_.beta1 * m_[i][j] + (1.0 - config_.beta1) * g[j];
      v_[i][j] = config_.beta2 * v_[i][j] + (1.0 - config_.beta2) * g[j] * g[j];
      w[j] -= config_.lr * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + config_.eps);
    }
  }
}

// ---- schedule -----------------------------------------------------------------

void TrainConfig::validate(std::size_t n_layers) const {
  if (pattern.size() != n_layers) {
    throw PatternError("train: pattern length " + std::to_string(pattern.size()) + " does not match " +
                       std::to_string(n_layers) + " layers");
  }
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (!(lr_dense > 0.0 && lr_warmup > 0.0 && lr_sparse > 0.0)) {
    throw std::invalid_argument("train: learning rates must be positive");
  }
}

namespace {

std::vector<const std::vector<int>*> draw_batch(std::mt19937_64& rng, const Dataset& data, std::size_t size) {
  if (data.sequences.empty()) throw std::invalid_argument("train: empty dataset");
  std::uniform_int_distribution<std::size_t> pick(0, data.sequences.size() - 1);
  std::vector<const std::vector<int>*> batch;
  for (std::size_t i = 0; i < size; ++i) batch.push_back(&data.sequences[pick(rng)]);
  return batch;
}

void require_finite(double v, const std::string& phase, std::size_t step, const char* what) {
  if (!std::isfinite(v)) {
    throw NumericalError(phase + " phase: non-finite " + what + " at step " + std::to_string(step));
  }
}

std::vector<Tensor> trainable_indexers(const Model& model, const Pattern& pattern) {
  std::vector<Tensor> out;
  for (std::size_t l = 1; l <= pattern.size(); ++l) {
    if (!pattern.is_full(l)) continue;
    auto part = model.indexer_parameters(l - 1);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

// Targets one group distils against: every served layer, or just the source.
std::vector<CausalDistribution> group_targets(const ServedGroup& g, const std::vector<CausalDistribution>& attention,
                                              bool cross_layer) {
  std::vector<CausalDistribution> out;
  for (std::size_t i = 0; i < (cross_layer ? g.layers.size() : 1); ++i) out.push_back(attention[g.layers[i] - 1]);
  return out;
}

}  // namespace

TrainLog dense_phase(Model& model, const Dataset& data, const TrainConfig& config) {
  config.validate(model.n_layers());
  TrainLog log{served_groups(config.pattern), {}};
  Adam opt(model.non_indexer_parameters(), {.lr = config.lr_dense});
  auto rng = seeded_stream(config.seed, "batch/dense");
  const double inv_b = 1.0 / static_cast<double>(config.batch_size);
  for (std::size_t step = 0; step < config.dense_steps; ++step) {
    opt.zero_grad();
    double lm = 0.0;
    for (const auto* seq : draw_batch(rng, data, config.batch_size)) {
      auto r = model_forward(model, *seq, AttentionMode::dense);
      auto loss = lm_loss(r.logits, *seq);
      lm += loss.item() * inv_b;
      scale(loss, inv_b).backward();
    }
    require_finite(lm, "dense", step, "LM loss");
    opt.step();
    log.rows.push_back({"dense", step, lm, {}});
  }
  return log;
}

TrainLog warmup_phase(Model& model, const Dataset& data, const TrainConfig& config) {
  config.validate(model.n_layers());
  TrainLog log{served_groups(config.pattern), {}};
  Adam opt(trainable_indexers(model, config.pattern), {.lr = config.lr_warmup});
  auto rng = seeded_stream(config.seed, "batch/warmup");
  const double inv_b = 1.0 / static_cast<double>(config.batch_size);
  for (std::size_t step = 0; step < config.warmup_steps; ++step) {
    opt.zero_grad();
    TrainLogRow row{"warmup", step, 0.0, std::vector<double>(log.groups.size(), 0.0)};
    for (const auto* seq : draw_batch(rng, data, config.batch_size)) {
      ForwardResult dense;
      {
        NoGradGuard no_grad;
        dense = model_forward(model, *seq, AttentionMode::dense,
                              {.record_attention = true, .record_layer_inputs = true});
        row.lm_loss += lm_loss(dense.logits, *seq).item() * inv_b;
      }
      Tensor total;
      for (std::size_t gi = 0; gi < log.groups.size(); ++gi) {
        const auto& g = log.groups[gi];
        const auto& x = dense.layer_inputs[g.source - 1];
        auto log_q = indexer_log_probs(indexer_score_tensor(model.layer(g.source - 1), x));
        auto targets = group_targets(g, dense.attention, config.use_cross_layer_loss);
        auto loss = multi_layer_distill_loss(targets, log_q);
        row.distill[gi] += loss.item() * inv_b;
        total = total.defined() ? add(total, loss) : loss;
      }
      scale(total, inv_b).backward();
    }
    for (double d : row.distill) require_finite(d, "warmup", step, "distillation loss");
    opt.step();
    log.rows.push_back(std::move(row));
  }
  return log;
}

TrainLog sparse_phase(Model& model, const Dataset& data, const TrainConfig& config) {
  config.validate(model.n_layers());
  TrainLog log{served_groups(config.pattern), {}};
  auto params = model.non_indexer_parameters();
  auto indexers = trainable_indexers(model, config.pattern);
  params.insert(params.end(), indexers.begin(), indexers.end());
  Adam opt(std::move(params), {.lr = config.lr_sparse});
  auto rng = seeded_stream(config.seed, "batch/sparse");
  const double inv_b = 1.0 / static_cast<double>(config.batch_size);
  for (std::size_t step = 0; step < config.sparse_steps; ++step) {
    opt.zero_grad();
    TrainLogRow row{"sparse", step, 0.0, std::vector<double>(log.groups.size(), 0.0)};
    for (const auto* seq : draw_batch(rng, data, config.batch_size)) {
      auto r = forward_with_pattern(model, *seq, config.pattern,
                                    {.record_indices = true, .record_attention = true, .keep_scores = true});
      auto lm = lm_loss(r.logits, *seq);
      row.lm_loss += lm.item() * inv_b;
      Tensor total = scale(lm, config.lm_weight);
      for (std::size_t gi = 0; gi < log.groups.size(); ++gi) {
        const auto& g = log.groups[gi];
        // Every layer of the group attended over the source's index sets, so
        // its recorded weights are already a distribution on that support.
        auto log_q = restricted_log_probs(r.scores[g.source - 1].values, r.indices[g.source - 1]);
        auto targets = group_targets(g, r.attention, config.use_cross_layer_loss);
        auto loss = multi_layer_distill_loss(targets, log_q);
        row.distill[gi] += loss.item() * inv_b;
        total = add(total, scale(loss, config.distill_weight));
      }
      scale(total, inv_b).backward();
    }
    require_finite(row.lm_loss, "sparse", step, "LM loss");
    for (double d : row.distill) require_finite(d, "sparse", step, "distillation loss");
    opt.step();
    log.rows.push_back(std::move(row));
  }
  return log;
}

TrainLog train(Model& model, const Dataset& data, const TrainConfig& config) {
  auto log = dense_phase(model, data, config);
  for (auto* phase : {&warmup_phase, &sparse_phase}) {
    auto part = phase(model, data, config);
    log.rows.insert(log.rows.end(), part.rows.begin(), part.rows.end());
  }
  return log;
}

void write_train_log(const std::string& path, const TrainLog& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write training log '" + path + "'");
  out << "phase,step,lm_loss";
  for (const auto& g : log.groups) out << ",distill_g" << g.source;
  out << '\n' << std::setprecision(17);
  for (const auto& r : log.rows) {
    out << r.phase << ',' << r.step << ',' << r.lm_loss;
    for (std::size_t i = 0; i < log.groups.size(); ++i) out << ',' << (i < r.distill.size() ? r.distill[i] : 0.0);
    out << '\n';
  }
}

double copy_accuracy(const Model& model, std::span<const std::vector<int>> sequences, const Pattern& pattern) {
  if (sequences.empty()) return 0.0;
  NoGradGuard no_grad;
  double acc = 0.0;
  for (const auto& seq : sequences) {
    auto r = forward_with_pattern(model, seq, pattern, {.record_indices = false});
    acc += copy_task_accuracy(r.logits, seq);
  }
  return acc / static_cast<double>(sequences.size());
}

}  // namespace idxshare
