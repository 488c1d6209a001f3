// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0

#include "idxshare/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace idxshare {

OverlapMatrix overlap_matrix(std::span<const std::vector<TopKIndexSet>> records, std::size_t k) {
  if (records.empty()) throw std::invalid_argument("overlap_matrix: empty record set");
  const std::size_t n = records.front().size();
  if (n == 0) throw std::invalid_argument("overlap_matrix: sample 0 has no layers");
  OverlapMatrix m{n, k, records.size(), std::vector<double>(n * n, 0.0)};
  std::size_t terms = 0;
  for (std::size_t s = 0; s < records.size(); ++s) {
    const auto& layers = records[s];
    if (layers.size() != n) throw std::invalid_argument("overlap_matrix: sample " + std::to_string(s) + " layer count");
    const std::size_t len = layers[0].length();
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t i = 0; i < n; ++i) {
        const auto& a = layers[i].rows.at(t);
        for (std::size_t j = i + 1; j < n; ++j) {
          const auto& b = layers[j].rows.at(t);
          if (a.size() != b.size()) {
            throw std::invalid_argument("overlap_matrix: set sizes differ at sample " + std::to_string(s) +
                                        " position " + std::to_string(t));
          }
          // Rows are sorted ascending.
          std::size_t common = 0;
          for (std::size_t x = 0, y = 0; x < a.size() && y < b.size();) {
            if (a[x] < b[y]) ++x;
            else if (b[y] < a[x]) ++y;
            else ++common, ++x, ++y;
          }
          m.values[i * n + j] += static_cast<double>(common) / static_cast<double>(a.size());
        }
      }
      ++terms;
    }
  }
  if (terms == 0) throw std::invalid_argument("overlap_matrix: records have no positions");
  for (std::size_t i = 0; i < n; ++i) {
    m.values[i * n + i] = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      m.values[i * n + j] /= static_cast<double>(terms);
      m.values[j * n + i] = m.values[i * n + j];
    }
  }
  return m;
}

std::vector<std::vector<TopKIndexSet>> record_indices(const Model& model, std::span<const std::vector<int>> samples) {
  NoGradGuard no_grad;
  std::vector<std::vector<TopKIndexSet>> out;
  for (const auto& seq : samples) out.push_back(model_forward(model, seq, AttentionMode::sparse).indices);
  return out;
}

NullOverlap random_overlap_null(std::size_t t, std::size_t k, std::size_t trials, std::mt19937_64& rng) {
  if (k == 0 || k > t) throw std::invalid_argument("random_overlap_null: need 1 <= k <= t");
  if (trials < 2) throw std::invalid_argument("random_overlap_null: need at least 2 trials");
  std::vector<std::size_t> pool(t), mark(t);
  std::iota(pool.begin(), pool.end(), 0);
  double sum = 0.0, sq = 0.0;
  for (std::size_t r = 0; r < trials; ++r) {
    std::fill(mark.begin(), mark.end(), 0);
    // Partial Fisher-Yates for each subset.
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, t - 1);
      std::swap(pool[i], pool[pick(rng)]);
      mark[pool[i]] = 1;
    }
    std::size_t common = 0;
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, t - 1);
      std::swap(pool[i], pool[pick(rng)]);
      common += mark[pool[i]];
    }
    const double v = static_cast<double>(common) / static_cast<double>(k);
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(trials);
  const double mean = sum / n;
  const double var = std::max(0.0, (sq - n * mean * mean) / (n - 1.0));
  return {mean, std::sqrt(var / n), static_cast<double>(k) / static_cast<double>(t), trials};
}

double mean_row_cosine(const Tensor& a, const Tensor& b, std::size_t* zero_norm) {
  if (a.shape() != b.shape() || a.shape().size() != 2) throw ShapeError("mean_row_cosine", a.shape(), b.shape());
  const std::size_t rows = a.rows(), cols = a.cols();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    auto x = a.data().subspan(r * cols, cols), y = b.data().subspan(r * cols, cols);
    double dot = 0.0, nx = 0.0, ny = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      dot += x[c] * y[c];
      nx += x[c] * x[c];
      ny += y[c] * y[c];
    }
    if (nx == 0.0 || ny == 0.0) {
      if (zero_norm) ++*zero_norm;
      continue;
    }
    total += std::clamp(dot / std::sqrt(nx * ny), -1.0, 1.0);
  }
  return rows ? total / static_cast<double>(rows) : 0.0;
}

SimilarityReport similarity_matrix(const Model& model, std::span<const std::vector<int>> samples) {
  if (samples.empty()) throw std::invalid_argument("similarity_matrix: empty sample set");
  NoGradGuard no_grad;
  const std::size_t n = model.n_layers();
  SimilarityReport rep;
  rep.matrix.n = n;
  rep.matrix.values.assign(n * n, 0.0);
  rep.samples = samples.size();
  rep.k = model.config().top_k;
  for (const auto& seq : samples) {
    auto base = model_forward(model, seq, AttentionMode::sparse, {.record_layer_inputs = true});
    for (std::size_t i = 1; i < n; ++i) {
      const auto& layer = model.layer(i);
      const auto& x = base.layer_inputs[i];
      auto own = sparse_attention(layer, x, base.indices[i]);
      for (std::size_t j = 0; j < i; ++j) {
        auto reused = sparse_attention(layer, x, base.indices[j]);
        rep.matrix.values[i * n + j] += mean_row_cosine(own, reused, &rep.zero_norm);
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    rep.matrix.values[i * n + i] = 1.0;
    for (std::size_t j = 0; j < i; ++j) rep.matrix.values[i * n + j] /= static_cast<double>(samples.size());
  }
  return rep;
}

CostReport cost_model(const ModelConfig& config, const Pattern& pattern, std::size_t length) {
  if (pattern.size() != config.n_layers) throw PatternError("cost_model: pattern length does not match n_layers");
  using U = std::uint64_t;
  const U n = config.n_layers, f = pattern.full_count(), len = length;
  const U per_indexer = static_cast<U>(config.n_idx_heads) * config.d_idx * (len * (len + 1) / 2);
  U selected = 0;  // sum over 1-based t of min(k, t)
  for (U t = 1; t <= len; ++t) selected += std::min<U>(config.top_k, t);
  const U per_core = static_cast<U>(config.n_heads) * config.d_head() * selected * 2;

  CostReport c;
  c.n_layers = n;
  c.full_layers = f;
  c.length = len;
  c.indexer_macs = f * per_indexer;
  c.core_macs = n * per_core;
  c.baseline_indexer_macs = n * per_indexer;
  c.baseline_core_macs = c.core_macs;
  c.indexer_calls = f;
  c.pattern = pattern.str();
  if (c.baseline_indexer_macs > 0) {
    c.indexer_reduction = 1.0 - static_cast<double>(c.indexer_macs) / static_cast<double>(c.baseline_indexer_macs);
  }
  const U base_total = c.baseline_indexer_macs + c.baseline_core_macs;
  if (base_total > 0) {
    c.total_reduction = 1.0 - static_cast<double>(c.indexer_macs + c.core_macs) / static_cast<double>(base_total);
  }
  return c;
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << std::setprecision(17);
  return out;
}

void write_rows(std::ostream& out, std::size_t n, const std::vector<double>& v) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) out << (j ? "," : "") << v[i * n + j];
    out << '\n';
  }
}

}  // namespace

void write_overlap_csv(const std::string& path, const OverlapMatrix& m) {
  auto out = open_out(path);
  out << "# N=" << m.n << " k=" << m.k << " samples=" << m.samples << '\n';
  write_rows(out, m.n, m.values);
}

void write_similarity_csv(const std::string& path, const SimilarityReport& s) {
  auto out = open_out(path);
  out << "# N=" << s.matrix.n << " k=" << s.k << " samples=" << s.samples << " zero_norm=" << s.zero_norm << '\n';
  write_rows(out, s.matrix.n, s.matrix.values);
}

SimilarityMatrix read_similarity_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open similarity matrix '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line.rfind("# N=", 0) != 0) {
    throw std::runtime_error("similarity matrix '" + path + "': missing header");
  }
  SimilarityMatrix s;
  s.n = std::stoull(line.substr(4));
  for (std::size_t i = 0; i < s.n; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("similarity matrix '" + path + "': truncated");
    std::istringstream ls(line);
    std::string cell;
    std::size_t cols = 0;
    while (std::getline(ls, cell, ',')) {
      s.values.push_back(std::stod(cell));
      ++cols;
    }
    if (cols != s.n) {
      throw std::runtime_error("similarity matrix '" + path + "': row " + std::to_string(i + 1) + " has " +
                               std::to_string(cols) + " columns");
    }
  }
  return s;
}

std::string format_cost_report(const CostReport& c) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "pattern = " << c.pattern << '\n'
      << "n_layers = " << c.n_layers << '\n'
      << "full_layers = " << c.full_layers << '\n'
      << "length = " << c.length << '\n'
      << "indexer_calls = " << c.indexer_calls << '\n'
      << "indexer_macs = " << c.indexer_macs << '\n'
      << "core_macs = " << c.core_macs << '\n'
      << "baseline_indexer_macs = " << c.baseline_indexer_macs << '\n'
      << "baseline_core_macs = " << c.baseline_core_macs << '\n'
      << "indexer_reduction = " << c.indexer_reduction << '\n'
      << "total_reduction = " << c.total_reduction << '\n';
  return out.str();
}

}  // namespace idxshare
