// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0

#include "idxshare/search.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <stdexcept>

#include "idxshare/engine.hpp"

namespace idxshare {

std::size_t CalibrationSet::sequence_count() const {
  std::size_t n = 0;
  for (const auto& b : batches) n += b.size();
  return n;
}

CalibrationSet make_calibration_set(const Dataset& data, std::size_t batches, std::size_t batch_size) {
  if (batches * batch_size > data.sequences.size()) {
    throw std::invalid_argument("calibration: need " + std::to_string(batches * batch_size) + " sequences, dataset has " +
                                std::to_string(data.sequences.size()));
  }
  CalibrationSet c;
  std::size_t next = 0;
  for (std::size_t b = 0; b < batches; ++b) {
    c.batches.emplace_back();
    for (std::size_t i = 0; i < batch_size; ++i) c.batches.back().push_back(data.sequences[next++]);
  }
  return c;
}

double eval_loss(const Model& model, const CalibrationSet& calib, const Pattern& pattern) {
  NoGradGuard no_grad;
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& batch : calib.batches) {
    for (const auto& seq : batch) {
      auto r = forward_with_pattern(model, seq, pattern, {.record_indices = false});
      const std::size_t n = seq.size() - 1;
      total += lm_loss(r.logits, seq).item() * static_cast<double>(n);
      tokens += n;
    }
  }
  if (tokens == 0) throw std::invalid_argument("eval_loss: empty calibration set");
  return total / static_cast<double>(tokens);
}

namespace {

// Counts calls so the evaluation budget can be asserted.
struct CountingLoss {
  const PatternLoss& fn;
  std::size_t calls = 0;
  double operator()(const Pattern& p) {
    ++calls;
    return fn(p);
  }
};

PatternLoss model_loss(const Model& model, const CalibrationSet& calib) {
  return [&model, &calib](const Pattern& p) { return eval_loss(model, calib, p); };
}

}  // namespace

SearchResult greedy_search(std::size_t n_layers, std::size_t target_shared, const PatternLoss& loss) {
  if (n_layers < 1 || target_shared > n_layers - 1) {
    throw std::invalid_argument("greedy_search: target S count " + std::to_string(target_shared) +
                                " outside 0.." + std::to_string(n_layers - 1));
  }
  CountingLoss eval{loss};
  SearchResult r{Pattern::all_full(n_layers), {}, 0};
  std::vector<std::size_t> remaining;
  for (std::size_t l = 2; l <= n_layers; ++l) remaining.push_back(l);
  for (std::size_t step = 1; step <= target_shared; ++step) {
    std::size_t best_pos = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < remaining.size(); ++i) {
      const double v = eval(r.pattern.with(remaining[i], LayerRole::shared));
      if (v < best) {
        best = v;
        best_pos = i;
      }
    }
    const std::size_t layer = remaining[best_pos];
    r.pattern = r.pattern.with(layer, LayerRole::shared);
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(best_pos));
    r.trace.push_back({step, layer, best, r.pattern});
  }
  r.evaluations = eval.calls;
  return r;
}

SearchResult greedy_search(const Model& model, const CalibrationSet& calib, std::size_t target_shared) {
  return greedy_search(model.n_layers(), target_shared, model_loss(model, calib));
}

std::vector<std::size_t> block_starts(std::size_t n_layers, std::size_t blocks) {
  if (blocks < 1 || blocks > n_layers) {
    throw std::invalid_argument("blocked search: block count " + std::to_string(blocks) + " outside 1.." +
                                std::to_string(n_layers));
  }
  std::vector<std::size_t> starts;
  for (std::size_t b = 0; b < blocks; ++b) starts.push_back(1 + b * n_layers / blocks);
  return starts;
}

SearchResult greedy_search_blocked(std::size_t n_layers, std::size_t target_shared, std::size_t blocks,
                                   const PatternLoss& loss) {
  const auto starts = block_starts(n_layers, blocks);
  if (target_shared > n_layers - blocks) {
    throw std::invalid_argument("blocked search: target S count " + std::to_string(target_shared) + " exceeds " +
                                std::to_string(n_layers - blocks) + " free layers");
  }
  std::vector<std::vector<std::size_t>> remaining(blocks);
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t end = b + 1 < blocks ? starts[b + 1] : n_layers + 1;
    for (std::size_t l = starts[b] + 1; l < end; ++l) remaining[b].push_back(l);
  }
  CountingLoss eval{loss};
  SearchResult r{Pattern::all_full(n_layers), {}, 0};
  std::size_t placed = 0;
  for (std::size_t step = 1; placed < target_shared; ++step) {
    for (std::size_t b = 0; b < blocks && placed < target_shared; ++b) {
      auto& cand = remaining[b];
      if (cand.empty()) continue;
      std::size_t best_pos = 0;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < cand.size(); ++i) {
        const double v = eval(r.pattern.with(cand[i], LayerRole::shared));
        if (v < best) {
          best = v;
          best_pos = i;
        }
      }
      const std::size_t layer = cand[best_pos];
      r.pattern = r.pattern.with(layer, LayerRole::shared);
      cand.erase(cand.begin() + static_cast<std::ptrdiff_t>(best_pos));
      r.trace.push_back({step, layer, best, r.pattern});
      ++placed;
    }
  }
  r.evaluations = eval.calls;
  return r;
}

SearchResult greedy_search_blocked(const Model& model, const CalibrationSet& calib, std::size_t target_shared,
                                   std::size_t blocks) {
  return greedy_search_blocked(model.n_layers(), target_shared, blocks, model_loss(model, calib));
}

std::size_t blocked_evaluation_count(std::size_t n_layers, std::size_t target_shared, std::size_t blocks) {
  const auto starts = block_starts(n_layers, blocks);
  std::vector<std::size_t> left(blocks);
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t end = b + 1 < blocks ? starts[b + 1] : n_layers + 1;
    left[b] = end - starts[b] - 1;
  }
  std::size_t count = 0, placed = 0;
  while (placed < target_shared) {
    for (std::size_t b = 0; b < blocks && placed < target_shared; ++b) {
      if (left[b] == 0) continue;
      count += left[b]--;
      ++placed;
    }
  }
  return count;
}

double similarity_objective(const SimilarityMatrix& s, const Pattern& pattern) {
  if (pattern.size() != s.n) throw PatternError("similarity_objective: pattern length does not match matrix");
  double total = 0.0;
  std::size_t src = 1;
  for (std::size_t l = 2; l <= s.n; ++l) {
    if (pattern.is_full(l)) src = l;
    else total += s.at(l, src);
  }
  return total;
}

Pattern dp_similarity_search(const SimilarityMatrix& s, std::size_t keep_full) {
  const std::size_t n = s.n;
  if (keep_full < 1 || keep_full > n) {
    throw std::invalid_argument("dp_similarity_search: cannot keep " + std::to_string(keep_full) + " F layers of " +
                                std::to_string(n));
  }
  constexpr double kNone = -std::numeric_limits<double>::infinity();
  // best[i][k]: max similarity over layers 1..i with exactly k F layers, layer i F.
  std::vector<std::vector<double>> best(n + 1, std::vector<double>(keep_full + 1, kNone));
  std::vector<std::vector<std::size_t>> prev(n + 1, std::vector<std::size_t>(keep_full + 1, 0));
  best[1][1] = 0.0;
  for (std::size_t k = 2; k <= keep_full; ++k) {
    for (std::size_t i = k; i <= n; ++i) {
      for (std::size_t j = k - 1; j < i; ++j) {
        if (best[j][k - 1] == kNone) continue;
        // Same left-to-right accumulation as similarity_objective.
        double v = best[j][k - 1];
        for (std::size_t m = j + 1; m < i; ++m) v += s.at(m, j);
        if (v > best[i][k]) {
          best[i][k] = v;
          prev[i][k] = j;
        }
      }
    }
  }
  std::size_t last = 0;
  double top = kNone;
  for (std::size_t i = keep_full; i <= n; ++i) {
    if (best[i][keep_full] == kNone) continue;
    double v = best[i][keep_full];
    for (std::size_t m = i + 1; m <= n; ++m) v += s.at(m, i);
    if (v > top) {
      top = v;
      last = i;
    }
  }
  std::vector<LayerRole> roles(n, LayerRole::shared);
  for (std::size_t i = last, k = keep_full; k >= 1; i = prev[i][k], --k) roles[i - 1] = LayerRole::full;
  return Pattern(std::move(roles));
}

Pattern brute_force_pattern_search(std::size_t n_layers, std::size_t keep_full, const PatternLoss& objective,
                                   Goal goal) {
  if (keep_full < 1 || keep_full > n_layers) {
    throw std::invalid_argument("brute force: cannot keep " + std::to_string(keep_full) + " F layers of " +
                                std::to_string(n_layers));
  }
  // C(n-1, keep-1) with an early exit once the guard is exceeded.
  constexpr double kGuard = 1e6;
  double combos = 1.0;
  for (std::size_t i = 1; i < keep_full; ++i) {
    combos = combos * static_cast<double>(n_layers - keep_full + i) / static_cast<double>(i);
  }
  if (combos > kGuard) {
    throw std::invalid_argument("brute force: " + std::to_string(static_cast<long long>(combos)) +
                                " patterns exceeds the 1e6 enumeration guard");
  }
  // Choose keep_full - 1 of layers 2..n, lexicographic by positions.
  const std::size_t r = keep_full - 1;
  std::vector<std::size_t> pick(r);
  for (std::size_t i = 0; i < r; ++i) pick[i] = 2 + i;
  std::optional<Pattern> winner;
  double best = 0.0;
  while (true) {
    std::vector<LayerRole> roles(n_layers, LayerRole::shared);
    roles[0] = LayerRole::full;
    for (auto l : pick) roles[l - 1] = LayerRole::full;
    Pattern p(std::move(roles));
    const double v = objective(p);
    if (!winner || (goal == Goal::maximize ? v > best : v < best)) {
      best = v;
      winner = std::move(p);
    }
    // Next combination.
    std::size_t i = r;
    while (i > 0 && pick[i - 1] == n_layers - (r - i)) --i;
    if (i == 0) break;
    ++pick[i - 1];
    for (std::size_t j = i; j < r; ++j) pick[j] = pick[j - 1] + 1;
  }
  return *winner;
}

void write_search_trace(const std::string& path, const SearchResult& result) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write search trace '" + path + "'");
  out << "step,layer,loss,full_count,pattern\n" << std::setprecision(17);
  for (const auto& s : result.trace) {
    out << s.step << ',' << s.layer << ',' << s.loss << ',' << s.pattern.full_count() << ',' << s.pattern.str() << '\n';
  }
}

}  // namespace idxshare
