// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the unit and acceptance tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "idxshare/model.hpp"
#include "idxshare/tensor.hpp"

namespace idxshare::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0, bool requires_grad = true) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<int> random_tokens(std::size_t length, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, static_cast<int>(vocab) - 1);
  std::vector<int> t(length);
  for (auto& x : t) x = d(rng);
  return t;
}

// Small enough to run hundreds of forwards per second on one core.
inline ModelConfig toy_config(std::size_t n_layers = 4, std::uint64_t seed = 0) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.max_len = 16;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_idx_heads = 2;
  c.d_idx = 4;
  c.top_k = 4;
  c.d_ff = 16;
  c.vocab_size = 8;
  c.seed = seed;
  return c;
}

struct GradCheck {
  double worst = 0.0;  // largest |a - n| / max(|a|, |n|) among failing-floor entries
  std::size_t checked = 0;
  std::size_t failures = 0;
  std::string first_failure;
};

// Central differences (h = 1e-6) against reverse mode. An entry passes when
// |a - n| <= max(1e-5 * max(|a|, |n|), 1e-7).
inline GradCheck finite_difference_check(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                                         double h = 1e-6, double rel = 1e-5, double abs_floor = 1e-7) {
  for (auto& p : params) p.zero_grad();
  loss().backward();
  GradCheck r;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    if (analytic.empty()) analytic.assign(p.numel(), 0.0);
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      double plus, minus;
      {
        NoGradGuard g;
        data[i] = orig + h;
        plus = loss().item();
        data[i] = orig - h;
        minus = loss().item();
        data[i] = orig;
      }
      const double numeric = (plus - minus) / (2 * h);
      const double diff = std::abs(analytic[i] - numeric);
      const double mag = std::max(std::abs(analytic[i]), std::abs(numeric));
      ++r.checked;
      if (diff > std::max(rel * mag, abs_floor)) {
        ++r.failures;
        r.worst = std::max(r.worst, mag > 0 ? diff / mag : diff);
        if (r.first_failure.empty()) {
          r.first_failure = "param " + std::to_string(pi) + "[" + std::to_string(i) + "] analytic " +
                            std::to_string(analytic[i]) + " numeric " + std::to_string(numeric);
        }
      }
    }
  }
  return r;
}

}  // namespace idxshare::testing
