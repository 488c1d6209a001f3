// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "idxshare/random.hpp"
#include "idxshare/tensor.hpp"
#include "test_util.hpp"

using namespace idxshare;
using idxshare::testing::finite_difference_check;
using idxshare::testing::random_tensor;

namespace {

// Weighted sum so every output element carries a distinct gradient.
Tensor probe(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

Tensor fixed_weights(const Tensor& like, std::mt19937_64& rng) {
  return random_tensor(like.shape(), rng, 1.0, false);
}

void expect_fd(const std::function<Tensor()>& f, std::vector<Tensor> params, const std::string& what) {
  auto r = finite_difference_check(f, std::move(params));
  INFO(what << ": " << r.first_failure);
  CHECK(r.failures == 0);
}

}  // namespace

TEST_CASE("matmul matches a naive triple loop") {
  std::mt19937_64 rng(1);
  auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
  auto c = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += a.at(i, k) * b.at(k, j);
      CHECK(c.at(i, j) == doctest::Approx(s).epsilon(1e-14));
    }
}

TEST_CASE("shape errors name the operation and both shapes") {
  auto a = Tensor::zeros({2, 3}), b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, Tensor::zeros({3, 2})), ShapeError);
}

TEST_CASE("softmax rows are normalized and respect the mask") {
  std::mt19937_64 rng(2);
  auto a = random_tensor({4, 4}, rng, 3.0);
  std::vector<double> m(16, 0.0);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t s = t + 1; s < 4; ++s) m[t * 4 + s] = kMaskedLogit;
  auto p = softmax_rows(a, Tensor::from({4, 4}, m));
  auto lp = log_softmax_rows(a, Tensor::from({4, 4}, m));
  for (std::size_t t = 0; t < 4; ++t) {
    double total = 0;
    for (std::size_t s = 0; s < 4; ++s) {
      if (s > t) CHECK(p.at(t, s) == 0.0);
      total += p.at(t, s);
      if (s <= t) CHECK(std::exp(lp.at(t, s)) == doctest::Approx(p.at(t, s)).epsilon(1e-12));
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("layer norm output has zero mean and unit variance with unit gain") {
  std::mt19937_64 rng(3);
  auto a = random_tensor({3, 6}, rng, 2.0);
  auto y = layer_norm_rows(a, Tensor::full({6}, 1.0), Tensor::zeros({6}), 0.0);
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 6; ++c) m += y.at(r, c) / 6;
    for (std::size_t c = 0; c < 6; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m) / 6;
    CHECK(m == doctest::Approx(0.0).epsilon(1e-12).scale(1));
    CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("leaf gradients accumulate across backward calls") {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  sum(mul(x, x)).backward();
  sum(mul(x, x)).backward();
  CHECK(x.grad()[0] == 4.0);
  CHECK(x.grad()[1] == 8.0);
  x.zero_grad();
  CHECK(!x.has_grad());
}

TEST_CASE("no-grad mode records no graph") {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  Tensor y;
  {
    NoGradGuard g;
    CHECK(!grad_enabled());
    y = sum(mul(x, x));
  }
  CHECK(grad_enabled());
  CHECK(!y.requires_grad());
}

TEST_CASE("detach cuts the gradient path") {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  auto y = sum(add(mul(x, x), detach(mul(x, x))));
  y.backward();
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);
}

TEST_CASE("every primitive matches central differences on 20 seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    auto rng = seeded_stream(seed, "tensor-fd");
    auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng), c = random_tensor({3, 4}, rng);
    auto w34 = fixed_weights(a, rng);
    auto w35 = random_tensor({3, 5}, rng, 1.0, false);

    expect_fd([&] { return probe(matmul(a, b), w35); }, {a, b}, "matmul");
    expect_fd([&] { return probe(transpose(transpose(a)), w34); }, {a}, "transpose");
    expect_fd([&] { return probe(reshape(reshape(a, {12}), {3, 4}), w34); }, {a}, "reshape");
    expect_fd([&] { return probe(add(a, c), w34); }, {a, c}, "add");
    expect_fd([&] { return probe(sub(a, c), w34); }, {a, c}, "sub");
    expect_fd([&] { return probe(mul(a, c), w34); }, {a, c}, "mul");
    expect_fd([&] { return probe(scale(a, -1.7), w34); }, {a}, "scale");
    auto s = Tensor::scalar(0.8, true);
    expect_fd([&] { return probe(scale_by(a, s), w34); }, {a, s}, "scale_by");
    expect_fd([&] { return probe(add_scalar(a, 0.3), w34); }, {a}, "add_scalar");
    auto bias = random_tensor({4}, rng);
    expect_fd([&] { return probe(add_row(a, bias), w34); }, {a, bias}, "add_row");
    expect_fd([&] { return probe(relu(a), w34); }, {a}, "relu");
    expect_fd([&] { return probe(exp(a), w34); }, {a}, "exp");
    auto pos = Tensor::from({3, 4}, std::vector<double>(12, 0.0), true);
    {
      auto d = pos.mutable_data();
      std::uniform_real_distribution<double> u(0.5, 2.0);
      for (auto& x : d) x = u(rng);
    }
    expect_fd([&] { return probe(log(pos), w34); }, {pos}, "log");

    std::vector<double> mask(12, 0.0);
    mask[2] = mask[3] = mask[7] = kMaskedLogit;
    auto m = Tensor::from({3, 4}, mask);
    expect_fd([&] { return probe(softmax_rows(a, m), w34); }, {a}, "softmax_rows");
    // Masked log-probabilities sit near kMaskedLogit; keep them out of the probe.
    auto w_live = w34.data();
    std::vector<double> live(w_live.begin(), w_live.end());
    live[2] = live[3] = live[7] = 0.0;
    auto wl = Tensor::from({3, 4}, live);
    expect_fd([&] { return probe(log_softmax_rows(a, m), wl); }, {a}, "log_softmax_rows");
    expect_fd([&] { return probe(softmax_rows(a), w34); }, {a}, "softmax_rows unmasked");
    expect_fd([&] { return sum(a); }, {a}, "sum");
    expect_fd([&] { return mean(mul(a, a)); }, {a}, "mean");

    const std::vector<std::size_t> idx{2, 0, 2, 1};
    auto w44 = random_tensor({4, 4}, rng, 1.0, false);
    expect_fd([&] { return probe(gather_rows(a, idx), w44); }, {a}, "gather_rows");
    auto r4 = random_tensor({4, 4}, rng);
    expect_fd([&] { return probe(scatter_rows(r4, idx, 3), w34); }, {r4}, "scatter_rows");
    const std::vector<std::size_t> rr{0, 1, 2, 2}, cc{3, 0, 1, 1};
    auto w4 = random_tensor({4}, rng, 1.0, false);
    expect_fd([&] { return probe(gather_elements(a, rr, cc), w4); }, {a}, "gather_elements");

    auto gain = random_tensor({4}, rng), lb = random_tensor({4}, rng);
    expect_fd([&] { return probe(layer_norm_rows(a, gain, lb), w34); }, {a, gain, lb}, "layer_norm_rows");
  }
}
