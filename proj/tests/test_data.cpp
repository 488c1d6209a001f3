// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "idxshare/data.hpp"
#include "idxshare/random.hpp"

using namespace idxshare;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("idxshare_" + name)).string();
}

}  // namespace

TEST_CASE("named sub-streams are independent and reproducible") {
  auto a = seeded_stream(1, "data"), b = seeded_stream(1, "data"), c = seeded_stream(1, "init");
  const auto x = a();
  CHECK(x == b());
  CHECK(x != c());
  CHECK(seeded_stream(2, "data")() != seeded_stream(1, "data")());
}

TEST_CASE("copy dataset has the requested shape and decodable answers") {
  auto d = generate_copy_dataset({256, 256}, 64, 3);
  REQUIRE(d.sequences.size() == 64);
  for (const auto& s : d.sequences) {
    CHECK(s.size() == 256);
    auto ans = decode_copy_answers(s);
    REQUIRE(ans.size() == 128);
    for (std::size_t i = 0; i < 128; ++i) CHECK(s[128 + i] == ans[i]);
    for (int t : s) CHECK((t >= 0 && t < 256));
  }
  auto broken = d.sequences[0];
  broken[200] = (broken[200] + 1) % 256;
  CHECK_THROWS_AS(decode_copy_answers(broken), std::invalid_argument);
  CHECK_THROWS_AS(generate_copy_dataset({7, 16}, 1, 0), std::invalid_argument);
}

TEST_CASE("dataset files are byte-identical for a seed and round trip") {
  const auto p1 = temp_path("d1.txt"), p2 = temp_path("d2.txt");
  write_dataset(p1, generate_copy_dataset({16, 8}, 10, 42));
  write_dataset(p2, generate_copy_dataset({16, 8}, 10, 42));
  CHECK(slurp(p1) == slurp(p2));
  auto back = read_dataset(p1);
  CHECK(back.sequences == generate_copy_dataset({16, 8}, 10, 42).sequences);
  CHECK(back.length == 16);
  CHECK(back.vocab_size == 8);
  write_dataset(p2, generate_copy_dataset({16, 8}, 10, 43));
  CHECK(slurp(p1) != slurp(p2));
  std::ofstream(p2, std::ios::trunc) << slurp(p1) << "1 2 3\n";
  CHECK_THROWS(read_dataset(p2));
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("copy accuracy scores only the second half predictions") {
  const std::vector<int> tokens{1, 2, 1, 2};
  // Positions 1 and 2 predict tokens 2 and 3 (values 1 and 2).
  std::vector<double> logits(4 * 3, 0.0);
  logits[1 * 3 + 1] = 5.0;  // right
  logits[2 * 3 + 0] = 5.0;  // wrong
  logits[0 * 3 + 2] = 9.0;  // first half, ignored
  CHECK(copy_task_accuracy(Tensor::from({4, 3}, logits), tokens) == doctest::Approx(0.5));
}
