// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0

#include "idxshare/data.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "idxshare/random.hpp"

namespace idxshare {

void CopyTaskConfig::validate() const {
  if (length < 2 || length % 2 != 0) throw std::invalid_argument("copy task: length must be even and >= 2");
  if (vocab_size < 2) throw std::invalid_argument("copy task: vocab_size must be >= 2");
}

Dataset generate_copy_dataset(const CopyTaskConfig& task, std::size_t count, std::uint64_t seed) {
  task.validate();
  auto rng = seeded_stream(seed, "data");
  std::uniform_int_distribution<int> token(0, static_cast<int>(task.vocab_size) - 1);
  Dataset d;
  d.length = task.length;
  d.vocab_size = task.vocab_size;
  d.seed = seed;
  d.sequences.reserve(count);
  const std::size_t half = task.length / 2;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<int> seq(task.length);
    for (std::size_t t = 0; t < half; ++t) seq[t] = token(rng);
    for (std::size_t t = half; t < task.length; ++t) seq[t] = seq[t - half];
    d.sequences.push_back(std::move(seq));
  }
  return d;
}

std::vector<int> decode_copy_answers(std::span<const int> sequence) {
  if (sequence.size() % 2 != 0) throw std::invalid_argument("copy record: odd length");
  const std::size_t half = sequence.size() / 2;
  for (std::size_t t = half; t < sequence.size(); ++t) {
    if (sequence[t] != sequence[t - half]) {
      throw std::invalid_argument("copy record: position " + std::to_string(t) + " is not a copy");
    }
  }
  return {sequence.begin(), sequence.begin() + static_cast<std::ptrdiff_t>(half)};
}

double copy_task_accuracy(const Tensor& logits, std::span<const int> tokens) {
  const std::size_t n = tokens.size(), half = n / 2, v = logits.cols();
  if (logits.rows() != n) throw ShapeError("copy_task_accuracy: logits " + shape_str(logits.shape()));
  std::size_t correct = 0, total = 0;
  for (std::size_t t = half - 1; t + 1 < n; ++t) {
    auto row = logits.data().subspan(t * v, v);
    std::size_t best = 0;
    for (std::size_t j = 1; j < v; ++j)
      if (row[j] > row[best]) best = j;
    correct += static_cast<int>(best) == tokens[t + 1];
    ++total;
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

void write_dataset(const std::string& path, const Dataset& data) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write dataset '" + path + "'");
  out << "# idxshare dataset v" << kDatasetVersion << '\n';
  out << "# task=" << data.task << " count=" << data.sequences.size() << " length=" << data.length
      << " vocab=" << data.vocab_size << " seed=" << data.seed << '\n';
  for (const auto& seq : data.sequences) {
    for (std::size_t i = 0; i < seq.size(); ++i) out << (i ? " " : "") << seq[i];
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed for dataset '" + path + "'");
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != "# idxshare dataset v" + std::to_string(kDatasetVersion)) {
    throw std::runtime_error("dataset '" + path + "': missing or unsupported version header");
  }
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0) {
    throw std::runtime_error("dataset '" + path + "': missing metadata line");
  }
  std::map<std::string, std::string> meta;
  std::istringstream ms(line.substr(2));
  for (std::string kv; ms >> kv;) {
    auto eq = kv.find('=');
    if (eq != std::string::npos) meta[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  Dataset d;
  try {
    d.task = meta.at("task");
    d.length = std::stoull(meta.at("length"));
    d.vocab_size = std::stoull(meta.at("vocab"));
    d.seed = std::stoull(meta.at("seed"));
  } catch (const std::exception&) {
    throw std::runtime_error("dataset '" + path + "': malformed metadata line");
  }
  const std::size_t count = std::stoull(meta.count("count") ? meta["count"] : "0");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::vector<int> seq;
    for (int tok; ls >> tok;) seq.push_back(tok);
    if (seq.size() != d.length) {
      throw std::runtime_error("dataset '" + path + "': record " + std::to_string(d.sequences.size()) + " has " +
                               std::to_string(seq.size()) + " tokens, expected " + std::to_string(d.length));
    }
    d.sequences.push_back(std::move(seq));
  }
  if (d.sequences.size() != count) {
    throw std::runtime_error("dataset '" + path + "': header says " + std::to_string(count) + " records, found " +
                             std::to_string(d.sequences.size()));
  }
  return d;
}

}  // namespace idxshare
