// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0

#include "idxshare/pattern.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>

namespace idxshare {

Pattern::Pattern(std::vector<LayerRole> roles) : roles_(std::move(roles)) {
  if (roles_.empty()) throw PatternError("pattern: must contain at least one layer");
  if (roles_.front() != LayerRole::full) throw PatternError("pattern: layer 1 must be F (it seeds the indices)");
  for (auto r : roles_) {
    if (r != LayerRole::full && r != LayerRole::shared) throw PatternError("pattern: roles must be F or S");
  }
}

Pattern Pattern::all_full(std::size_t n_layers) {
  return Pattern(std::vector<LayerRole>(n_layers, LayerRole::full));
}

LayerRole Pattern::role(std::size_t layer) const {
  if (layer < 1 || layer > roles_.size()) {
    throw PatternError("pattern: layer " + std::to_string(layer) + " outside 1.." + std::to_string(roles_.size()));
  }
  return roles_[layer - 1];
}

std::size_t Pattern::full_count() const {
  return static_cast<std::size_t>(std::count(roles_.begin(), roles_.end(), LayerRole::full));
}

Pattern Pattern::with(std::size_t layer, LayerRole role) const {
  (void)this->role(layer);
  auto roles = roles_;
  roles[layer - 1] = role;
  return Pattern(std::move(roles));
}

std::string Pattern::str() const {
  std::string s;
  s.reserve(roles_.size());
  for (auto r : roles_) s.push_back(static_cast<char>(r));
  return s;
}

std::ostream& operator<<(std::ostream& os, const Pattern& p) { return os << p.str(); }

Pattern parse_pattern(std::string_view text, std::size_t n_layers) {
  std::vector<LayerRole> roles;
  roles.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == 'F') {
      roles.push_back(LayerRole::full);
    } else if (c == 'S') {
      roles.push_back(LayerRole::shared);
    } else {
      throw PatternError("pattern: illegal character '" + std::string(1, c) + "' at layer " + std::to_string(i + 1) +
                         " (expected F or S)");
    }
  }
  if (n_layers != 0 && roles.size() != n_layers) {
    throw PatternError("pattern: wrong length " + std::to_string(roles.size()) + ", model has " +
                       std::to_string(n_layers) + " layers");
  }
  return Pattern(std::move(roles));
}

std::size_t source_layer(const Pattern& pattern, std::size_t layer) {
  if (pattern.is_full(layer)) {
    throw PatternError("source_layer: layer " + std::to_string(layer) + " is F and computes its own indices");
  }
  std::size_t j = layer - 1;
  while (!pattern.is_full(j)) --j;
  return j;
}

Pattern uniform_interleave(std::size_t n_layers, std::size_t stride) {
  if (stride < 1) throw PatternError("uniform_interleave: stride must be >= 1");
  std::vector<LayerRole> roles(n_layers, LayerRole::shared);
  for (std::size_t l = 0; l < n_layers; l += stride) roles[l] = LayerRole::full;
  return Pattern(std::move(roles));
}

RetentionStats retention_stats(const Pattern& pattern) {
  RetentionStats s;
  s.full = pattern.full_count();
  s.shared = pattern.shared_count();
  s.retention = static_cast<double>(s.full) / static_cast<double>(pattern.size());
  return s;
}

std::size_t indexer_call_count(const Pattern& pattern) { return pattern.full_count(); }

std::vector<Pattern> read_pattern_file(const std::string& path, std::size_t n_layers) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open pattern file '" + path + "'");
  std::vector<Pattern> out;
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    out.push_back(parse_pattern(std::string_view(line).substr(b, e - b + 1), n_layers));
  }
  return out;
}

void write_pattern_file(const std::string& path, const std::vector<Pattern>& patterns,
                        const std::vector<std::string>& header_comments) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write pattern file '" + path + "'");
  for (const auto& c : header_comments) out << "# " << c << '\n';
  for (const auto& p : patterns) out << p.str() << '\n';
}

}  // namespace idxshare
