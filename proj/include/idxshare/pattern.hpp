// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0
//
// Layer role assignments. Each layer is either F (runs its own indexer and
// refreshes the shared index buffer) or S (reuses the indices of the nearest
// preceding F layer). Layer 1 is always F. Layer numbers are 1-based.

#pragma once

#include <cstddef>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace idxshare {

enum class LayerRole : char { full = 'F', shared = 'S' };

class PatternError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Pattern {
 public:
  // Validates every rule; throws PatternError naming the violated one.
  explicit Pattern(std::vector<LayerRole> roles);

  static Pattern all_full(std::size_t n_layers);

  std::size_t size() const { return roles_.size(); }
  LayerRole role(std::size_t layer) const;  // 1-based
  bool is_full(std::size_t layer) const { return role(layer) == LayerRole::full; }
  const std::vector<LayerRole>& roles() const { return roles_; }

  std::size_t full_count() const;
  std::size_t shared_count() const { return size() - full_count(); }

  // Returns a copy with `layer` set to `role`; re-validates.
  Pattern with(std::size_t layer, LayerRole role) const;

  std::string str() const;

  bool operator==(const Pattern&) const = default;

 private:
  std::vector<LayerRole> roles_;
};

std::ostream& operator<<(std::ostream& os, const Pattern& p);

// `n_layers` of 0 skips the length check.
Pattern parse_pattern(std::string_view text, std::size_t n_layers = 0);

// Nearest preceding F layer of an S layer. Throws PatternError for F layers.
std::size_t source_layer(const Pattern& pattern, std::size_t layer);

// Layers 1, 1 + stride, 1 + 2*stride, ... are F.
Pattern uniform_interleave(std::size_t n_layers, std::size_t stride);

struct RetentionStats {
  std::size_t full = 0;
  std::size_t shared = 0;
  double retention = 0.0;  // full / length
};
RetentionStats retention_stats(const Pattern& pattern);

// Number of indexer forward passes per sequence under the pattern.
std::size_t indexer_call_count(const Pattern& pattern);

// Pattern files: one F/S string per line; '#' starts a comment; blank lines
// are ignored.
std::vector<Pattern> read_pattern_file(const std::string& path, std::size_t n_layers = 0);
void write_pattern_file(const std::string& path, const std::vector<Pattern>& patterns,
                        const std::vector<std::string>& header_comments = {});

}  // namespace idxshare
