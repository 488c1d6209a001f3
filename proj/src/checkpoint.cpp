// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout (all integers little-endian):
//   magic "IDXSCKPT" | u32 version | u32 n_config | n_config x (str key, str value)
//   | u32 n_records | n_records x (str name, u32 rank, rank x u64 dim, f64 payload)
// where str is u32 length followed by bytes.

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "idxshare/model.hpp"

namespace idxshare {

namespace {

constexpr char kMagic[8] = {'I', 'D', 'X', 'S', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.append(s);
  }
  void raw(const char* p, std::size_t n) { bytes_.append(p, n); }
  const std::string& bytes() const { return bytes_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string bytes_;
};

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw std::runtime_error("checkpoint: truncated file");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const Model& model) {
  Writer w;
  w.raw(kMagic, sizeof(kMagic));
  w.u32(kCheckpointVersion);
  const auto kv = model.config().to_kv();
  w.u32(static_cast<std::uint32_t>(kv.size()));
  for (const auto& [k, v] : kv) {
    w.str(k);
    w.str(v);
  }
  const auto params = model.named_parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.shape().size()));
    for (auto d : t.shape()) w.u64(d);
    for (double v : t.data()) w.f64(v);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  Reader r(std::string(std::istreambuf_iterator<char>(in), {}));
  if (r.raw(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  }
  std::map<std::string, std::string> kv;
  for (auto n = r.u32(); n > 0; --n) {
    auto k = r.str();
    kv[k] = r.str();
  }
  Model model(ModelConfig::from_kv(kv));
  auto params = model.named_parameters();
  const auto n_records = r.u32();
  if (n_records != params.size()) {
    throw std::runtime_error("checkpoint: expected " + std::to_string(params.size()) + " records, found " +
                             std::to_string(n_records));
  }
  for (auto& [name, t] : params) {
    const auto got = r.str();
    if (got != name) throw std::runtime_error("checkpoint: expected record '" + name + "', found '" + got + "'");
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u64();
    if (shape != t.shape()) throw ShapeError("checkpoint record " + name, t.shape(), shape);
    for (auto& v : t.mutable_data()) v = r.f64();
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes in '" + path + "'");
  return model;
}

}  // namespace idxshare
