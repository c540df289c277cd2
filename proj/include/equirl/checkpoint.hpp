#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "equirl/tensor.hpp"

namespace equirl {

/// Versioned flat container of named tensors.
///
/// Layout (all integers little-endian):
///   magic "EQRLCKP1" (8 bytes)
///   u32 version (currently 1)
///   u32 tensor count
///   per tensor:
///     u32 name length, name bytes
///     u32 rank, u64 extents[rank]
///     f64 data[numel] (doubles regardless of the in-memory scalar type,
///                      so float-trained and double-tested nets share files)
///
/// Round-trip of double tensors is bit-exact; float tensors are widened
/// losslessly and truncate back to the identical float.
class Checkpoint {
 public:
  static constexpr char kMagic[9] = "EQRLCKP1";
  static constexpr std::uint32_t kVersion = 1;

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    entries_[name] = t.template cast<double>();
  }

  bool has(const std::string& name) const { return entries_.count(name) > 0; }
  std::size_t size() const { return entries_.size(); }

  template <typename T>
  Tensor<T> get(const std::string& name) const {
    auto it = entries_.find(name);
    require(it != entries_.end(), "checkpoint: no tensor named '", name, "'");
    return it->second.cast<T>();
  }

  const std::map<std::string, Tensor<double>>& entries() const { return entries_; }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "checkpoint: cannot open '", path, "' for writing");
    f.write(kMagic, 8);
    write_u32(f, kVersion);
    write_u32(f, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& [name, t] : entries_) {
      write_u32(f, static_cast<std::uint32_t>(name.size()));
      f.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_u32(f, static_cast<std::uint32_t>(t.shape.size()));
      for (auto e : t.shape) write_u64(f, e);
      f.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    require(f.good(), "checkpoint: write to '", path, "' failed");
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "checkpoint: cannot open '", path, "'");
    char magic[8];
    f.read(magic, 8);
    require(f.good() && std::memcmp(magic, kMagic, 8) == 0,
            "checkpoint: bad magic in '", path, "'");
    std::uint32_t version = read_u32(f);
    require(version == kVersion, "checkpoint: unsupported version ", version);
    std::uint32_t count = read_u32(f);
    Checkpoint ck;
    for (std::uint32_t i = 0; i < count; ++i) {
      std::uint32_t name_len = read_u32(f);
      std::string name(name_len, '\0');
      f.read(name.data(), name_len);
      std::uint32_t rank = read_u32(f);
      std::vector<std::size_t> shape(rank);
      for (auto& e : shape) e = static_cast<std::size_t>(read_u64(f));
      Tensor<double> t(shape);
      f.read(reinterpret_cast<char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
      require(f.good(), "checkpoint: truncated file '", path, "'");
      ck.entries_[name] = std::move(t);
    }
    return ck;
  }

 private:
  static void write_u32(std::ofstream& f, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    f.write(reinterpret_cast<char*>(b), 4);
  }
  static void write_u64(std::ofstream& f, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    f.write(reinterpret_cast<char*>(b), 8);
  }
  static std::uint32_t read_u32(std::ifstream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  static std::uint64_t read_u64(std::ifstream& f) {
    unsigned char b[8];
    f.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

  std::map<std::string, Tensor<double>> entries_;
};

}  // namespace equirl
