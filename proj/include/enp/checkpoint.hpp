#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "enp/tensor.hpp"

namespace enp {

// Self-describing parameter container: named tensors with shapes plus a
// free-form metadata string (JSON in practice) and a format version. Data is
// stored as flat little-endian 64-bit reals.

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[8] = {'E', 'N', 'P', 'C', 'K', 'P', 'T', '\0'};

struct ParamStore {
  std::vector<std::pair<std::string, Tensor>> items;
  std::string meta;

  Tensor* find(const std::string& name) {
    for (auto& [n, t] : items)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ParamStore& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod<std::uint32_t>(os, kCheckpointVersion);
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(store.meta.size()));
  os.write(store.meta.data(), static_cast<std::streamsize>(store.meta.size()));
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(store.items.size()));
  for (const auto& [name, t] : store.items) {
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) detail::write_pod<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline ParamStore load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  std::uint32_t version = detail::read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  ParamStore store;
  std::uint32_t meta_len = detail::read_pod<std::uint32_t>(is);
  store.meta.resize(meta_len);
  is.read(store.meta.data(), meta_len);
  std::uint32_t count = detail::read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t name_len = detail::read_pod<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    std::uint32_t ndim = detail::read_pod<std::uint32_t>(is);
    Tensor t;
    std::size_t total = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      t.shape.push_back(static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is)));
      total *= t.shape.back();
    }
    t.data.resize(total);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(total * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor data in " + path);
    store.items.emplace_back(std::move(name), std::move(t));
  }
  return store;
}

}  // namespace enp
