#pragma once

// SSCK1 checkpoint container:
//   "SSCK1" | u32 version | u32 tensor_count
//   | per tensor: str name | u8 dtype (0 f32, 1 f64) | u32 rank | u64 dims[rank] | data
//   | u32 metadata_count
//   | per entry: str key | u8 kind (0 f64 array, 1 string) | (u64 n, f64[n]) or str
// Strings are u32 length + bytes; everything little-endian.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "softsense/binary_io.hpp"
#include "softsense/models.hpp"

namespace softsense {

inline constexpr std::string_view kCheckpointMagic = "SSCK1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  struct Entry {
    std::uint8_t dtype = 0;
    nn::Shape shape;
    std::vector<double> values;
  };

  std::map<std::string, Entry> tensors;
  std::map<std::string, std::vector<double>> arrays;
  std::map<std::string, std::string> strings;

  template <typename T>
  void store(const std::vector<NamedParam<T>>& params) {
    for (const auto& p : params) {
      tensors[p.name] = {std::is_same_v<T, float> ? std::uint8_t{0} : std::uint8_t{1}, p.value->shape(),
                         std::vector<double>(p.value->vec().begin(), p.value->vec().end())};
    }
  }

  template <typename T>
  void restore(const std::vector<NamedParam<T>>& params) const {
    for (const auto& p : params) {
      const auto it = tensors.find(p.name);
      if (it == tensors.end()) throw DependencyError("checkpoint lacks tensor " + p.name);
      if (it->second.shape != p.value->shape()) {
        throw DependencyError("checkpoint tensor " + p.name + " has shape " + nn::shape_str(it->second.shape) +
                              ", model expects " + nn::shape_str(p.value->shape()));
      }
      for (std::size_t i = 0; i < p.value->size(); ++i) (*p.value)[i] = static_cast<T>(it->second.values[i]);
    }
  }

  [[nodiscard]] const std::vector<double>& array(const std::string& key) const {
    const auto it = arrays.find(key);
    if (it == arrays.end()) throw DependencyError("checkpoint metadata lacks " + key);
    return it->second;
  }
  [[nodiscard]] const std::string& string(const std::string& key) const {
    const auto it = strings.find(key);
    if (it == strings.end()) throw DependencyError("checkpoint metadata lacks " + key);
    return it->second;
  }
};

inline void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  binio::write_magic(out, kCheckpointMagic);
  binio::write<std::uint32_t>(out, kCheckpointVersion);
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, e] : ck.tensors) {
    binio::write_string(out, name);
    binio::write<std::uint8_t>(out, e.dtype);
    binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) binio::write<std::uint64_t>(out, d);
    if (e.dtype == 0) {
      const std::vector<float> f(e.values.begin(), e.values.end());
      binio::write_array(out, f.data(), f.size());
    } else {
      binio::write_array(out, e.values.data(), e.values.size());
    }
  }
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(ck.arrays.size() + ck.strings.size()));
  for (const auto& [key, values] : ck.arrays) {
    binio::write_string(out, key);
    binio::write<std::uint8_t>(out, 0);
    binio::write<std::uint64_t>(out, values.size());
    binio::write_array(out, values.data(), values.size());
  }
  for (const auto& [key, text] : ck.strings) {
    binio::write_string(out, key);
    binio::write<std::uint8_t>(out, 1);
    binio::write_string(out, text);
  }
}

inline Checkpoint read_checkpoint(std::istream& in) {
  binio::expect_magic(in, kCheckpointMagic);
  const auto version = binio::read<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const auto count = binio::read<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = binio::read_string(in);
    Checkpoint::Entry e;
    e.dtype = binio::read<std::uint8_t>(in);
    const auto rank = binio::read<std::uint32_t>(in);
    if (rank > 8) throw FormatError("tensor rank out of range");
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(binio::read<std::uint64_t>(in));
    const std::size_t n = nn::shape_size(e.shape);
    if (n > (1ULL << 30)) throw FormatError("tensor too large");
    if (e.dtype == 0) {
      std::vector<float> f(n);
      binio::read_array(in, f.data(), n);
      e.values.assign(f.begin(), f.end());
    } else if (e.dtype == 1) {
      e.values.resize(n);
      binio::read_array(in, e.values.data(), n);
    } else {
      throw FormatError("unknown tensor dtype");
    }
    ck.tensors.emplace(name, std::move(e));
  }
  const auto meta = binio::read<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < meta; ++i) {
    const std::string key = binio::read_string(in);
    const auto kind = binio::read<std::uint8_t>(in);
    if (kind == 0) {
      const auto n = binio::read<std::uint64_t>(in);
      if (n > (1ULL << 30)) throw FormatError("metadata array too large");
      std::vector<double> v(n);
      binio::read_array(in, v.data(), n);
      ck.arrays.emplace(key, std::move(v));
    } else if (kind == 1) {
      ck.strings.emplace(key, binio::read_string(in));
    } else {
      throw FormatError("unknown metadata kind");
    }
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_checkpoint(out, ck);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("missing checkpoint " + path.string());
  return read_checkpoint(in);
}

// Metadata helpers for the normaliser / mask / viewport blocks.

inline void store_normalizer(Checkpoint& ck, const std::string& prefix, const Normalizer& n) {
  ck.arrays[prefix + ".min"] = n.min;
  ck.arrays[prefix + ".max"] = n.max;
}

inline Normalizer load_normalizer(const Checkpoint& ck, const std::string& prefix) {
  Normalizer n{ck.array(prefix + ".min"), ck.array(prefix + ".max")};
  if (n.min.size() != n.max.size()) throw DependencyError("normalizer " + prefix + " is inconsistent");
  return n;
}

inline void store_mask(Checkpoint& ck, const FeatureMask& m) {
  ck.arrays["mask.active"] = std::vector<double>(m.active.begin(), m.active.end());
  ck.arrays["mask.means"] = m.means;
}

inline FeatureMask load_mask(const Checkpoint& ck) {
  const auto& active = ck.array("mask.active");
  FeatureMask m;
  for (double a : active) m.active.push_back(a != 0.0 ? 1 : 0);
  m.means = ck.array("mask.means");
  if (m.means.size() != m.active.size()) throw DependencyError("feature mask metadata is inconsistent");
  return m;
}

inline void store_viewport(Checkpoint& ck, const Viewport& vp) {
  ck.arrays["viewport"] = {vp.min_x, vp.min_y, vp.width, vp.height, static_cast<double>(vp.pixels_x),
                           static_cast<double>(vp.pixels_y)};
}

inline Viewport load_viewport(const Checkpoint& ck) {
  const auto& v = ck.array("viewport");
  if (v.size() != 6) throw DependencyError("viewport metadata is malformed");
  return {v[0], v[1], v[2], v[3], static_cast<std::size_t>(v[4]), static_cast<std::size_t>(v[5])};
}

}  // namespace softsense
