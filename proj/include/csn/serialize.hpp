#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "csn/episodes.hpp"
#include "csn/error.hpp"
#include "csn/tensor.hpp"

namespace csn::io {

// Explicit little-endian packing, independent of host byte order.
inline void write_u8(std::ostream& os, std::uint8_t v) {
  os.put(static_cast<char>(v));
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 8);
}

inline void write_i64(std::ostream& os, std::int64_t v) {
  write_u64(os, static_cast<std::uint64_t>(v));
}

inline void write_f32(std::ostream& os, float v) {
  write_u32(os, std::bit_cast<std::uint32_t>(v));
}

inline void write_f64(std::ostream& os, double v) {
  write_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint8_t read_u8(std::istream& is) {
  int c = is.get();
  if (c == std::char_traits<char>::eof()) throw SerializationError("unexpected end of file");
  return static_cast<std::uint8_t>(c);
}

inline std::uint32_t read_u32(std::istream& is) {
  char b[4];
  if (!is.read(b, 4)) throw SerializationError("unexpected end of file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& is) {
  char b[8];
  if (!is.read(b, 8)) throw SerializationError("unexpected end of file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return v;
}

inline std::int64_t read_i64(std::istream& is) { return static_cast<std::int64_t>(read_u64(is)); }

inline float read_f32(std::istream& is) { return std::bit_cast<float>(read_u32(is)); }

inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_u64(is)); }

inline std::string read_string(std::istream& is) {
  const std::uint32_t len = read_u32(is);
  std::string s(len, '\0');
  if (len && !is.read(s.data(), len)) throw SerializationError("unexpected end of file");
  return s;
}

inline void expect_magic(std::istream& is, const char* magic) {
  char b[4];
  if (!is.read(b, 4) || std::memcmp(b, magic, 4) != 0) {
    throw SerializationError(std::string("bad magic, expected '") + magic + "'");
  }
}

template <typename T>
constexpr std::uint8_t dtype_code() {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8, "unsupported scalar width");
  return sizeof(T) == 4 ? 1 : 2;
}

template <typename T>
void write_scalar(std::ostream& os, T v) {
  if constexpr (sizeof(T) == 4) {
    write_f32(os, static_cast<float>(v));
  } else {
    write_f64(os, static_cast<double>(v));
  }
}

template <typename T>
T read_scalar(std::istream& is) {
  if constexpr (sizeof(T) == 4) {
    return static_cast<T>(read_f32(is));
  } else {
    return static_cast<T>(read_f64(is));
  }
}

}  // namespace csn::io

namespace csn {

// Named-tensor container ("CSNT", version 1): per entry a name, dtype code,
// shape, and raw little-endian values. Round-trips bit-exactly for the
// stored precision; loading into a different precision is an error.
constexpr std::uint32_t kTensorContainerVersion = 1;

template <typename T>
void save_named_tensors(std::ostream& os,
                        const std::vector<std::pair<std::string, const Tensor<T>*>>& tensors) {
  os.write("CSNT", 4);
  io::write_u32(os, kTensorContainerVersion);
  io::write_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    io::write_string(os, name);
    io::write_u8(os, io::dtype_code<T>());
    io::write_u32(os, static_cast<std::uint32_t>(tensor->rank()));
    for (auto d : tensor->shape()) io::write_i64(os, d);
    for (std::int64_t i = 0; i < tensor->size(); ++i) io::write_scalar<T>(os, (*tensor)[i]);
  }
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> load_named_tensors(std::istream& is) {
  io::expect_magic(is, "CSNT");
  const std::uint32_t version = io::read_u32(is);
  if (version != kTensorContainerVersion) {
    throw SerializationError("tensor container version " + std::to_string(version) +
                             " not supported");
  }
  const std::uint32_t count = io::read_u32(is);
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.reserve(count);
  for (std::uint32_t e = 0; e < count; ++e) {
    std::string name = io::read_string(is);
    const std::uint8_t dtype = io::read_u8(is);
    if (dtype != io::dtype_code<T>()) {
      throw SerializationError("tensor '" + name + "' stored with dtype code " +
                               std::to_string(dtype) + ", requested " +
                               std::to_string(io::dtype_code<T>()));
    }
    const std::uint32_t rank = io::read_u32(is);
    Shape shape(rank);
    for (auto& d : shape) d = io::read_i64(is);
    Tensor<T> t(shape);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = io::read_scalar<T>(is);
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

// Dataset cache ("CSND", version 1): header with sample shape, then per
// class its id, split and f32 sample block. Reloads bit-exactly.
constexpr std::uint32_t kDatasetCacheVersion = 1;

inline void save_dataset(std::ostream& os, const Dataset& ds) {
  os.write("CSND", 4);
  io::write_u32(os, kDatasetCacheVersion);
  io::write_u32(os, static_cast<std::uint32_t>(ds.sample_shape.size()));
  for (auto d : ds.sample_shape) io::write_i64(os, d);
  io::write_u32(os, static_cast<std::uint32_t>(ds.classes.size()));
  for (const auto& rec : ds.classes) {
    io::write_i64(os, rec.global_id);
    io::write_u8(os, static_cast<std::uint8_t>(rec.split));
    io::write_u32(os, static_cast<std::uint32_t>(rec.samples.size()));
    for (const auto& sample : rec.samples) {
      if (static_cast<std::int64_t>(sample.size()) != ds.sample_size()) {
        throw SerializationError("dataset cache: sample size mismatch in class " +
                                 std::to_string(rec.global_id));
      }
      for (float v : sample) io::write_f32(os, v);
    }
  }
}

inline Dataset load_dataset(std::istream& is) {
  io::expect_magic(is, "CSND");
  const std::uint32_t version = io::read_u32(is);
  if (version != kDatasetCacheVersion) {
    throw SerializationError("dataset cache version " + std::to_string(version) + " not supported");
  }
  Dataset ds;
  const std::uint32_t rank = io::read_u32(is);
  ds.sample_shape.resize(rank);
  for (auto& d : ds.sample_shape) d = io::read_i64(is);
  const std::uint32_t classes = io::read_u32(is);
  ds.classes.reserve(classes);
  const std::int64_t sample_size = ds.sample_size();
  for (std::uint32_t c = 0; c < classes; ++c) {
    ClassRecord rec;
    rec.global_id = io::read_i64(is);
    const std::uint8_t split = io::read_u8(is);
    if (split > 2) throw SerializationError("dataset cache: bad split tag");
    rec.split = static_cast<Split>(split);
    const std::uint32_t samples = io::read_u32(is);
    rec.samples.reserve(samples);
    for (std::uint32_t s = 0; s < samples; ++s) {
      std::vector<float> sample(static_cast<std::size_t>(sample_size));
      for (auto& v : sample) v = io::read_f32(is);
      rec.samples.push_back(std::move(sample));
    }
    ds.classes.push_back(std::move(rec));
  }
  return ds;
}

inline void save_dataset_file(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw SerializationError("cannot open '" + path + "' for writing");
  save_dataset(os, ds);
  if (!os) throw SerializationError("write failed for '" + path + "'");
}

inline Dataset load_dataset_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw SerializationError("cannot open '" + path + "' for reading");
  return load_dataset(is);
}

}  // namespace csn
