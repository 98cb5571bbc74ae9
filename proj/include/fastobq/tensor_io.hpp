#pragma once

/**
 * @file tensor_io.hpp
 * @brief FTNS binary tensor container and the JSON layer-bundle manifest.
 *
 * On-disk layout, little-endian throughout:
 *
 *   offset 0   "FTNS" magic (0x46 0x54 0x4E 0x53)
 *   offset 4   u8 version (= 1)
 *   offset 5   u8 dtype   (0=f32, 1=f64, 2=i8, 3=i32)
 *   offset 6   u8 ndim    (>= 1)
 *   offset 7   u8 reserved (= 0)
 *   offset 8   ndim x u64 dims
 *   then       row-major payload, product(dims) x sizeof(dtype) bytes
 *
 * The in-memory payload is kept in its on-disk (little-endian) byte order;
 * the typed accessors below do the conversion, so read/write are plain
 * byte copies and round-trip bit-exactly.
 */

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "fastobq/error.hpp"

namespace fastobq {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, i8 = 2, i32 = 3 };

constexpr std::size_t dtype_size(DType dt) {
  switch (dt) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::i8: return 1;
    case DType::i32: return 4;
  }
  return 0;
}

inline constexpr std::uint8_t kTensorMagic[4] = {0x46, 0x54, 0x4E, 0x53};
inline constexpr std::uint8_t kTensorVersion = 1;

struct TensorFile {
  DType dtype = DType::f64;
  std::vector<std::uint64_t> dims;
  std::vector<std::byte> data;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  bool operator==(const TensorFile&) const = default;
};

namespace detail {

template <typename U>
inline void put_le(std::vector<std::byte>& out, U v) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
  }
}

template <typename U>
inline U get_le(const std::byte* p) {
  static_assert(std::is_unsigned_v<U>);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    v |= static_cast<U>(std::to_integer<std::uint8_t>(p[i])) << (8 * i);
  }
  return v;
}

template <typename T>
struct bits_of;
template <> struct bits_of<float> { using type = std::uint32_t; };
template <> struct bits_of<double> { using type = std::uint64_t; };
template <> struct bits_of<std::int8_t> { using type = std::uint8_t; };
template <> struct bits_of<std::int32_t> { using type = std::uint32_t; };

template <typename T>
inline void put_scalar(std::vector<std::byte>& out, T v) {
  put_le(out, std::bit_cast<typename bits_of<T>::type>(v));
}

template <typename T>
inline T get_scalar(const std::byte* p) {
  return std::bit_cast<T>(get_le<typename bits_of<T>::type>(p));
}

// Product of dims, or false on overflow / zero extent.
inline bool checked_count(std::span<const std::uint64_t> dims, std::size_t elem,
                          std::uint64_t& bytes) {
  std::uint64_t n = 1;
  for (auto d : dims) {
    if (d == 0) return false;
    if (n > UINT64_MAX / d) return false;
    n *= d;
  }
  if (n > UINT64_MAX / elem) return false;
  bytes = n * elem;
  return true;
}

}  // namespace detail

/// Throws InvalidTensor when the TensorFile invariants do not hold.
inline void validate_tensor(const TensorFile& t) {
  if (static_cast<std::uint8_t>(t.dtype) > 3) {
    throw Error(ErrorCode::unsupported_dtype, "dtype code out of range");
  }
  if (t.dims.empty() || t.dims.size() > 255) {
    throw Error(ErrorCode::invalid_tensor, "ndim must be in [1, 255]");
  }
  std::uint64_t bytes = 0;
  if (!detail::checked_count(t.dims, dtype_size(t.dtype), bytes)) {
    throw Error(ErrorCode::invalid_tensor, "every dim must be >= 1 (and the size must fit)");
  }
  if (bytes != t.data.size()) {
    throw Error(ErrorCode::invalid_tensor,
                "payload is " + std::to_string(t.data.size()) + " bytes, dims require " +
                    std::to_string(bytes));
  }
}

inline std::size_t header_size(std::size_t ndim) { return 8 + 8 * ndim; }

inline std::vector<std::byte> encode_tensor(const TensorFile& t) {
  validate_tensor(t);
  std::vector<std::byte> out;
  out.reserve(header_size(t.dims.size()) + t.data.size());
  for (auto b : kTensorMagic) out.push_back(static_cast<std::byte>(b));
  out.push_back(static_cast<std::byte>(kTensorVersion));
  out.push_back(static_cast<std::byte>(t.dtype));
  out.push_back(static_cast<std::byte>(t.dims.size()));
  out.push_back(std::byte{0});
  for (auto d : t.dims) detail::put_le<std::uint64_t>(out, d);
  out.insert(out.end(), t.data.begin(), t.data.end());
  return out;
}

inline TensorFile decode_tensor(std::span<const std::byte> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kTensorMagic, 4) != 0) {
    throw Error(ErrorCode::bad_magic, "missing FTNS magic");
  }
  const auto version = std::to_integer<std::uint8_t>(bytes[4]);
  if (version != kTensorVersion) {
    throw Error(ErrorCode::bad_magic, "unknown FTNS version " + std::to_string(version));
  }
  const auto code = std::to_integer<std::uint8_t>(bytes[5]);
  if (code > 3) {
    throw Error(ErrorCode::unsupported_dtype, "dtype code " + std::to_string(code));
  }
  const auto ndim = std::to_integer<std::uint8_t>(bytes[6]);
  if (ndim == 0) throw Error(ErrorCode::invalid_tensor, "ndim = 0");
  if (bytes.size() < header_size(ndim)) {
    throw Error(ErrorCode::truncated_payload, "header shorter than declared ndim");
  }

  TensorFile t;
  t.dtype = static_cast<DType>(code);
  t.dims.resize(ndim);
  for (std::size_t i = 0; i < ndim; ++i) {
    t.dims[i] = detail::get_le<std::uint64_t>(bytes.data() + 8 + 8 * i);
  }
  std::uint64_t payload = 0;
  if (!detail::checked_count(t.dims, dtype_size(t.dtype), payload)) {
    throw Error(ErrorCode::invalid_tensor, "zero or overflowing dim");
  }
  const auto body = bytes.subspan(header_size(ndim));
  if (body.size() != payload) {
    throw Error(ErrorCode::truncated_payload, "payload is " + std::to_string(body.size()) +
                                                  " bytes, dims require " +
                                                  std::to_string(payload));
  }
  t.data.assign(body.begin(), body.end());
  return t;
}

inline TensorFile read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::missing_file, path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const std::byte*>(raw.data());
  return decode_tensor(std::span<const std::byte>(p, raw.size()));
}

inline void write_tensor(const TensorFile& t, const std::filesystem::path& path) {
  const auto bytes = encode_tensor(t);  // validates before touching the file
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io_failure, "cannot open " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io_failure, "short write to " + path.string());
}

// ---------------------------------------------------------------------------
// Typed views.

template <typename T>
constexpr DType dtype_of();
template <> constexpr DType dtype_of<float>() { return DType::f32; }
template <> constexpr DType dtype_of<double>() { return DType::f64; }
template <> constexpr DType dtype_of<std::int8_t>() { return DType::i8; }
template <> constexpr DType dtype_of<std::int32_t>() { return DType::i32; }

template <typename T>
TensorFile make_tensor(std::vector<std::uint64_t> dims, std::span<const T> values) {
  TensorFile t;
  t.dtype = dtype_of<T>();
  t.dims = std::move(dims);
  t.data.reserve(values.size() * sizeof(T));
  for (T v : values) detail::put_scalar(t.data, v);
  validate_tensor(t);
  return t;
}

/// Element i of the payload widened to f64.
inline double element_as_double(const TensorFile& t, std::size_t i) {
  const std::byte* p = t.data.data() + i * dtype_size(t.dtype);
  switch (t.dtype) {
    case DType::f32: return detail::get_scalar<float>(p);
    case DType::f64: return detail::get_scalar<double>(p);
    case DType::i8: return detail::get_scalar<std::int8_t>(p);
    case DType::i32: return detail::get_scalar<std::int32_t>(p);
  }
  return 0.0;
}

inline std::vector<double> to_doubles(const TensorFile& t) {
  std::vector<double> v(t.element_count());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = element_as_double(t, i);
  return v;
}

/// A 2-D tensor (or a 1-D tensor as one row) widened to f64.
inline Eigen::MatrixXd to_matrix(const TensorFile& t) {
  validate_tensor(t);
  if (t.dims.size() > 2) {
    throw Error(ErrorCode::shape_mismatch, "expected a 1-D or 2-D tensor");
  }
  const auto rows = t.dims.size() == 2 ? static_cast<Eigen::Index>(t.dims[0]) : 1;
  const auto cols = static_cast<Eigen::Index>(t.dims.back());
  Eigen::MatrixXd m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = element_as_double(t, k++);
  }
  return m;
}

inline TensorFile from_matrix(const Eigen::MatrixXd& m, DType dtype = DType::f64) {
  TensorFile t;
  t.dtype = dtype;
  t.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.data.reserve(static_cast<std::size_t>(m.size()) * dtype_size(dtype));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      switch (dtype) {
        case DType::f32: detail::put_scalar(t.data, static_cast<float>(v)); break;
        case DType::f64: detail::put_scalar(t.data, v); break;
        case DType::i8: detail::put_scalar(t.data, static_cast<std::int8_t>(std::lround(v))); break;
        case DType::i32: detail::put_scalar(t.data, static_cast<std::int32_t>(std::lround(v))); break;
      }
    }
  }
  validate_tensor(t);
  return t;
}

// ---------------------------------------------------------------------------
// Layer bundles.

struct LayerBundle {
  std::string name;
  Eigen::MatrixXd weight;  // [d_row, d_col]
  Eigen::MatrixXd calib;   // [d_col, N]
  std::map<std::string, std::string> metadata;

  Eigen::Index d_row() const { return weight.rows(); }
  Eigen::Index d_col() const { return weight.cols(); }
  Eigen::Index n_samples() const { return calib.cols(); }
};

inline void check_bundle_shapes(const LayerBundle& b) {
  if (b.weight.cols() != b.calib.rows()) {
    throw Error(ErrorCode::shape_mismatch,
                b.name + ": weight has " + std::to_string(b.weight.cols()) +
                    " columns but calib has " + std::to_string(b.calib.rows()) + " rows");
  }
}

/// Loads every layer named in a manifest of the form
/// {"layers":[{"name":..,"weight":..,"calib":..,"metadata":{..}}]}.
/// Tensor paths resolve relative to the manifest's directory.
inline std::vector<LayerBundle> load_bundle(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw Error(ErrorCode::missing_file, manifest.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::bad_manifest, e.what());
  }
  if (!doc.is_object() || !doc.contains("layers") || !doc["layers"].is_array()) {
    throw Error(ErrorCode::bad_manifest, "expected an object with a \"layers\" array");
  }

  const auto base = manifest.parent_path();
  std::vector<LayerBundle> out;
  for (const auto& entry : doc["layers"]) {
    if (!entry.is_object() || !entry.contains("name") || !entry.contains("weight") ||
        !entry.contains("calib")) {
      throw Error(ErrorCode::bad_manifest, "layer entries need name, weight and calib");
    }
    LayerBundle b;
    try {
      b.name = entry["name"].get<std::string>();
      const auto wpath = base / entry["weight"].get<std::string>();
      const auto cpath = base / entry["calib"].get<std::string>();
      if (!std::filesystem::exists(wpath)) throw Error(ErrorCode::missing_file, wpath.string());
      if (!std::filesystem::exists(cpath)) throw Error(ErrorCode::missing_file, cpath.string());
      const auto wt = read_tensor(wpath);
      const auto ct = read_tensor(cpath);
      if (wt.dims.size() != 2 || ct.dims.size() != 2) {
        throw Error(ErrorCode::shape_mismatch, b.name + ": weight and calib must be 2-D");
      }
      b.weight = to_matrix(wt);
      b.calib = to_matrix(ct);
      if (entry.contains("metadata") && entry["metadata"].is_object()) {
        for (const auto& [k, v] : entry["metadata"].items()) {
          b.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::bad_manifest, e.what());
    }
    check_bundle_shapes(b);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace fastobq
