#pragma once

// LTXC binary container shared by checkpoints, masks, concept banks and PCBM
// models.
//
//   magic      "LTXC"                      4 bytes
//   version    u32 LE
//   descriptor u32 LE length + UTF-8 JSON
//   records    until end of file:
//                name length u32, name bytes, rank u32, extents u32[rank],
//                payload (f64 LE, or u8 when descriptor.dtype == "u8")
//
// All integers and floats are written byte by byte in little-endian order,
// so files are identical regardless of host endianness.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "ltx/error.hpp"
#include "ltx/tensor.hpp"

namespace ltx {

inline constexpr std::string_view kContainerMagic = "LTXC";
inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType { F64, U8 };

struct Record {
  std::string name;
  Shape shape;
  std::vector<double> f64;
  std::vector<std::uint8_t> u8;
};

struct Container {
  nlohmann::json descriptor = nlohmann::json::object();
  DType dtype = DType::F64;
  std::vector<Record> records;

  const Record* find(std::string_view name) const {
    for (const auto& r : records)
      if (r.name == name) return &r;
    return nullptr;
  }

  const Record& at(std::string_view name) const {
    const Record* r = find(name);
    require(r != nullptr, ErrorCode::ArchitectureMismatch, "container has no record '" + std::string(name) + "'");
    return *r;
  }
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  void raw(std::string_view s) { bytes_.append(s); }
  std::string take() { return std::move(bytes_); }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
    return std::bit_cast<double>(bits);
  }
  std::string_view raw(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    require(bytes_.size() - pos_ >= n, ErrorCode::Io, "truncated container");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_container(const Container& c) {
  detail::ByteWriter w;
  w.raw(kContainerMagic);
  w.u32(kContainerVersion);
  nlohmann::json desc = c.descriptor;
  desc["dtype"] = c.dtype == DType::U8 ? "u8" : "f64";
  const std::string text = desc.dump();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.raw(text);
  for (const auto& r : c.records) {
    w.u32(static_cast<std::uint32_t>(r.name.size()));
    w.raw(r.name);
    w.u32(static_cast<std::uint32_t>(r.shape.size()));
    for (auto e : r.shape) w.u32(static_cast<std::uint32_t>(e));
    const std::size_t n = element_count(r.shape);
    if (c.dtype == DType::U8) {
      require(r.u8.size() == n, ErrorCode::ShapeMismatch, "record '" + r.name + "' payload size");
      for (auto v : r.u8) w.u8(v);
    } else {
      require(r.f64.size() == n, ErrorCode::ShapeMismatch, "record '" + r.name + "' payload size");
      for (double v : r.f64) w.f64(v);
    }
  }
  return w.take();
}

inline Container decode_container(std::string_view bytes) {
  detail::ByteReader r(bytes);
  require(bytes.size() >= 8 && bytes.substr(0, 4) == kContainerMagic, ErrorCode::VersionMismatch,
          "bad magic bytes (expected LTXC)");
  r.raw(4);
  const std::uint32_t version = r.u32();
  require(version == kContainerVersion, ErrorCode::VersionMismatch,
          "container version " + std::to_string(version) + ", expected " + std::to_string(kContainerVersion));
  Container c;
  const std::uint32_t desc_len = r.u32();
  try {
    c.descriptor = nlohmann::json::parse(r.raw(desc_len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Io, std::string("container descriptor is not valid JSON: ") + e.what());
  }
  const std::string dtype = c.descriptor.value("dtype", "f64");
  require(dtype == "f64" || dtype == "u8", ErrorCode::VersionMismatch, "unknown dtype '" + dtype + "'");
  c.dtype = dtype == "u8" ? DType::U8 : DType::F64;
  c.descriptor.erase("dtype");
  while (!r.done()) {
    Record rec;
    rec.name = std::string(r.raw(r.u32()));
    const std::uint32_t rank = r.u32();
    for (std::uint32_t i = 0; i < rank; ++i) rec.shape.push_back(r.u32());
    const std::size_t n = element_count(rec.shape);
    if (c.dtype == DType::U8) {
      rec.u8.resize(n);
      for (auto& v : rec.u8) v = r.u8();
    } else {
      rec.f64.resize(n);
      for (auto& v : rec.f64) v = r.f64();
    }
    c.records.push_back(std::move(rec));
  }
  return c;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorCode::Io, "write failed for " + path.string());
}

inline void write_container(const std::filesystem::path& path, const Container& c) {
  write_file_bytes(path, encode_container(c));
}

inline Container read_container(const std::filesystem::path& path) {
  return decode_container(read_file_bytes(path));
}

}  // namespace ltx
