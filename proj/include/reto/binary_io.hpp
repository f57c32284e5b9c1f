#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "reto/error.hpp"

namespace reto {

// Little-endian byte sink.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void i32(std::int32_t v) { put_le(static_cast<std::uint32_t>(v)); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }

  std::size_t size() const { return bytes_.size(); }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

  // Appends the CRC-32 of everything written so far.
  void seal() { u32(crc32_of(bytes_.data(), bytes_.size())); }

  static std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size) {
    return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), data, static_cast<uInt>(size)));
  }

 private:
  template <typename U>
  void put_le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  std::vector<std::uint8_t> bytes_;
};

// Bounds-checked little-endian reader; every failure names the byte offset.
class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& bytes, std::string_view what) : bytes_(bytes), what_(what) {}

  std::size_t offset() const { return offset_; }
  std::size_t remaining() const { return bytes_.size() - offset_; }

  std::uint8_t u8() { return take(1)[0]; }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  std::int32_t i32() { return static_cast<std::int32_t>(get_le<std::uint32_t>()); }
  float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }
  std::string raw(std::size_t n) {
    const auto* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  std::string str() {
    const std::size_t at = offset_;
    const std::uint32_t n = u32();
    if (n > remaining()) corrupt(at, "string length " + std::to_string(n) + " exceeds remaining bytes");
    return raw(n);
  }

  [[noreturn]] void corrupt(std::size_t at, const std::string& why) const {
    fail(ErrorCode::Format, std::string(what_) + " at byte offset " + std::to_string(at) + ": " + why);
  }

  // Verifies the trailing CRC-32 and hides it from subsequent reads.
  void verify_trailing_checksum() {
    if (bytes_.size() < 4) corrupt(0, "file too short for checksum");
    const std::size_t body = bytes_.size() - 4;
    std::uint32_t stored = 0;
    for (std::size_t i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes_[body + i]) << (8 * i);
    if (ByteWriter::crc32_of(bytes_.data(), body) != stored) corrupt(body, "checksum mismatch");
    limit_ = body;
  }

  void expect_end() const {
    if (offset_ != limit()) corrupt(offset_, "unexpected trailing bytes");
  }

 private:
  std::size_t limit() const { return limit_ == 0 ? bytes_.size() : limit_; }

  const std::uint8_t* take(std::size_t n) {
    if (n > limit() - offset_) corrupt(offset_, "truncated (needed " + std::to_string(n) + " bytes)");
    const auto* p = bytes_.data() + offset_;
    offset_ += n;
    return p;
  }

  template <typename U>
  U get_le() {
    const auto* p = take(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
  }

  const std::vector<std::uint8_t>& bytes_;
  std::string_view what_;
  std::size_t offset_ = 0;
  std::size_t limit_ = 0;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Write to a sibling temp file, then rename over the destination.
inline void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot write " + tmp.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) fail(ErrorCode::Io, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::Io, "cannot rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

inline void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  write_file_atomic(path, bytes.data(), bytes.size());
}

inline void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, text.data(), text.size());
}

}  // namespace reto
