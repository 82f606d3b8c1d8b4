#pragma once

// Little-endian binary encoding shared by the checkpoint and dataset formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "grouppose/errors.hpp"

namespace grouppose::io {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) { bytes_.append(s); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }

  const std::string& bytes() const { return bytes_; }
  std::string take() { return std::move(bytes_); }

 private:
  template <typename T>
  void put_le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }

  std::string bytes_;
};

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string context) : bytes_(bytes), context_(std::move(context)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }
  std::string_view raw(std::size_t n) { return take(n); }
  std::string str() { return std::string(take(u32())); }

  std::size_t offset() const { return offset_; }
  std::size_t remaining() const { return bytes_.size() - offset_; }
  bool done() const { return offset_ == bytes_.size(); }

 private:
  std::string_view take(std::size_t n) {
    if (n > remaining()) {
      throw FormatError(context_ + ": truncated (needed " + std::to_string(n) + " bytes at offset " +
                        std::to_string(offset_) + ", " + std::to_string(remaining()) + " left)");
    }
    auto out = bytes_.substr(offset_, n);
    offset_ += n;
    return out;
  }

  template <typename T>
  T get_le() {
    const auto s = take(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }

  std::string_view bytes_;
  std::size_t offset_ = 0;
  std::string context_;
};

/// Whole-file read; IoError if the file cannot be opened.
std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace grouppose::io
