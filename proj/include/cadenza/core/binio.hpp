#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cadenza/core/mat.hpp"

namespace cadenza {

// Little-endian record writer. Every on-disk format starts with a 4-byte magic
// followed by a u16 version.
class ByteWriter {
 public:
  void magic(std::string_view four_cc, std::uint16_t version);
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void str(std::string_view s);  // u32 length + bytes
  void mat_f32(const Mat& m);    // u32 rows, u32 cols, f32 data

  const std::vector<std::uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  // Throws BadCheckpoint when the magic differs or the version is newer than
  // `max_version`. Returns the version found.
  std::uint16_t expect_magic(std::string_view four_cc, std::uint16_t max_version);
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string str();
  Mat mat_f32();

  bool at_end() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::span<const std::uint8_t> take(std::size_t n);
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

// FNV-1a 64-bit, rendered as 16 lowercase hex digits. Used for content
// addressing and config hashes, not for security.
std::string content_hash(std::span<const std::uint8_t> bytes);
std::string content_hash(std::string_view text);

}  // namespace cadenza
