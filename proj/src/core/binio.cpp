#include "cadenza/core/binio.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cadenza/core/error.hpp"

namespace cadenza {

namespace {
template <typename T>
void put_le(std::vector<std::uint8_t>& buf, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
template <typename T>
T get_le(std::span<const std::uint8_t> b) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(b[i]) << (8 * i);
  return v;
}
}  // namespace

void ByteWriter::magic(std::string_view four_cc, std::uint16_t version) {
  if (four_cc.size() != 4) throw Error(ErrorCode::BadCheckpoint, "magic must be 4 bytes");
  for (char c : four_cc) buf_.push_back(static_cast<std::uint8_t>(c));
  u16(version);
}
void ByteWriter::u16(std::uint16_t v) { put_le(buf_, v); }
void ByteWriter::u32(std::uint32_t v) { put_le(buf_, v); }
void ByteWriter::u64(std::uint64_t v) { put_le(buf_, v); }
void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
void ByteWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  buf_.insert(buf_.end(), s.begin(), s.end());
}
void ByteWriter::mat_f32(const Mat& m) {
  u32(static_cast<std::uint32_t>(m.rows));
  u32(static_cast<std::uint32_t>(m.cols));
  for (double x : m.data) f32(static_cast<float>(x));
}

std::span<const std::uint8_t> ByteReader::take(std::size_t n) {
  if (data_.size() - pos_ < n) throw Error(ErrorCode::BadCheckpoint, "unexpected end of data");
  auto s = data_.subspan(pos_, n);
  pos_ += n;
  return s;
}

std::uint16_t ByteReader::expect_magic(std::string_view four_cc, std::uint16_t max_version) {
  auto m = take(4);
  if (std::memcmp(m.data(), four_cc.data(), 4) != 0)
    throw Error(ErrorCode::BadCheckpoint, "expected magic '" + std::string(four_cc) + "'");
  const auto version = u16();
  if (version == 0 || version > max_version)
    throw Error(ErrorCode::BadCheckpoint, std::string(four_cc) + " version " + std::to_string(version) +
                                              " not supported (max " + std::to_string(max_version) + ")");
  return version;
}
std::uint8_t ByteReader::u8() { return take(1)[0]; }
std::uint16_t ByteReader::u16() { return get_le<std::uint16_t>(take(2)); }
std::uint32_t ByteReader::u32() { return get_le<std::uint32_t>(take(4)); }
std::uint64_t ByteReader::u64() { return get_le<std::uint64_t>(take(8)); }
float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }
std::string ByteReader::str() {
  const auto n = u32();
  auto b = take(n);
  return std::string(b.begin(), b.end());
}
Mat ByteReader::mat_f32() {
  const std::size_t r = u32();
  const std::size_t c = u32();
  if (r * c * 4 > remaining()) throw Error(ErrorCode::BadCheckpoint, "matrix larger than payload");
  Mat m(r, c);
  for (auto& x : m.data) x = f32();
  return m;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::string content_hash(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = kHex[h & 0xf];
  return out;
}

std::string content_hash(std::string_view text) {
  return content_hash({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

}  // namespace cadenza
