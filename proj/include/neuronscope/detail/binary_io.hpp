#pragma once

// Little-endian framing helpers shared by the NSAC and NSCK formats.
// Every byte that passes through a writer/reader is folded into a running
// CRC32 so the trailing checksum covers the whole payload.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "neuronscope/error.hpp"

namespace nscope::detail {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class Crc32 {
 public:
  void update(const void* data, std::size_t size) {
    const auto* bytes = static_cast<const Bytef*>(data);
    while (size > 0) {
      const auto step = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
      value_ = ::crc32(value_, bytes, step);
      bytes += step;
      size -= step;
    }
  }
  std::uint32_t value() const noexcept { return static_cast<std::uint32_t>(value_); }

 private:
  uLong value_ = ::crc32(0L, Z_NULL, 0);
};

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}

  void bytes(const void* data, std::size_t size) {
    crc_.update(data, size);
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out_) fail(ErrorCode::Io, "write failed");
    written_ += size;
  }

  template <typename T>
  void scalar(T value) {
    bytes(&value, sizeof(T));
  }

  void u8(std::uint8_t v) { scalar(v); }
  void u16(std::uint16_t v) { scalar(v); }
  void u32(std::uint32_t v) { scalar(v); }
  void u64(std::uint64_t v) { scalar(v); }

  void short_string(std::string_view s) {
    require(s.size() <= 0xFFFF, ErrorCode::InvalidArgument, "string longer than 65535 bytes");
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }

  template <typename T>
  void array(std::span<const T> values) {
    bytes(values.data(), values.size_bytes());
  }

  // Trailing checksum; not folded into itself.
  void finish_with_crc() {
    const std::uint32_t crc = crc_.value();
    out_.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
    if (!out_) fail(ErrorCode::Io, "write failed");
    written_ += sizeof(crc);
  }

  std::uint64_t bytes_written() const noexcept { return written_; }

 private:
  std::ostream& out_;
  Crc32 crc_;
  std::uint64_t written_ = 0;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& in) : in_(in) {}

  void bytes(void* data, std::size_t size) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(size));
    if (static_cast<std::size_t>(in_.gcount()) != size)
      fail(ErrorCode::TruncatedFile, "unexpected end of data");
    crc_.update(data, size);
    consumed_ += size;
  }

  template <typename T>
  T scalar() {
    T value;
    bytes(&value, sizeof(T));
    return value;
  }

  std::uint8_t u8() { return scalar<std::uint8_t>(); }
  std::uint16_t u16() { return scalar<std::uint16_t>(); }
  std::uint32_t u32() { return scalar<std::uint32_t>(); }
  std::uint64_t u64() { return scalar<std::uint64_t>(); }

  std::string short_string() {
    const auto len = u16();
    std::string s(len, '\0');
    bytes(s.data(), len);
    return s;
  }

  // Compares the running CRC against the trailing checksum and insists the
  // stream ends right after it.
  void expect_crc_and_end() {
    const std::uint32_t expected = crc_.value();
    std::uint32_t stored = 0;
    in_.read(reinterpret_cast<char*>(&stored), sizeof(stored));
    if (in_.gcount() != sizeof(stored)) fail(ErrorCode::TruncatedFile, "missing checksum");
    if (stored != expected) fail(ErrorCode::ChecksumMismatch, "CRC32 mismatch");
    if (in_.peek() != std::char_traits<char>::eof())
      fail(ErrorCode::FormatError, "trailing bytes after checksum");
  }

  std::uint64_t consumed() const noexcept { return consumed_; }

 private:
  std::istream& in_;
  Crc32 crc_;
  std::uint64_t consumed_ = 0;
};

// Remaining bytes in a seekable stream, or -1 when the stream cannot seek.
inline std::int64_t remaining_bytes(std::istream& in) {
  const auto here = in.tellg();
  if (here < 0) {
    in.clear();
    return -1;
  }
  in.seekg(0, std::ios::end);
  const auto end = in.tellg();
  in.seekg(here);
  if (end < 0 || !in) {
    in.clear();
    in.seekg(here);
    return -1;
  }
  return static_cast<std::int64_t>(end - here);
}

// FNV-1a, used for plan hashes and config hashes.
class Fnv1a {
 public:
  void update(const void* data, std::size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::uint64_t value() const noexcept { return state_; }

  std::string hex() const {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    auto v = state_;
    for (int i = 15; i >= 0; --i) {
      out[static_cast<std::size_t>(i)] = digits[v & 0xF];
      v >>= 4;
    }
    return out;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

}  // namespace nscope::detail
