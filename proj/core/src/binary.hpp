#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "bubbleformer/error.hpp"

namespace bubbleformer::detail {

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    U out = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) out = (out << 8) | ((v >> (8 * i)) & 0xFF);
    return out;
  }
}

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    v = to_little(v);
    bytes(&v, 4);
  }
  void u64(std::uint64_t v) {
    v = to_little(v);
    bytes(&v, 8);
  }
  void f32(const float* p, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
      bytes(p, n * 4);
    } else {
      for (std::size_t i = 0; i < n; ++i) u32(std::bit_cast<std::uint32_t>(p[i]));
    }
  }
  void crc_footer() { u32(crc32_of(buf_.data(), buf_.size())); }
  std::vector<std::uint8_t>& buffer() { return buf_; }

  static std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    while (n > 0) {
      const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
      crc = crc32(crc, p, chunk);
      p += chunk;
      n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
  }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw DataError(what_ + ": truncated");
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const std::uint8_t* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    std::memcpy(&v, take(4), 4);
    return to_little(v);
  }
  std::uint64_t u64() {
    std::uint64_t v;
    std::memcpy(&v, take(8), 8);
    return to_little(v);
  }
  void f32(float* out, std::size_t n) {
    const std::uint8_t* p = take(n * 4);
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(out, p, n * 4);
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t v;
        std::memcpy(&v, p + 4 * i, 4);
        out[i] = std::bit_cast<float>(to_little(v));
      }
    }
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

  /// Validates the trailing CRC32 over every preceding byte.
  void check_crc_footer() const {
    if (buf_.size() < 4) throw DataError(what_ + ": truncated");
    std::uint32_t stored;
    std::memcpy(&stored, buf_.data() + buf_.size() - 4, 4);
    stored = to_little(stored);
    if (ByteWriter::crc32_of(buf_.data(), buf_.size() - 4) != stored) {
      throw DataError(what_ + ": checksum mismatch");
    }
  }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for '" + path + "'");
}

}  // namespace bubbleformer::detail
