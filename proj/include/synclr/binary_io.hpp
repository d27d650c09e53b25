#pragma once

// Little-endian primitives for the shard and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "synclr/crc64.hpp"
#include "synclr/error.hpp"

namespace synclr::binary {

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (hashing_) crc_.process_bytes(data, n);
    require(out_.good(), ErrorCode::io, "write failed");
  }

  template <typename T>
  void scalar(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
      for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    bytes(buf, sizeof(T));
  }

  void floats(const float* data, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
      bytes(data, n * sizeof(float));
    } else {
      for (std::size_t i = 0; i < n; ++i) scalar(data[i]);
    }
  }

  void begin_hash() {
    crc_.reset();
    hashing_ = true;
  }
  std::uint64_t end_hash() {
    hashing_ = false;
    return crc_.checksum();
  }

 private:
  std::ostream& out_;
  Crc64 crc_;
  bool hashing_ = false;
};

/// Reader bounded by a byte budget; any read past it is reported as
/// truncation rather than attempted.
class Reader {
 public:
  Reader(std::istream& in, std::uint64_t budget) : in_(in), remaining_(budget) {}

  std::uint64_t remaining() const { return remaining_; }

  void bytes(void* data, std::size_t n) {
    require(n <= remaining_, ErrorCode::checksum, "file truncated");
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    require(static_cast<std::size_t>(in_.gcount()) == n, ErrorCode::checksum, "file truncated");
    remaining_ -= n;
    if (hashing_) crc_.process_bytes(data, n);
  }

  template <typename T>
  T scalar() {
    std::uint8_t buf[sizeof(T)];
    bytes(buf, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
      for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    T value;
    std::memcpy(&value, buf, sizeof(T));
    return value;
  }

  void floats(float* data, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
      bytes(data, n * sizeof(float));
    } else {
      for (std::size_t i = 0; i < n; ++i) data[i] = scalar<float>();
    }
  }

  std::string string(std::size_t n) {
    require(n <= remaining_, ErrorCode::checksum, "file truncated");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

  void begin_hash() {
    crc_.reset();
    hashing_ = true;
  }
  std::uint64_t end_hash() {
    hashing_ = false;
    return crc_.checksum();
  }

 private:
  std::istream& in_;
  std::uint64_t remaining_;
  Crc64 crc_;
  bool hashing_ = false;
};

}  // namespace synclr::binary
