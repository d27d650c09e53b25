#pragma once

#include <cstdint>
#include <span>

#include <boost/crc.hpp>

namespace synclr {

// CRC-64/XZ (ECMA-182 polynomial, reflected, all-ones init and xor-out).
using Crc64 = boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true>;

inline std::uint64_t crc64(std::span<const std::uint8_t> bytes) {
  Crc64 crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

}  // namespace synclr
