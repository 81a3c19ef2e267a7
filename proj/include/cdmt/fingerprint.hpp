#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include "cdmt/bytes.hpp"

namespace cdmt {

// 256-bit chunk/node identifier. Rendered as lowercase hex.
struct Fingerprint {
  static constexpr std::size_t kSize = 32;

  std::array<std::uint8_t, kSize> digest{};

  auto operator<=>(const Fingerprint&) const = default;

  std::string hex() const { return to_hex({digest.data(), digest.size()}); }
  static Fingerprint from_hex(std::string_view hex);
};

struct FingerprintHash {
  std::size_t operator()(const Fingerprint& fp) const {
    // The digest is already uniform; the first 8 bytes are as good a
    // hash as any.
    std::size_t h = 0;
    for (std::size_t i = 0; i < sizeof(h); ++i)
      h |= static_cast<std::size_t>(fp.digest[i]) << (8 * i);
    return h;
  }
};

// BLAKE2b-256 of the input. Unkeyed, output fixed at 32 bytes.
Fingerprint strong_hash(ByteSpan data);

inline Fingerprint strong_hash(std::string_view s) {
  return strong_hash(as_byte_span(s));
}

// Boundary-test hash for internal-node grouping: the strong hash of the
// concatenated window digests, truncated to its first 8 bytes
// (little-endian). Throws std::invalid_argument when the window length
// does not match the configured size.
std::uint64_t window_hash(std::span<const Fingerprint> window,
                          std::size_t window_size);

inline constexpr std::uint64_t low_bit_mask(unsigned bits) {
  return bits >= 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << bits) - 1;
}

inline bool matches_boundary(std::uint64_t value, unsigned mask_bits) {
  return (value & low_bit_mask(mask_bits)) == 0;
}

}  // namespace cdmt
