#include "cdmt/rolling_hash.hpp"

#include <stdexcept>

namespace cdmt {

namespace {

// Appends one byte to a fully reduced fingerprint, bit by bit. Only used
// to build the slide-out table.
std::uint64_t append_byte(std::uint64_t fp, std::uint8_t b) {
  for (int i = 7; i >= 0; --i) {
    fp <<= 1;
    if (b & (1u << i)) fp |= 1;
    if (fp & (std::uint64_t{1} << RollingHash::kDegree))
      fp ^= RollingHash::kPolynomial;
  }
  return fp;
}

}  // namespace

const std::array<std::uint64_t, 256>& RollingHash::mod_table() {
  // Appending a byte shifts the residue 8 bits past the polynomial
  // degree. mod_table[h] is (h * x^63) mod P for the 8 overflowing bits
  // h, so the append below stays inside 64-bit arithmetic.
  static const std::array<std::uint64_t, 256> table = [] {
    std::array<std::uint64_t, 8> power{};  // power[i] = x^(63+i) mod P
    std::uint64_t r = kPolynomial ^ (std::uint64_t{1} << kDegree);
    for (int i = 0; i < 8; ++i) {
      power[i] = r;
      bool top = r >> (kDegree - 1) & 1;
      r <<= 1;
      if (top) r ^= kPolynomial;  // bit 63 of kPolynomial clears the carry
    }
    std::array<std::uint64_t, 256> t{};
    for (unsigned h = 0; h < 256; ++h)
      for (int i = 0; i < 8; ++i)
        if (h & (1u << i)) t[h] ^= power[i];
    return t;
  }();
  return table;
}

RollingHash::RollingHash(std::size_t window_size) : window_(window_size, 0) {
  if (window_size < 2)
    throw std::invalid_argument("rolling hash window must be >= 2 bytes");
  // out_table_[b] is the fingerprint of byte b followed by window_size-1
  // zero bytes; XORing it removes the oldest byte from the window.
  for (unsigned b = 0; b < 256; ++b) {
    std::uint64_t fp = append_byte(0, static_cast<std::uint8_t>(b));
    for (std::size_t i = 1; i < window_size; ++i)
      fp = append_byte(fp, 0);
    out_table_[b] = fp;
  }
}

void RollingHash::reset() {
  fp_ = 0;
  pos_ = 0;
  count_ = 0;
}

}  // namespace cdmt
