#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "cdmt/bytes.hpp"

namespace cdmt {

// Rabin fingerprint over a sliding byte window.
//
// The fingerprint is the residue of the window polynomial over GF(2)
// modulo a fixed irreducible polynomial of degree 63, so it always fits
// in 63 bits. Both appending a byte and expiring the oldest byte are
// table lookups, which keeps a push at constant cost regardless of how
// much of the stream has been consumed.
//
// Invariant: after any sequence of pushes the fingerprint equals the
// from-scratch fingerprint of the last window_size bytes pushed.
class RollingHash {
public:
  // Irreducible polynomial of degree 63, committed so fingerprints are
  // stable across builds and platforms.
  static constexpr std::uint64_t kPolynomial = 0xbfe6b8a5bf378d83ULL;
  static constexpr unsigned kDegree = 63;

  explicit RollingHash(std::size_t window_size);

  void push(std::uint8_t b) {
    if (count_ == window_.size()) {
      fp_ ^= out_table_[window_[pos_]];
      window_[pos_] = b;
      pos_ = (pos_ + 1) % window_.size();
    } else {
      window_[(pos_ + count_) % window_.size()] = b;
      ++count_;
    }
    append(b);
  }

  void push(ByteSpan data) {
    for (std::uint8_t b : data) push(b);
  }

  std::uint64_t fingerprint() const { return fp_; }
  std::size_t window_size() const { return window_.size(); }
  std::size_t size() const { return count_; }

  void reset();

private:
  void append(std::uint8_t b) {
    // Split off the 8 bits that would overflow the degree on the shift;
    // their residue comes from the table.
    std::uint8_t hi = static_cast<std::uint8_t>(fp_ >> (kDegree - 8));
    constexpr std::uint64_t low = (std::uint64_t{1} << (kDegree - 8)) - 1;
    fp_ = (((fp_ & low) << 8) | b) ^ mod_table()[hi];
  }

  static const std::array<std::uint64_t, 256>& mod_table();

  std::array<std::uint64_t, 256> out_table_;  // depends on window size
  std::vector<std::uint8_t> window_;
  std::size_t pos_ = 0;    // oldest byte
  std::size_t count_ = 0;  // bytes currently in the window
  std::uint64_t fp_ = 0;
};

}  // namespace cdmt
