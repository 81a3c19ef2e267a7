#include "cdmt/fingerprint.hpp"

#include <sodium.h>

#include <mutex>
#include <stdexcept>

namespace cdmt {

namespace {

void ensure_sodium() {
  static std::once_flag once;
  std::call_once(once, [] {
    if (sodium_init() < 0)
      throw std::runtime_error("sodium_init failed");
  });
}

}  // namespace

Fingerprint Fingerprint::from_hex(std::string_view hex) {
  Bytes raw = cdmt::from_hex(hex);
  if (raw.size() != kSize)
    throw std::invalid_argument("fingerprint hex must be 64 characters");
  Fingerprint fp;
  std::copy(raw.begin(), raw.end(), fp.digest.begin());
  return fp;
}

Fingerprint strong_hash(ByteSpan data) {
  ensure_sodium();
  Fingerprint fp;
  crypto_generichash(fp.digest.data(), fp.digest.size(), data.data(),
                     data.size(), nullptr, 0);
  return fp;
}

std::uint64_t window_hash(std::span<const Fingerprint> window,
                          std::size_t window_size) {
  if (window.size() != window_size)
    throw std::invalid_argument("window_hash: window length " +
                                std::to_string(window.size()) +
                                " != configured size " +
                                std::to_string(window_size));
  ensure_sodium();
  crypto_generichash_state state;
  crypto_generichash_init(&state, nullptr, 0, Fingerprint::kSize);
  for (const Fingerprint& fp : window)
    crypto_generichash_update(&state, fp.digest.data(), fp.digest.size());
  std::array<std::uint8_t, Fingerprint::kSize> out{};
  crypto_generichash_final(&state, out.data(), out.size());
  std::uint64_t value = 0;
  for (std::size_t i = 0; i < 8; ++i)
    value |= static_cast<std::uint64_t>(out[i]) << (8 * i);
  return value;
}

}  // namespace cdmt
