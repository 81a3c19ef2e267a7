#include "cdmt/synth.hpp"

#include <algorithm>
#include <random>

#include "cdmt/config.hpp"
#include "cdmt/error.hpp"

namespace cdmt {

namespace {

Bytes random_block(std::size_t n, std::mt19937_64& rng) {
  Bytes out(n);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    std::uint64_t v = rng();
    for (int b = 0; b < 8; ++b) out[i + b] = static_cast<std::uint8_t>(v >> (8 * b));
  }
  for (std::uint64_t v = rng(); i < n; ++i, v >>= 8)
    out[i] = static_cast<std::uint8_t>(v);
  return out;
}

}  // namespace

SynthSpec parse_synth_spec(std::string_view text) {
  if (text.rfind("synthetic:", 0) == 0) text.remove_prefix(10);
  SynthSpec spec;
  while (!text.empty()) {
    auto comma = text.find(',');
    std::string_view item = text.substr(0, comma);
    text.remove_prefix(comma == std::string_view::npos ? text.size() : comma + 1);
    if (item.empty()) continue;
    auto eq = item.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("expected key=value in corpus spec, got '" + std::string(item) + "'");
    std::string_view key = item.substr(0, eq);
    std::string_view value = item.substr(eq + 1);
    if (key == "versions") {
      spec.versions = parse_size_value(value);
    } else if (key == "size") {
      spec.size = parse_size_value(value);
    } else if (key == "seed") {
      spec.seed = parse_size_value(value);
    } else if (key == "mutation") {
      try {
        spec.mutation = std::stod(std::string(value));
      } catch (const std::exception&) {
        throw ConfigError("bad mutation rate '" + std::string(value) + "'");
      }
    } else {
      throw ConfigError("unknown corpus key '" + std::string(key) + "'");
    }
  }
  if (spec.versions == 0) throw ConfigError("corpus needs at least one version");
  if (spec.mutation < 0.0 || spec.mutation > 1.0)
    throw ConfigError("mutation rate must lie in [0, 1]");
  return spec;
}

Bytes mutate_bytes(const Bytes& prev, double rate, std::uint64_t seed) {
  Bytes out = prev;
  if (out.empty() || rate <= 0.0) return out;
  std::mt19937_64 rng(seed);
  auto budget = static_cast<std::int64_t>(rate * static_cast<double>(prev.size()));
  while (budget > 0 && !out.empty()) {
    const std::size_t at = rng() % out.size();
    switch (rng() % 10) {
      case 0: case 1: {  // point edit
        out[at] = static_cast<std::uint8_t>(rng());
        budget -= 1;
        break;
      }
      case 2: case 3: {  // short insertion
        Bytes ins = random_block(1 + rng() % 64, rng);
        out.insert(out.begin() + at, ins.begin(), ins.end());
        budget -= static_cast<std::int64_t>(ins.size());
        break;
      }
      case 4: {  // short deletion
        const std::size_t n = std::min<std::size_t>(1 + rng() % 64, out.size() - at);
        out.erase(out.begin() + at, out.begin() + at + n);
        budget -= static_cast<std::int64_t>(n);
        break;
      }
      default: {  // block rewrite carries most of the budget
        const std::size_t n =
            std::min<std::size_t>(512 + rng() % 3584, out.size() - at);
        Bytes block = random_block(n, rng);
        std::copy(block.begin(), block.end(), out.begin() + at);
        budget -= static_cast<std::int64_t>(n);
        break;
      }
    }
  }
  return out;
}

std::vector<Bytes> synth_corpus(const SynthSpec& spec) {
  std::vector<Bytes> out;
  out.reserve(spec.versions);
  std::mt19937_64 rng(spec.seed);
  out.push_back(random_block(spec.size, rng));
  for (std::size_t v = 1; v < spec.versions; ++v)
    out.push_back(mutate_bytes(out.back(), spec.mutation, rng()));
  return out;
}

Bytes rewrite_fraction(const Bytes& base, double fraction, std::uint64_t seed,
                       std::size_t block_bytes) {
  if (fraction < 0.0 || fraction > 1.0) throw ConfigError("fraction must lie in [0, 1]");
  if (block_bytes == 0) throw ConfigError("block_bytes must be positive");
  Bytes out = base;
  if (out.empty() || fraction == 0.0) return out;
  const std::size_t blocks = (out.size() + block_bytes - 1) / block_bytes;
  std::vector<std::size_t> order(blocks);
  for (std::size_t i = 0; i < blocks; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto rewrite =
      static_cast<std::size_t>(std::min<double>(blocks, fraction * blocks + 0.999));
  // Fresh RNG per block keeps rewritten content independent of how many
  // blocks precede it in the shuffle, preserving the superset property.
  for (std::size_t i = 0; i < rewrite; ++i) {
    const std::size_t at = order[i] * block_bytes;
    const std::size_t n = std::min(block_bytes, out.size() - at);
    std::mt19937_64 block_rng(seed ^ (0x9e3779b97f4a7c15ull * (order[i] + 1)));
    Bytes block = random_block(n, block_rng);
    std::copy(block.begin(), block.end(), out.begin() + at);
  }
  return out;
}

}  // namespace cdmt
