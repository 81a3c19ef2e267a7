// Seeded synthetic corpora: a random base blob evolved by point edits,
// insertions, deletions, and block rewrites.  Stands in for real image
// version histories in benchmarks and tests.
#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "cdmt/bytes.hpp"

namespace cdmt {

struct SynthSpec {
  std::size_t versions = 10;
  std::size_t size = 4u << 20;  // base version bytes
  double mutation = 0.05;       // fraction of bytes touched per version
  std::uint64_t seed = 42;
};

// Parses "synthetic:versions=10,size=4M,mutation=0.05,seed=42" (the
// prefix is optional, keys may appear in any order, sizes accept K/M/G
// suffixes).  Unknown keys or unparsable values raise ConfigError.
SynthSpec parse_synth_spec(std::string_view text);

// versions() byte streams; stream 0 is the seeded random base and each
// successor mutates its predecessor by `mutation` of its bytes.
std::vector<Bytes> synth_corpus(const SynthSpec& spec);

// One mutation round: random mix of point edits, short insertions and
// deletions, and block rewrites until ~rate * prev.size() bytes changed.
Bytes mutate_bytes(const Bytes& prev, double rate, std::uint64_t seed);

// Overwrites ceil(fraction * n) blocks with fresh random bytes, chosen as
// a prefix of a seed-shuffled block order: for a fixed seed, a higher
// fraction rewrites a superset of a lower one, so similarity between the
// results and `base` decreases monotonically by construction.
Bytes rewrite_fraction(const Bytes& base, double fraction, std::uint64_t seed,
                       std::size_t block_bytes = 16384);

}  // namespace cdmt
