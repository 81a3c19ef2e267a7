#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include "cdmt/bytes.hpp"
#include "cdmt/fingerprint.hpp"
#include "cdmt/rolling_hash.hpp"

namespace cdmt {

enum class ChunkerMode : std::uint8_t { cdc, fixed };

struct ChunkerConfig {
  ChunkerMode mode = ChunkerMode::cdc;
  unsigned mask_bits = 13;  // boundary: low mask_bits of the rolling fp are 0
  std::size_t window_size = 2;
  std::size_t min_chunk = 2 * 1024;
  std::size_t max_chunk = 64 * 1024;
  std::size_t fixed_width = 8 * 1024;  // fixed mode only

  // Throws ConfigError on out-of-range parameters.
  void validate() const;
};

struct Chunk {
  std::uint64_t offset = 0;
  std::uint32_t length = 0;
  Fingerprint fp;
  Bytes data;  // may be released once the payload is stored elsewhere
};

using ChunkSink = std::function<void(Chunk&&)>;

// Incremental splitter. Feed bytes in any granularity; finish() flushes
// the trailing partial chunk (which may be shorter than min_chunk).
class Chunker {
public:
  explicit Chunker(const ChunkerConfig& cfg);

  void feed(ByteSpan data, const ChunkSink& sink);
  void finish(const ChunkSink& sink);

private:
  void cut(const ChunkSink& sink);

  ChunkerConfig cfg_;
  RollingHash roll_;
  Bytes pending_;
  std::uint64_t offset_ = 0;
};

std::vector<Chunk> chunk_bytes(ByteSpan input, const ChunkerConfig& cfg);

// Reads the stream to EOF. Throws StorageError if the stream fails
// mid-read.
std::vector<Chunk> chunk_stream(std::istream& in, const ChunkerConfig& cfg);

struct Insertion {
  std::size_t offset = 0;
  Bytes bytes;
};

struct ShiftTestResult {
  std::vector<Chunk> before;
  std::vector<Chunk> after;
  std::size_t common = 0;  // fingerprint multiset intersection
};

// Chunks the input before and after applying the insertion and reports
// how many chunks survive the edit. Test harness for boundary-shift
// behaviour of the two modes.
ShiftTestResult byte_shift_test(ByteSpan input, const Insertion& edit,
                                const ChunkerConfig& cfg);

// Size of the fingerprint multiset intersection of two chunkings.
std::size_t common_chunks(const std::vector<Chunk>& a,
                          const std::vector<Chunk>& b);

}  // namespace cdmt
