#include "cdmt/chunker.hpp"

#include <istream>
#include <unordered_map>

#include "cdmt/error.hpp"

namespace cdmt {

void ChunkerConfig::validate() const {
  if (mode == ChunkerMode::cdc) {
    if (mask_bits < 1 || mask_bits > 40)
      throw ConfigError("mask_bits must be in [1, 40]");
    if (window_size < 2 || window_size > 64)
      throw ConfigError("window_size must be in [2, 64]");
    if (min_chunk == 0 || min_chunk > max_chunk)
      throw ConfigError("require 0 < min_chunk <= max_chunk");
  } else {
    if (fixed_width == 0) throw ConfigError("fixed_width must be positive");
  }
}

Chunker::Chunker(const ChunkerConfig& cfg)
    : cfg_(cfg), roll_(cfg.mode == ChunkerMode::cdc ? cfg.window_size : 2) {
  cfg_.validate();
}

void Chunker::cut(const ChunkSink& sink) {
  Chunk c;
  c.offset = offset_;
  c.length = static_cast<std::uint32_t>(pending_.size());
  c.fp = strong_hash(as_byte_span(pending_));
  c.data = std::move(pending_);
  pending_ = Bytes{};
  offset_ += c.length;
  sink(std::move(c));
}

void Chunker::feed(ByteSpan data, const ChunkSink& sink) {
  if (cfg_.mode == ChunkerMode::fixed) {
    for (std::uint8_t b : data) {
      pending_.push_back(b);
      if (pending_.size() == cfg_.fixed_width) cut(sink);
    }
    return;
  }
  for (std::uint8_t b : data) {
    roll_.push(b);
    pending_.push_back(b);
    // A forced cut at max_chunk leaves the rolling window untouched, so
    // boundary detection downstream is unaffected.
    if ((pending_.size() >= cfg_.min_chunk &&
         matches_boundary(roll_.fingerprint(), cfg_.mask_bits)) ||
        pending_.size() == cfg_.max_chunk) {
      cut(sink);
    }
  }
}

void Chunker::finish(const ChunkSink& sink) {
  if (!pending_.empty()) cut(sink);
}

std::vector<Chunk> chunk_bytes(ByteSpan input, const ChunkerConfig& cfg) {
  std::vector<Chunk> out;
  Chunker chunker(cfg);
  ChunkSink sink = [&out](Chunk&& c) { out.push_back(std::move(c)); };
  chunker.feed(input, sink);
  chunker.finish(sink);
  return out;
}

std::vector<Chunk> chunk_stream(std::istream& in, const ChunkerConfig& cfg) {
  std::vector<Chunk> out;
  Chunker chunker(cfg);
  ChunkSink sink = [&out](Chunk&& c) { out.push_back(std::move(c)); };
  Bytes buffer(1 << 20);
  while (in) {
    in.read(reinterpret_cast<char*>(buffer.data()),
            static_cast<std::streamsize>(buffer.size()));
    std::streamsize got = in.gcount();
    if (in.bad()) throw StorageError("read failure while chunking stream");
    if (got > 0)
      chunker.feed({buffer.data(), static_cast<std::size_t>(got)}, sink);
  }
  chunker.finish(sink);
  return out;
}

std::size_t common_chunks(const std::vector<Chunk>& a,
                          const std::vector<Chunk>& b) {
  std::unordered_map<Fingerprint, std::size_t, FingerprintHash> counts;
  for (const Chunk& c : b) ++counts[c.fp];
  std::size_t common = 0;
  for (const Chunk& c : a) {
    auto it = counts.find(c.fp);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  return common;
}

ShiftTestResult byte_shift_test(ByteSpan input, const Insertion& edit,
                                const ChunkerConfig& cfg) {
  if (edit.offset > input.size())
    throw std::invalid_argument("insertion offset outside input");
  ShiftTestResult result;
  result.before = chunk_bytes(input, cfg);

  Bytes edited;
  edited.reserve(input.size() + edit.bytes.size());
  edited.insert(edited.end(), input.begin(), input.begin() + edit.offset);
  edited.insert(edited.end(), edit.bytes.begin(), edit.bytes.end());
  edited.insert(edited.end(), input.begin() + edit.offset, input.end());
  result.after = chunk_bytes(as_byte_span(edited), cfg);

  result.common = common_chunks(result.before, result.after);
  return result;
}

}  // namespace cdmt
