#include <doctest.h>

#include <numeric>
#include <sstream>
#include <stdexcept>

#include "cdmt/chunker.hpp"
#include "cdmt/error.hpp"
#include "support/reference.hpp"

using namespace cdmt;

namespace {

ChunkerConfig small_cfg() {
  // Dense boundaries so short inputs still produce many chunks.
  ChunkerConfig cfg;
  cfg.mask_bits = 6;
  cfg.window_size = 8;
  cfg.min_chunk = 64;
  cfg.max_chunk = 1024;
  return cfg;
}

}  // namespace

TEST_SUITE("chunker") {

TEST_CASE("boundaries match the rescan reference") {
  const Bytes buf = ref::random_bytes(256 * 1024, 0xc0ffee);
  ChunkerConfig cfg = small_cfg();
  auto chunks = chunk_bytes(as_byte_span(buf), cfg);
  auto expect =
      ref::chunk_ends(as_byte_span(buf), cfg.window_size, cfg.mask_bits,
                      cfg.min_chunk, cfg.max_chunk);
  REQUIRE(chunks.size() == expect.size());
  for (std::size_t i = 0; i < chunks.size(); ++i)
    CHECK(chunks[i].offset + chunks[i].length == expect[i]);
}

TEST_CASE("chunks concatenate back to the input") {
  const Bytes buf = ref::random_bytes(100 * 1000 + 17, 42);
  auto chunks = chunk_bytes(as_byte_span(buf), small_cfg());
  Bytes glued;
  std::uint64_t offset = 0;
  for (const Chunk& c : chunks) {
    CHECK(c.offset == offset);
    CHECK(c.length == c.data.size());
    CHECK(c.fp == strong_hash(as_byte_span(c.data)));
    glued.insert(glued.end(), c.data.begin(), c.data.end());
    offset += c.length;
  }
  CHECK(glued == buf);
}

TEST_CASE("empty input yields no chunks") {
  CHECK(chunk_bytes({}, small_cfg()).empty());
  CHECK(chunk_bytes({}, ChunkerConfig{}).empty());
}

TEST_CASE("chunking is deterministic") {
  const Bytes buf = ref::random_bytes(64 * 1024, 99);
  auto a = chunk_bytes(as_byte_span(buf), small_cfg());
  auto b = chunk_bytes(as_byte_span(buf), small_cfg());
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].fp == b[i].fp);
}

TEST_CASE("lengths respect min and max bounds") {
  const Bytes buf = ref::random_bytes(512 * 1024, 1234);
  ChunkerConfig cfg = small_cfg();
  auto chunks = chunk_bytes(as_byte_span(buf), cfg);
  REQUIRE(chunks.size() > 4);
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    CHECK(chunks[i].length <= cfg.max_chunk);
    if (i + 1 < chunks.size()) CHECK(chunks[i].length >= cfg.min_chunk);
  }
}

TEST_CASE("default parameters give chunks near the expected mean") {
  // boundary probability 2^-13 after the 2 KiB floor puts the expected
  // length at 10 KiB; accept a wide band around it.
  const Bytes buf = ref::random_bytes(1 << 20, 0xfeedface);
  auto chunks = chunk_bytes(as_byte_span(buf), ChunkerConfig{});
  REQUIRE(!chunks.empty());
  double mean = static_cast<double>(buf.size()) / chunks.size();
  CHECK(mean > 4 * 1024.0);
  CHECK(mean < 16 * 1024.0);
}

TEST_CASE("streams chunk identically to in-memory buffers") {
  const Bytes buf = ref::random_bytes(300 * 1000, 0xaa);
  std::string text(buf.begin(), buf.end());
  std::istringstream in(text);
  auto via_stream = chunk_stream(in, small_cfg());
  auto via_bytes = chunk_bytes(as_byte_span(buf), small_cfg());
  REQUIRE(via_stream.size() == via_bytes.size());
  for (std::size_t i = 0; i < via_stream.size(); ++i)
    CHECK(via_stream[i].fp == via_bytes[i].fp);
}

TEST_CASE("feed boundaries do not affect the cut points") {
  const Bytes buf = ref::random_bytes(64 * 1024, 0xbb);
  Chunker chunker(small_cfg());
  std::vector<Chunk> chunks;
  ChunkSink sink = [&](Chunk&& c) { chunks.push_back(std::move(c)); };
  // Feed in awkward, uneven slices.
  std::size_t pos = 0, step = 1;
  while (pos < buf.size()) {
    std::size_t n = std::min(step, buf.size() - pos);
    chunker.feed({buf.data() + pos, n}, sink);
    pos += n;
    step = step * 3 % 977 + 1;
  }
  chunker.finish(sink);
  auto whole = chunk_bytes(as_byte_span(buf), small_cfg());
  REQUIRE(chunks.size() == whole.size());
  for (std::size_t i = 0; i < chunks.size(); ++i)
    CHECK(chunks[i].fp == whole[i].fp);
}

TEST_CASE("fixed mode slices at the configured width") {
  ChunkerConfig cfg;
  cfg.mode = ChunkerMode::fixed;
  cfg.fixed_width = 700;
  const Bytes buf = ref::random_bytes(10 * 700 + 123, 5);
  auto chunks = chunk_bytes(as_byte_span(buf), cfg);
  REQUIRE(chunks.size() == 11);
  for (std::size_t i = 0; i + 1 < chunks.size(); ++i)
    CHECK(chunks[i].length == 700);
  CHECK(chunks.back().length == 123);
}

TEST_CASE("config validation") {
  ChunkerConfig cfg;
  cfg.min_chunk = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ChunkerConfig{};
  cfg.min_chunk = cfg.max_chunk + 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ChunkerConfig{};
  cfg.window_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ChunkerConfig{};
  cfg.window_size = 65;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ChunkerConfig{};
  cfg.mask_bits = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ChunkerConfig{};
  cfg.mask_bits = 41;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ChunkerConfig{};
  cfg.mode = ChunkerMode::fixed;
  cfg.fixed_width = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("a window of zero bytes always forms a boundary") {
  // The fingerprint of an all-zero window is zero, so any mask matches.
  // This gives tests a way to force a split at a chosen point.
  ChunkerConfig cfg = small_cfg();
  Bytes buf = ref::random_bytes(4096, 77);
  // Scrub accidental zero runs so the only guaranteed boundary is ours.
  for (auto& b : buf)
    if (b == 0) b = 1;
  auto base = chunk_bytes(as_byte_span(buf), cfg);

  Insertion edit;
  edit.offset = 2000;
  edit.bytes.assign(cfg.window_size, 0);
  auto result = byte_shift_test(as_byte_span(buf), edit, cfg);
  CHECK(result.after.size() >= result.before.size());
  // One boundary must sit exactly at the end of the zero run, provided the
  // run lands at least min_chunk past the previous cut.
  bool found = false;
  for (const Chunk& c : result.after)
    found |= (c.offset + c.length == edit.offset + cfg.window_size);
  CHECK(found);
  CHECK(base.size() == result.before.size());
}

TEST_CASE("content-defined boundaries survive an insertion, fixed ones do not") {
  ChunkerConfig cfg = small_cfg();
  const Bytes buf = ref::random_bytes(128 * 1024, 0x51de);

  Insertion edit;
  edit.offset = buf.size() / 2;
  edit.bytes = to_bytes(std::string_view{"!"});

  auto cdc = byte_shift_test(as_byte_span(buf), edit, cfg);
  REQUIRE(cdc.before.size() > 20);
  // Everything outside the edited chunk re-synchronises.
  CHECK(cdc.common + 3 >= cdc.before.size());

  ChunkerConfig fixed;
  fixed.mode = ChunkerMode::fixed;
  fixed.fixed_width = 1024;
  auto rigid = byte_shift_test(as_byte_span(buf), edit, fixed);
  // Only chunks before the insertion point keep their content; the rest
  // shift by one byte and rehash.
  CHECK(rigid.common <= rigid.before.size() / 2 + 1);
}

TEST_CASE("inserting a boundary-forming run splits exactly one chunk") {
  ChunkerConfig cfg = small_cfg();
  Bytes buf = ref::random_bytes(64 * 1024, 0xd00d);
  for (auto& b : buf)
    if (b == 0) b = 1;
  auto before = chunk_bytes(as_byte_span(buf), cfg);

  // Pick a content-cut chunk long enough that both halves clear min_chunk.
  std::size_t pick = before.size();
  for (std::size_t i = 0; i + 1 < before.size(); ++i) {
    if (before[i].length >= 2 * cfg.min_chunk + cfg.window_size &&
        before[i].length < cfg.max_chunk) {
      pick = i;
      break;
    }
  }
  REQUIRE(pick < before.size());

  Insertion edit;
  edit.offset = before[pick].offset + before[pick].length / 2;
  edit.bytes.assign(cfg.window_size, 0);
  auto result = byte_shift_test(as_byte_span(buf), edit, cfg);
  CHECK(result.after.size() == result.before.size() + 1);
  CHECK(result.common == result.before.size() - 1);
}

TEST_CASE("common chunk counting is a multiset intersection") {
  const Bytes buf = ref::random_bytes(32 * 1024, 3);
  auto chunks = chunk_bytes(as_byte_span(buf), small_cfg());
  REQUIRE(chunks.size() >= 4);
  std::vector<Chunk> doubled = chunks;
  doubled.insert(doubled.end(), chunks.begin(), chunks.end());
  CHECK(common_chunks(chunks, chunks) == chunks.size());
  CHECK(common_chunks(doubled, chunks) == chunks.size());
  CHECK(common_chunks(chunks, doubled) == chunks.size());
  CHECK(common_chunks(chunks, {}) == 0);
}

TEST_CASE("insertion offset outside the input is rejected") {
  Insertion edit;
  edit.offset = 10;
  edit.bytes = to_bytes(std::string_view{"x"});
  CHECK_THROWS_AS(byte_shift_test({}, edit, small_cfg()), std::invalid_argument);
}

}  // TEST_SUITE
