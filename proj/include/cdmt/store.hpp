#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cdmt/bytes.hpp"
#include "cdmt/chunker.hpp"
#include "cdmt/fingerprint.hpp"
#include "cdmt/tree.hpp"

namespace cdmt {

// Ordered fingerprint list that reconstructs one layer. The id is the
// strong hash of the concatenated fingerprints, so identical content
// always lands on the same id and re-ingest is naturally idempotent.
struct Recipe {
  std::string layer_id;
  std::vector<Fingerprint> fps;
  std::uint64_t total_length = 0;  // == sum of chunk lengths
};

std::string recipe_id(std::span<const Fingerprint> fps);

struct ImageVersion {
  std::string name;
  std::string tag;
  std::uint32_t ordinal = 0;          // per-name, assigned at record time
  std::optional<std::string> parent;  // tag of the base version, same name
  std::vector<std::string> layers;    // recipe ids, ordered
};

struct IngestResult {
  Recipe recipe;
  std::size_t new_chunks = 0;
  std::size_t dup_chunks = 0;
  std::uint64_t new_bytes = 0;  // payload bytes appended to the log
  std::uint64_t dup_bytes = 0;  // payload bytes already present
};

struct StoreStats {
  std::size_t chunk_count = 0;
  std::uint64_t chunk_bytes = 0;    // unique payload bytes, uncompressed
  std::uint64_t segment_bytes = 0;  // physical log bytes incl. record headers
  std::size_t segment_count = 0;
  std::size_t recipe_count = 0;
  std::uint64_t recipe_bytes = 0;  // sum of recipe total_lengths
  std::size_t version_count = 0;
};

struct StoreOptions {
  bool paranoid = false;  // re-hash every payload on read
  bool compress = false;  // deflate new chunk payloads when it helps
  std::uint64_t segment_bytes = 64ull << 20;  // roll threshold
  CdmtConfig index;  // grouping parameters for image indexes
};

// One image's index snapshot. The tree spans every live version of the
// image; tree_ordinals maps store version ordinals onto tree ordinals
// (the two drift apart once versions are removed).
struct ImageIndex {
  std::shared_ptr<const CdmtTree> tree;
  std::map<std::uint32_t, std::uint32_t> tree_ordinals;
};

// Deduplicated chunk storage: append-only segment logs, a fingerprint
// locator, recipes, and tagged image versions. One process at a time
// (advisory lock); within a process, many readers and one writer.
class Store {
public:
  // Creates the on-disk layout. The directory may exist but must not
  // already hold a store.
  static void init(const std::filesystem::path& dir);

  // Opens an existing store and takes the lock (LockError if held).
  explicit Store(std::filesystem::path dir, StoreOptions opts = {});
  ~Store();
  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  const std::filesystem::path& dir() const { return dir_; }

  // -- chunks --
  bool has(const Fingerprint& fp) const;
  Bytes read_chunk(const Fingerprint& fp) const;
  std::uint32_t chunk_length(const Fingerprint& fp) const;
  // Verifies payload against fp before storing; returns false when the
  // chunk was already present (after checking the stored bytes match).
  bool put_chunk(const Fingerprint& fp, ByteSpan payload);

  // -- layers --
  IngestResult ingest(ByteSpan layer, const ChunkerConfig& cfg = {});
  IngestResult ingest_stream(std::istream& in, const ChunkerConfig& cfg = {});
  // Registers an externally assembled recipe; every fingerprint must
  // already be stored.
  void put_recipe(const Recipe& recipe);
  Recipe recipe(const std::string& layer_id) const;
  bool has_recipe(const std::string& layer_id) const;
  std::vector<std::string> layer_ids() const;
  Bytes restore(const std::string& layer_id) const;
  void restore_stream(const std::string& layer_id, std::ostream& out) const;

  // -- versions --
  // Assigns and returns the next ordinal for the name. The tag must be
  // new for the name; layers must be ingested; parent (a tag) must exist.
  std::uint32_t record_version(const std::string& name, const std::string& tag,
                               std::vector<std::string> layers,
                               std::optional<std::string> parent = {});
  ImageVersion version(const std::string& name, const std::string& tag) const;
  std::vector<ImageVersion> versions() const;
  std::vector<ImageVersion> versions(const std::string& name) const;
  // Refuses while another version lists this one as parent.
  void remove_version(const std::string& name, const std::string& tag);

  // Index over all live versions of the image, built lazily and cached
  // until a version is recorded or removed.
  ImageIndex image_index(const std::string& name) const;

  // -- maintenance --
  // Drops recipes referenced by no version, then rewrites the log
  // keeping only chunks reachable from the remaining recipes. Returns
  // reclaimed payload bytes (uncompressed accounting).
  std::uint64_t gc();
  StoreStats stats() const;

private:
  struct ChunkLoc {
    std::uint32_t segment = 0;
    std::uint64_t offset = 0;         // of the record header
    std::uint32_t stored_length = 0;  // payload bytes in the log
    std::uint32_t length = 0;         // payload bytes after inflation
    std::uint8_t flags = 0;
  };
  using LocatorMap = std::unordered_map<Fingerprint, ChunkLoc, FingerprintHash>;

  void load_locator();
  void save_locator() const;
  void scan_segments();
  void load_versions();
  void save_versions() const;
  void open_active_segment();
  void append_chunk(const Fingerprint& fp, ByteSpan payload);
  Bytes read_loc(const ChunkLoc& loc, const Fingerprint& fp) const;
  void verify_duplicate(const ChunkLoc& loc, const Fingerprint& fp,
                        ByteSpan payload) const;
  IngestResult ingest_chunks(
      const ChunkerConfig& cfg,
      const std::function<void(Chunker&, const ChunkSink&)>& feed);
  void write_recipe(const Recipe& r) const;
  Recipe read_recipe(const std::string& layer_id) const;
  std::filesystem::path segment_path(std::uint32_t n) const;
  std::vector<std::uint32_t> segment_numbers() const;
  void invalidate_index(const std::string& name) const;
  ImageIndex build_index(const std::string& name) const;

  std::filesystem::path dir_;
  StoreOptions opts_;
  int lock_fd_ = -1;
  int seg_fd_ = -1;  // active segment, opened on first append
  std::uint32_t active_segment_ = 0;
  std::uint64_t active_size_ = 0;
  LocatorMap locator_;
  std::vector<ImageVersion> versions_;

  mutable std::shared_mutex mu_;  // store state; writers exclusive
  mutable std::mutex index_mu_;   // cache map below
  mutable std::map<std::string, ImageIndex> index_cache_;
};

}  // namespace cdmt
