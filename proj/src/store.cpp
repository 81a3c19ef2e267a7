#include "cdmt/store.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <nlohmann/json.hpp>
#include <set>
#include <unordered_set>

#include "cdmt/compress.hpp"
#include "cdmt/error.hpp"

namespace cdmt {

namespace {

// Segment record: stored_length u32, length u32, flags u8, fp. All
// integers little-endian; the payload follows immediately.
constexpr std::size_t kRecordHeader = 4 + 4 + 1 + Fingerprint::kSize;
constexpr std::uint8_t kFlagDeflate = 1;

constexpr char kLocatorMagic[4] = {'C', 'D', 'L', 'X'};
constexpr char kRecipeMagic[4] = {'C', 'D', 'R', 'C'};

void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(Bytes& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::string errno_text() { return std::strerror(errno); }

void write_all(int fd, const std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    ssize_t w = ::write(fd, p, n);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw StorageError("segment write failed: " + errno_text());
    }
    p += w;
    n -= static_cast<std::size_t>(w);
  }
}

// Durable small-file replacement: write a temp in the same directory,
// fsync, rename over the target.
void atomic_write_file(const std::filesystem::path& path, ByteSpan data) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw StorageError("cannot write " + tmp.string() + ": " + errno_text());
  try {
    write_all(fd, data.data(), data.size());
    if (::fsync(fd) != 0) throw StorageError("fsync failed: " + errno_text());
  } catch (...) {
    ::close(fd);
    throw;
  }
  ::close(fd);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw StorageError("rename to " + path.string() + " failed: " + ec.message());
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw StorageError("cannot open " + path.string());
  Bytes out((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (f.bad()) throw StorageError("read failed on " + path.string());
  return out;
}

bool is_hex_id(const std::string& s) {
  if (s.size() != 2 * Fingerprint::kSize) return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
  });
}

std::string segment_name(std::uint32_t n) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04u.log", n);
  return buf;
}

}  // namespace

std::string recipe_id(std::span<const Fingerprint> fps) {
  Bytes cat;
  cat.reserve(fps.size() * Fingerprint::kSize);
  for (const Fingerprint& fp : fps)
    cat.insert(cat.end(), fp.digest.begin(), fp.digest.end());
  return strong_hash(as_byte_span(cat)).hex();
}

void Store::init(const std::filesystem::path& dir) {
  if (std::filesystem::exists(dir / "versions.json"))
    throw StorageError(dir.string() + " is already a store");
  std::filesystem::create_directories(dir / "segments");
  std::filesystem::create_directories(dir / "recipes");
  atomic_write_file(dir / "versions.json",
                    as_byte_span(std::string_view{"{\"format\":1,\"versions\":[]}\n"}));
}

Store::Store(std::filesystem::path dir, StoreOptions opts)
    : dir_(std::move(dir)), opts_(opts) {
  opts_.index.validate();
  if (!std::filesystem::is_directory(dir_ / "segments") ||
      !std::filesystem::is_directory(dir_ / "recipes") ||
      !std::filesystem::exists(dir_ / "versions.json"))
    throw StorageError(dir_.string() + " is not a store (run init first)");

  lock_fd_ = ::open((dir_ / ".lock").c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (lock_fd_ < 0) throw StorageError("cannot open lock file: " + errno_text());
  if (::flock(lock_fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(lock_fd_);
    lock_fd_ = -1;
    throw LockError("store " + dir_.string() + " is locked by another process");
  }

  // Stray temporaries are leftovers from an interrupted writer; the logs
  // are the source of truth, so they can simply go.
  for (const auto& e : std::filesystem::directory_iterator(dir_ / "segments"))
    if (e.path().extension() == ".tmp") std::filesystem::remove(e.path());
  for (const auto& e : std::filesystem::directory_iterator(dir_ / "recipes"))
    if (e.path().extension() == ".tmp") std::filesystem::remove(e.path());

  load_versions();
  load_locator();

  auto nums = segment_numbers();
  if (!nums.empty()) {
    active_segment_ = nums.back();
    active_size_ = std::filesystem::file_size(segment_path(active_segment_));
  }
}

Store::~Store() {
  if (seg_fd_ >= 0) {
    ::fsync(seg_fd_);
    ::close(seg_fd_);
  }
  try {
    save_locator();
  } catch (...) {
    // Losing the sidecar only costs a rescan on the next open.
  }
  if (lock_fd_ >= 0) ::close(lock_fd_);
}

std::filesystem::path Store::segment_path(std::uint32_t n) const {
  return dir_ / "segments" / segment_name(n);
}

std::vector<std::uint32_t> Store::segment_numbers() const {
  std::vector<std::uint32_t> nums;
  for (const auto& e : std::filesystem::directory_iterator(dir_ / "segments")) {
    const std::string name = e.path().filename().string();
    if (name.size() < 5 || name.substr(name.size() - 4) != ".log") continue;
    const std::string digits = name.substr(0, name.size() - 4);
    if (digits.empty() ||
        !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; }))
      continue;
    nums.push_back(static_cast<std::uint32_t>(std::stoul(digits)));
  }
  std::sort(nums.begin(), nums.end());
  return nums;
}

// ---- locator ----

void Store::save_locator() const {
  Bytes out;
  out.insert(out.end(), kLocatorMagic, kLocatorMagic + 4);
  out.push_back(1);  // format

  auto nums = segment_numbers();
  put_u32(out, static_cast<std::uint32_t>(nums.size()));
  for (std::uint32_t n : nums) {
    put_u32(out, n);
    put_u64(out, std::filesystem::file_size(segment_path(n)));
  }
  put_u64(out, locator_.size());
  for (const auto& [fp, loc] : locator_) {
    out.insert(out.end(), fp.digest.begin(), fp.digest.end());
    put_u32(out, loc.segment);
    put_u64(out, loc.offset);
    put_u32(out, loc.stored_length);
    put_u32(out, loc.length);
    out.push_back(loc.flags);
  }
  atomic_write_file(dir_ / "locator.idx", as_byte_span(out));
}

void Store::load_locator() {
  const std::filesystem::path path = dir_ / "locator.idx";
  if (!std::filesystem::exists(path)) {
    scan_segments();
    return;
  }
  Bytes raw;
  try {
    raw = read_file(path);
  } catch (const StorageError&) {
    scan_segments();
    return;
  }

  // The sidecar is only trusted when the segment files it describes are
  // exactly the ones on disk, byte counts included.
  std::size_t pos = 0;
  auto remaining = [&] { return raw.size() - pos; };
  bool ok = raw.size() >= 9 && std::memcmp(raw.data(), kLocatorMagic, 4) == 0 && raw[4] == 1;
  pos = 9;
  if (ok) {
    std::uint32_t seg_count = get_u32(raw.data() + 5);
    std::vector<std::pair<std::uint32_t, std::uint64_t>> listed;
    for (std::uint32_t i = 0; ok && i < seg_count; ++i) {
      if (remaining() < 12) { ok = false; break; }
      listed.emplace_back(get_u32(raw.data() + pos), get_u64(raw.data() + pos + 4));
      pos += 12;
    }
    if (ok) {
      auto nums = segment_numbers();
      ok = nums.size() == listed.size();
      for (std::size_t i = 0; ok && i < nums.size(); ++i)
        ok = nums[i] == listed[i].first &&
             std::filesystem::file_size(segment_path(nums[i])) == listed[i].second;
    }
    if (ok && remaining() >= 8) {
      std::uint64_t count = get_u64(raw.data() + pos);
      pos += 8;
      constexpr std::size_t kEntry = Fingerprint::kSize + 4 + 8 + 4 + 4 + 1;
      if (remaining() == count * kEntry) {
        locator_.reserve(count);
        for (std::uint64_t i = 0; i < count; ++i) {
          Fingerprint fp;
          std::memcpy(fp.digest.data(), raw.data() + pos, Fingerprint::kSize);
          pos += Fingerprint::kSize;
          ChunkLoc loc;
          loc.segment = get_u32(raw.data() + pos);
          loc.offset = get_u64(raw.data() + pos + 4);
          loc.stored_length = get_u32(raw.data() + pos + 12);
          loc.length = get_u32(raw.data() + pos + 16);
          loc.flags = raw[pos + 20];
          pos += 21;
          locator_.emplace(fp, loc);
        }
        return;
      }
    }
  }
  locator_.clear();
  scan_segments();
}

void Store::scan_segments() {
  for (std::uint32_t seg : segment_numbers()) {
    const std::filesystem::path p = segment_path(seg);
    const std::uint64_t file_size = std::filesystem::file_size(p);
    std::ifstream f(p, std::ios::binary);
    if (!f) throw StorageError("cannot open " + p.string());

    std::uint64_t pos = 0;
    std::uint8_t header[kRecordHeader];
    while (pos + kRecordHeader <= file_size) {
      f.seekg(static_cast<std::streamoff>(pos));
      f.read(reinterpret_cast<char*>(header), kRecordHeader);
      if (!f) break;
      const std::uint32_t stored_len = get_u32(header);
      const std::uint32_t length = get_u32(header + 4);
      const std::uint8_t flags = header[8];
      if (flags > kFlagDeflate || pos + kRecordHeader + stored_len > file_size)
        break;  // torn tail (or garbage): everything from here is dropped
      Fingerprint fp;
      std::memcpy(fp.digest.data(), header + 9, Fingerprint::kSize);

      auto it = locator_.find(fp);
      if (it == locator_.end()) {
        locator_.emplace(fp, ChunkLoc{seg, pos, stored_len, length, flags});
      } else {
        // Replayed record (interrupted compaction). Same content: keep
        // the first copy. Different content: the store is lying.
        Bytes payload(stored_len);
        f.read(reinterpret_cast<char*>(payload.data()), stored_len);
        if (!f) break;
        if (flags & kFlagDeflate) payload = inflate_bytes(as_byte_span(payload), length);
        Bytes existing = read_loc(it->second, fp);
        if (payload != existing)
          throw IntegrityError("two payloads recorded for chunk " + fp.hex());
      }
      pos += kRecordHeader + stored_len;
    }
    f.close();
    if (pos < file_size) std::filesystem::resize_file(p, pos);
  }
}

// ---- segment writer ----

void Store::open_active_segment() {
  seg_fd_ = ::open(segment_path(active_segment_).c_str(),
                   O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (seg_fd_ < 0) throw StorageError("cannot open segment: " + errno_text());
}

void Store::append_chunk(const Fingerprint& fp, ByteSpan payload) {
  if (payload.size() > 0xffffffffull)
    throw StorageError("chunk payload exceeds 32-bit length");

  ByteSpan body = payload;
  Bytes packed;
  std::uint8_t flags = 0;
  if (opts_.compress) {
    packed = deflate_bytes(payload);
    if (packed.size() < payload.size()) {
      body = as_byte_span(packed);
      flags = kFlagDeflate;
    }
  }

  Bytes rec;
  rec.reserve(kRecordHeader + body.size());
  put_u32(rec, static_cast<std::uint32_t>(body.size()));
  put_u32(rec, static_cast<std::uint32_t>(payload.size()));
  rec.push_back(flags);
  rec.insert(rec.end(), fp.digest.begin(), fp.digest.end());
  rec.insert(rec.end(), body.begin(), body.end());

  if (active_size_ > 0 && active_size_ + rec.size() > opts_.segment_bytes) {
    // Seal the full segment: it will never be written again.
    if (seg_fd_ >= 0) {
      if (::fsync(seg_fd_) != 0) throw StorageError("fsync failed: " + errno_text());
      ::close(seg_fd_);
      seg_fd_ = -1;
    }
    ++active_segment_;
    active_size_ = 0;
  }
  if (seg_fd_ < 0) open_active_segment();

  write_all(seg_fd_, rec.data(), rec.size());
  locator_.emplace(fp, ChunkLoc{active_segment_, active_size_,
                                static_cast<std::uint32_t>(body.size()),
                                static_cast<std::uint32_t>(payload.size()), flags});
  active_size_ += rec.size();
}

// ---- chunk reads ----

Bytes Store::read_loc(const ChunkLoc& loc, const Fingerprint& fp) const {
  std::ifstream f(segment_path(loc.segment), std::ios::binary);
  if (!f) throw StorageError("cannot open segment " + segment_name(loc.segment));
  f.seekg(static_cast<std::streamoff>(loc.offset));
  std::uint8_t header[kRecordHeader];
  f.read(reinterpret_cast<char*>(header), kRecordHeader);
  if (!f) throw StorageError("short read in segment " + segment_name(loc.segment));
  if (get_u32(header) != loc.stored_length || get_u32(header + 4) != loc.length ||
      header[8] != loc.flags ||
      std::memcmp(header + 9, fp.digest.data(), Fingerprint::kSize) != 0)
    throw StorageError("locator does not match log record for " + fp.hex());

  Bytes payload(loc.stored_length);
  f.read(reinterpret_cast<char*>(payload.data()), loc.stored_length);
  if (!f) throw StorageError("short read in segment " + segment_name(loc.segment));
  if (loc.flags & kFlagDeflate) payload = inflate_bytes(as_byte_span(payload), loc.length);
  if (payload.size() != loc.length)
    throw IntegrityError("payload length mismatch for " + fp.hex());
  if (opts_.paranoid && strong_hash(as_byte_span(payload)) != fp)
    throw IntegrityError("payload does not hash to " + fp.hex());
  return payload;
}

void Store::verify_duplicate(const ChunkLoc& loc, const Fingerprint& fp,
                             ByteSpan payload) const {
  if (loc.length != payload.size() ||
      read_loc(loc, fp) != Bytes(payload.begin(), payload.end()))
    throw IntegrityError("fingerprint collision: differing payloads for " + fp.hex());
}

bool Store::has(const Fingerprint& fp) const {
  std::shared_lock lk(mu_);
  return locator_.contains(fp);
}

Bytes Store::read_chunk(const Fingerprint& fp) const {
  std::shared_lock lk(mu_);
  auto it = locator_.find(fp);
  if (it == locator_.end()) throw MissingChunkError(fp.hex());
  return read_loc(it->second, fp);
}

std::uint32_t Store::chunk_length(const Fingerprint& fp) const {
  std::shared_lock lk(mu_);
  auto it = locator_.find(fp);
  if (it == locator_.end()) throw MissingChunkError(fp.hex());
  return it->second.length;
}

bool Store::put_chunk(const Fingerprint& fp, ByteSpan payload) {
  if (strong_hash(payload) != fp)
    throw IntegrityError("payload does not hash to claimed fingerprint " + fp.hex());
  std::unique_lock lk(mu_);
  auto it = locator_.find(fp);
  if (it != locator_.end()) {
    verify_duplicate(it->second, fp, payload);
    return false;
  }
  append_chunk(fp, payload);
  return true;
}

// ---- recipes ----

void Store::write_recipe(const Recipe& r) const {
  const std::filesystem::path path = dir_ / "recipes" / r.layer_id;
  if (std::filesystem::exists(path)) return;  // content-derived name: same bytes
  Bytes out;
  out.insert(out.end(), kRecipeMagic, kRecipeMagic + 4);
  out.push_back(1);  // format
  put_u32(out, static_cast<std::uint32_t>(r.fps.size()));
  put_u64(out, r.total_length);
  for (const Fingerprint& fp : r.fps)
    out.insert(out.end(), fp.digest.begin(), fp.digest.end());
  atomic_write_file(path, as_byte_span(out));
}

Recipe Store::read_recipe(const std::string& layer_id) const {
  if (!is_hex_id(layer_id)) throw NotFoundError("bad layer id " + layer_id);
  const std::filesystem::path path = dir_ / "recipes" / layer_id;
  if (!std::filesystem::exists(path)) throw NotFoundError("no recipe " + layer_id);
  Bytes raw = read_file(path);
  if (raw.size() < 17 || std::memcmp(raw.data(), kRecipeMagic, 4) != 0 || raw[4] != 1)
    throw StorageError("recipe " + layer_id + " is malformed");
  const std::uint32_t count = get_u32(raw.data() + 5);
  Recipe r;
  r.layer_id = layer_id;
  r.total_length = get_u64(raw.data() + 9);
  if (raw.size() != 17 + static_cast<std::size_t>(count) * Fingerprint::kSize)
    throw StorageError("recipe " + layer_id + " is malformed");
  r.fps.resize(count);
  for (std::uint32_t i = 0; i < count; ++i)
    std::memcpy(r.fps[i].digest.data(), raw.data() + 17 + i * Fingerprint::kSize,
                Fingerprint::kSize);
  if (recipe_id(r.fps) != layer_id)
    throw IntegrityError("recipe " + layer_id + " does not match its content");
  return r;
}

IngestResult Store::ingest_chunks(const ChunkerConfig& cfg,
                                  const std::function<void(Chunker&, const ChunkSink&)>& feed) {
  cfg.validate();
  std::unique_lock lk(mu_);
  IngestResult r;
  std::vector<Fingerprint> fps;
  std::uint64_t total = 0;
  auto sink = [&](Chunk&& c) {
    fps.push_back(c.fp);
    total += c.length;
    auto it = locator_.find(c.fp);
    if (it != locator_.end()) {
      verify_duplicate(it->second, c.fp, as_byte_span(c.data));
      ++r.dup_chunks;
      r.dup_bytes += c.length;
    } else {
      append_chunk(c.fp, as_byte_span(c.data));
      ++r.new_chunks;
      r.new_bytes += c.length;
    }
  };
  Chunker ch(cfg);
  feed(ch, sink);
  ch.finish(sink);
  r.recipe = Recipe{recipe_id(fps), std::move(fps), total};
  write_recipe(r.recipe);
  return r;
}

IngestResult Store::ingest(ByteSpan layer, const ChunkerConfig& cfg) {
  return ingest_chunks(
      cfg, [&](Chunker& ch, const ChunkSink& sink) { ch.feed(layer, sink); });
}

IngestResult Store::ingest_stream(std::istream& in, const ChunkerConfig& cfg) {
  return ingest_chunks(cfg, [&](Chunker& ch, const ChunkSink& sink) {
    Bytes buf(1 << 20);
    while (in) {
      in.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
      if (in.bad()) throw StorageError("layer stream read failed");
      const auto got = static_cast<std::size_t>(in.gcount());
      if (got > 0) ch.feed({buf.data(), got}, sink);
    }
  });
}

void Store::put_recipe(const Recipe& recipe) {
  if (recipe.layer_id != recipe_id(recipe.fps))
    throw IntegrityError("recipe id does not match its fingerprints");
  std::unique_lock lk(mu_);
  std::uint64_t total = 0;
  for (const Fingerprint& fp : recipe.fps) {
    auto it = locator_.find(fp);
    if (it == locator_.end()) throw MissingChunkError(fp.hex());
    total += it->second.length;
  }
  if (total != recipe.total_length)
    throw IntegrityError("recipe total_length does not match stored chunks");
  write_recipe(recipe);
}

Recipe Store::recipe(const std::string& layer_id) const {
  std::shared_lock lk(mu_);
  return read_recipe(layer_id);
}

bool Store::has_recipe(const std::string& layer_id) const {
  std::shared_lock lk(mu_);
  return is_hex_id(layer_id) && std::filesystem::exists(dir_ / "recipes" / layer_id);
}

std::vector<std::string> Store::layer_ids() const {
  std::shared_lock lk(mu_);
  std::vector<std::string> ids;
  for (const auto& e : std::filesystem::directory_iterator(dir_ / "recipes")) {
    std::string name = e.path().filename().string();
    if (is_hex_id(name)) ids.push_back(std::move(name));
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

Bytes Store::restore(const std::string& layer_id) const {
  Bytes out;
  struct Buf : std::streambuf {
    Bytes* out;
    explicit Buf(Bytes* o) : out(o) {}
    std::streamsize xsputn(const char* s, std::streamsize n) override {
      out->insert(out->end(), s, s + n);
      return n;
    }
    int overflow(int c) override {
      if (c != EOF) out->push_back(static_cast<std::uint8_t>(c));
      return c;
    }
  } buf(&out);
  std::ostream os(&buf);
  restore_stream(layer_id, os);
  return out;
}

void Store::restore_stream(const std::string& layer_id, std::ostream& out) const {
  std::shared_lock lk(mu_);
  Recipe r = read_recipe(layer_id);
  std::uint64_t written = 0;
  for (const Fingerprint& fp : r.fps) {
    auto it = locator_.find(fp);
    if (it == locator_.end()) throw MissingChunkError(fp.hex());
    Bytes payload = read_loc(it->second, fp);
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    if (!out) throw StorageError("restore output write failed");
    written += payload.size();
  }
  if (written != r.total_length)
    throw IntegrityError("restored length does not match recipe " + layer_id);
}

// ---- versions ----

void Store::load_versions() {
  nlohmann::json doc;
  try {
    Bytes raw = read_file(dir_ / "versions.json");
    doc = nlohmann::json::parse(raw.begin(), raw.end());
    if (doc.at("format").get<int>() != 1) throw StorageError("unknown versions.json format");
    for (const auto& jv : doc.at("versions")) {
      ImageVersion v;
      v.name = jv.at("name").get<std::string>();
      v.tag = jv.at("tag").get<std::string>();
      v.ordinal = jv.at("ordinal").get<std::uint32_t>();
      if (!jv.at("parent").is_null()) v.parent = jv.at("parent").get<std::string>();
      for (const auto& l : jv.at("layers")) v.layers.push_back(l.get<std::string>());
      versions_.push_back(std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw StorageError(std::string("versions.json is malformed: ") + e.what());
  }
}

void Store::save_versions() const {
  nlohmann::json doc;
  doc["format"] = 1;
  doc["versions"] = nlohmann::json::array();
  for (const ImageVersion& v : versions_) {
    nlohmann::json jv;
    jv["name"] = v.name;
    jv["tag"] = v.tag;
    jv["ordinal"] = v.ordinal;
    jv["parent"] = v.parent ? nlohmann::json(*v.parent) : nlohmann::json(nullptr);
    jv["layers"] = v.layers;
    doc["versions"].push_back(std::move(jv));
  }
  std::string text = doc.dump(2);
  text.push_back('\n');
  atomic_write_file(dir_ / "versions.json", as_byte_span(text));
}

std::uint32_t Store::record_version(const std::string& name, const std::string& tag,
                                    std::vector<std::string> layers,
                                    std::optional<std::string> parent) {
  std::uint32_t ordinal = 0;
  {
    std::unique_lock lk(mu_);
    if (name.empty() || tag.empty()) throw Error("image name and tag must be non-empty");
    if (layers.empty()) throw Error("a version needs at least one layer");
    bool parent_found = false;
    for (const ImageVersion& v : versions_) {
      if (v.name != name) continue;
      if (v.tag == tag) throw Error(name + ":" + tag + " already exists");
      ordinal = std::max(ordinal, v.ordinal + 1);
      if (parent && v.tag == *parent) parent_found = true;
    }
    if (parent && !parent_found)
      throw NotFoundError("parent version " + name + ":" + *parent + " not found");
    for (const std::string& id : layers) read_recipe(id);  // must exist

    ImageVersion v;
    v.name = name;
    v.tag = tag;
    v.ordinal = ordinal;
    v.parent = std::move(parent);
    v.layers = std::move(layers);
    versions_.push_back(std::move(v));
    save_versions();
  }
  invalidate_index(name);
  return ordinal;
}

ImageVersion Store::version(const std::string& name, const std::string& tag) const {
  std::shared_lock lk(mu_);
  for (const ImageVersion& v : versions_)
    if (v.name == name && v.tag == tag) return v;
  throw NotFoundError("no version " + name + ":" + tag);
}

std::vector<ImageVersion> Store::versions() const {
  std::shared_lock lk(mu_);
  return versions_;
}

std::vector<ImageVersion> Store::versions(const std::string& name) const {
  std::shared_lock lk(mu_);
  std::vector<ImageVersion> out;
  for (const ImageVersion& v : versions_)
    if (v.name == name) out.push_back(v);
  std::sort(out.begin(), out.end(),
            [](const ImageVersion& a, const ImageVersion& b) { return a.ordinal < b.ordinal; });
  return out;
}

void Store::remove_version(const std::string& name, const std::string& tag) {
  {
    std::unique_lock lk(mu_);
    auto it = std::find_if(versions_.begin(), versions_.end(), [&](const ImageVersion& v) {
      return v.name == name && v.tag == tag;
    });
    if (it == versions_.end()) throw NotFoundError("no version " + name + ":" + tag);
    for (const ImageVersion& v : versions_)
      if (v.name == name && v.parent == tag)
        throw Error(name + ":" + tag + " is the parent of " + v.tag);
    versions_.erase(it);
    save_versions();
  }
  invalidate_index(name);
}

// ---- image index ----

void Store::invalidate_index(const std::string& name) const {
  std::lock_guard lk(index_mu_);
  index_cache_.erase(name);
}

ImageIndex Store::build_index(const std::string& name) const {
  std::shared_lock lk(mu_);
  std::vector<ImageVersion> vs;
  for (const ImageVersion& v : versions_)
    if (v.name == name) vs.push_back(v);
  if (vs.empty()) throw NotFoundError("no versions for image " + name);
  std::sort(vs.begin(), vs.end(),
            [](const ImageVersion& a, const ImageVersion& b) { return a.ordinal < b.ordinal; });

  std::map<std::string, std::uint32_t> tag_ordinal;
  for (const ImageVersion& v : vs) tag_ordinal[v.tag] = v.ordinal;

  ImageIndex out;
  auto tree = std::make_shared<CdmtTree>(opts_.index);
  bool first = true;
  std::uint32_t prev_ordinal = 0;
  for (const ImageVersion& v : vs) {
    std::vector<Fingerprint> leaves;
    for (const std::string& id : v.layers) {
      Recipe r = read_recipe(id);
      leaves.insert(leaves.end(), r.fps.begin(), r.fps.end());
    }
    std::optional<std::uint32_t> base;
    if (v.parent) base = out.tree_ordinals.at(tag_ordinal.at(*v.parent));
    std::uint32_t t;
    if (!first && v.parent && tag_ordinal.at(*v.parent) == prev_ordinal) {
      // Continuing straight from the previous version: trunk-style update.
      t = apply_layering_update(*tree, *base, leaves);
    } else {
      t = apply_branching_update(*tree, base, leaves, v.tag);
    }
    out.tree_ordinals[v.ordinal] = t;
    prev_ordinal = v.ordinal;
    first = false;
  }
  out.tree = std::move(tree);
  return out;
}

ImageIndex Store::image_index(const std::string& name) const {
  std::lock_guard lk(index_mu_);
  auto it = index_cache_.find(name);
  if (it == index_cache_.end())
    it = index_cache_.emplace(name, build_index(name)).first;
  return it->second;
}

// ---- maintenance ----

std::uint64_t Store::gc() {
  std::uint64_t reclaimed = 0;
  {
    std::unique_lock lk(mu_);

    std::set<std::string> live_recipes;
    for (const ImageVersion& v : versions_)
      for (const std::string& id : v.layers) live_recipes.insert(id);

    for (const auto& e : std::filesystem::directory_iterator(dir_ / "recipes")) {
      std::string fname = e.path().filename().string();
      if (is_hex_id(fname) && !live_recipes.contains(fname))
        std::filesystem::remove(e.path());
    }

    std::unordered_set<Fingerprint, FingerprintHash> live;
    for (const std::string& id : live_recipes) {
      Recipe r = read_recipe(id);
      live.insert(r.fps.begin(), r.fps.end());
    }

    std::size_t dead = 0;
    for (const auto& [fp, loc] : locator_) {
      if (!live.contains(fp)) {
        reclaimed += loc.length;
        ++dead;
      }
    }
    if (dead == 0) {
      save_locator();
      return 0;
    }

    if (seg_fd_ >= 0) {
      ::fsync(seg_fd_);
      ::close(seg_fd_);
      seg_fd_ = -1;
    }

    // Compact: copy live records (stored form, no recompression) into a
    // fresh chain of temp segments, then swap them in. Renaming over the
    // old files is atomic per file; if interrupted, the rescan on next
    // open tolerates replayed records.
    LocatorMap fresh;
    std::vector<std::filesystem::path> tmps;
    std::uint32_t out_seg = 0;
    std::uint64_t out_size = 0;
    int out_fd = -1;
    auto seal_out = [&] {
      if (out_fd < 0) return;
      if (::fsync(out_fd) != 0) throw StorageError("fsync failed: " + errno_text());
      ::close(out_fd);
      out_fd = -1;
    };
    auto open_out = [&] {
      char buf[24];
      std::snprintf(buf, sizeof buf, "gc%04u.tmp", out_seg);
      std::filesystem::path p = dir_ / "segments" / buf;
      out_fd = ::open(p.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
      if (out_fd < 0) throw StorageError("cannot open " + p.string() + ": " + errno_text());
      tmps.push_back(std::move(p));
    };

    auto old_numbers = segment_numbers();
    for (std::uint32_t seg : old_numbers) {
      const std::filesystem::path p = segment_path(seg);
      const std::uint64_t file_size = std::filesystem::file_size(p);
      std::ifstream f(p, std::ios::binary);
      if (!f) throw StorageError("cannot open " + p.string());
      std::uint64_t pos = 0;
      std::uint8_t header[kRecordHeader];
      while (pos + kRecordHeader <= file_size) {
        f.read(reinterpret_cast<char*>(header), kRecordHeader);
        if (!f) throw StorageError("short read compacting " + p.string());
        const std::uint32_t stored_len = get_u32(header);
        Fingerprint fp;
        std::memcpy(fp.digest.data(), header + 9, Fingerprint::kSize);
        Bytes body(stored_len);
        f.read(reinterpret_cast<char*>(body.data()), stored_len);
        if (!f) throw StorageError("short read compacting " + p.string());
        if (live.contains(fp) && !fresh.contains(fp)) {
          const std::uint64_t rec = kRecordHeader + stored_len;
          if (out_fd >= 0 && out_size > 0 && out_size + rec > opts_.segment_bytes) {
            seal_out();
            ++out_seg;
            out_size = 0;
          }
          if (out_fd < 0) open_out();
          write_all(out_fd, header, kRecordHeader);
          write_all(out_fd, body.data(), body.size());
          fresh.emplace(fp, ChunkLoc{out_seg, out_size, stored_len, get_u32(header + 4),
                                     header[8]});
          out_size += rec;
        }
        pos += kRecordHeader + stored_len;
      }
    }
    seal_out();

    for (std::size_t i = 0; i < tmps.size(); ++i)
      std::filesystem::rename(tmps[i], segment_path(static_cast<std::uint32_t>(i)));
    for (std::uint32_t seg : old_numbers)
      if (seg >= tmps.size()) std::filesystem::remove(segment_path(seg));

    locator_ = std::move(fresh);
    auto nums = segment_numbers();
    active_segment_ = nums.empty() ? 0 : nums.back();
    active_size_ = nums.empty() ? 0 : std::filesystem::file_size(segment_path(active_segment_));
    save_locator();
  }
  {
    std::lock_guard lk(index_mu_);
    index_cache_.clear();
  }
  return reclaimed;
}

StoreStats Store::stats() const {
  std::shared_lock lk(mu_);
  StoreStats s;
  s.chunk_count = locator_.size();
  for (const auto& [fp, loc] : locator_) s.chunk_bytes += loc.length;
  for (std::uint32_t n : segment_numbers()) {
    ++s.segment_count;
    s.segment_bytes += std::filesystem::file_size(segment_path(n));
  }
  for (const auto& e : std::filesystem::directory_iterator(dir_ / "recipes")) {
    std::string name = e.path().filename().string();
    if (!is_hex_id(name)) continue;
    ++s.recipe_count;
    s.recipe_bytes += read_recipe(name).total_length;
  }
  s.version_count = versions_.size();
  return s;
}

}  // namespace cdmt
