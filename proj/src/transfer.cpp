#include "cdmt/transfer.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <nlohmann/json.hpp>
#include <unordered_set>

#include "cdmt/error.hpp"
#include "cdmt/tree.hpp"

namespace cdmt {

// ---- frame I/O ----

namespace {

void send_all(int fd, const std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    ssize_t w = ::send(fd, p, n, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw TransferError(std::string("send failed: ") + std::strerror(errno));
    }
    p += w;
    n -= static_cast<std::size_t>(w);
  }
}

// False only on clean EOF at a frame boundary (n untouched bytes read).
bool recv_all(int fd, std::uint8_t* p, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    ssize_t r = ::recv(fd, p + got, n - got, 0);
    if (r < 0) {
      if (errno == EINTR) continue;
      throw TransferError(std::string("recv failed: ") + std::strerror(errno));
    }
    if (r == 0) {
      if (got == 0) return false;
      throw TransferError("connection closed mid-frame");
    }
    got += static_cast<std::size_t>(r);
  }
  return true;
}

void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void send_frame(int fd, Opcode op, ByteSpan payload) {
  if (payload.size() > kMaxFramePayload) throw TransferError("frame payload too large", false);
  Bytes head;
  head.reserve(9);
  head.insert(head.end(), kWireMagic, kWireMagic + 4);
  head.push_back(static_cast<std::uint8_t>(op));
  put_u32(head, static_cast<std::uint32_t>(payload.size()));
  send_all(fd, head.data(), head.size());
  send_all(fd, payload.data(), payload.size());
}

Frame recv_frame(int fd) {
  std::uint8_t head[9];
  if (!recv_all(fd, head, sizeof head)) throw TransferError("connection closed");
  if (std::memcmp(head, kWireMagic, 4) != 0) throw TransferError("bad frame magic", false);
  const std::uint8_t op = head[4];
  if (op < 1 || op > 7) throw TransferError("unknown opcode", false);
  const std::uint32_t len = get_u32(head + 5);
  if (len > kMaxFramePayload) throw TransferError("oversized frame", false);
  Frame f;
  f.opcode = static_cast<Opcode>(op);
  f.payload.resize(len);
  if (len > 0 && !recv_all(fd, f.payload.data(), len))
    throw TransferError("connection closed mid-frame");
  return f;
}

// ---- payload encodings ----

namespace {

nlohmann::json layers_to_json(const std::vector<LayerMeta>& layers) {
  nlohmann::json arr = nlohmann::json::array();
  for (const LayerMeta& l : layers)
    arr.push_back({{"id", l.id}, {"count", l.count}, {"length", l.length}});
  return arr;
}

std::vector<LayerMeta> layers_from_json(const nlohmann::json& arr) {
  std::vector<LayerMeta> out;
  for (const auto& jl : arr)
    out.push_back({jl.at("id").get<std::string>(), jl.at("count").get<std::uint32_t>(),
                   jl.at("length").get<std::uint64_t>()});
  return out;
}

Bytes with_meta(const nlohmann::json& meta, ByteSpan rest) {
  const std::string text = meta.dump();
  Bytes out;
  out.reserve(4 + text.size() + rest.size());
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

std::pair<nlohmann::json, ByteSpan> split_meta(ByteSpan payload) {
  if (payload.size() < 4) throw TransferError("truncated payload", false);
  const std::uint32_t meta_len = get_u32(payload.data());
  if (payload.size() < 4 + static_cast<std::size_t>(meta_len))
    throw TransferError("truncated payload", false);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(payload.begin() + 4, payload.begin() + 4 + meta_len);
  } catch (const nlohmann::json::exception& e) {
    throw TransferError(std::string("bad metadata: ") + e.what(), false);
  }
  return {std::move(meta), payload.subspan(4 + meta_len)};
}

}  // namespace

Bytes encode_index(const IndexPayload& p) {
  nlohmann::json meta{{"name", p.name},
                      {"tag", p.tag},
                      {"tree_ordinal", p.tree_ordinal},
                      {"parent", p.parent ? nlohmann::json(*p.parent) : nlohmann::json(nullptr)},
                      {"layers", layers_to_json(p.layers)}};
  return with_meta(meta, as_byte_span(p.tree));
}

IndexPayload decode_index(ByteSpan payload) {
  auto [meta, rest] = split_meta(payload);
  IndexPayload p;
  try {
    p.name = meta.at("name").get<std::string>();
    p.tag = meta.at("tag").get<std::string>();
    p.tree_ordinal = meta.at("tree_ordinal").get<std::uint32_t>();
    if (!meta.at("parent").is_null()) p.parent = meta.at("parent").get<std::string>();
    p.layers = layers_from_json(meta.at("layers"));
  } catch (const nlohmann::json::exception& e) {
    throw TransferError(std::string("bad index metadata: ") + e.what(), false);
  }
  p.tree.assign(rest.begin(), rest.end());
  p.encoded.assign(payload.begin(), payload.end());
  return p;
}

Bytes encode_commit(const CommitPayload& c) {
  std::vector<LayerMeta> metas;
  Bytes fps;
  for (const Recipe& r : c.layers) {
    metas.push_back({r.layer_id, static_cast<std::uint32_t>(r.fps.size()), r.total_length});
    for (const Fingerprint& fp : r.fps)
      fps.insert(fps.end(), fp.digest.begin(), fp.digest.end());
  }
  nlohmann::json meta{{"name", c.name},
                      {"tag", c.tag},
                      {"parent", c.parent ? nlohmann::json(*c.parent) : nlohmann::json(nullptr)},
                      {"layers", layers_to_json(metas)}};
  return with_meta(meta, as_byte_span(fps));
}

CommitPayload decode_commit(ByteSpan payload) {
  auto [meta, rest] = split_meta(payload);
  CommitPayload c;
  std::vector<LayerMeta> metas;
  try {
    c.name = meta.at("name").get<std::string>();
    c.tag = meta.at("tag").get<std::string>();
    if (!meta.at("parent").is_null()) c.parent = meta.at("parent").get<std::string>();
    metas = layers_from_json(meta.at("layers"));
  } catch (const nlohmann::json::exception& e) {
    throw TransferError(std::string("bad commit metadata: ") + e.what(), false);
  }
  std::size_t need = 0;
  for (const LayerMeta& m : metas) need += std::size_t{m.count} * Fingerprint::kSize;
  if (rest.size() != need) throw TransferError("commit fingerprint block truncated", false);
  std::size_t off = 0;
  for (const LayerMeta& m : metas) {
    Recipe r;
    r.layer_id = m.id;
    r.total_length = m.length;
    r.fps.resize(m.count);
    for (std::uint32_t i = 0; i < m.count; ++i) {
      std::memcpy(r.fps[i].digest.data(), rest.data() + off, Fingerprint::kSize);
      off += Fingerprint::kSize;
    }
    c.layers.push_back(std::move(r));
  }
  c.encoded.assign(payload.begin(), payload.end());
  return c;
}

// ---- store-level registry logic (shared by DirRegistry and the server) ----

namespace {

IndexPayload index_payload_for(Store& store, const std::string& name,
                               const std::string& tag) {
  ImageVersion v = store.version(name, tag);  // NotFoundError when absent
  ImageIndex idx = store.image_index(name);
  IndexPayload p;
  p.name = name;
  p.tag = tag;
  p.tree_ordinal = idx.tree_ordinals.at(v.ordinal);
  p.parent = v.parent;
  for (const std::string& id : v.layers) {
    Recipe r = store.recipe(id);
    p.layers.push_back({id, static_cast<std::uint32_t>(r.fps.size()), r.total_length});
  }
  p.tree = cdmt_serialize(*idx.tree, p.tree_ordinal);
  p.encoded = encode_index(p);
  return p;
}

std::optional<std::string> latest_tag(Store& store, const std::string& name) {
  auto vs = store.versions(name);
  if (vs.empty()) return std::nullopt;
  return vs.back().tag;  // versions(name) is ordinal-sorted
}

std::vector<Fingerprint> store_missing(Store& store, const std::vector<Fingerprint>& fps) {
  std::vector<Fingerprint> out;
  std::unordered_set<Fingerprint, FingerprintHash> seen;
  for (const Fingerprint& fp : fps)
    if (!store.has(fp) && seen.insert(fp).second) out.push_back(fp);
  return out;
}

// Final push step: recipes and the version record, after all chunks
// landed. Re-pushing an identical version is a no-op; a tag holding
// different content is refused.
void commit_to_store(Store& store, const CommitPayload& c) {
  std::vector<std::string> ids;
  for (const Recipe& r : c.layers) ids.push_back(r.layer_id);
  try {
    ImageVersion existing = store.version(c.name, c.tag);
    if (existing.layers != ids)
      throw Error("tag " + c.name + ":" + c.tag + " already holds different content");
    return;
  } catch (const NotFoundError&) {
  }
  for (const Recipe& r : c.layers) store.put_recipe(r);
  std::optional<std::string> parent;
  if (c.parent) {
    try {
      store.version(c.name, *c.parent);
      parent = c.parent;  // only keep lineage the registry can resolve
    } catch (const NotFoundError&) {
    }
  }
  store.record_version(c.name, c.tag, std::move(ids), std::move(parent));
}

}  // namespace

// ---- DirRegistry ----

DirRegistry::DirRegistry(const std::filesystem::path& dir, StoreOptions opts)
    : store_(dir, opts) {}

IndexPayload DirRegistry::pull_index(const std::string& name, const std::string& tag) {
  return index_payload_for(store_, name, tag);
}

std::vector<std::pair<Fingerprint, Bytes>> DirRegistry::fetch_chunks(
    const std::vector<Fingerprint>& fps) {
  std::vector<std::pair<Fingerprint, Bytes>> out;
  out.reserve(fps.size());
  for (const Fingerprint& fp : fps) out.emplace_back(fp, store_.read_chunk(fp));
  return out;
}

std::optional<IndexPayload> DirRegistry::latest_index(const std::string& name) {
  auto tag = latest_tag(store_, name);
  if (!tag) return std::nullopt;
  return index_payload_for(store_, name, *tag);
}

std::vector<Fingerprint> DirRegistry::missing_of(const std::vector<Fingerprint>& fps) {
  return store_missing(store_, fps);
}

void DirRegistry::send_chunks(const std::vector<std::pair<Fingerprint, Bytes>>& chunks) {
  for (const auto& [fp, payload] : chunks) store_.put_chunk(fp, as_byte_span(payload));
}

void DirRegistry::commit(const CommitPayload& meta) {
  std::lock_guard lk(commit_mu_);
  commit_to_store(store_, meta);
}

// ---- RemoteRegistry ----

namespace {

int connect_tcp(const std::string& host, std::uint16_t port) {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw TransferError(std::string("socket: ") + std::strerror(errno));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    throw TransferError("bad registry address " + host, false);
  }
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    int e = errno;
    ::close(fd);
    throw TransferError("connect to " + host + " failed: " + std::strerror(e));
  }
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return fd;
}

[[noreturn]] void raise_err(const Bytes& payload) {
  ErrCode code = ErrCode::internal;
  std::string msg = "registry error";
  if (payload.size() >= 2) {
    code = static_cast<ErrCode>(payload[0] | (payload[1] << 8));
    msg.assign(payload.begin() + 2, payload.end());
  }
  switch (code) {
    case ErrCode::not_found: throw NotFoundError(msg);
    case ErrCode::conflict: throw Error(msg);
    case ErrCode::integrity: throw IntegrityError(msg);
    case ErrCode::protocol: throw TransferError(msg, false);
    default: throw TransferError(msg);
  }
}

Bytes encode_need(const std::vector<Fingerprint>& fps) {
  Bytes out;
  put_u32(out, static_cast<std::uint32_t>(fps.size()));
  for (const Fingerprint& fp : fps)
    out.insert(out.end(), fp.digest.begin(), fp.digest.end());
  return out;
}

std::vector<Fingerprint> decode_need(ByteSpan payload) {
  if (payload.size() < 4) throw TransferError("truncated fingerprint list", false);
  const std::uint32_t count = get_u32(payload.data());
  if (payload.size() != 4 + std::size_t{count} * Fingerprint::kSize)
    throw TransferError("truncated fingerprint list", false);
  std::vector<Fingerprint> fps(count);
  for (std::uint32_t i = 0; i < count; ++i)
    std::memcpy(fps[i].digest.data(), payload.data() + 4 + i * Fingerprint::kSize,
                Fingerprint::kSize);
  return fps;
}

Bytes encode_chunk_batch(std::span<const std::pair<Fingerprint, Bytes>> batch) {
  Bytes out;
  put_u32(out, static_cast<std::uint32_t>(batch.size()));
  for (const auto& [fp, payload] : batch) {
    out.insert(out.end(), fp.digest.begin(), fp.digest.end());
    put_u32(out, static_cast<std::uint32_t>(payload.size()));
    out.insert(out.end(), payload.begin(), payload.end());
  }
  return out;
}

std::vector<std::pair<Fingerprint, Bytes>> decode_chunk_batch(ByteSpan payload) {
  if (payload.size() < 4) throw TransferError("truncated chunk batch", false);
  const std::uint32_t count = get_u32(payload.data());
  std::vector<std::pair<Fingerprint, Bytes>> out;
  out.reserve(count);
  std::size_t pos = 4;
  for (std::uint32_t i = 0; i < count; ++i) {
    if (payload.size() < pos + Fingerprint::kSize + 4)
      throw TransferError("truncated chunk batch", false);
    Fingerprint fp;
    std::memcpy(fp.digest.data(), payload.data() + pos, Fingerprint::kSize);
    pos += Fingerprint::kSize;
    const std::uint32_t len = get_u32(payload.data() + pos);
    pos += 4;
    if (payload.size() < pos + len) throw TransferError("truncated chunk batch", false);
    out.emplace_back(fp, Bytes(payload.begin() + pos, payload.begin() + pos + len));
    pos += len;
  }
  if (pos != payload.size()) throw TransferError("trailing bytes in chunk batch", false);
  return out;
}

constexpr std::size_t kChunkBatchBytes = 8u << 20;

}  // namespace

RemoteRegistry::RemoteRegistry(std::string host, std::uint16_t port)
    : host_(std::move(host)), port_(port) {}

RemoteRegistry::~RemoteRegistry() {
  if (fd_ >= 0) ::close(fd_);
}

void RemoteRegistry::connect_as(std::uint8_t intent) {
  if (fd_ >= 0) {
    if (intent_ != intent) throw TransferError("session already bound to another intent", false);
    return;
  }
  fd_ = connect_tcp(host_, port_);
  intent_ = intent;
  Bytes hello{kProtocolVersion, intent};
  send_frame(fd_, Opcode::hello, as_byte_span(hello));
  Frame reply = recv_frame(fd_);
  if (reply.opcode == Opcode::err) raise_err(reply.payload);
  if (reply.opcode != Opcode::hello || reply.payload.empty() ||
      reply.payload[0] != kProtocolVersion)
    throw TransferError("registry speaks a different protocol", false);
}

Frame RemoteRegistry::request(Opcode op, ByteSpan payload) {
  send_frame(fd_, op, payload);
  Frame reply = recv_frame(fd_);
  if (reply.opcode == Opcode::err) raise_err(reply.payload);
  return reply;
}

IndexPayload RemoteRegistry::pull_index(const std::string& name, const std::string& tag) {
  connect_as(0);
  nlohmann::json q{{"name", name}, {"tag", tag}};
  const std::string text = q.dump();
  Frame reply = request(Opcode::get_index, as_byte_span(text));
  if (reply.opcode != Opcode::index) throw TransferError("expected INDEX frame", false);
  return decode_index(as_byte_span(reply.payload));
}

std::vector<std::pair<Fingerprint, Bytes>> RemoteRegistry::fetch_chunks(
    const std::vector<Fingerprint>& fps) {
  connect_as(0);
  if (fps.empty()) return {};
  Bytes need = encode_need(fps);
  send_frame(fd_, Opcode::need, as_byte_span(need));
  std::vector<std::pair<Fingerprint, Bytes>> out;
  out.reserve(fps.size());
  while (out.size() < fps.size()) {
    Frame f = recv_frame(fd_);
    if (f.opcode == Opcode::err) raise_err(f.payload);
    if (f.opcode != Opcode::chunks) throw TransferError("expected CHUNKS frame", false);
    auto batch = decode_chunk_batch(as_byte_span(f.payload));
    if (batch.empty()) throw TransferError("empty chunk batch", false);
    for (auto& rec : batch) out.push_back(std::move(rec));
  }
  if (out.size() != fps.size()) throw TransferError("registry sent extra chunks", false);
  return out;
}

std::optional<IndexPayload> RemoteRegistry::latest_index(const std::string& name) {
  connect_as(1);
  nlohmann::json q{{"name", name}, {"tag", nullptr}};
  const std::string text = q.dump();
  try {
    Frame reply = request(Opcode::get_index, as_byte_span(text));
    if (reply.opcode != Opcode::index) throw TransferError("expected INDEX frame", false);
    return decode_index(as_byte_span(reply.payload));
  } catch (const NotFoundError&) {
    return std::nullopt;
  }
}

std::vector<Fingerprint> RemoteRegistry::missing_of(const std::vector<Fingerprint>& fps) {
  connect_as(1);
  Bytes need = encode_need(fps);
  Frame reply = request(Opcode::need, as_byte_span(need));
  if (reply.opcode != Opcode::need) throw TransferError("expected NEED frame", false);
  return decode_need(as_byte_span(reply.payload));
}

void RemoteRegistry::send_chunks(const std::vector<std::pair<Fingerprint, Bytes>>& chunks) {
  connect_as(1);
  std::size_t begin = 0;
  while (begin < chunks.size()) {
    std::size_t end = begin;
    std::size_t bytes = 0;
    while (end < chunks.size() && bytes < kChunkBatchBytes) {
      bytes += Fingerprint::kSize + 4 + chunks[end].second.size();
      ++end;
    }
    Bytes payload = encode_chunk_batch(
        std::span(chunks.data() + begin, end - begin));
    send_frame(fd_, Opcode::chunks, as_byte_span(payload));
    begin = end;
  }
}

void RemoteRegistry::commit(const CommitPayload& meta) {
  connect_as(1);
  Bytes payload = meta.encoded.empty() ? encode_commit(meta) : meta.encoded;
  Frame reply = request(Opcode::commit, as_byte_span(payload));
  if (reply.opcode != Opcode::commit) throw TransferError("expected COMMIT ack", false);
}

// ---- RegistryServer ----

RegistryServer::RegistryServer(const std::filesystem::path& dir, std::uint16_t port,
                               StoreOptions opts)
    : store_(dir, opts) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw TransferError(std::string("socket: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
      ::listen(listen_fd_, 16) != 0) {
    int e = errno;
    ::close(listen_fd_);
    throw TransferError(std::string("bind/listen failed: ") + std::strerror(e), false);
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  acceptor_ = std::thread([this] { accept_loop(); });
}

RegistryServer::~RegistryServer() { stop(); }

void RegistryServer::stop() {
  {
    std::lock_guard lk(sessions_mu_);
    if (stopping_) return;
    stopping_ = true;
    ::shutdown(listen_fd_, SHUT_RDWR);
    for (int fd : session_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<std::thread> workers;
  {
    std::lock_guard lk(sessions_mu_);
    workers.swap(sessions_);
  }
  for (std::thread& t : workers)
    if (t.joinable()) t.join();
  ::close(listen_fd_);
}

void RegistryServer::accept_loop() {
  for (;;) {
    int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR) continue;
      return;  // listener shut down
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    std::lock_guard lk(sessions_mu_);
    if (stopping_) {
      ::close(fd);
      return;
    }
    session_fds_.push_back(fd);
    sessions_.emplace_back([this, fd] { session(fd); });
  }
}

namespace {

void send_err(int fd, ErrCode code, const std::string& msg) {
  Bytes payload;
  payload.push_back(static_cast<std::uint8_t>(static_cast<std::uint16_t>(code) & 0xff));
  payload.push_back(static_cast<std::uint8_t>(static_cast<std::uint16_t>(code) >> 8));
  payload.insert(payload.end(), msg.begin(), msg.end());
  try {
    send_frame(fd, Opcode::err, as_byte_span(payload));
  } catch (const TransferError&) {
    // Peer is already gone; nothing to report to.
  }
}

}  // namespace

void RegistryServer::session(int fd) {
  // Staged push state, discarded wholesale unless COMMIT arrives.
  std::vector<std::pair<Fingerprint, Bytes>> staged;
  int intent = -1;
  try {
    Frame hello = recv_frame(fd);
    if (hello.opcode != Opcode::hello || hello.payload.size() < 2 ||
        hello.payload[0] != kProtocolVersion || hello.payload[1] > 1) {
      send_err(fd, ErrCode::protocol, "bad hello");
      ::close(fd);
      return;
    }
    intent = hello.payload[1];
    Bytes reply{kProtocolVersion, 0};
    send_frame(fd, Opcode::hello, as_byte_span(reply));

    for (;;) {
      Frame f;
      try {
        f = recv_frame(fd);
      } catch (const TransferError& e) {
        // Clean or torn disconnect ends the session quietly; garbage on
        // the wire earns one ERR before the close.
        if (!e.retriable()) send_err(fd, ErrCode::protocol, e.what());
        break;
      }
      try {
        switch (f.opcode) {
          case Opcode::get_index: {
            auto q = nlohmann::json::parse(f.payload.begin(), f.payload.end());
            const std::string name = q.at("name").get<std::string>();
            std::string tag;
            if (q.at("tag").is_null()) {
              auto t = latest_tag(store_, name);
              if (!t) throw NotFoundError("no versions of " + name);
              tag = *t;
            } else {
              tag = q.at("tag").get<std::string>();
            }
            IndexPayload p = index_payload_for(store_, name, tag);
            send_frame(fd, Opcode::index, as_byte_span(p.encoded));
            break;
          }
          case Opcode::need: {
            auto fps = decode_need(as_byte_span(f.payload));
            if (intent == 1) {
              Bytes out = encode_need(store_missing(store_, fps));
              send_frame(fd, Opcode::need, as_byte_span(out));
              break;
            }
            std::size_t begin = 0;
            while (begin < fps.size()) {
              std::vector<std::pair<Fingerprint, Bytes>> batch;
              std::size_t bytes = 0;
              while (begin < fps.size() && bytes < kChunkBatchBytes) {
                Bytes payload = store_.read_chunk(fps[begin]);
                bytes += Fingerprint::kSize + 4 + payload.size();
                batch.emplace_back(fps[begin], std::move(payload));
                ++begin;
              }
              Bytes out = encode_chunk_batch(batch);
              send_frame(fd, Opcode::chunks, as_byte_span(out));
            }
            break;
          }
          case Opcode::chunks: {
            if (intent != 1) throw TransferError("chunk upload on a pull session", false);
            auto batch = decode_chunk_batch(as_byte_span(f.payload));
            for (auto& [cfp, payload] : batch) {
              if (strong_hash(as_byte_span(payload)) != cfp)
                throw IntegrityError("uploaded chunk does not match its fingerprint");
              staged.emplace_back(cfp, std::move(payload));
            }
            break;
          }
          case Opcode::commit: {
            if (intent != 1) throw TransferError("commit on a pull session", false);
            CommitPayload c = decode_commit(as_byte_span(f.payload));
            {
              std::lock_guard lk(commit_mu_);
              for (const auto& [cfp, payload] : staged)
                store_.put_chunk(cfp, as_byte_span(payload));
              commit_to_store(store_, c);
            }
            staged.clear();
            send_frame(fd, Opcode::commit, {});
            break;
          }
          default:
            throw TransferError("unexpected frame", false);
        }
      } catch (const NotFoundError& e) {
        send_err(fd, ErrCode::not_found, e.what());
      } catch (const IntegrityError& e) {
        send_err(fd, ErrCode::integrity, e.what());
        break;
      } catch (const TransferError& e) {
        send_err(fd, ErrCode::protocol, e.what());
        break;
      } catch (const nlohmann::json::exception& e) {
        send_err(fd, ErrCode::protocol, e.what());
        break;
      } catch (const Error& e) {
        send_err(fd, ErrCode::conflict, e.what());
      }
    }
  } catch (const std::exception&) {
    // Handshake failed or the peer vanished; drop the session.
  }
  ::close(fd);
}

// ---- push / pull ----

TransferReport pull(Store& client, Registry& registry, const std::string& name,
                    const std::string& tag) {
  TransferReport report;
  report.direction = "pull";

  IndexPayload idx = registry.pull_index(name, tag);
  report.bytes_index = idx.encoded.size();
  CdmtTree target = cdmt_deserialize(as_byte_span(idx.tree));

  std::size_t recipe_length = 0;
  for (const LayerMeta& l : idx.layers) recipe_length += l.count;

  // The client's own index prunes whole known subtrees; anything that
  // survives is double-checked against the chunk locator so the request
  // is exactly the set difference.
  CdmtTree empty_own;
  const CdmtTree* own_tree = &empty_own;
  std::shared_ptr<const CdmtTree> own_ptr;
  if (!client.versions(name).empty()) {
    own_ptr = client.image_index(name).tree;
    own_tree = own_ptr.get();
  }
  CompareOutcome diff = cdmt_compare(*own_tree, target, idx.tree_ordinal);
  std::vector<Fingerprint> want;
  for (const Fingerprint& fp : diff.missing)
    if (!client.has(fp)) want.push_back(fp);

  auto chunks = registry.fetch_chunks(want);
  for (const auto& [fp, payload] : chunks) {
    client.put_chunk(fp, as_byte_span(payload));  // re-hashes on receipt
    report.bytes_payload += payload.size();
  }
  report.chunks_sent = chunks.size();
  report.chunks_skipped = recipe_length - report.chunks_sent;

  // Rebuild the per-layer recipes by splitting the version's leaf
  // sequence at the advertised layer boundaries.
  std::vector<Fingerprint> leaves = target.leaf_ids(idx.tree_ordinal);
  if (leaves.size() != recipe_length)
    throw IntegrityError("index leaf count disagrees with layer metadata");
  std::size_t off = 0;
  std::vector<std::string> layer_ids;
  for (const LayerMeta& l : idx.layers) {
    Recipe r;
    r.fps.assign(leaves.begin() + off, leaves.begin() + off + l.count);
    off += l.count;
    r.layer_id = recipe_id(r.fps);
    r.total_length = l.length;
    if (r.layer_id != l.id)
      throw IntegrityError("layer " + l.id + " does not match the index leaves");
    client.put_recipe(r);
    layer_ids.push_back(r.layer_id);
  }

  try {
    ImageVersion existing = client.version(name, tag);
    if (existing.layers != layer_ids)
      throw Error("local tag " + name + ":" + tag + " holds different content");
  } catch (const NotFoundError&) {
    std::optional<std::string> parent;
    if (idx.parent) {
      try {
        client.version(name, *idx.parent);
        parent = idx.parent;
      } catch (const NotFoundError&) {
      }
    }
    client.record_version(name, tag, layer_ids, parent);
  }
  return report;
}

TransferReport push(Store& client, Registry& registry, const std::string& name,
                    const std::string& tag) {
  TransferReport report;
  report.direction = "push";

  ImageVersion ver = client.version(name, tag);  // NotFoundError when absent
  ImageIndex own = client.image_index(name);
  const std::uint32_t target_ordinal = own.tree_ordinals.at(ver.ordinal);

  std::size_t recipe_length = 0;
  CommitPayload c;
  c.name = name;
  c.tag = tag;
  c.parent = ver.parent;
  for (const std::string& id : ver.layers) {
    Recipe r = client.recipe(id);
    recipe_length += r.fps.size();
    c.layers.push_back(std::move(r));
  }
  c.encoded = encode_commit(c);

  // What the registry provably has: its newest version's tree. The NEED
  // round trip then narrows the candidates to chunks it truly lacks.
  CdmtTree known;
  auto ridx = registry.latest_index(name);
  if (ridx) {
    report.bytes_index += ridx->encoded.size();
    known = cdmt_deserialize(as_byte_span(ridx->tree));
  }
  CompareOutcome diff = cdmt_compare(known, *own.tree, target_ordinal);
  std::vector<Fingerprint> subset = registry.missing_of(diff.missing);

  std::vector<std::pair<Fingerprint, Bytes>> chunks;
  chunks.reserve(subset.size());
  for (const Fingerprint& fp : subset) {
    Bytes payload = client.read_chunk(fp);
    report.bytes_payload += payload.size();
    chunks.emplace_back(fp, std::move(payload));
  }
  registry.send_chunks(chunks);
  registry.commit(c);

  report.chunks_sent = subset.size();
  report.chunks_skipped = recipe_length - report.chunks_sent;
  report.bytes_index += c.encoded.size();
  return report;
}

std::unique_ptr<Registry> make_registry(const std::string& endpoint, StoreOptions opts) {
  std::string rest = endpoint;
  if (rest.rfind("tcp://", 0) == 0) rest = rest.substr(6);
  else if (std::filesystem::is_directory(endpoint))
    return std::make_unique<DirRegistry>(endpoint, opts);

  auto colon = rest.rfind(':');
  if (colon != std::string::npos && colon + 1 < rest.size()) {
    const std::string host = rest.substr(0, colon);
    const std::string port_text = rest.substr(colon + 1);
    if (!host.empty() &&
        std::all_of(port_text.begin(), port_text.end(),
                    [](char ch) { return ch >= '0' && ch <= '9'; })) {
      unsigned long port = std::stoul(port_text);
      if (port > 0 && port <= 65535)
        return std::make_unique<RemoteRegistry>(host,
                                                static_cast<std::uint16_t>(port));
    }
  }
  throw ConfigError("registry endpoint " + endpoint +
                    " is neither a store directory nor host:port");
}

}  // namespace cdmt
