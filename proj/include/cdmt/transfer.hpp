#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "cdmt/bytes.hpp"
#include "cdmt/store.hpp"
#include "cdmt/wire.hpp"

namespace cdmt {

struct TransferReport {
  std::string direction;  // "push" or "pull"
  std::size_t chunks_sent = 0;
  std::uint64_t bytes_payload = 0;  // sum of transferred chunk lengths
  std::uint64_t bytes_index = 0;    // index + version metadata bytes
  std::size_t chunks_skipped = 0;   // sent + skipped == target recipe length
};

struct LayerMeta {
  std::string id;
  std::uint32_t count = 0;  // fingerprints in the layer's recipe
  std::uint64_t length = 0;
};

// One version's index as shipped over the wire: version metadata plus
// the canonical serialized tree. `encoded` keeps the exact wire payload
// so both backends account bytes_index identically.
struct IndexPayload {
  std::string name;
  std::string tag;
  std::uint32_t tree_ordinal = 0;  // the version's ordinal inside `tree`
  std::optional<std::string> parent;
  std::vector<LayerMeta> layers;
  Bytes tree;
  Bytes encoded;
};

struct CommitPayload {
  std::string name;
  std::string tag;
  std::optional<std::string> parent;
  std::vector<Recipe> layers;
  Bytes encoded;
};

Bytes encode_index(const IndexPayload& p);
IndexPayload decode_index(ByteSpan payload);
Bytes encode_commit(const CommitPayload& c);
CommitPayload decode_commit(ByteSpan payload);

// Registry endpoint seen from the client. One instance serves one
// push or one pull.
class Registry {
public:
  virtual ~Registry() = default;

  // Pull side: the index of name:tag (NotFoundError when absent), then
  // the payloads of requested fingerprints.
  virtual IndexPayload pull_index(const std::string& name, const std::string& tag) = 0;
  virtual std::vector<std::pair<Fingerprint, Bytes>> fetch_chunks(
      const std::vector<Fingerprint>& fps) = 0;

  // Push side: the index of the image's newest version (nullopt for an
  // unknown image), the subset of fps the registry lacks, chunk upload,
  // and the final atomic commit.
  virtual std::optional<IndexPayload> latest_index(const std::string& name) = 0;
  virtual std::vector<Fingerprint> missing_of(const std::vector<Fingerprint>& fps) = 0;
  virtual void send_chunks(const std::vector<std::pair<Fingerprint, Bytes>>& chunks) = 0;
  virtual void commit(const CommitPayload& meta) = 0;
};

// Offline registry: a store directory used directly, no sockets.
class DirRegistry : public Registry {
public:
  explicit DirRegistry(const std::filesystem::path& dir, StoreOptions opts = {});

  IndexPayload pull_index(const std::string& name, const std::string& tag) override;
  std::vector<std::pair<Fingerprint, Bytes>> fetch_chunks(
      const std::vector<Fingerprint>& fps) override;
  std::optional<IndexPayload> latest_index(const std::string& name) override;
  std::vector<Fingerprint> missing_of(const std::vector<Fingerprint>& fps) override;
  void send_chunks(const std::vector<std::pair<Fingerprint, Bytes>>& chunks) override;
  void commit(const CommitPayload& meta) override;

  Store& store() { return store_; }

private:
  Store store_;
  std::mutex commit_mu_;
};

// Speaks the frame protocol to a serving registry. Connects lazily; the
// first operation fixes the session intent (pull or push).
class RemoteRegistry : public Registry {
public:
  RemoteRegistry(std::string host, std::uint16_t port);
  ~RemoteRegistry() override;
  RemoteRegistry(const RemoteRegistry&) = delete;
  RemoteRegistry& operator=(const RemoteRegistry&) = delete;

  IndexPayload pull_index(const std::string& name, const std::string& tag) override;
  std::vector<std::pair<Fingerprint, Bytes>> fetch_chunks(
      const std::vector<Fingerprint>& fps) override;
  std::optional<IndexPayload> latest_index(const std::string& name) override;
  std::vector<Fingerprint> missing_of(const std::vector<Fingerprint>& fps) override;
  void send_chunks(const std::vector<std::pair<Fingerprint, Bytes>>& chunks) override;
  void commit(const CommitPayload& meta) override;

private:
  void connect_as(std::uint8_t intent);
  Frame request(Opcode op, ByteSpan payload);  // send + one reply w/ ERR mapping

  std::string host_;
  std::uint16_t port_;
  int fd_ = -1;
  int intent_ = -1;  // -1 until connected
};

// TCP registry service on a store directory. Thread per connection;
// pulls run concurrently, commits are serialized.
class RegistryServer {
public:
  // Binds 127.0.0.1:port (0 picks a free port) and starts accepting.
  explicit RegistryServer(const std::filesystem::path& dir, std::uint16_t port = 0,
                          StoreOptions opts = {});
  ~RegistryServer();
  RegistryServer(const RegistryServer&) = delete;
  RegistryServer& operator=(const RegistryServer&) = delete;

  std::uint16_t port() const { return port_; }
  void stop();

private:
  void accept_loop();
  void session(int fd);

  Store store_;
  std::mutex commit_mu_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::thread acceptor_;
  std::mutex sessions_mu_;
  std::vector<std::thread> sessions_;
  std::vector<int> session_fds_;
  bool stopping_ = false;
};

// Ships name:tag from the registry into the client store (pull) or from
// the client store to the registry (push), transferring only chunks the
// receiving side lacks.
TransferReport pull(Store& client, Registry& registry, const std::string& name,
                    const std::string& tag);
TransferReport push(Store& client, Registry& registry, const std::string& name,
                    const std::string& tag);

// "tcp://host:port" or "host:port" → RemoteRegistry; an existing
// directory → DirRegistry.
std::unique_ptr<Registry> make_registry(const std::string& endpoint,
                                        StoreOptions opts = {});

}  // namespace cdmt
