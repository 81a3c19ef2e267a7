#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cdmt {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// An operation that requires at least one element got none.
class EmptyInputError : public Error {
public:
  using Error::Error;
};

// Bad user-supplied configuration (chunker/index parameters, config file).
class ConfigError : public Error {
public:
  using Error::Error;
};

// Disk-level failure: write error, unreadable segment, bad store layout.
class StorageError : public Error {
public:
  using Error::Error;
};

// Data does not match its fingerprint, or two payloads claim one fingerprint.
class IntegrityError : public Error {
public:
  using Error::Error;
};

class MissingChunkError : public Error {
public:
  explicit MissingChunkError(const std::string& fp_hex)
      : Error("missing chunk " + fp_hex), fp_hex_(fp_hex) {}
  const std::string& fp_hex() const { return fp_hex_; }

private:
  std::string fp_hex_;
};

// Malformed serialized index; offset points at the offending byte.
class CorruptIndexError : public Error {
public:
  CorruptIndexError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

private:
  std::uint64_t offset_ = 0;
};

class NotFoundError : public Error {
public:
  using Error::Error;
};

class TransferError : public Error {
public:
  explicit TransferError(const std::string& what, bool retriable = true)
      : Error(what), retriable_(retriable) {}
  bool retriable() const { return retriable_; }

private:
  bool retriable_ = true;
};

// Another process holds the store lock.
class LockError : public Error {
public:
  using Error::Error;
};

}  // namespace cdmt
