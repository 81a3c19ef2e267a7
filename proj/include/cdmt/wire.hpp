#pragma once

#include <cstdint>

#include "cdmt/bytes.hpp"

namespace cdmt {

// Frame layout, bit-exact: 4-byte magic "CDTP", 1-byte opcode, 4-byte
// little-endian payload length, payload. One frame per protocol message;
// bulk chunk data is split over several CHUNKS frames.
inline constexpr char kWireMagic[4] = {'C', 'D', 'T', 'P'};
inline constexpr std::uint32_t kMaxFramePayload = 64u << 20;
inline constexpr std::uint8_t kProtocolVersion = 1;

enum class Opcode : std::uint8_t {
  hello = 1,      // u8 version, u8 intent (0 = pull, 1 = push)
  get_index = 2,  // JSON {"name", "tag"|null}; null tag = latest version
  index = 3,      // u32 meta_len, meta JSON, serialized tree
  need = 4,       // u32 count, count fingerprints
  chunks = 5,     // u32 count, records of (fp, u32 len, payload)
  commit = 6,     // u32 meta_len, meta JSON, per-layer fingerprints; empty = ack
  err = 7,        // u16 code, UTF-8 message
};

enum class ErrCode : std::uint16_t {
  not_found = 1,
  conflict = 2,
  integrity = 3,
  protocol = 4,
  internal = 5,
};

struct Frame {
  Opcode opcode;
  Bytes payload;
};

// Blocking frame I/O on a connected socket. Send never raises SIGPIPE;
// both throw TransferError on connection loss, short data, bad magic,
// unknown opcodes, or payloads above kMaxFramePayload.
void send_frame(int fd, Opcode op, ByteSpan payload);
Frame recv_frame(int fd);

}  // namespace cdmt
