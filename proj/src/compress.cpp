#include "cdmt/compress.hpp"

#include <zlib.h>

#include <limits>

#include "cdmt/error.hpp"

namespace cdmt {

Bytes deflate_bytes(ByteSpan data, int level) {
  uLongf bound = compressBound(static_cast<uLong>(data.size()));
  Bytes out(bound);
  int rc = compress2(out.data(), &bound, data.data(),
                     static_cast<uLong>(data.size()), level);
  if (rc != Z_OK) throw Error("deflate failed (zlib rc " + std::to_string(rc) + ")");
  out.resize(bound);
  return out;
}

Bytes inflate_bytes(ByteSpan data, std::size_t original_size) {
  Bytes out(original_size);
  uLongf got = static_cast<uLongf>(original_size);
  int rc = uncompress(out.data(), &got, data.data(),
                      static_cast<uLong>(data.size()));
  if (rc != Z_OK || got != original_size)
    throw IntegrityError("inflate failed or size mismatch");
  return out;
}

}  // namespace cdmt
