#pragma once

#include <cstddef>

#include "cdmt/bytes.hpp"

namespace cdmt {

// DEFLATE (zlib format). Level follows zlib; 6 is the usual default.
Bytes deflate_bytes(ByteSpan data, int level = 6);

// Inflates data produced by deflate_bytes. The caller supplies the
// original size; a mismatch raises IntegrityError.
Bytes inflate_bytes(ByteSpan data, std::size_t original_size);

}  // namespace cdmt
