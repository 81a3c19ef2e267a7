// key=value configuration shared by the CLI tools: chunking, index
// grouping, and store behaviour in one file, flags overriding.
#pragma once

#include <filesystem>
#include <string_view>

#include "cdmt/chunker.hpp"
#include "cdmt/store.hpp"

namespace cdmt {

struct ToolConfig {
  ChunkerConfig chunker;
  CdmtConfig index;
  bool paranoid = false;
  bool compress = false;
  std::uint64_t segment_bytes = 64ull << 20;

  StoreOptions store_options() const {
    return {paranoid, compress, segment_bytes, index};
  }
};

// "123", "16K", "4M", "1G" (suffixes case-insensitive).
std::size_t parse_size_value(std::string_view text);

// One setting.  Keys: chunker.mode (cdc|fixed), chunker.mask_bits,
// chunker.window_size, chunker.min_chunk, chunker.max_chunk,
// chunker.fixed_width, index.mask_bits, index.window_size,
// index.max_fanout, store.paranoid, store.compress, store.segment_bytes.
// Unknown keys and unparsable values raise ConfigError.
void apply_config_item(ToolConfig& cfg, std::string_view key,
                       std::string_view value);

// key=value per line; '#' starts a comment; blank lines ignored.
// Validates the resulting chunker and index parameters.
ToolConfig parse_config_text(std::string_view text);
ToolConfig load_config_file(const std::filesystem::path& path);

}  // namespace cdmt
