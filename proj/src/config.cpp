#include "cdmt/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>

#include "cdmt/error.hpp"

namespace cdmt {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

bool parse_bool(std::string_view text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError("expected a boolean, got '" + std::string(text) + "'");
}

unsigned parse_uint(std::string_view text) {
  unsigned value = 0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || p != text.data() + text.size())
    throw ConfigError("expected a number, got '" + std::string(text) + "'");
  return value;
}

}  // namespace

std::size_t parse_size_value(std::string_view text) {
  std::size_t mult = 1;
  if (!text.empty()) {
    switch (text.back()) {
      case 'k': case 'K': mult = 1u << 10; text.remove_suffix(1); break;
      case 'm': case 'M': mult = 1u << 20; text.remove_suffix(1); break;
      case 'g': case 'G': mult = 1u << 30; text.remove_suffix(1); break;
      default: break;
    }
  }
  std::size_t value = 0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || p != text.data() + text.size())
    throw ConfigError("expected a size, got '" + std::string(text) + "'");
  return value * mult;
}

void apply_config_item(ToolConfig& cfg, std::string_view key,
                       std::string_view value) {
  if (key == "chunker.mode") {
    if (value == "cdc") cfg.chunker.mode = ChunkerMode::cdc;
    else if (value == "fixed") cfg.chunker.mode = ChunkerMode::fixed;
    else throw ConfigError("chunker.mode must be cdc or fixed");
  } else if (key == "chunker.mask_bits") {
    cfg.chunker.mask_bits = parse_uint(value);
  } else if (key == "chunker.window_size") {
    cfg.chunker.window_size = parse_size_value(value);
  } else if (key == "chunker.min_chunk") {
    cfg.chunker.min_chunk = parse_size_value(value);
  } else if (key == "chunker.max_chunk") {
    cfg.chunker.max_chunk = parse_size_value(value);
  } else if (key == "chunker.fixed_width") {
    cfg.chunker.fixed_width = parse_size_value(value);
  } else if (key == "index.mask_bits") {
    cfg.index.mask_bits = parse_uint(value);
  } else if (key == "index.window_size") {
    cfg.index.window_size = parse_size_value(value);
  } else if (key == "index.max_fanout") {
    cfg.index.max_fanout = parse_size_value(value);
  } else if (key == "store.paranoid") {
    cfg.paranoid = parse_bool(value);
  } else if (key == "store.compress") {
    cfg.compress = parse_bool(value);
  } else if (key == "store.segment_bytes") {
    cfg.segment_bytes = parse_size_value(value);
  } else {
    throw ConfigError("unknown configuration key '" + std::string(key) + "'");
  }
}

ToolConfig parse_config_text(std::string_view text) {
  ToolConfig cfg;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = trim(raw);
    if (auto hash = line.find('#'); hash != std::string_view::npos)
      line = trim(line.substr(0, hash));
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key=value");
    try {
      apply_config_item(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  cfg.chunker.validate();
  cfg.index.validate();
  return cfg;
}

ToolConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config_text(text.str());
}

}  // namespace cdmt
