// Operator entry point: one binary driving the store, index, metrics,
// and transfer modules.  Exit codes: 0 success, 1 usage or general
// error, 2 integrity error, 3 transfer error.
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <thread>

#include "cdmt/config.hpp"
#include "cdmt/error.hpp"
#include "cdmt/metrics.hpp"
#include "cdmt/store.hpp"
#include "cdmt/synth.hpp"
#include "cdmt/transfer.hpp"

using namespace cdmt;
using nlohmann::json;

namespace {

volatile std::sig_atomic_t g_stop = 0;

void on_signal(int) { g_stop = 1; }

struct NameTag {
  std::string name;
  std::string tag;
};

NameTag parse_name_tag(const std::string& text) {
  auto colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == text.size())
    throw ConfigError("expected name:tag, got '" + text + "'");
  return {text.substr(0, colon), text.substr(colon + 1)};
}

// Precedence: --config flag, then $CDMT_CONFIG, then built-in defaults.
ToolConfig load_tool_config(const std::string& flag_path) {
  if (!flag_path.empty()) return load_config_file(flag_path);
  if (const char* env = std::getenv("CDMT_CONFIG"); env && *env)
    return load_config_file(env);
  return {};
}

std::string pick_endpoint(std::string registry, std::string& image) {
  // Two loose positionals: with one argument it is the image and the
  // endpoint falls back to $CDMT_REGISTRY.
  if (image.empty()) {
    image = std::move(registry);
    registry.clear();
  }
  if (image.empty()) throw ConfigError("expected an image name:tag");
  if (!registry.empty()) return registry;
  if (const char* env = std::getenv("CDMT_REGISTRY"); env && *env) return env;
  throw ConfigError("no registry given and CDMT_REGISTRY is unset");
}

std::vector<Bytes> load_corpus(const std::string& spec) {
  if (spec.rfind("synthetic:", 0) == 0) return synth_corpus(parse_synth_spec(spec));
  if (!std::filesystem::is_directory(spec))
    throw ConfigError("corpus '" + spec + "' is neither a directory nor synthetic:...");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(spec))
    if (entry.is_regular_file()) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("corpus directory '" + spec + "' is empty");
  std::vector<Bytes> versions;
  for (const auto& file : files) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw StorageError("cannot read " + file.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string& text = buf.str();
    versions.emplace_back(text.begin(), text.end());
  }
  return versions;
}

std::vector<Fingerprint> version_leaves(Store& store, const NameTag& image) {
  ImageVersion v = store.version(image.name, image.tag);
  std::vector<Fingerprint> leaves;
  for (const std::string& id : v.layers) {
    Recipe r = store.recipe(id);
    leaves.insert(leaves.end(), r.fps.begin(), r.fps.end());
  }
  return leaves;
}

void emit(bool as_json, const json& payload, const std::string& text) {
  if (as_json)
    std::cout << payload.dump(2) << "\n";
  else
    std::cout << text;
}

int run(int argc, char** argv) {
  CLI::App app{"content-defined dedup store, index, and transfer tool"};
  app.require_subcommand(1);
  app.fallthrough();
  bool as_json = false;
  std::string config_path;
  app.add_flag("--json", as_json, "machine-readable output");
  app.add_option("--config", config_path,
                 "key=value config file (default: $CDMT_CONFIG)");

  // -- init --
  auto* cmd_init = app.add_subcommand("init", "create an empty store");
  std::string init_dir;
  cmd_init->add_option("dir", init_dir, "store directory")->required();
  cmd_init->callback([&] {
    Store::init(init_dir);
    emit(as_json, {{"store", init_dir}}, "initialized " + init_dir + "\n");
  });

  // -- ingest --
  auto* cmd_ingest = app.add_subcommand("ingest", "chunk layers into a store");
  std::string ingest_dir, ingest_record, ingest_parent;
  std::vector<std::string> ingest_files;
  bool ingest_fixed = false;
  cmd_ingest->add_option("store", ingest_dir, "store directory")->required();
  cmd_ingest->add_option("files", ingest_files, "layer files")->required();
  cmd_ingest->add_option("--record", ingest_record,
                         "record the layers as a version name:tag");
  cmd_ingest->add_option("--parent", ingest_parent,
                         "parent tag for --record");
  cmd_ingest->add_flag("--fixed", ingest_fixed, "fixed-width chunking");
  cmd_ingest->callback([&] {
    ToolConfig cfg = load_tool_config(config_path);
    if (ingest_fixed) cfg.chunker.mode = ChunkerMode::fixed;
    Store store(ingest_dir, cfg.store_options());
    json layers = json::array();
    std::string text;
    std::vector<std::string> ids;
    for (const std::string& file : ingest_files) {
      std::ifstream in(file, std::ios::binary);
      if (!in) throw StorageError("cannot read " + file);
      IngestResult r = store.ingest_stream(in, cfg.chunker);
      ids.push_back(r.recipe.layer_id);
      layers.push_back({{"file", file},
                        {"layer_id", r.recipe.layer_id},
                        {"chunks_new", r.new_chunks},
                        {"chunks_dup", r.dup_chunks},
                        {"bytes_new", r.new_bytes},
                        {"bytes_dup", r.dup_bytes},
                        {"total_length", r.recipe.total_length}});
      text += file + ": layer " + r.recipe.layer_id + " (" +
              std::to_string(r.new_chunks) + " new, " +
              std::to_string(r.dup_chunks) + " duplicate chunks)\n";
    }
    json out{{"layers", layers}};
    if (!ingest_record.empty()) {
      NameTag image = parse_name_tag(ingest_record);
      std::optional<std::string> parent;
      if (!ingest_parent.empty()) parent = ingest_parent;
      std::uint32_t ordinal =
          store.record_version(image.name, image.tag, ids, parent);
      out["version"] = {{"name", image.name},
                        {"tag", image.tag},
                        {"ordinal", ordinal}};
      text += "recorded " + image.name + ":" + image.tag + " (ordinal " +
              std::to_string(ordinal) + ")\n";
    }
    emit(as_json, out, text);
  });

  // -- restore --
  auto* cmd_restore = app.add_subcommand("restore", "write a layer back out");
  std::string restore_dir, restore_id, restore_out;
  cmd_restore->add_option("store", restore_dir, "store directory")->required();
  cmd_restore->add_option("layer_id", restore_id, "layer to restore")->required();
  cmd_restore->add_option("out", restore_out, "output file, - for stdout")
      ->required();
  cmd_restore->callback([&] {
    ToolConfig cfg = load_tool_config(config_path);
    Store store(restore_dir, cfg.store_options());
    if (restore_out == "-") {
      store.restore_stream(restore_id, std::cout);
      return;
    }
    std::ofstream out(restore_out, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot write " + restore_out);
    store.restore_stream(restore_id, out);
    out.flush();
    if (!out) throw StorageError("short write to " + restore_out);
    const std::uint64_t bytes = store.recipe(restore_id).total_length;
    emit(as_json,
         {{"layer_id", restore_id}, {"out", restore_out}, {"bytes", bytes}},
         "restored " + restore_id + " to " + restore_out + " (" +
             std::to_string(bytes) + " bytes)\n");
  });

  // -- chunk --
  auto* cmd_chunk = app.add_subcommand("chunk", "print a file's chunk table");
  std::string chunk_file;
  bool chunk_fixed = false;
  cmd_chunk->add_option("file", chunk_file, "input file")->required();
  cmd_chunk->add_flag("--fixed", chunk_fixed, "fixed-width chunking");
  cmd_chunk->callback([&] {
    ToolConfig cfg = load_tool_config(config_path);
    if (chunk_fixed) cfg.chunker.mode = ChunkerMode::fixed;
    std::ifstream in(chunk_file, std::ios::binary);
    if (!in) throw StorageError("cannot read " + chunk_file);
    std::vector<Chunk> chunks = chunk_stream(in, cfg.chunker);
    if (as_json) {
      json arr = json::array();
      for (const Chunk& c : chunks)
        arr.push_back(
            {{"offset", c.offset}, {"length", c.length}, {"fp", c.fp.hex()}});
      std::cout << arr.dump(2) << "\n";
      return;
    }
    for (const Chunk& c : chunks)
      std::cout << c.offset << "\t" << c.length << "\t" << c.fp.hex() << "\n";
  });

  // -- build-index --
  auto* cmd_index = app.add_subcommand("build-index", "build an image's index");
  std::string index_dir, index_name, index_tag, index_out;
  cmd_index->add_option("store", index_dir, "store directory")->required();
  cmd_index->add_option("name", index_name, "image name")->required();
  cmd_index->add_option("--tag", index_tag, "serialize this version's index");
  cmd_index->add_option("--out", index_out, "file for the serialized index");
  cmd_index->callback([&] {
    ToolConfig cfg = load_tool_config(config_path);
    Store store(index_dir, cfg.store_options());
    ImageIndex idx = store.image_index(index_name);
    json versions = json::array();
    std::string text;
    for (const auto& [store_ordinal, tree_ordinal] : idx.tree_ordinals) {
      versions.push_back({{"ordinal", store_ordinal},
                          {"tree_ordinal", tree_ordinal},
                          {"nodes", idx.tree->node_count(tree_ordinal)},
                          {"height", idx.tree->height(tree_ordinal)}});
      text += "ordinal " + std::to_string(store_ordinal) + ": " +
              std::to_string(idx.tree->node_count(tree_ordinal)) + " nodes, height " +
              std::to_string(idx.tree->height(tree_ordinal)) + "\n";
    }
    json out{{"name", index_name},
             {"versions", versions},
             {"distinct_nodes", idx.tree->distinct_id_count()}};
    text += "distinct nodes: " + std::to_string(idx.tree->distinct_id_count()) + "\n";
    if (!index_tag.empty()) {
      if (index_out.empty())
        throw ConfigError("--tag needs --out for the serialized bytes");
      ImageVersion v = store.version(index_name, index_tag);
      Bytes bytes = cdmt_serialize(*idx.tree, idx.tree_ordinals.at(v.ordinal));
      std::ofstream file(index_out, std::ios::binary | std::ios::trunc);
      if (!file) throw StorageError("cannot write " + index_out);
      file.write(reinterpret_cast<const char*>(bytes.data()),
                 static_cast<std::streamsize>(bytes.size()));
      if (!file) throw StorageError("short write to " + index_out);
      out["serialized"] = {{"tag", index_tag},
                           {"out", index_out},
                           {"bytes", bytes.size()}};
      text += "serialized " + index_name + ":" + index_tag + " to " + index_out +
              " (" + std::to_string(bytes.size()) + " bytes)\n";
    }
    emit(as_json, out, text);
  });

  // -- compare --
  auto* cmd_compare = app.add_subcommand(
      "compare", "chunks the target version needs beyond the base");
  std::string compare_dir, compare_base, compare_target;
  cmd_compare->add_option("store", compare_dir, "store directory")->required();
  cmd_compare->add_option("base", compare_base, "base name:tag")->required();
  cmd_compare->add_option("target", compare_target, "target name:tag")->required();
  cmd_compare->callback([&] {
    ToolConfig cfg = load_tool_config(config_path);
    Store store(compare_dir, cfg.store_options());
    std::vector<Fingerprint> base_leaves =
        version_leaves(store, parse_name_tag(compare_base));
    std::vector<Fingerprint> target_leaves =
        version_leaves(store, parse_name_tag(compare_target));
    // Isolated single-version trees: the diff is between exactly these
    // two versions, not everything the image has ever contained.
    CdmtTree base_tree = cdmt_build(base_leaves, cfg.index);
    CdmtTree target_tree = cdmt_build(target_leaves, cfg.index);
    CompareOutcome outcome = cdmt_compare(base_tree, target_tree, 0);
    ComparisonCounts counts = cdmt_comparison_count(base_tree, target_tree, 0);
    if (as_json) {
      json missing = json::array();
      for (const Fingerprint& fp : outcome.missing) missing.push_back(fp.hex());
      std::cout << json{{"missing", missing},
                        {"missing_count", outcome.missing.size()},
                        {"nodes_compared", outcome.nodes_compared},
                        {"kv_lookups", counts.kv_compares}}
                       .dump(2)
                << "\n";
      return;
    }
    for (const Fingerprint& fp : outcome.missing) std::cout << fp.hex() << "\n";
    std::cout << outcome.missing.size() << " missing chunks, "
              << outcome.nodes_compared << " nodes compared ("
              << counts.kv_compares << " key-value lookups)\n";
  });

  // -- push / pull --
  std::string push_registry, push_image, push_store;
  auto* cmd_push = app.add_subcommand("push", "ship a version to a registry");
  cmd_push->add_option("registry", push_registry, "endpoint or $CDMT_REGISTRY");
  cmd_push->add_option("image", push_image, "name:tag");
  cmd_push->add_option("--store", push_store, "client store directory")->required();
  std::string pull_registry, pull_image, pull_store;
  auto* cmd_pull = app.add_subcommand("pull", "fetch a version from a registry");
  cmd_pull->add_option("registry", pull_registry, "endpoint or $CDMT_REGISTRY");
  cmd_pull->add_option("image", pull_image, "name:tag");
  cmd_pull->add_option("--store", pull_store, "client store directory")->required();
  auto transfer_cmd = [&](bool is_push) {
    ToolConfig cfg = load_tool_config(config_path);
    std::string endpoint = is_push ? pick_endpoint(push_registry, push_image)
                                   : pick_endpoint(pull_registry, pull_image);
    NameTag image = parse_name_tag(is_push ? push_image : pull_image);
    Store client(is_push ? push_store : pull_store, cfg.store_options());
    auto registry = make_registry(endpoint, cfg.store_options());
    TransferReport report = is_push ? push(client, *registry, image.name, image.tag)
                                    : pull(client, *registry, image.name, image.tag);
    emit(as_json,
         {{"direction", report.direction},
          {"name", image.name},
          {"tag", image.tag},
          {"chunks_sent", report.chunks_sent},
          {"chunks_skipped", report.chunks_skipped},
          {"bytes_payload", report.bytes_payload},
          {"bytes_index", report.bytes_index}},
         report.direction + " " + image.name + ":" + image.tag + ": " +
             std::to_string(report.chunks_sent) + " chunks (" +
             std::to_string(report.bytes_payload) + " bytes), " +
             std::to_string(report.chunks_skipped) + " already present, index " +
             std::to_string(report.bytes_index) + " bytes\n");
  };
  cmd_push->callback([&] { transfer_cmd(true); });
  cmd_pull->callback([&] { transfer_cmd(false); });

  // -- serve --
  auto* cmd_serve = app.add_subcommand("serve", "serve a store over TCP");
  std::string serve_dir;
  std::uint16_t serve_port = 0;
  cmd_serve->add_option("store", serve_dir, "store directory")->required();
  cmd_serve->add_option("--port", serve_port, "port, 0 picks one");
  cmd_serve->callback([&] {
    ToolConfig cfg = load_tool_config(config_path);
    RegistryServer server(serve_dir, serve_port, cfg.store_options());
    // The port line must reach pipes before the process blocks.
    if (as_json)
      std::cout << json{{"store", serve_dir}, {"port", server.port()}}.dump()
                << std::endl;
    else
      std::cout << "serving " << serve_dir << " on 127.0.0.1:" << server.port()
                << std::endl;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(50));
    server.stop();
  });

  // -- gc --
  auto* cmd_gc = app.add_subcommand("gc", "drop unreferenced chunks and recipes");
  std::string gc_dir;
  cmd_gc->add_option("store", gc_dir, "store directory")->required();
  cmd_gc->callback([&] {
    ToolConfig cfg = load_tool_config(config_path);
    Store store(gc_dir, cfg.store_options());
    std::uint64_t reclaimed = store.gc();
    emit(as_json, {{"reclaimed_bytes", reclaimed}},
         "reclaimed " + std::to_string(reclaimed) + " bytes\n");
  });

  // -- bench --
  auto* cmd_bench = app.add_subcommand("bench", "measure a corpus");
  std::string bench_corpus_spec, bench_out;
  bool bench_fixed = false;
  cmd_bench->add_option("--corpus", bench_corpus_spec,
                        "directory of versions or synthetic:versions=..,size=..")
      ->required();
  cmd_bench->add_option("--out", bench_out, "CSV report path (default stdout)");
  cmd_bench->add_flag("--fixed", bench_fixed, "fixed-width chunking");
  cmd_bench->callback([&] {
    ToolConfig cfg = load_tool_config(config_path);
    if (bench_fixed) cfg.chunker.mode = ChunkerMode::fixed;
    std::vector<Bytes> versions = load_corpus(bench_corpus_spec);
    std::vector<BenchRow> rows = bench_corpus(versions, cfg.chunker, cfg.index);
    TimingReport timing = timing_report(versions, cfg.chunker, cfg.index);
    if (!bench_out.empty()) {
      std::ofstream out(bench_out, std::ios::trunc);
      if (!out) throw StorageError("cannot write " + bench_out);
      write_csv(out, rows);
      if (!out.flush()) throw StorageError("short write to " + bench_out);
    }
    const BenchRow& last = rows.back();
    json summary{{"versions", rows.size()},
                 {"dedup_ratio", last.dedup_ratio},
                 {"compression_ratio", last.compression_ratio},
                 {"unique_bytes", last.unique_bytes},
                 {"hash_seconds", timing.hash_seconds},
                 {"index_seconds", timing.index_seconds},
                 {"out", bench_out.empty() ? json(nullptr) : json(bench_out)}};
    if (as_json) {
      std::cout << summary.dump(2) << "\n";
    } else if (bench_out.empty()) {
      write_csv(std::cout, rows);
    } else {
      std::cout << rows.size() << " versions: dedup " << last.dedup_ratio
                << "x, deflate " << last.compression_ratio << "x, hash "
                << timing.hash_seconds << "s, index " << timing.index_seconds
                << "s -> " << bench_out << "\n";
    }
  });

  // -- stats --
  auto* cmd_stats = app.add_subcommand("stats", "store accounting");
  std::string stats_dir;
  cmd_stats->add_option("store", stats_dir, "store directory")->required();
  cmd_stats->callback([&] {
    ToolConfig cfg = load_tool_config(config_path);
    Store store(stats_dir, cfg.store_options());
    StoreStats s = store.stats();
    emit(as_json,
         {{"chunk_count", s.chunk_count},
          {"chunk_bytes", s.chunk_bytes},
          {"segment_count", s.segment_count},
          {"segment_bytes", s.segment_bytes},
          {"recipe_count", s.recipe_count},
          {"recipe_bytes", s.recipe_bytes},
          {"version_count", s.version_count}},
         "chunks: " + std::to_string(s.chunk_count) + " (" +
             std::to_string(s.chunk_bytes) + " bytes)\nsegments: " +
             std::to_string(s.segment_count) + " (" +
             std::to_string(s.segment_bytes) + " bytes)\nrecipes: " +
             std::to_string(s.recipe_count) + "\nversions: " +
             std::to_string(s.version_count) + "\n");
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return 2;
  } catch (const CorruptIndexError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return 2;
  } catch (const MissingChunkError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return 2;
  } catch (const TransferError& e) {
    std::cerr << "transfer error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
