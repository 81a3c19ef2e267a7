#include "cdmt/metrics.hpp"

#include <chrono>
#include <ostream>
#include <unordered_map>

#include "cdmt/compress.hpp"
#include "cdmt/error.hpp"
#include "cdmt/merkle.hpp"

namespace cdmt {

namespace {

using UniqueChunks = std::unordered_map<Fingerprint, std::uint32_t, FingerprintHash>;

std::uint64_t unique_bytes(const UniqueChunks& chunks) {
  std::uint64_t total = 0;
  for (const auto& [fp, len] : chunks) total += len;
  return total;
}

std::vector<Fingerprint> leaf_fps(const Bytes& version, const ChunkerConfig& cfg,
                                  UniqueChunks* uniq = nullptr) {
  std::vector<Fingerprint> fps;
  for (const Chunk& c : chunk_bytes(as_byte_span(version), cfg)) {
    fps.push_back(c.fp);
    if (uniq) uniq->emplace(c.fp, c.length);
  }
  return fps;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
      .count();
}

}  // namespace

double dedup_ratio(const std::vector<Bytes>& versions, const ChunkerConfig& cfg) {
  if (versions.empty()) throw EmptyInputError("dedup ratio over zero versions");
  std::uint64_t raw = 0;
  UniqueChunks uniq;
  for (const Bytes& v : versions) {
    raw += v.size();
    leaf_fps(v, cfg, &uniq);
  }
  if (raw == 0) return 1.0;
  return static_cast<double>(raw) / static_cast<double>(unique_bytes(uniq));
}

double compression_ratio(const std::vector<Bytes>& versions, int level) {
  std::uint64_t raw = 0;
  std::uint64_t packed = 0;
  for (const Bytes& v : versions) {
    raw += v.size();
    packed += deflate_bytes(as_byte_span(v), level).size();
  }
  if (raw == 0) return 1.0;
  return static_cast<double>(raw) / static_cast<double>(packed);
}

CommonNodeRatios common_node_ratio(std::span<const Fingerprint> a_leaves,
                                   std::span<const Fingerprint> b_leaves,
                                   CdmtConfig cfg, unsigned merkle_arity) {
  if (a_leaves.empty() && b_leaves.empty()) return {1.0, 1.0, 1.0};
  if (a_leaves.empty() || b_leaves.empty()) return {0.0, 0.0, 0.0};

  MerkleTree ma = merkle_build(a_leaves, merkle_arity);
  MerkleTree mb = merkle_build(b_leaves, merkle_arity);
  const auto m_nodes = static_cast<double>(ma.node_count());

  CdmtTree ca = cdmt_build(a_leaves, cfg);
  CdmtTree cb = cdmt_build(b_leaves, cfg);
  std::size_t c_common = 0;
  std::vector<NodeView> a_nodes = ca.nodes_at(0);
  for (const NodeView& n : a_nodes)
    if (cb.known(n.id)) ++c_common;

  CommonNodeRatios r;
  r.merkle_ratio = static_cast<double>(merkle_common_nodes(ma, mb)) / m_nodes;
  r.merkle_digest_ratio = static_cast<double>(merkle_common_digests(ma, mb)) / m_nodes;
  r.cdmt_ratio = static_cast<double>(c_common) / static_cast<double>(a_nodes.size());
  return r;
}

double comparison_ratio(const CdmtTree& client, const CdmtTree& target,
                        std::uint32_t target_version) {
  ComparisonCounts counts = cdmt_comparison_count(client, target, target_version);
  if (counts.kv_compares == 0) return 0.0;
  return static_cast<double>(counts.cdmt_compares) /
         static_cast<double>(counts.kv_compares);
}

double comparison_ratio(std::span<const Fingerprint> client_leaves,
                        std::span<const Fingerprint> target_leaves,
                        CdmtConfig cfg) {
  if (target_leaves.empty()) return 0.0;
  CdmtTree target = cdmt_build(target_leaves, cfg);
  if (client_leaves.empty()) {
    CdmtTree nothing(cfg);
    return comparison_ratio(nothing, target, 0);
  }
  CdmtTree client = cdmt_build(client_leaves, cfg);
  return comparison_ratio(client, target, 0);
}

TimingReport timing_report(const std::vector<Bytes>& versions,
                           const ChunkerConfig& cfg, const CdmtConfig& index_cfg) {
  TimingReport report;
  for (const Bytes& v : versions) {
    auto t0 = std::chrono::steady_clock::now();
    std::vector<Fingerprint> fps = leaf_fps(v, cfg);
    report.hash_seconds += seconds_since(t0);
    if (fps.empty()) continue;
    auto t1 = std::chrono::steady_clock::now();
    CdmtTree tree = cdmt_build(fps, index_cfg);
    report.index_seconds += seconds_since(t1);
  }
  return report;
}

std::vector<BenchRow> bench_corpus(const std::vector<Bytes>& versions,
                                   const ChunkerConfig& cfg, CdmtConfig index_cfg) {
  std::vector<BenchRow> rows;
  std::uint64_t raw = 0;
  std::uint64_t packed = 0;
  UniqueChunks uniq;
  std::vector<Fingerprint> prev_fps;
  for (std::size_t i = 0; i < versions.size(); ++i) {
    const Bytes& v = versions[i];
    BenchRow row;
    row.version = i;
    row.raw_bytes = v.size();
    std::vector<Fingerprint> fps = leaf_fps(v, cfg, &uniq);
    row.chunks = fps.size();
    raw += v.size();
    packed += deflate_bytes(as_byte_span(v)).size();
    row.unique_bytes = unique_bytes(uniq);
    row.dedup_ratio = raw == 0 ? 1.0
                               : static_cast<double>(raw) /
                                     static_cast<double>(row.unique_bytes);
    row.compression_ratio =
        raw == 0 ? 1.0 : static_cast<double>(raw) / static_cast<double>(packed);
    // An empty predecessor (first row) yields all-zero commonality.
    CommonNodeRatios common = common_node_ratio(prev_fps, fps, index_cfg);
    row.merkle_common_ratio = common.merkle_ratio;
    row.merkle_digest_ratio = common.merkle_digest_ratio;
    row.cdmt_common_ratio = common.cdmt_ratio;
    row.comparison_ratio = comparison_ratio(prev_fps, fps, index_cfg);
    rows.push_back(row);
    prev_fps = std::move(fps);
  }
  return rows;
}

void write_csv(std::ostream& out, const std::vector<BenchRow>& rows) {
  out << kBenchCsvHeader << '\n';
  const auto flags = out.flags();
  const auto precision = out.precision();
  out.setf(std::ios::fixed);
  out.precision(6);
  for (const BenchRow& r : rows) {
    out << r.version << ',' << r.raw_bytes << ',' << r.chunks << ','
        << r.unique_bytes << ',' << r.dedup_ratio << ',' << r.compression_ratio
        << ',' << r.merkle_common_ratio << ',' << r.merkle_digest_ratio << ','
        << r.cdmt_common_ratio << ',' << r.comparison_ratio << '\n';
  }
  out.flags(flags);
  out.precision(precision);
}

}  // namespace cdmt
