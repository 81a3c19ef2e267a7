// Corpus-level measurements: dedup vs compression ratios, index-node
// commonality under positional and content-defined trees, compare cost,
// and the hash/index wall-clock split.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "cdmt/bytes.hpp"
#include "cdmt/chunker.hpp"
#include "cdmt/tree.hpp"

namespace cdmt {

// Raw corpus bytes over distinct chunk payload bytes; >= 1 whenever any
// data exists, and invariant to version order (the distinct set is).
// Throws EmptyInputError for an empty version list.
double dedup_ratio(const std::vector<Bytes>& versions, const ChunkerConfig& cfg = {});

// Raw corpus bytes over the summed per-version DEFLATE sizes.
double compression_ratio(const std::vector<Bytes>& versions, int level = 6);

struct CommonNodeRatios {
  double merkle_ratio = 0;         // same digest at the same (level, index)
  double merkle_digest_ratio = 0;  // digest multiset intersection
  double cdmt_ratio = 0;           // distinct node-id intersection
};

// Node commonality between two versions' indexes, each ratio normalized
// by a's node count.  Two empty versions are fully common.
CommonNodeRatios common_node_ratio(std::span<const Fingerprint> a_leaves,
                                   std::span<const Fingerprint> b_leaves,
                                   CdmtConfig cfg = {}, unsigned merkle_arity = 4);

// Tree-compare dequeues over per-leaf key-value lookups for the same
// diff; < 1 means the index pruned more than its traversal cost.
double comparison_ratio(const CdmtTree& client, const CdmtTree& target,
                        std::uint32_t target_version);
double comparison_ratio(std::span<const Fingerprint> client_leaves,
                        std::span<const Fingerprint> target_leaves,
                        CdmtConfig cfg = {});

struct TimingReport {
  double hash_seconds = 0;   // chunking + strong hashing
  double index_seconds = 0;  // cdmt_build over the resulting fingerprints
};

TimingReport timing_report(const std::vector<Bytes>& versions,
                           const ChunkerConfig& cfg = {},
                           const CdmtConfig& index_cfg = {});

// One benchmark row per corpus version.  Ratio columns compare a version
// against its predecessor; the first row has no predecessor, so its
// commonality is 0 and its comparison ratio is the cold-walk cost.
// dedup/compression columns are cumulative up to and including the row.
struct BenchRow {
  std::size_t version = 0;
  std::uint64_t raw_bytes = 0;
  std::size_t chunks = 0;
  std::uint64_t unique_bytes = 0;  // distinct chunk payload bytes so far
  double dedup_ratio = 0;
  double compression_ratio = 0;
  double merkle_common_ratio = 0;
  double merkle_digest_ratio = 0;
  double cdmt_common_ratio = 0;
  double comparison_ratio = 0;
};

inline constexpr char kBenchCsvHeader[] =
    "version,raw_bytes,chunks,unique_bytes,dedup_ratio,compression_ratio,"
    "merkle_common_ratio,merkle_digest_ratio,cdmt_common_ratio,comparison_ratio";

std::vector<BenchRow> bench_corpus(const std::vector<Bytes>& versions,
                                   const ChunkerConfig& cfg = {},
                                   CdmtConfig index_cfg = {});

// kBenchCsvHeader, then one comma-separated line per row (gnuplot reads
// this directly with `set datafile separator ","`).
void write_csv(std::ostream& out, const std::vector<BenchRow>& rows);

}  // namespace cdmt
