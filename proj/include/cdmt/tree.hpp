// Content-defined hash tree over a chunk fingerprint sequence.  Internal
// node boundaries are chosen by hashing sliding windows of child ids, so a
// local change to the leaf sequence re-synchronises instead of shifting
// every group to its right.  One tree carries many versions: nodes record
// per-version ids in-place (layering) or are path-copied (branching).
#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cdmt/bytes.hpp"
#include "cdmt/fingerprint.hpp"

namespace cdmt {

struct CdmtConfig {
  // Interior boundary: low mask_bits of the window hash over the last
  // window_size child ids are zero.
  unsigned mask_bits = 2;
  std::size_t window_size = 2;
  // Forced cut; guarantees progress even if no window ever matches.
  std::size_t max_fanout = 64;
  void validate() const;
};

enum class NodeKind : std::uint8_t { leaf = 0, internal = 1 };
enum class VersionKind : std::uint8_t { layering = 0, branching = 1 };

struct CdmtNode;
using NodePtr = std::shared_ptr<CdmtNode>;

// One (version, id) pair of a node's modification history.
struct IdRevision {
  std::uint32_t ordinal = 0;
  Fingerprint id;
};

struct CdmtNode {
  NodeKind kind = NodeKind::leaf;
  // Ordinal-ascending; the id a version sees is the newest revision whose
  // ordinal lies on that version's lineage.
  std::vector<IdRevision> history;
  std::vector<NodePtr> children;  // empty iff leaf
  // Ordinals of versions whose tree contains this node, ascending.
  std::vector<std::uint32_t> versions;
  // Number of parent edges pointing here (root slots excluded).  In-place
  // revisions are only safe while a node has at most one parent.
  std::uint32_t ref_count = 0;
};

struct VersionInfo {
  std::uint32_t ordinal = 0;
  VersionKind kind = VersionKind::layering;
  std::string tag;  // required for branching versions
  std::optional<std::uint32_t> parent;
  NodePtr root;  // null for an empty version
};

// A node of the flattened single-version view: canonical depth-first
// postorder, children listed before parents, each distinct id once.
struct NodeView {
  NodeKind kind = NodeKind::leaf;
  Fingerprint id;
  std::vector<std::uint32_t> child_indexes;  // into the same view vector
  std::vector<std::uint32_t> versions;       // membership ordinals, ascending
};

class CdmtTree {
 public:
  explicit CdmtTree(CdmtConfig cfg = {});

  const CdmtConfig& config() const { return cfg_; }
  const std::vector<VersionInfo>& versions() const { return versions_; }
  const VersionInfo& version(std::uint32_t ordinal) const;
  const VersionInfo* find_tag(std::string_view tag) const;

  bool known(const Fingerprint& id) const { return node_map_.count(id) != 0; }
  // Total node objects ever allocated; exposes sharing to tests.
  std::size_t object_count() const { return object_count_; }
  std::size_t distinct_id_count() const { return node_map_.size(); }

  // The id a node resolves to under `ordinal`'s lineage.  Binary search by
  // ordinal with a fallback scan for revisions made on other branches.
  Fingerprint id_at(const CdmtNode& node, std::uint32_t ordinal) const;

  // Version `ordinal`'s chunk fingerprint sequence (the recipe).
  std::vector<Fingerprint> leaf_ids(std::uint32_t ordinal) const;
  std::size_t leaf_count(std::uint32_t ordinal) const;

  // Flattened view of one version; the root is the last entry.
  std::vector<NodeView> nodes_at(std::uint32_t ordinal) const;
  // Distinct node ids reachable in one version.
  std::size_t node_count(std::uint32_t ordinal) const;
  // Hashing rounds above the leaves along the deepest path.
  std::size_t height(std::uint32_t ordinal) const;

 private:
  std::uint32_t add_version(VersionKind kind, std::optional<std::uint32_t> base,
                            std::span<const Fingerprint> leaves,
                            std::string tag);
  bool on_lineage(std::uint32_t ancestor, std::uint32_t ordinal) const;
  const Fingerprint* try_id_at(const CdmtNode& node,
                               std::uint32_t ordinal) const;
  void mark_version(const NodePtr& root, std::uint32_t ordinal);

  CdmtConfig cfg_;
  std::vector<VersionInfo> versions_;
  std::unordered_map<Fingerprint, NodePtr, FingerprintHash> node_map_;
  // Per version, a bitset over ordinals of its ancestor chain (inclusive).
  std::vector<std::vector<std::uint64_t>> lineage_;
  std::size_t object_count_ = 0;

  friend CdmtTree cdmt_build(std::span<const Fingerprint>, CdmtConfig);
  friend std::uint32_t apply_layering_update(CdmtTree&, std::uint32_t,
                                             std::span<const Fingerprint>);
  friend std::uint32_t apply_branching_update(CdmtTree&,
                                              std::optional<std::uint32_t>,
                                              std::span<const Fingerprint>,
                                              std::string);
  friend CdmtTree cdmt_deserialize(ByteSpan bytes);
};

// Builds a fresh tree whose single version indexes `leaves`.  Throws
// EmptyInputError when `leaves` is empty.
CdmtTree cdmt_build(std::span<const Fingerprint> leaves, CdmtConfig cfg = {});

// Appends a layering version on top of `base`: nodes whose content changed
// but whose shape did not gain an in-place id revision; shape changes fall
// back to fresh nodes.  Returns the new ordinal.
std::uint32_t apply_layering_update(CdmtTree& tree, std::uint32_t base,
                                    std::span<const Fingerprint> new_leaves);

// Appends a tagged branching version: changed nodes and their ancestors are
// fresh copies, untouched subtrees shared by reference, and the base
// version's nodes are never modified.  `base` may be empty to start a tree.
std::uint32_t apply_branching_update(CdmtTree& tree,
                                     std::optional<std::uint32_t> base,
                                     std::span<const Fingerprint> new_leaves,
                                     std::string tag);

// Root of version `ordinal` (null for an empty version).
NodePtr resolve_version(const CdmtTree& tree, std::uint32_t ordinal);

struct CompareOutcome {
  // Leaf ids of the target version absent from the client tree, in
  // first-encountered (breadth-first) order, deduplicated.
  std::vector<Fingerprint> missing;
  // Nodes dequeued and examined; known subtrees are pruned whole.
  std::size_t nodes_compared = 0;
};

// Breadth-first walk of `target_version` in `target`, pruning every node
// whose id the client already knows.
CompareOutcome cdmt_compare(const CdmtTree& client, const CdmtTree& target,
                            std::uint32_t target_version);

struct ComparisonCounts {
  std::size_t cdmt_compares = 0;  // nodes dequeued by cdmt_compare
  std::size_t kv_compares = 0;    // one lookup per target recipe entry
};

ComparisonCounts cdmt_comparison_count(const CdmtTree& client,
                                       const CdmtTree& target,
                                       std::uint32_t target_version);

// Canonical single-version serialization: header with config and the full
// version table, then the target version's nodes in depth-first postorder
// with variable-length child references and a version-membership bitmap
// per node.  Layout documented in the README.
Bytes cdmt_serialize(const CdmtTree& tree, std::uint32_t version);

// Rejects malformed input with CorruptIndexError carrying the byte offset;
// internal ids are recomputed from children and verified.
CdmtTree cdmt_deserialize(ByteSpan bytes);

}  // namespace cdmt
