// Fixed-arity hash tree over a chunk digest sequence.  Serves as the
// positional baseline the content-defined index is measured against: node
// identity depends on where a chunk sits, so insertions shift everything
// to their right.
#pragma once

#include <cstddef>
#include <vector>

#include "cdmt/fingerprint.hpp"

namespace cdmt {

struct MerkleTree {
  unsigned arity = 4;
  // levels[0] are the leaves; the last level holds the single root.
  std::vector<std::vector<Fingerprint>> levels;

  const Fingerprint& root() const;
  std::size_t leaf_count() const { return levels.empty() ? 0 : levels.front().size(); }
  // Number of hashing rounds above the leaves.
  std::size_t height() const { return levels.empty() ? 0 : levels.size() - 1; }
  std::size_t node_count() const;
};

// Digest used to pad the last group of a level up to full arity.
const Fingerprint& merkle_sentinel();

// Builds the tree bottom-up.  Groups of `arity` children (sentinel-padded)
// hash into one parent; at least one round runs even for a single leaf, so
// the root is always an interior node.  Throws EmptyInputError when no
// leaves are given and ConfigError for arity < 2.
MerkleTree merkle_build(std::span<const Fingerprint> leaves, unsigned arity = 4);

// Siblings of the group containing the leaf, one group per level from the
// bottom up, each with arity-1 digests (the leaf's own slot omitted).
struct MerkleAuthPath {
  std::size_t leaf_index = 0;
  std::vector<std::vector<Fingerprint>> siblings;
};

MerkleAuthPath merkle_auth_path(const MerkleTree& tree, std::size_t leaf_index);

// Recomputes the root from a leaf digest and its auth path.  The caller
// compares the result against a trusted root.
Fingerprint merkle_fold_auth_path(const Fingerprint& leaf,
                                  const MerkleAuthPath& path, unsigned arity);

// Nodes (including leaves) equal in both trees at the same (level, index)
// position.  Sentinel-padding slots are not counted.
std::size_t merkle_common_nodes(const MerkleTree& a, const MerkleTree& b);

// Multiset intersection of all node digests, position ignored.
std::size_t merkle_common_digests(const MerkleTree& a, const MerkleTree& b);

}  // namespace cdmt
