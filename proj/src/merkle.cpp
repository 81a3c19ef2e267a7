#include "cdmt/merkle.hpp"

#include <unordered_map>

#include "cdmt/error.hpp"

namespace cdmt {

namespace {

Fingerprint hash_group(std::span<const Fingerprint> level, std::size_t begin,
                       unsigned arity) {
  Bytes concat;
  concat.reserve(arity * Fingerprint::kSize);
  for (unsigned j = 0; j < arity; ++j) {
    const Fingerprint& child =
        begin + j < level.size() ? level[begin + j] : merkle_sentinel();
    concat.insert(concat.end(), child.digest.begin(), child.digest.end());
  }
  return strong_hash(as_byte_span(concat));
}

}  // namespace

const Fingerprint& merkle_sentinel() {
  static const Fingerprint sentinel = strong_hash(ByteSpan{});
  return sentinel;
}

const Fingerprint& MerkleTree::root() const {
  if (levels.empty() || levels.back().size() != 1)
    throw Error("merkle tree has no root");
  return levels.back().front();
}

std::size_t MerkleTree::node_count() const {
  std::size_t n = 0;
  for (const auto& level : levels) n += level.size();
  return n;
}

MerkleTree merkle_build(std::span<const Fingerprint> leaves, unsigned arity) {
  if (arity < 2) throw ConfigError("merkle arity must be at least 2");
  if (leaves.empty()) throw EmptyInputError("merkle tree needs at least one leaf");
  MerkleTree tree;
  tree.arity = arity;
  tree.levels.emplace_back(leaves.begin(), leaves.end());
  do {
    const auto& prev = tree.levels.back();
    std::vector<Fingerprint> next;
    next.reserve((prev.size() + arity - 1) / arity);
    for (std::size_t i = 0; i < prev.size(); i += arity)
      next.push_back(hash_group(prev, i, arity));
    tree.levels.push_back(std::move(next));
  } while (tree.levels.back().size() > 1);
  return tree;
}

MerkleAuthPath merkle_auth_path(const MerkleTree& tree, std::size_t leaf_index) {
  if (leaf_index >= tree.leaf_count())
    throw std::out_of_range("leaf index outside merkle tree");
  MerkleAuthPath path;
  path.leaf_index = leaf_index;
  std::size_t index = leaf_index;
  for (std::size_t level = 0; level + 1 < tree.levels.size(); ++level) {
    const auto& nodes = tree.levels[level];
    std::size_t begin = index - index % tree.arity;
    std::vector<Fingerprint> siblings;
    siblings.reserve(tree.arity - 1);
    for (unsigned j = 0; j < tree.arity; ++j) {
      if (begin + j == index) continue;
      siblings.push_back(begin + j < nodes.size() ? nodes[begin + j]
                                                  : merkle_sentinel());
    }
    path.siblings.push_back(std::move(siblings));
    index /= tree.arity;
  }
  return path;
}

Fingerprint merkle_fold_auth_path(const Fingerprint& leaf,
                                  const MerkleAuthPath& path, unsigned arity) {
  if (arity < 2) throw ConfigError("merkle arity must be at least 2");
  Fingerprint current = leaf;
  std::size_t index = path.leaf_index;
  for (const auto& siblings : path.siblings) {
    if (siblings.size() + 1 != arity)
      throw Error("auth path group does not match arity");
    std::size_t pos = index % arity;
    Bytes concat;
    concat.reserve(arity * Fingerprint::kSize);
    for (unsigned j = 0, s = 0; j < arity; ++j) {
      const Fingerprint& child = j == pos ? current : siblings[s++];
      concat.insert(concat.end(), child.digest.begin(), child.digest.end());
    }
    current = strong_hash(as_byte_span(concat));
    index /= arity;
  }
  return current;
}

std::size_t merkle_common_nodes(const MerkleTree& a, const MerkleTree& b) {
  std::size_t common = 0;
  std::size_t depth = std::min(a.levels.size(), b.levels.size());
  for (std::size_t d = 0; d < depth; ++d) {
    const auto& la = a.levels[d];
    const auto& lb = b.levels[d];
    std::size_t width = std::min(la.size(), lb.size());
    for (std::size_t i = 0; i < width; ++i)
      if (la[i] == lb[i]) ++common;
  }
  return common;
}

std::size_t merkle_common_digests(const MerkleTree& a, const MerkleTree& b) {
  std::unordered_map<Fingerprint, std::size_t, FingerprintHash> counts;
  for (const auto& level : b.levels)
    for (const Fingerprint& fp : level) ++counts[fp];
  std::size_t common = 0;
  for (const auto& level : a.levels)
    for (const Fingerprint& fp : level) {
      auto it = counts.find(fp);
      if (it != counts.end() && it->second > 0) {
        --it->second;
        ++common;
      }
    }
  return common;
}

}  // namespace cdmt
