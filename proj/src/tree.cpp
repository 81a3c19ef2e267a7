#include "cdmt/tree.hpp"

#include <algorithm>
#include <deque>
#include <functional>
#include <unordered_set>

#include "cdmt/error.hpp"

namespace cdmt {

namespace {

constexpr std::uint32_t kNoParent = 0xffffffff;

// Target shape of one version, computed bottom-up from the leaf sequence
// alone.  Grouping is a pure function of (ids, config), which is what lets
// rebuilds and reconciliation agree on structure.
struct PlanNode {
  NodeKind kind = NodeKind::leaf;
  Fingerprint id;
  std::uint32_t first_child = 0;  // index into the level below
  std::uint32_t child_count = 0;
};

using PlanLevels = std::vector<std::vector<PlanNode>>;

PlanLevels plan_levels(std::span<const Fingerprint> leaves,
                       const CdmtConfig& cfg) {
  PlanLevels levels;
  if (leaves.empty()) return levels;
  auto& bottom = levels.emplace_back();
  bottom.reserve(leaves.size());
  for (const Fingerprint& fp : leaves)
    bottom.push_back({NodeKind::leaf, fp, 0, 0});

  // Group until a single internal node remains.  A lone leaf still gets a
  // wrapper parent so every root is internal.
  while (levels.back().size() > 1 || levels.size() == 1) {
    const auto& prev = levels.back();
    std::vector<PlanNode> next;
    // Sliding window of the most recent child ids; like the byte chunker,
    // it is not reset at cuts — the pending-count gate keeps boundary
    // tests inside one group.
    std::vector<Fingerprint> window;
    Bytes concat;
    std::uint32_t group_start = 0;
    std::size_t pending = 0;
    auto cut = [&](std::uint32_t end) {
      PlanNode parent;
      parent.kind = NodeKind::internal;
      parent.id = strong_hash(as_byte_span(concat));
      parent.first_child = group_start;
      parent.child_count = end - group_start;
      next.push_back(parent);
      group_start = end;
      pending = 0;
      concat.clear();
    };
    for (std::uint32_t i = 0; i < prev.size(); ++i) {
      const Fingerprint& id = prev[i].id;
      window.push_back(id);
      if (window.size() > cfg.window_size) window.erase(window.begin());
      concat.insert(concat.end(), id.digest.begin(), id.digest.end());
      ++pending;
      bool boundary =
          pending >= cfg.window_size &&
          matches_boundary(window_hash(window, cfg.window_size), cfg.mask_bits);
      if (boundary || pending == cfg.max_fanout) cut(i + 1);
    }
    if (pending > 0) cut(static_cast<std::uint32_t>(prev.size()));
    levels.push_back(std::move(next));
  }
  return levels;
}

void put_u16(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_varint(Bytes& out, std::uint64_t v) {
  while (v >= 0x80) {
    out.push_back(static_cast<std::uint8_t>(v) | 0x80);
    v >>= 7;
  }
  out.push_back(static_cast<std::uint8_t>(v));
}

// Cursor over serialized bytes; every failure reports the byte offset.
struct Reader {
  ByteSpan data;
  std::size_t pos = 0;

  std::size_t remaining() const { return data.size() - pos; }
  [[noreturn]] void fail(const std::string& what) const {
    throw CorruptIndexError(what, pos);
  }
  ByteSpan bytes(std::size_t n, const char* what) {
    if (remaining() < n) fail(std::string("truncated ") + what);
    ByteSpan out = data.subspan(pos, n);
    pos += n;
    return out;
  }
  std::uint8_t u8(const char* what) { return bytes(1, what)[0]; }
  std::uint16_t u16(const char* what) {
    ByteSpan b = bytes(2, what);
    return static_cast<std::uint16_t>(b[0] | b[1] << 8);
  }
  std::uint32_t u32(const char* what) {
    ByteSpan b = bytes(4, what);
    return b[0] | b[1] << 8 | b[2] << 16 | std::uint32_t{b[3]} << 24;
  }
  std::uint64_t varint(const char* what) {
    std::uint64_t v = 0;
    for (unsigned shift = 0; shift < 64; shift += 7) {
      std::uint8_t b = u8(what);
      v |= static_cast<std::uint64_t>(b & 0x7f) << shift;
      if (!(b & 0x80)) return v;
    }
    fail(std::string("overlong varint in ") + what);
  }
};

}  // namespace

void CdmtConfig::validate() const {
  if (mask_bits < 1 || mask_bits > 16)
    throw ConfigError("interior mask_bits must be in [1, 16]");
  if (window_size < 2 || window_size > 16)
    throw ConfigError("interior window_size must be in [2, 16]");
  if (max_fanout < window_size)
    throw ConfigError("max_fanout must be at least window_size");
}

CdmtTree::CdmtTree(CdmtConfig cfg) : cfg_(cfg) { cfg_.validate(); }

const VersionInfo& CdmtTree::version(std::uint32_t ordinal) const {
  if (ordinal >= versions_.size())
    throw NotFoundError("unknown version ordinal " + std::to_string(ordinal));
  return versions_[ordinal];
}

const VersionInfo* CdmtTree::find_tag(std::string_view tag) const {
  if (tag.empty()) return nullptr;
  for (const VersionInfo& v : versions_)
    if (v.tag == tag) return &v;
  return nullptr;
}

bool CdmtTree::on_lineage(std::uint32_t ancestor, std::uint32_t ordinal) const {
  const auto& bits = lineage_[ordinal];
  std::size_t block = ancestor / 64;
  return block < bits.size() && (bits[block] >> (ancestor % 64)) & 1;
}

const Fingerprint* CdmtTree::try_id_at(const CdmtNode& node,
                                       std::uint32_t ordinal) const {
  const auto& hist = node.history;
  // Newest revision on this version's lineage.  The binary search covers
  // the straight-line history; the backward scan only runs past revisions
  // made on other branches.
  auto it = std::upper_bound(
      hist.begin(), hist.end(), ordinal,
      [](std::uint32_t v, const IdRevision& r) { return v < r.ordinal; });
  while (it != hist.begin()) {
    --it;
    if (on_lineage(it->ordinal, ordinal)) return &it->id;
  }
  return nullptr;
}

Fingerprint CdmtTree::id_at(const CdmtNode& node, std::uint32_t ordinal) const {
  if (ordinal >= lineage_.size())
    throw NotFoundError("unknown version ordinal " + std::to_string(ordinal));
  const Fingerprint* id = try_id_at(node, ordinal);
  if (!id) throw Error("node carries no id for the requested version");
  return *id;
}

void CdmtTree::mark_version(const NodePtr& root, std::uint32_t ordinal) {
  std::vector<CdmtNode*> stack{root.get()};
  while (!stack.empty()) {
    CdmtNode* node = stack.back();
    stack.pop_back();
    if (!node->versions.empty() && node->versions.back() == ordinal) continue;
    node->versions.push_back(ordinal);
    for (const NodePtr& child : node->children) stack.push_back(child.get());
  }
}

std::uint32_t CdmtTree::add_version(VersionKind kind,
                                    std::optional<std::uint32_t> base,
                                    std::span<const Fingerprint> leaves,
                                    std::string tag) {
  if (base && *base >= versions_.size())
    throw NotFoundError("unknown base version " + std::to_string(*base));
  if (kind == VersionKind::branching) {
    if (tag.empty()) throw Error("branching version requires a tag");
    if (find_tag(tag)) throw Error("duplicate tag: " + tag);
  }
  const auto ordinal = static_cast<std::uint32_t>(versions_.size());
  std::vector<std::uint64_t> bits = base ? lineage_[*base]
                                         : std::vector<std::uint64_t>{};
  bits.resize(ordinal / 64 + 1, 0);
  bits[ordinal / 64] |= std::uint64_t{1} << (ordinal % 64);
  lineage_.push_back(std::move(bits));

  PlanLevels plan = plan_levels(leaves, cfg_);
  NodePtr root;
  if (!plan.empty()) {
    const bool allow_inplace = kind == VersionKind::layering && base.has_value();

    // Reconciles one plan position against the object occupying it in the
    // base version.  Reuse when the subtree is unchanged, share when the
    // content exists anywhere with a lineage-valid id, revise in place when
    // only ids changed, copy otherwise.
    std::function<NodePtr(std::size_t, std::size_t, const NodePtr&)> build =
        [&](std::size_t level, std::size_t idx,
            const NodePtr& existing) -> NodePtr {
      const PlanNode& p = plan[level][idx];
      if (existing) {
        const Fingerprint* cur = try_id_at(*existing, ordinal);
        if (cur && *cur == p.id) return existing;
      }
      if (auto it = node_map_.find(p.id); it != node_map_.end()) {
        const Fingerprint* cur = try_id_at(*it->second, ordinal);
        if (cur && *cur == p.id) return it->second;
      }
      const bool aligned = existing && p.kind == NodeKind::internal &&
                           existing->kind == NodeKind::internal &&
                           existing->children.size() == p.child_count;
      std::vector<NodePtr> child_objs;
      if (p.kind == NodeKind::internal) {
        child_objs.reserve(p.child_count);
        for (std::uint32_t j = 0; j < p.child_count; ++j) {
          NodePtr sub = aligned ? existing->children[j] : NodePtr{};
          child_objs.push_back(build(level - 1, p.first_child + j, sub));
        }
      }
      bool inplace = allow_inplace && existing && existing->kind == p.kind &&
                     existing->ref_count <= 1;
      if (inplace && p.kind == NodeKind::internal) {
        inplace = aligned;
        for (std::uint32_t j = 0; inplace && j < p.child_count; ++j)
          inplace = child_objs[j] == existing->children[j];
      }
      if (inplace) {
        existing->history.push_back({ordinal, p.id});
        node_map_[p.id] = existing;
        return existing;
      }
      auto node = std::make_shared<CdmtNode>();
      node->kind = p.kind;
      node->history.push_back({ordinal, p.id});
      node->children = std::move(child_objs);
      for (const NodePtr& child : node->children) ++child->ref_count;
      node_map_[p.id] = node;
      ++object_count_;
      return node;
    };

    NodePtr base_root = base ? versions_[*base].root : NodePtr{};
    root = build(plan.size() - 1, 0, base_root);
    mark_version(root, ordinal);
  }
  versions_.push_back({ordinal, kind, std::move(tag), base, root});
  return ordinal;
}

std::vector<Fingerprint> CdmtTree::leaf_ids(std::uint32_t ordinal) const {
  const VersionInfo& info = version(ordinal);
  std::vector<Fingerprint> out;
  if (!info.root) return out;
  std::function<void(const CdmtNode&)> walk = [&](const CdmtNode& node) {
    if (node.kind == NodeKind::leaf) {
      out.push_back(id_at(node, ordinal));
      return;
    }
    for (const NodePtr& child : node.children) walk(*child);
  };
  walk(*info.root);
  return out;
}

std::size_t CdmtTree::leaf_count(std::uint32_t ordinal) const {
  const VersionInfo& info = version(ordinal);
  if (!info.root) return 0;
  std::function<std::size_t(const CdmtNode&)> walk =
      [&](const CdmtNode& node) -> std::size_t {
    if (node.kind == NodeKind::leaf) return 1;
    std::size_t n = 0;
    for (const NodePtr& child : node.children) n += walk(*child);
    return n;
  };
  return walk(*info.root);
}

std::vector<NodeView> CdmtTree::nodes_at(std::uint32_t ordinal) const {
  const VersionInfo& info = version(ordinal);
  std::vector<NodeView> out;
  if (!info.root) return out;
  std::unordered_map<Fingerprint, std::uint32_t, FingerprintHash> index;
  std::function<std::uint32_t(const CdmtNode&)> visit =
      [&](const CdmtNode& node) -> std::uint32_t {
    Fingerprint id = id_at(node, ordinal);
    if (auto it = index.find(id); it != index.end()) return it->second;
    NodeView view;
    view.kind = node.kind;
    view.id = id;
    view.versions = node.versions;
    view.child_indexes.reserve(node.children.size());
    for (const NodePtr& child : node.children)
      view.child_indexes.push_back(visit(*child));
    const auto pos = static_cast<std::uint32_t>(out.size());
    out.push_back(std::move(view));
    index.emplace(id, pos);
    return pos;
  };
  visit(*info.root);
  return out;
}

std::size_t CdmtTree::node_count(std::uint32_t ordinal) const {
  return nodes_at(ordinal).size();
}

std::size_t CdmtTree::height(std::uint32_t ordinal) const {
  const VersionInfo& info = version(ordinal);
  if (!info.root) return 0;
  std::unordered_map<const CdmtNode*, std::size_t> memo;
  std::function<std::size_t(const CdmtNode&)> depth =
      [&](const CdmtNode& node) -> std::size_t {
    if (node.kind == NodeKind::leaf) return 0;
    auto it = memo.find(&node);
    if (it != memo.end()) return it->second;
    std::size_t deepest = 0;
    for (const NodePtr& child : node.children)
      deepest = std::max(deepest, depth(*child));
    memo.emplace(&node, deepest + 1);
    return deepest + 1;
  };
  return depth(*info.root);
}

CdmtTree cdmt_build(std::span<const Fingerprint> leaves, CdmtConfig cfg) {
  if (leaves.empty())
    throw EmptyInputError("cannot build an index over zero leaves");
  CdmtTree tree(cfg);
  tree.add_version(VersionKind::layering, std::nullopt, leaves, "");
  return tree;
}

std::uint32_t apply_layering_update(CdmtTree& tree, std::uint32_t base,
                                    std::span<const Fingerprint> new_leaves) {
  if (base >= tree.versions_.size())
    throw NotFoundError("unknown base version " + std::to_string(base));
  return tree.add_version(VersionKind::layering, base, new_leaves, "");
}

std::uint32_t apply_branching_update(CdmtTree& tree,
                                     std::optional<std::uint32_t> base,
                                     std::span<const Fingerprint> new_leaves,
                                     std::string tag) {
  return tree.add_version(VersionKind::branching, base, new_leaves,
                          std::move(tag));
}

NodePtr resolve_version(const CdmtTree& tree, std::uint32_t ordinal) {
  return tree.version(ordinal).root;
}

CompareOutcome cdmt_compare(const CdmtTree& client, const CdmtTree& target,
                            std::uint32_t target_version) {
  const VersionInfo& info = target.version(target_version);
  CompareOutcome out;
  if (!info.root) return out;
  std::deque<const CdmtNode*> queue;
  queue.push_back(info.root.get());
  std::unordered_set<Fingerprint, FingerprintHash> visited;
  while (!queue.empty()) {
    const CdmtNode* node = queue.front();
    queue.pop_front();
    Fingerprint id = target.id_at(*node, target_version);
    if (!visited.insert(id).second) continue;
    ++out.nodes_compared;
    if (client.known(id)) continue;  // whole subtree already present
    if (node->kind == NodeKind::leaf) {
      out.missing.push_back(id);
      continue;
    }
    for (const NodePtr& child : node->children) queue.push_back(child.get());
  }
  return out;
}

ComparisonCounts cdmt_comparison_count(const CdmtTree& client,
                                       const CdmtTree& target,
                                       std::uint32_t target_version) {
  ComparisonCounts counts;
  counts.cdmt_compares =
      cdmt_compare(client, target, target_version).nodes_compared;
  counts.kv_compares = target.leaf_count(target_version);
  return counts;
}

Bytes cdmt_serialize(const CdmtTree& tree, std::uint32_t version) {
  const auto& versions = tree.versions();
  Bytes out;
  out.insert(out.end(), {'C', 'D', 'M', 'T'});
  out.push_back(1);  // format
  out.push_back(static_cast<std::uint8_t>(tree.config().mask_bits));
  out.push_back(static_cast<std::uint8_t>(tree.config().window_size));
  put_u32(out, static_cast<std::uint32_t>(tree.config().max_fanout));
  put_u32(out, static_cast<std::uint32_t>(versions.size()));
  for (const VersionInfo& v : versions) {
    put_u32(out, v.ordinal);
    out.push_back(static_cast<std::uint8_t>(v.kind));
    put_u32(out, v.parent.value_or(kNoParent));
    put_u16(out, static_cast<std::uint16_t>(v.tag.size()));
    out.insert(out.end(), v.tag.begin(), v.tag.end());
  }
  put_u32(out, version);

  std::vector<NodeView> nodes = tree.nodes_at(version);
  put_u32(out, static_cast<std::uint32_t>(nodes.size()));
  const std::size_t bitmap_bytes = (versions.size() + 7) / 8;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const NodeView& node = nodes[i];
    out.push_back(static_cast<std::uint8_t>(node.kind));
    out.insert(out.end(), node.id.digest.begin(), node.id.digest.end());
    if (node.kind == NodeKind::internal) {
      put_varint(out, node.child_indexes.size());
      for (std::uint32_t child : node.child_indexes)
        put_varint(out, i - child);  // backward distance, always >= 1
    }
    Bytes bitmap(bitmap_bytes, 0);
    for (std::uint32_t v : node.versions)
      bitmap[v / 8] |= std::uint8_t{1} << (v % 8);
    out.insert(out.end(), bitmap.begin(), bitmap.end());
  }
  return out;
}

CdmtTree cdmt_deserialize(ByteSpan bytes) {
  Reader r{bytes};
  ByteSpan magic = r.bytes(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), "CDMT"))
    throw CorruptIndexError("bad magic", 0);
  std::size_t at = r.pos;
  if (r.u8("format") != 1) throw CorruptIndexError("unsupported format", at);

  at = r.pos;
  CdmtConfig cfg;
  cfg.mask_bits = r.u8("mask_bits");
  cfg.window_size = r.u8("window_size");
  cfg.max_fanout = r.u32("max_fanout");
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw CorruptIndexError(e.what(), at);
  }
  CdmtTree tree(cfg);

  const std::uint32_t version_count = r.u32("version count");
  // Each table entry takes at least 11 bytes; reject absurd counts early.
  if (version_count > r.remaining() / 11 + 1)
    throw CorruptIndexError("version count exceeds input size", r.pos - 4);
  for (std::uint32_t j = 0; j < version_count; ++j) {
    at = r.pos;
    if (r.u32("version ordinal") != j)
      throw CorruptIndexError("version table not in ordinal order", at);
    at = r.pos;
    std::uint8_t kind = r.u8("version kind");
    if (kind > 1) throw CorruptIndexError("unknown version kind", at);
    at = r.pos;
    std::uint32_t parent_raw = r.u32("version parent");
    std::optional<std::uint32_t> parent;
    if (parent_raw != kNoParent) {
      if (parent_raw >= j)
        throw CorruptIndexError("version parent not older than child", at);
      parent = parent_raw;
    }
    std::uint16_t tag_len = r.u16("tag length");
    ByteSpan tag_bytes = r.bytes(tag_len, "tag");
    VersionInfo info;
    info.ordinal = j;
    info.kind = static_cast<VersionKind>(kind);
    info.parent = parent;
    info.tag.assign(tag_bytes.begin(), tag_bytes.end());
    tree.versions_.push_back(std::move(info));
    std::vector<std::uint64_t> bits =
        parent ? tree.lineage_[*parent] : std::vector<std::uint64_t>{};
    bits.resize(j / 64 + 1, 0);
    bits[j / 64] |= std::uint64_t{1} << (j % 64);
    tree.lineage_.push_back(std::move(bits));
  }

  at = r.pos;
  const std::uint32_t target = r.u32("target version");
  if (target >= version_count)
    throw CorruptIndexError("target version not in table", at);

  const std::uint32_t node_count = r.u32("node count");
  const std::size_t bitmap_bytes = (version_count + 7) / 8;
  if (node_count > r.remaining() / (1 + Fingerprint::kSize + bitmap_bytes) + 1)
    throw CorruptIndexError("node count exceeds input size", r.pos - 4);

  std::vector<NodePtr> order;
  order.reserve(node_count);
  for (std::uint32_t i = 0; i < node_count; ++i) {
    at = r.pos;
    std::uint8_t kind = r.u8("node kind");
    if (kind > 1) throw CorruptIndexError("unknown node kind", at);
    const std::size_t id_at_offset = r.pos;
    ByteSpan id_bytes = r.bytes(Fingerprint::kSize, "node id");
    auto node = std::make_shared<CdmtNode>();
    node->kind = static_cast<NodeKind>(kind);
    IdRevision rev;
    rev.ordinal = target;
    std::copy(id_bytes.begin(), id_bytes.end(), rev.id.digest.begin());
    node->history.push_back(rev);
    if (node->kind == NodeKind::internal) {
      at = r.pos;
      std::uint64_t child_count = r.varint("child count");
      if (child_count == 0 || child_count > cfg.max_fanout)
        throw CorruptIndexError("internal node fanout out of range", at);
      Bytes concat;
      concat.reserve(child_count * Fingerprint::kSize);
      for (std::uint64_t k = 0; k < child_count; ++k) {
        at = r.pos;
        std::uint64_t back = r.varint("child reference");
        if (back == 0 || back > i)
          throw CorruptIndexError("child reference out of range", at);
        const NodePtr& child = order[i - back];
        node->children.push_back(child);
        ++child->ref_count;
        const Fingerprint& cid = child->history.front().id;
        concat.insert(concat.end(), cid.digest.begin(), cid.digest.end());
      }
      if (strong_hash(as_byte_span(concat)) != rev.id)
        throw CorruptIndexError("internal id does not match children",
                                id_at_offset);
    }
    ByteSpan bitmap = r.bytes(bitmap_bytes, "membership bitmap");
    for (std::uint32_t v = 0; v < bitmap_bytes * 8; ++v) {
      if (!((bitmap[v / 8] >> (v % 8)) & 1)) continue;
      if (v >= version_count)
        throw CorruptIndexError("membership bit beyond version table",
                                r.pos - bitmap_bytes);
      node->versions.push_back(v);
    }
    if (!std::binary_search(node->versions.begin(), node->versions.end(),
                            target))
      throw CorruptIndexError("node not a member of the target version",
                              r.pos - bitmap_bytes);
    if (!tree.node_map_.emplace(rev.id, node).second)
      throw CorruptIndexError("duplicate node id", id_at_offset);
    order.push_back(std::move(node));
    ++tree.object_count_;
  }
  if (node_count > 0) {
    if (order.back()->kind != NodeKind::internal)
      throw CorruptIndexError("root node must be internal", r.pos);
    for (std::size_t i = 0; i + 1 < order.size(); ++i)
      if (order[i]->ref_count == 0)
        throw CorruptIndexError("unreferenced non-root node", r.pos);
    tree.versions_[target].root = order.back();
  }
  if (r.remaining() != 0)
    throw CorruptIndexError("trailing bytes after node table", r.pos);
  return tree;
}

}  // namespace cdmt
