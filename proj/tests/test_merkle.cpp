#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <string_view>

#include "cdmt/error.hpp"
#include "cdmt/merkle.hpp"
#include "support/reference.hpp"

using namespace cdmt;

namespace {

Fingerprint leaf(int i) { return strong_hash(std::string_view(std::to_string(i))); }

Fingerprint pair_hash(const Fingerprint& a, const Fingerprint& b) {
  Bytes concat(a.digest.begin(), a.digest.end());
  concat.insert(concat.end(), b.digest.begin(), b.digest.end());
  return strong_hash(as_byte_span(concat));
}

std::vector<Fingerprint> leaves(int n) {
  std::vector<Fingerprint> out;
  for (int i = 0; i < n; ++i) out.push_back(leaf(i));
  return out;
}

}  // namespace

TEST_SUITE("merkle") {

TEST_CASE("small binary trees match hand-chained hashes") {
  const Fingerprint& s = merkle_sentinel();
  CHECK(merkle_sentinel() == strong_hash(ByteSpan{}));

  // One leaf still gets a hashing round: root = H(l0 || sentinel).
  auto t1 = merkle_build(leaves(1), 2);
  CHECK(t1.root() == pair_hash(leaf(0), s));
  CHECK(t1.height() == 1);

  auto t2 = merkle_build(leaves(2), 2);
  CHECK(t2.root() == pair_hash(leaf(0), leaf(1)));

  // Three leaves: right group padded, then one more round.
  auto t3 = merkle_build(leaves(3), 2);
  CHECK(t3.root() ==
        pair_hash(pair_hash(leaf(0), leaf(1)), pair_hash(leaf(2), s)));
  CHECK(t3.height() == 2);
}

TEST_CASE("quad tree of five leaves matches the explicit construction") {
  const Fingerprint& s = merkle_sentinel();
  auto tree = merkle_build(leaves(5), 4);
  auto append = [](Bytes& out, const Fingerprint& fp) {
    out.insert(out.end(), fp.digest.begin(), fp.digest.end());
  };
  Bytes g0, g1, top;
  for (int i = 0; i < 4; ++i) append(g0, leaf(i));
  append(g1, leaf(4));
  for (int i = 0; i < 3; ++i) append(g1, s);
  Fingerprint p0 = strong_hash(as_byte_span(g0));
  Fingerprint p1 = strong_hash(as_byte_span(g1));
  append(top, p0);
  append(top, p1);
  for (int i = 0; i < 2; ++i) append(top, s);
  CHECK(tree.root() == strong_hash(as_byte_span(top)));
  CHECK(tree.height() == 2);
  CHECK(tree.node_count() == 5 + 2 + 1);
}

TEST_CASE("height is the base-arity logarithm rounded up") {
  for (unsigned k : {2u, 4u, 8u}) {
    for (int n : {1, 2, 3, 5, 16, 17, 64, 100, 257}) {
      auto tree = merkle_build(leaves(n), k);
      std::size_t expect =
          n == 1 ? 1
                 : static_cast<std::size_t>(
                       std::ceil(std::log(n) / std::log(k) - 1e-9));
      CAPTURE(k);
      CAPTURE(n);
      CHECK(tree.height() == expect);
      CHECK(tree.leaf_count() == static_cast<std::size_t>(n));
    }
  }
}

TEST_CASE("identical inputs build identical trees") {
  auto a = merkle_build(leaves(37), 4);
  auto b = merkle_build(leaves(37), 4);
  CHECK(a.root() == b.root());
  CHECK(merkle_common_nodes(a, b) == a.node_count());
}

TEST_CASE("auth paths fold back to the root") {
  for (unsigned k : {2u, 4u}) {
    auto tree = merkle_build(leaves(23), k);
    for (std::size_t i = 0; i < tree.leaf_count(); ++i) {
      auto path = merkle_auth_path(tree, i);
      CHECK(path.siblings.size() == tree.height());
      CHECK(merkle_fold_auth_path(tree.levels[0][i], path, k) == tree.root());
    }
  }
}

TEST_CASE("a corrupted sibling or wrong leaf breaks verification") {
  auto tree = merkle_build(leaves(23), 4);
  auto path = merkle_auth_path(tree, 7);
  CHECK(merkle_fold_auth_path(leaf(8), path, 4) != tree.root());
  path.siblings[1][0].digest[0] ^= 1;
  CHECK(merkle_fold_auth_path(leaf(7), path, 4) != tree.root());
  CHECK_THROWS_AS(merkle_auth_path(tree, 23), std::out_of_range);
}

TEST_CASE("changing one leaf invalidates exactly its path to the root") {
  auto base = leaves(64);
  auto a = merkle_build(base, 4);
  base[13] = leaf(1000);
  auto b = merkle_build(base, 4);
  // 64 leaves, arity 4: three levels above the leaves; the path from leaf
  // 13 to the root touches one node per level plus the leaf itself.
  CHECK(a.node_count() == b.node_count());
  CHECK(merkle_common_nodes(a, b) == a.node_count() - (a.height() + 1));
  CHECK(merkle_common_digests(a, b) == a.node_count() - (a.height() + 1));
}

TEST_CASE("digest counting ignores position, node counting does not") {
  // Same leaves rotated by one: positional overlap collapses, multiset
  // overlap keeps every leaf.
  auto base = leaves(16);
  std::vector<Fingerprint> rotated(base.begin() + 1, base.end());
  rotated.push_back(base.front());
  auto a = merkle_build(base, 4);
  auto b = merkle_build(rotated, 4);
  CHECK(merkle_common_nodes(a, b) == 0);
  CHECK(merkle_common_digests(a, b) >= 16);
}

TEST_CASE("invalid inputs are rejected") {
  CHECK_THROWS_AS(merkle_build({}, 4), EmptyInputError);
  CHECK_THROWS_AS(merkle_build(leaves(3), 1), ConfigError);
  MerkleTree empty;
  CHECK_THROWS_AS(empty.root(), Error);
}

}  // TEST_SUITE
