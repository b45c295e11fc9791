#pragma once

// Tree-structured aggregation of per-worker scalars: the plain reduction and
// the two-phase masked reduction over a pair of significantly different trees.

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vafl/error.hpp"

namespace vafl {

/// Full binary reduction tree whose leaves are worker ids. Each internal node
/// is merged on the worker that merges its left child.
class TreeTopology {
 public:
  struct Node {
    WorkerId leaf = 0;  // 0 for internal nodes
    int left = -1;
    int right = -1;
    WorkerId merger = 0;
    std::size_t leaf_count = 1;
  };

  static TreeTopology leaf(WorkerId id) {
    if (id == 0) throw std::invalid_argument("tree: worker ids are 1-based");
    TreeTopology t;
    t.nodes_.push_back(Node{id, -1, -1, id, 1});
    t.root_ = 0;
    return t;
  }

  static TreeTopology join(const TreeTopology& left, const TreeTopology& right) {
    TreeTopology t;
    t.nodes_ = left.nodes_;
    const int offset = static_cast<int>(t.nodes_.size());
    for (Node n : right.nodes_) {
      if (n.left >= 0) n.left += offset;
      if (n.right >= 0) n.right += offset;
      t.nodes_.push_back(n);
    }
    const Node& l = left.nodes_[left.root_];
    const Node& r = right.nodes_[right.root_];
    t.nodes_.push_back(Node{0, left.root_, right.root_ + offset, l.merger,
                            l.leaf_count + r.leaf_count});
    t.root_ = static_cast<int>(t.nodes_.size()) - 1;
    return t;
  }

  int root() const { return root_; }
  const Node& node(int index) const { return nodes_.at(static_cast<std::size_t>(index)); }
  std::size_t leaf_count() const { return nodes_.empty() ? 0 : nodes_[root_].leaf_count; }
  bool empty() const { return nodes_.empty(); }

  /// Leaves in left-to-right order.
  std::vector<WorkerId> leaves() const {
    std::vector<WorkerId> out;
    if (!empty()) collect(root_, out);
    return out;
  }

  std::size_t depth() const { return empty() ? 0 : depth_of(root_); }

  /// Sorted leaf set of every internal node (root included), post-order.
  std::vector<std::vector<WorkerId>> internal_leaf_sets() const {
    std::vector<std::vector<WorkerId>> out;
    if (!empty()) internal_sets(root_, out);
    return out;
  }

  /// Leaves are exactly {1..q}, each once.
  bool has_canonical_leaves() const {
    auto l = leaves();
    std::sort(l.begin(), l.end());
    for (std::size_t k = 0; k < l.size(); ++k) {
      if (l[k] != k + 1) return false;
    }
    return !l.empty();
  }

  /// Parenthesized leaf notation, e.g. ((1,2),(3,4)).
  std::string to_string() const { return empty() ? std::string() : render(root_); }

 private:
  void collect(int i, std::vector<WorkerId>& out) const {
    const Node& n = nodes_[i];
    if (n.left < 0) {
      out.push_back(n.leaf);
      return;
    }
    collect(n.left, out);
    collect(n.right, out);
  }

  std::size_t depth_of(int i) const {
    const Node& n = nodes_[i];
    if (n.left < 0) return 0;
    return 1 + std::max(depth_of(n.left), depth_of(n.right));
  }

  std::vector<WorkerId> internal_sets(int i, std::vector<std::vector<WorkerId>>& out) const {
    const Node& n = nodes_[i];
    if (n.left < 0) return {n.leaf};
    auto a = internal_sets(n.left, out);
    auto b = internal_sets(n.right, out);
    a.insert(a.end(), b.begin(), b.end());
    std::sort(a.begin(), a.end());
    out.push_back(a);
    return a;
  }

  std::string render(int i) const {
    const Node& n = nodes_[i];
    if (n.left < 0) return std::to_string(n.leaf);
    return "(" + render(n.left) + "," + render(n.right) + ")";
  }

  std::vector<Node> nodes_;
  int root_ = -1;
};

/// Pairs adjacent subtrees level by level; an odd trailing subtree is promoted.
inline TreeTopology build_balanced_tree(std::span<const WorkerId> workers) {
  if (workers.empty()) throw std::invalid_argument("build_balanced_tree: no workers");
  std::vector<TreeTopology> level;
  level.reserve(workers.size());
  for (auto w : workers) level.push_back(TreeTopology::leaf(w));
  while (level.size() > 1) {
    std::vector<TreeTopology> next;
    for (std::size_t k = 0; k + 1 < level.size(); k += 2) {
      next.push_back(TreeTopology::join(level[k], level[k + 1]));
    }
    if (level.size() % 2 == 1) next.push_back(std::move(level.back()));
    level = std::move(next);
  }
  return std::move(level.front());
}

inline TreeTopology build_balanced_tree(std::initializer_list<WorkerId> workers) {
  std::vector<WorkerId> v(workers);
  return build_balanced_tree(std::span<const WorkerId>(v));
}

enum class TreePhase { t1, t2 };

inline const char* phase_name(TreePhase p) { return p == TreePhase::t1 ? "T1" : "T2"; }

/// Ordered record of every merge message of one or more reductions.
struct Transcript {
  struct Message {
    TreePhase phase;
    WorkerId sender;
    WorkerId receiver;
    double payload;
  };
  std::vector<Message> messages;
  std::size_t deliveries = 0;  // root-to-coordinator hand-offs, not merge messages

  void clear() {
    messages.clear();
    deliveries = 0;
  }

  std::size_t count(TreePhase phase) const {
    return static_cast<std::size_t>(std::count_if(
        messages.begin(), messages.end(), [&](const Message& m) { return m.phase == phase; }));
  }

  /// `phase,sender,receiver,payload` lines with a header.
  std::string to_csv() const {
    std::string out = "phase,sender,receiver,payload\n";
    char buf[64];
    for (const auto& m : messages) {
      out += phase_name(m.phase);
      out += ',' + std::to_string(m.sender) + ',' + std::to_string(m.receiver) + ',';
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), m.payload);
      out.append(buf, ptr);
      out += '\n';
    }
    return out;
  }
};

namespace detail {

inline double reduce_post_order(const TreeTopology& t, int index, std::span<const double> values,
                                Transcript* transcript, TreePhase phase) {
  const auto& n = t.node(index);
  if (n.left < 0) return values[n.leaf - 1];
  const double left = reduce_post_order(t, n.left, values, transcript, phase);
  const double right = reduce_post_order(t, n.right, values, transcript, phase);
  if (transcript) {
    transcript->messages.push_back(
        {phase, t.node(n.right).merger, t.node(n.left).merger, right});
  }
  return left + right;
}

}  // namespace detail

/// Sums one contribution per leaf (contributions[k] belongs to worker k+1) in
/// the fixed post-order of the tree, emitting q-1 merge messages.
inline double tree_sum(const TreeTopology& topology, std::span<const double> contributions,
                       Transcript* transcript = nullptr, TreePhase phase = TreePhase::t1) {
  if (topology.empty()) throw ProtocolError("tree_sum: empty topology");
  if (contributions.size() != topology.leaf_count()) {
    throw ProtocolError("tree_sum: expected " + std::to_string(topology.leaf_count()) +
                        " contributions, got " + std::to_string(contributions.size()));
  }
  for (auto leaf : topology.leaves()) {
    if (leaf > contributions.size()) {
      throw ProtocolError("tree_sum: missing contribution for worker " + std::to_string(leaf));
    }
  }
  const double sum = detail::reduce_post_order(topology, topology.root(), contributions,
                                               transcript, phase);
  if (transcript) ++transcript->deliveries;
  return sum;
}

/// True iff no subtree with more than one and fewer than q leaves in one tree
/// has the same leaf set as such a subtree of the other.
inline bool is_significantly_different(const TreeTopology& a, const TreeTopology& b) {
  auto la = a.leaves();
  auto lb = b.leaves();
  std::sort(la.begin(), la.end());
  std::sort(lb.begin(), lb.end());
  if (la != lb) throw ProtocolError("is_significantly_different: trees have different leaf sets");
  const std::size_t q = la.size();
  auto proper = [q](const TreeTopology& t) {
    std::set<std::vector<WorkerId>> out;
    for (auto& s : t.internal_leaf_sets()) {
      if (s.size() > 1 && s.size() < q) out.insert(std::move(s));
    }
    return out;
  };
  const auto sa = proper(a);
  const auto sb = proper(b);
  for (const auto& s : sa) {
    if (sb.count(s)) return false;
  }
  return true;
}

/// A (T1, T2) pair that has passed the significantly-different check. The
/// masked reduction only accepts this type.
class TreePair {
 public:
  TreePair(TreeTopology first, TreeTopology second)
      : first_(std::move(first)), second_(std::move(second)) {
    if (!first_.has_canonical_leaves() || !second_.has_canonical_leaves()) {
      throw ProtocolError("tree pair: leaves must be exactly {1..q}");
    }
    if (!is_significantly_different(first_, second_)) {
      throw ProtocolError("tree pair: trees " + first_.to_string() + " and " +
                          second_.to_string() + " share a proper subtree; masking is unsafe");
    }
  }

  const TreeTopology& first() const { return first_; }
  const TreeTopology& second() const { return second_; }
  std::size_t workers() const { return first_.leaf_count(); }

 private:
  TreeTopology first_;
  TreeTopology second_;
};

/// T1 pairs (1,2)(3,4)...; T2 reduces the odd workers then the even ones, so
/// every T2 pair is (1,3)(5,7)...(2,4)(6,8)... A seeded relabelled search is
/// kept as a fallback should the construction ever fail verification.
inline TreePair generate_significantly_different_pair(std::size_t q, std::uint64_t seed) {
  if (q < 2) throw std::invalid_argument("tree pair: need at least two workers");
  std::vector<WorkerId> natural(q);
  std::iota(natural.begin(), natural.end(), WorkerId{1});
  std::vector<WorkerId> interleaved;
  for (WorkerId w = 1; w <= q; w += 2) interleaved.push_back(w);
  for (WorkerId w = 2; w <= q; w += 2) interleaved.push_back(w);

  auto t1 = build_balanced_tree(natural);
  auto t2 = build_balanced_tree(interleaved);
  if (is_significantly_different(t1, t2)) return TreePair(std::move(t1), std::move(t2));

  std::mt19937_64 rng(seed);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    std::shuffle(interleaved.begin(), interleaved.end(), rng);
    t2 = build_balanced_tree(interleaved);
    if (is_significantly_different(t1, t2)) return TreePair(std::move(t1), std::move(t2));
  }
  throw ProtocolError("tree pair: no significantly different pair found for q=" +
                      std::to_string(q));
}

/// Masked reduction with caller-supplied masks: reduce contributions + masks
/// over T1, reduce the masks over T2, return the difference.
inline double masked_tree_sum_with_masks(const TreePair& trees,
                                         std::span<const double> contributions,
                                         std::span<const double> masks,
                                         Transcript* transcript = nullptr) {
  const std::size_t q = trees.workers();
  if (contributions.size() != q || masks.size() != q) {
    throw ProtocolError("masked_tree_sum: expected one contribution and one mask per worker");
  }
  std::vector<double> masked(q);
  for (std::size_t k = 0; k < q; ++k) masked[k] = contributions[k] + masks[k];
  const double xi = tree_sum(trees.first(), masked, transcript, TreePhase::t1);
  const double mask_total = tree_sum(trees.second(), masks, transcript, TreePhase::t2);
  return xi - mask_total;
}

/// Each worker draws its mask uniformly from [-M, M].
template <class Urbg>
double masked_tree_sum(const TreePair& trees, std::span<const double> contributions,
                       double mask_range, Urbg& rng, Transcript* transcript = nullptr) {
  if (!(mask_range > 0.0)) throw std::invalid_argument("masked_tree_sum: mask range must be > 0");
  std::uniform_real_distribution<double> dist(-mask_range, mask_range);
  std::vector<double> masks(trees.workers());
  for (auto& m : masks) m = dist(rng);
  return masked_tree_sum_with_masks(trees, contributions, masks, transcript);
}

template <class Urbg>
double masked_tree_sum(const TreeTopology& t1, const TreeTopology& t2,
                       std::span<const double> contributions, double mask_range, Urbg& rng,
                       Transcript* transcript = nullptr) {
  return masked_tree_sum(TreePair(t1, t2), contributions, mask_range, rng, transcript);
}

/// Replays the messages of one phase and returns, for each message, the sorted
/// set of workers whose values its payload aggregates.
inline std::vector<std::vector<WorkerId>> replay_coverage(const Transcript& transcript,
                                                          TreePhase phase, std::size_t q) {
  std::vector<std::vector<WorkerId>> held(q + 1);
  for (WorkerId w = 1; w <= q; ++w) held[w] = {w};
  std::vector<std::vector<WorkerId>> out;
  for (const auto& m : transcript.messages) {
    if (m.phase != phase) continue;
    if (m.sender == 0 || m.sender > q || m.receiver == 0 || m.receiver > q) {
      throw ProtocolError("replay_coverage: worker id out of range");
    }
    out.push_back(held[m.sender]);
    auto merged = held[m.receiver];
    merged.insert(merged.end(), held[m.sender].begin(), held[m.sender].end());
    std::sort(merged.begin(), merged.end());
    held[m.receiver] = std::move(merged);
  }
  return out;
}

}  // namespace vafl
