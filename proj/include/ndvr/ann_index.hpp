#pragma once

// Randomly projected kd-tree forest for approximate k-nearest-neighbour search.
//
// Each tree rotates the points by its own seeded orthonormal matrix and splits
// at the median of the highest-variance rotated coordinate until leaves hold
// at most leaf_size points. Queries descend every tree, then continue
// best-bin-first from one priority queue shared by the whole forest. Branch
// priorities are exact lower bounds on the distance to any point in the cell,
// so the search is exact whenever the budget does not cut it short.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include <Eigen/QR>
#include <json.hpp>

#include "ndvr/binary_io.hpp"
#include "ndvr/error.hpp"
#include "ndvr/random.hpp"
#include "ndvr/types.hpp"

namespace ndvr {

inline constexpr char kIndexMagic[] = "NDIX";
inline constexpr std::uint8_t kIndexVersion = 1;

struct Neighbor {
  std::string video_id;
  double distance = 0.0;

  bool operator==(const Neighbor&) const = default;
};

// Ascending by distance, ties by video_id.
using NeighborList = std::vector<Neighbor>;

inline bool neighbor_less(const Neighbor& a, const Neighbor& b) {
  if (a.distance != b.distance) return a.distance < b.distance;
  return a.video_id < b.video_id;
}

struct AnnParams {
  int num_trees = 8;
  int leaf_size = 16;
  std::uint64_t seed = 0;
  bool rotate = true;  // off: plain axis-aligned kd-trees
};

// Default visit budget for a k-NN query: 8 * k * num_trees.
inline std::size_t default_budget(std::size_t k, int num_trees) {
  return 8 * k * static_cast<std::size_t>(num_trees);
}

// Haar-distributed orthonormal matrix: Q of a seeded Gaussian matrix with the
// signs of R's diagonal folded in.
inline Matrix random_rotation(Eigen::Index dim, std::uint64_t seed) {
  Rng rng(seed);
  Matrix gauss(dim, dim);
  for (Eigen::Index j = 0; j < dim; ++j)
    for (Eigen::Index i = 0; i < dim; ++i) gauss(i, j) = rng.normal();
  Eigen::HouseholderQR<Matrix> qr(gauss);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < dim; ++j)
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  return q;
}

namespace detail {

struct KdNode {
  std::int32_t split_dim = -1;  // -1 marks a leaf
  double split_value = 0.0;
  std::uint32_t left = 0;
  std::uint32_t right = 0;
  std::uint32_t begin = 0;  // leaf range into KdTree::order
  std::uint32_t end = 0;

  bool is_leaf() const { return split_dim < 0; }
  bool operator==(const KdNode&) const = default;
};

struct KdTree {
  Matrix rotation;  // rotated = rotation^T * x
  std::vector<KdNode> nodes;
  std::vector<std::uint32_t> order;
};

inline std::uint64_t tree_seed(std::uint64_t seed, std::size_t tree) {
  return seed * 0x9E3779B97F4A7C15ull + 0x632BE59BD9B4E019ull * (tree + 1);
}

}  // namespace detail

class AnnIndex {
 public:
  AnnIndex() = default;

  static AnnIndex build(const RowMatrix& points, std::vector<std::string> ids, const AnnParams& params) {
    if (points.rows() == 0) throw Error(ErrorCode::kParameter, "cannot index an empty point set");
    if (static_cast<std::size_t>(points.rows()) != ids.size())
      throw Error(ErrorCode::kDimension, "point count and id count differ");
    if (params.num_trees < 1 || params.leaf_size < 1)
      throw Error(ErrorCode::kParameter, "num_trees and leaf_size must be positive");
    if (!points.allFinite()) throw Error(ErrorCode::kValidation, "indexed points must be finite");

    AnnIndex index;
    index.params_ = params;
    // Stored at container precision so a reloaded index answers identically.
    index.points_ = points.cast<float>().cast<double>();
    index.ids_ = std::move(ids);
    for (int t = 0; t < params.num_trees; ++t) {
      detail::KdTree tree;
      tree.rotation = params.rotate
                          ? random_rotation(points.cols(), detail::tree_seed(params.seed, static_cast<std::size_t>(t)))
                          : Matrix::Identity(points.cols(), points.cols());
      index.build_tree(tree);
      index.trees_.push_back(std::move(tree));
    }
    return index;
  }

  // Approximate k nearest neighbours. Stops after `budget` leaf visits that
  // examined at least one point no earlier visit had seen (or later, if fewer
  // than k points have been seen), so budget >= N always runs to completion
  // and is exact.
  NeighborList knn(const Eigen::Ref<const Vector>& query, std::size_t k, std::size_t budget) const {
    if (k == 0 || k > size()) throw Error(ErrorCode::kParameter, "k must be in [1, N]");
    if (budget == 0) throw Error(ErrorCode::kParameter, "budget must be >= 1");
    if (query.size() != dim()) throw Error(ErrorCode::kDimension, "query dimension differs from index");

    struct Branch {
      double bound;  // squared lower bound
      std::uint32_t tree;
      std::uint32_t node;
      std::int32_t path;  // offset record for the cell, -1 when none
      bool operator>(const Branch& o) const { return bound > o.bound; }
    };
    // Per-dimension offsets already charged to a cell, as a shared linked list.
    struct Offset {
      std::int32_t dim;
      double offset;
      std::int32_t parent;
    };
    std::vector<Offset> offsets;
    std::priority_queue<Branch, std::vector<Branch>, std::greater<>> pending;

    std::vector<char> checked(size(), 0);
    Candidates best(k);
    std::size_t visits = 0;

    std::vector<Vector> rotated;
    rotated.reserve(trees_.size());
    for (const auto& tree : trees_) rotated.push_back(tree.rotation.transpose() * query);

    auto charged = [&offsets](std::int32_t path, std::int32_t dim) {
      for (; path >= 0; path = offsets[static_cast<std::size_t>(path)].parent)
        if (offsets[static_cast<std::size_t>(path)].dim == dim) return offsets[static_cast<std::size_t>(path)].offset;
      return 0.0;
    };

    auto descend = [&](std::uint32_t t, std::uint32_t node, double bound, std::int32_t path) {
      const auto& tree = trees_[t];
      const Vector& q = rotated[t];
      while (!tree.nodes[node].is_leaf()) {
        const auto& n = tree.nodes[node];
        const double diff = q[n.split_dim] - n.split_value;
        const std::uint32_t near = diff <= 0.0 ? n.left : n.right;
        const std::uint32_t far = diff <= 0.0 ? n.right : n.left;
        const double old = charged(path, n.split_dim);
        const double far_bound = bound - old * old + diff * diff;
        offsets.push_back({n.split_dim, std::abs(diff), path});
        pending.push({far_bound, t, far, static_cast<std::int32_t>(offsets.size() - 1)});
        node = near;
      }
      const auto& leaf = tree.nodes[node];
      bool fresh = false;
      for (std::uint32_t i = leaf.begin; i < leaf.end; ++i) {
        const std::uint32_t p = tree.order[i];
        if (checked[p]) continue;
        checked[p] = 1;
        fresh = true;
        best.offer((points_.row(p).transpose() - query).squaredNorm(), p, ids_);
      }
      if (fresh) ++visits;
    };

    for (std::uint32_t t = 0; t < trees_.size(); ++t) descend(t, 0, 0.0, -1);
    while (!pending.empty() && (visits < budget || !best.full())) {
      const Branch b = pending.top();
      pending.pop();
      // Slack absorbs rotation round-off so near-ties are still examined.
      if (best.full() && b.bound > best.worst() * (1.0 + 1e-9) + 1e-12) break;
      descend(b.tree, b.node, b.bound, b.path);
    }
    return best.sorted(ids_);
  }

  std::size_t size() const { return ids_.size(); }
  Eigen::Index dim() const { return points_.cols(); }
  const AnnParams& params() const { return params_; }
  const RowMatrix& points() const { return points_; }
  const std::vector<std::string>& ids() const { return ids_; }
  const Matrix& rotation(std::size_t tree) const { return trees_.at(tree).rotation; }
  std::size_t num_trees() const { return trees_.size(); }

  // Point indices in leaf order for one tree; each point appears once.
  const std::vector<std::uint32_t>& tree_order(std::size_t tree) const { return trees_.at(tree).order; }

  bool same_structure(const AnnIndex& other) const {
    if (trees_.size() != other.trees_.size() || ids_ != other.ids_) return false;
    for (std::size_t t = 0; t < trees_.size(); ++t)
      if (trees_[t].nodes != other.trees_[t].nodes || trees_[t].order != other.trees_[t].order) return false;
    return points_ == other.points_;
  }

  void write(std::ostream& out, const nlohmann::json& extra = {}) const {
    io::Writer w(out);
    w.magic(kIndexMagic, kIndexVersion);
    nlohmann::json header = extra.is_object() ? extra : nlohmann::json::object();
    header["N"] = size();
    header["dim"] = dim();
    header["num_trees"] = params_.num_trees;
    header["leaf_size"] = params_.leaf_size;
    header["seed"] = params_.seed;
    header["rotate"] = params_.rotate;
    header["ids"] = ids_;
    w.json_header(header);
    for (Eigen::Index i = 0; i < points_.rows(); ++i)
      for (Eigen::Index j = 0; j < points_.cols(); ++j) w.f32(static_cast<float>(points_(i, j)));
    for (const auto& tree : trees_) {
      w.u32(static_cast<std::uint32_t>(tree.nodes.size()));
      for (const auto& n : tree.nodes) {
        w.i32(n.split_dim);
        w.f64(n.split_value);
        w.u32(n.left);
        w.u32(n.right);
        w.u32(n.begin);
        w.u32(n.end);
      }
      for (std::uint32_t p : tree.order) w.u32(p);
    }
  }

  static AnnIndex read(std::istream& in, nlohmann::json* header_out = nullptr) {
    io::Reader r(in);
    r.expect_magic(kIndexMagic, kIndexVersion);
    const auto header = r.json_header();
    const auto n = io::header_field<std::size_t>(header, "N");
    const auto dim = io::header_field<Eigen::Index>(header, "dim");
    AnnIndex index;
    index.params_.num_trees = io::header_field<int>(header, "num_trees");
    index.params_.leaf_size = io::header_field<int>(header, "leaf_size");
    index.params_.seed = io::header_field<std::uint64_t>(header, "seed");
    index.params_.rotate = header.value("rotate", true);
    index.ids_ = io::header_field<std::vector<std::string>>(header, "ids");
    if (index.ids_.size() != n || n == 0 || dim < 1 || dim > (1 << 16) || index.params_.num_trees < 1 ||
        index.params_.num_trees > 1024)
      throw Error(ErrorCode::kCorruption, "inconsistent index header");

    index.points_.resize(static_cast<Eigen::Index>(n), dim);
    for (Eigen::Index i = 0; i < index.points_.rows(); ++i)
      for (Eigen::Index j = 0; j < dim; ++j) index.points_(i, j) = r.f32("index points");
    for (int t = 0; t < index.params_.num_trees; ++t) {
      detail::KdTree tree;
      tree.rotation = index.params_.rotate
                          ? random_rotation(dim, detail::tree_seed(index.params_.seed, static_cast<std::size_t>(t)))
                          : Matrix::Identity(dim, dim);
      const std::uint32_t count = r.u32("node count");
      if (count == 0 || count > 2 * n) throw Error(ErrorCode::kCorruption, "implausible node count");
      tree.nodes.resize(count);
      for (auto& node : tree.nodes) {
        node.split_dim = r.i32("node");
        node.split_value = r.f64("node");
        node.left = r.u32("node");
        node.right = r.u32("node");
        node.begin = r.u32("node");
        node.end = r.u32("node");
        if (node.split_dim >= dim || (!node.is_leaf() && (node.left >= count || node.right >= count)) ||
            node.begin > node.end || node.end > n)
          throw Error(ErrorCode::kCorruption, "node references out of range");
      }
      tree.order.resize(n);
      for (auto& p : tree.order) {
        p = r.u32("leaf order");
        if (p >= n) throw Error(ErrorCode::kCorruption, "leaf order out of range");
      }
      index.trees_.push_back(std::move(tree));
    }
    if (header_out) *header_out = header;
    return index;
  }

  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
    write(out, extra);
  }

  static AnnIndex load(const std::filesystem::path& path, nlohmann::json* header_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
    return read(in, header_out);
  }

 private:
  // Bounded max-heap of (squared distance, point) ordered by the NeighborList rule.
  class Candidates {
   public:
    explicit Candidates(std::size_t k) : k_(k) {}

    bool full() const { return heap_.size() == k_; }
    double worst() const { return heap_.front().first; }

    void offer(double dist2, std::uint32_t point, const std::vector<std::string>& ids) {
      auto less = [&ids](const Entry& a, const Entry& b) {
        if (a.first != b.first) return a.first < b.first;
        return ids[a.second] < ids[b.second];
      };
      const Entry e{dist2, point};
      if (!full()) {
        heap_.push_back(e);
        std::push_heap(heap_.begin(), heap_.end(), less);
      } else if (less(e, heap_.front())) {
        std::pop_heap(heap_.begin(), heap_.end(), less);
        heap_.back() = e;
        std::push_heap(heap_.begin(), heap_.end(), less);
      }
    }

    NeighborList sorted(const std::vector<std::string>& ids) const {
      NeighborList out;
      out.reserve(heap_.size());
      for (const auto& [d2, p] : heap_) out.push_back({ids[p], std::sqrt(d2)});
      std::sort(out.begin(), out.end(), neighbor_less);
      return out;
    }

   private:
    using Entry = std::pair<double, std::uint32_t>;
    std::size_t k_;
    std::vector<Entry> heap_;
  };

  void build_tree(detail::KdTree& tree) const {
    const RowMatrix rotated = points_ * tree.rotation;
    tree.order.resize(size());
    std::iota(tree.order.begin(), tree.order.end(), 0u);
    tree.nodes.clear();
    tree.nodes.reserve(2 * size() / static_cast<std::size_t>(params_.leaf_size) + 1);
    split(tree, rotated, 0, static_cast<std::uint32_t>(size()));
  }

  std::uint32_t split(detail::KdTree& tree, const RowMatrix& rotated, std::uint32_t begin, std::uint32_t end) const {
    const auto id = static_cast<std::uint32_t>(tree.nodes.size());
    tree.nodes.push_back({});
    const std::uint32_t count = end - begin;
    if (count <= static_cast<std::uint32_t>(params_.leaf_size)) {
      tree.nodes[id].begin = begin;
      tree.nodes[id].end = end;
      return id;
    }

    // Variance estimated from at most the first 128 points of the cell.
    const std::uint32_t sample = std::min<std::uint32_t>(count, 128);
    Vector mean = Vector::Zero(rotated.cols());
    for (std::uint32_t i = begin; i < begin + sample; ++i) mean += rotated.row(tree.order[i]).transpose();
    mean /= sample;
    Vector var = Vector::Zero(rotated.cols());
    for (std::uint32_t i = begin; i < begin + sample; ++i)
      var += (rotated.row(tree.order[i]).transpose() - mean).cwiseAbs2();
    Eigen::Index dim = 0;
    var.maxCoeff(&dim);
    if (!(var[dim] > 0.0)) {
      // Sampled points coincide; fall back to the full cell before giving up.
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      Eigen::Index best_dim = 0;
      double best_spread = 0.0;
      for (Eigen::Index d = 0; d < rotated.cols(); ++d) {
        lo = std::numeric_limits<double>::infinity();
        hi = -lo;
        for (std::uint32_t i = begin; i < end; ++i) {
          lo = std::min(lo, rotated(tree.order[i], d));
          hi = std::max(hi, rotated(tree.order[i], d));
        }
        if (hi - lo > best_spread) {
          best_spread = hi - lo;
          best_dim = d;
        }
      }
      if (!(best_spread > 0.0)) {
        tree.nodes[id].begin = begin;
        tree.nodes[id].end = end;
        return id;
      }
      dim = best_dim;
    }

    const std::uint32_t mid = begin + count / 2;
    std::nth_element(tree.order.begin() + begin, tree.order.begin() + mid, tree.order.begin() + end,
                     [&](std::uint32_t a, std::uint32_t b) {
                       const double va = rotated(a, dim), vb = rotated(b, dim);
                       return va != vb ? va < vb : a < b;
                     });
    const double split_value = rotated(tree.order[mid], dim);
    const std::uint32_t left = split(tree, rotated, begin, mid);
    const std::uint32_t right = split(tree, rotated, mid, end);
    auto& node = tree.nodes[id];
    node.split_dim = static_cast<std::int32_t>(dim);
    node.split_value = split_value;
    node.left = left;
    node.right = right;
    node.begin = begin;
    node.end = end;
    return id;
  }

  AnnParams params_;
  RowMatrix points_;
  std::vector<std::string> ids_;
  std::vector<detail::KdTree> trees_;
};

// Exhaustive scan; the correctness oracle for AnnIndex::knn.
inline NeighborList brute_knn(const RowMatrix& points, const std::vector<std::string>& ids,
                              const Eigen::Ref<const Vector>& query, std::size_t k) {
  if (k == 0 || k > static_cast<std::size_t>(points.rows()))
    throw Error(ErrorCode::kParameter, "k must be in [1, N]");
  if (query.size() != points.cols()) throw Error(ErrorCode::kDimension, "query dimension differs from points");
  NeighborList all;
  all.reserve(static_cast<std::size_t>(points.rows()));
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    all.push_back({ids[static_cast<std::size_t>(i)], std::sqrt((points.row(i).transpose() - query).squaredNorm())});
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), neighbor_less);
  all.resize(k);
  return all;
}

}  // namespace ndvr
