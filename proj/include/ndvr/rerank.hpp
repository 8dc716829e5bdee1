#pragma once

// Sparse contextual activation re-ranking over the fc- and conv-level
// neighbourhoods of each video.

#include <algorithm>
#include <iterator>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "ndvr/ann_index.hpp"
#include "ndvr/error.hpp"
#include "ndvr/ranking.hpp"

namespace ndvr {

inline constexpr std::size_t kDefaultNeighborhood = 25;

// Indicator vector over the gallery, stored as its sorted support.
struct ActivationVector {
  std::size_t gallery_size = 0;
  std::vector<std::size_t> nonzero;

  bool operator==(const ActivationVector&) const = default;
};

struct FusedActivations {
  ActivationVector ps;  // intersection of the two neighbourhoods
  ActivationVector ns;  // union

  bool operator==(const FusedActivations&) const = default;
};

// Gallery id -> position.
class GalleryIndex {
 public:
  GalleryIndex() = default;
  explicit GalleryIndex(std::vector<std::string> ids) : ids_(std::move(ids)) {
    for (std::size_t i = 0; i < ids_.size(); ++i)
      if (!positions_.emplace(ids_[i], i).second) throw Error(ErrorCode::kParameter, "duplicate gallery id " + ids_[i]);
  }

  std::size_t size() const { return ids_.size(); }
  const std::string& id(std::size_t pos) const { return ids_.at(pos); }
  const std::vector<std::string>& ids() const { return ids_; }
  bool contains(const std::string& id) const { return positions_.count(id) > 0; }

  std::size_t position(const std::string& id) const {
    const auto it = positions_.find(id);
    if (it == positions_.end()) throw Error(ErrorCode::kMapping, "video '" + id + "' is not in the gallery");
    return it->second;
  }

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> positions_;
};

// Indicator of the first k neighbours.
inline ActivationVector activation(const NeighborList& neighbors, const GalleryIndex& gallery, std::size_t k) {
  ActivationVector out;
  out.gallery_size = gallery.size();
  const std::size_t take = std::min(k, neighbors.size());
  out.nonzero.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.nonzero.push_back(gallery.position(neighbors[i].video_id));
  std::sort(out.nonzero.begin(), out.nonzero.end());
  out.nonzero.erase(std::unique(out.nonzero.begin(), out.nonzero.end()), out.nonzero.end());
  return out;
}

inline FusedActivations fuse(const ActivationVector& fc, const ActivationVector& conv) {
  if (fc.gallery_size != conv.gallery_size) throw Error(ErrorCode::kDimension, "activation sizes differ");
  FusedActivations out;
  out.ps.gallery_size = out.ns.gallery_size = fc.gallery_size;
  std::set_intersection(fc.nonzero.begin(), fc.nonzero.end(), conv.nonzero.begin(), conv.nonzero.end(),
                        std::back_inserter(out.ps.nonzero));
  std::set_union(fc.nonzero.begin(), fc.nonzero.end(), conv.nonzero.begin(), conv.nonzero.end(),
                 std::back_inserter(out.ns.nonzero));
  return out;
}

namespace detail {

// |A n B| / |A u B| for sorted supports; two empty sets count as identical.
inline double jaccard_ratio(const ActivationVector& a, const ActivationVector& b) {
  std::size_t common = 0;
  auto i = a.nonzero.begin();
  auto j = b.nonzero.begin();
  while (i != a.nonzero.end() && j != b.nonzero.end()) {
    if (*i < *j) ++i;
    else if (*j < *i) ++j;
    else {
      ++common;
      ++i;
      ++j;
    }
  }
  const std::size_t either = a.nonzero.size() + b.nonzero.size() - common;
  return either == 0 ? 1.0 : static_cast<double>(common) / static_cast<double>(either);
}

}  // namespace detail

// 1 - (ratio_PS + ratio_NS) / 2.
inline double jaccard_distance(const FusedActivations& q, const FusedActivations& g) {
  if (q.ps.gallery_size != g.ps.gallery_size || q.ns.gallery_size != g.ns.gallery_size)
    throw Error(ErrorCode::kDimension, "activation sizes differ");
  return 1.0 - 0.5 * (detail::jaccard_ratio(q.ps, g.ps) + detail::jaccard_ratio(q.ns, g.ns));
}

// Everything the fused ranking needs for one query: its two per-level
// rankings over the gallery (query excluded, best first, scores are the
// level's distances) and the precomputed activations of every gallery video.
struct RerankInput {
  std::string query_id;
  RankedResult fc;
  RankedResult conv;
};

inline NeighborList top_neighbors(const RankedResult& ranking, std::size_t k) {
  NeighborList out;
  const std::size_t take = std::min(k, ranking.ranking.size());
  for (std::size_t i = 0; i < take; ++i) out.push_back({ranking.ranking[i].video_id, ranking.ranking[i].score});
  return out;
}

inline FusedActivations fused_activations(const RankedResult& fc, const RankedResult& conv, const GalleryIndex& gallery,
                                          std::size_t k) {
  return fuse(activation(top_neighbors(fc, k), gallery, k), activation(top_neighbors(conv, k), gallery, k));
}

// Videos in the query's NS pool are ordered by Jaccard distance, ties by the
// mean of their two per-level distances, then by id. The remaining gallery
// follows, ordered by the mean of their per-level rank positions, then by id,
// with score 1 (the Jaccard ceiling).
inline RankedResult rerank(const RerankInput& input, const GalleryIndex& gallery,
                           const std::vector<FusedActivations>& gallery_activations, std::size_t k) {
  if (gallery_activations.size() != gallery.size())
    throw Error(ErrorCode::kState, "gallery activations are missing or stale (" +
                                       std::to_string(gallery_activations.size()) + " of " +
                                       std::to_string(gallery.size()) + ")");
  const FusedActivations query = fused_activations(input.fc, input.conv, gallery, k);

  struct Level {
    std::unordered_map<std::string, std::size_t> rank;
    std::unordered_map<std::string, double> score;
  };
  auto tabulate = [](const RankedResult& r) {
    Level level;
    for (std::size_t i = 0; i < r.ranking.size(); ++i) {
      level.rank.emplace(r.ranking[i].video_id, i);
      level.score.emplace(r.ranking[i].video_id, r.ranking[i].score);
    }
    return level;
  };
  const Level fc = tabulate(input.fc);
  const Level conv = tabulate(input.conv);

  auto lookup = [](const auto& map, const std::string& id, auto fallback) {
    const auto it = map.find(id);
    return it == map.end() ? fallback : it->second;
  };
  const double far = std::numeric_limits<double>::infinity();
  const std::size_t last = gallery.size();

  struct Scored {
    std::string id;
    double primary;
    double secondary;
  };
  std::vector<Scored> pool, rest;
  std::vector<char> in_pool(gallery.size(), 0);
  for (std::size_t pos : query.ns.nonzero) {
    const std::string& id = gallery.id(pos);
    if (id == input.query_id) continue;
    in_pool[pos] = 1;
    const double mean_distance = 0.5 * (lookup(fc.score, id, far) + lookup(conv.score, id, far));
    pool.push_back({id, jaccard_distance(query, gallery_activations[pos]), mean_distance});
  }
  for (std::size_t pos = 0; pos < gallery.size(); ++pos) {
    const std::string& id = gallery.id(pos);
    if (in_pool[pos] || id == input.query_id) continue;
    const double mean_rank =
        0.5 * static_cast<double>(lookup(fc.rank, id, last) + lookup(conv.rank, id, last));
    rest.push_back({id, 1.0, mean_rank});
  }
  auto order = [](const Scored& a, const Scored& b) {
    if (a.primary != b.primary) return a.primary < b.primary;
    if (a.secondary != b.secondary) return a.secondary < b.secondary;
    return a.id < b.id;
  };
  std::sort(pool.begin(), pool.end(), order);
  std::sort(rest.begin(), rest.end(), order);

  RankedResult out;
  out.query_id = input.query_id;
  out.ranking.reserve(pool.size() + rest.size());
  for (const auto& s : pool) out.ranking.push_back({s.id, s.primary});
  for (const auto& s : rest) out.ranking.push_back({s.id, s.primary});
  return out;
}

}  // namespace ndvr
