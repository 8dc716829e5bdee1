#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "ndvr/error.hpp"
#include "ndvr/feature_store.hpp"

namespace ndvr {

struct KeyframeSet {
  std::string video_id;
  std::vector<std::size_t> selected;          // positions into VideoFeatures::frames
  std::vector<double> difference_sequence;    // D_i = ||x_{i+1} - x_i||_2, length n-1
};

inline constexpr double kDefaultKeyframeRate = 2.5;

// Euclidean distance between consecutive fc vectors.
inline std::vector<double> frame_differences(const VideoFeatures& video) {
  if (video.empty()) throw Error(ErrorCode::kEmptyVideo, video.video_id + " has no frames");
  std::vector<double> diffs;
  diffs.reserve(video.size() - 1);
  for (std::size_t i = 0; i + 1 < video.size(); ++i) {
    const auto& a = video.frames[i].fc_vector;
    const auto& b = video.frames[i + 1].fc_vector;
    if (a.size() != b.size()) throw Error(ErrorCode::kDimension, "fc vectors differ in length");
    double sum = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
      const double d = static_cast<double>(b[j]) - static_cast<double>(a[j]);
      sum += d * d;
    }
    diffs.push_back(std::sqrt(sum));
  }
  return diffs;
}

// Number of keyframes targeted before same-second dedup: ceil(rate * n / fps),
// clamped to [1, n-1] (or 1 when n == 1).
inline std::size_t keyframe_budget(std::size_t frame_count, double fps, double rate) {
  const double duration = static_cast<double>(frame_count) / fps;
  const double raw = std::ceil(rate * duration);
  const std::size_t upper = frame_count > 1 ? frame_count - 1 : 1;
  if (!(raw >= 1.0)) return 1;
  return raw >= static_cast<double>(upper) ? upper : static_cast<std::size_t>(raw);
}

// The m frames with the largest incoming difference (ties to the smaller
// index) become candidates, together with frame 0 which carries difference
// -inf. At most one candidate survives per integral second: the one with the
// largest incoming difference, ties to the smaller index. Frame 0 is dropped
// again if it alone pushes the count past ceil(rate * duration).
inline KeyframeSet select_keyframes(const VideoFeatures& video, double rate = kDefaultKeyframeRate) {
  if (!(rate > 0.0)) throw Error(ErrorCode::kParameter, "keyframe rate must be positive");
  KeyframeSet out;
  out.video_id = video.video_id;
  out.difference_sequence = frame_differences(video);
  const auto& diffs = out.difference_sequence;
  const std::size_t n = video.size();

  constexpr double kSentinel = -std::numeric_limits<double>::infinity();
  auto incoming = [&](std::size_t pos) { return pos == 0 ? kSentinel : diffs[pos - 1]; };

  std::vector<std::size_t> candidates{0};
  if (n > 1) {
    std::vector<std::size_t> order(diffs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return diffs[a] > diffs[b]; });
    const std::size_t m = std::min(keyframe_budget(n, video.fps, rate), order.size());
    for (std::size_t r = 0; r < m; ++r) candidates.push_back(order[r] + 1);
    std::sort(candidates.begin(), candidates.end());
  }

  // Candidates are visited in increasing position, so a strict '>' keeps the
  // smaller index on ties.
  std::map<long long, std::size_t> best_in_second;
  for (std::size_t pos : candidates) {
    const auto second = static_cast<long long>(std::floor(video.frames[pos].timestamp));
    auto [it, inserted] = best_in_second.try_emplace(second, pos);
    if (!inserted && incoming(pos) > incoming(it->second)) it->second = pos;
  }
  for (const auto& [second, pos] : best_in_second) out.selected.push_back(pos);
  std::sort(out.selected.begin(), out.selected.end());

  const auto cap = static_cast<std::size_t>(std::max(1.0, std::ceil(rate * video.duration())));
  if (out.selected.size() > cap && out.selected.front() == 0) out.selected.erase(out.selected.begin());
  return out;
}

}  // namespace ndvr
