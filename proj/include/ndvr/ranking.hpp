#pragma once

#include <string>
#include <vector>

namespace ndvr {

struct RankedItem {
  std::string video_id;
  double score = 0.0;  // lower is closer
};

// Gallery videos in retrieval order for one query; rank = position + 1.
struct RankedResult {
  std::string query_id;
  std::vector<RankedItem> ranking;
};

}  // namespace ndvr
