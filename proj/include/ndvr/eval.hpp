#pragma once

// Retrieval evaluation: precision/recall per cutoff, average precision, mAP,
// ground-truth loading, and a seeded synthetic near-duplicate dataset.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ndvr/error.hpp"
#include "ndvr/feature_store.hpp"
#include "ndvr/random.hpp"
#include "ndvr/ranking.hpp"

namespace ndvr {

struct GroundTruth {
  std::string query_id;
  std::set<std::string> relevant;
  std::vector<std::string> gallery;
};

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
};

struct PrCurve {
  std::vector<PrPoint> points;  // one per cutoff 1..|ranking|
};

namespace detail {

inline void require_relevant(const GroundTruth& truth) {
  if (truth.relevant.empty())
    throw Error(ErrorCode::kUndefinedRecall, "query " + truth.query_id + " has no relevant videos");
}

}  // namespace detail

inline PrCurve precision_recall(const RankedResult& result, const GroundTruth& truth) {
  detail::require_relevant(truth);
  PrCurve curve;
  curve.points.reserve(result.ranking.size());
  std::size_t hits = 0;
  const double m = static_cast<double>(truth.relevant.size());
  for (std::size_t c = 1; c <= result.ranking.size(); ++c) {
    if (truth.relevant.count(result.ranking[c - 1].video_id)) ++hits;
    curve.points.push_back({static_cast<double>(hits) / m, static_cast<double>(hits) / static_cast<double>(c)});
  }
  return curve;
}

// (1/m) sum_{i=1..m} i / r_i; relevant videos that never appear contribute 0.
inline double average_precision(const RankedResult& result, const GroundTruth& truth) {
  detail::require_relevant(truth);
  double sum = 0.0;
  std::size_t found = 0;
  for (std::size_t r = 1; r <= result.ranking.size(); ++r)
    if (truth.relevant.count(result.ranking[r - 1].video_id)) {
      ++found;
      sum += static_cast<double>(found) / static_cast<double>(r);
    }
  return sum / static_cast<double>(truth.relevant.size());
}

inline double mean_ap(const std::vector<double>& aps) {
  if (aps.empty()) throw Error(ErrorCode::kParameter, "mAP of zero queries");
  return std::accumulate(aps.begin(), aps.end(), 0.0) / static_cast<double>(aps.size());
}

inline void write_pr_csv(const PrCurve& curve, std::ostream& out) {
  out << "rank,precision,recall\n";
  out.precision(17);
  for (std::size_t i = 0; i < curve.points.size(); ++i)
    out << i + 1 << ',' << curve.points[i].precision << ',' << curve.points[i].recall << '\n';
}

// code -> relevant?
using LabelMap = std::map<std::string, bool>;

inline LabelMap default_label_map() { return {{"1", true}, {"0", false}}; }

// Parses "CODE=1,CODE=0,..." where 1 marks relevant.
inline LabelMap parse_label_map(const std::string& spec) {
  LabelMap map;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0)
      throw Error(ErrorCode::kParameter, "label map entry '" + item + "' is not CODE=0|1");
    const std::string value = item.substr(eq + 1);
    if (value != "0" && value != "1") throw Error(ErrorCode::kParameter, "label map value must be 0 or 1: " + item);
    map[item.substr(0, eq)] = value == "1";
  }
  return map;
}

// Text format, one group per query:
//
//   query <query_id>
//   <video_id> <label>
//   ...
//
// Fields are separated by spaces or tabs; blank lines and '#' comments are skipped.
inline std::vector<GroundTruth> read_ground_truth(std::istream& in, const LabelMap& labels) {
  std::vector<GroundTruth> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream fields(line);
    std::string first, second, extra;
    if (!(fields >> first) || first[0] == '#') continue;
    fields >> second;
    if (fields >> extra)
      throw Error(ErrorCode::kFormat, "ground truth line " + std::to_string(line_no) + " has too many fields");
    if (first == "query") {
      if (second.empty()) throw Error(ErrorCode::kFormat, "ground truth line " + std::to_string(line_no) + ": query id missing");
      out.push_back({second, {}, {}});
      continue;
    }
    if (out.empty())
      throw Error(ErrorCode::kFormat, "ground truth line " + std::to_string(line_no) + " precedes any 'query' header");
    if (second.empty()) throw Error(ErrorCode::kFormat, "ground truth line " + std::to_string(line_no) + ": label missing");
    const auto it = labels.find(second);
    if (it == labels.end()) throw Error(ErrorCode::kMapping, "label code '" + second + "' is not in the label map");
    out.back().gallery.push_back(first);
    if (it->second) out.back().relevant.insert(first);
  }
  return out;
}

inline std::vector<GroundTruth> load_ground_truth(const std::filesystem::path& path, const LabelMap& labels) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return read_ground_truth(in, labels);
}

inline void write_ground_truth(const std::vector<GroundTruth>& truths, std::ostream& out) {
  for (const auto& t : truths) {
    out << "query " << t.query_id << '\n';
    for (const auto& id : t.gallery) out << id << '\t' << (t.relevant.count(id) ? "1" : "0") << '\n';
  }
}

struct QueryScore {
  std::string query_id;
  double ap = 0.0;
};

struct Evaluation {
  std::vector<QueryScore> per_query;
  double map = 0.0;
};

// Scores every query that has a truth entry and a result. A truth list with
// no queries is an undefined recall.
inline Evaluation evaluate(const std::vector<RankedResult>& results, const std::vector<GroundTruth>& truths) {
  if (truths.empty()) throw Error(ErrorCode::kUndefinedRecall, "ground truth defines no queries");
  std::map<std::string, const RankedResult*> by_query;
  for (const auto& r : results) by_query[r.query_id] = &r;
  Evaluation eval;
  std::vector<double> aps;
  for (const auto& truth : truths) {
    const auto it = by_query.find(truth.query_id);
    if (it == by_query.end()) throw Error(ErrorCode::kMapping, "no ranking for query " + truth.query_id);
    const double ap = average_precision(*it->second, truth);
    eval.per_query.push_back({truth.query_id, ap});
    aps.push_back(ap);
  }
  eval.map = mean_ap(aps);
  return eval;
}

// ---------------------------------------------------------------------------
// Synthetic near-duplicate collection.

struct SynthParams {
  std::size_t clusters = 20;
  std::size_t videos_per_cluster = 5;
  std::size_t frames = 60;
  std::size_t dims = 64;
  double noise = 0.1;      // norm of the additive noise relative to unit-norm features
  std::uint64_t seed = 7;
  double fps = 15.0;
  std::size_t scenes = 4;  // prototype scenes per cluster
  double dropout = 0.2;    // max fraction of prototype frames a member loses
  double drift = 0.15;     // within-scene motion, as a fraction of the anchor norm
};

struct SynthDataset {
  std::vector<VideoFeatures> videos;
  std::vector<GroundTruth> truths;  // one query per cluster: its first member
};

inline std::string synth_video_id(std::size_t cluster, std::size_t member) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "c%03zu_v%02zu", cluster, member);
  return buf;
}

namespace detail {

inline std::vector<double> random_unit(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

inline void normalize(std::vector<double>& v) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm > 0.0)
    for (auto& x : v) x /= norm;
}

struct ProtoFrame {
  std::vector<double> fc;
  std::vector<double> conv;  // all layers concatenated
};

}  // namespace detail

// Each cluster is a prototype sequence of `scenes` scenes; inside a scene the
// features move linearly away from the scene anchor. Members drop up to
// `dropout` of the prototype frames (a random head trim plus scattered
// frames) and add Gaussian noise whose expected norm is `noise`.
inline SynthDataset synth_dataset(const SynthParams& p) {
  if (p.clusters < 1 || p.videos_per_cluster < 1 || p.frames < 1 || p.dims < 2 || p.scenes < 1)
    throw Error(ErrorCode::kParameter, "synthetic dataset counts must be >= 1 (dims >= 2)");
  if (!(p.noise >= 0.0) || !(p.dropout >= 0.0) || p.dropout >= 1.0 || !(p.fps > 0.0) || !(p.drift >= 0.0))
    throw Error(ErrorCode::kParameter, "invalid synthetic noise/dropout/fps/drift");

  Rng rng(p.seed);
  const std::vector<std::size_t> layer_dims{p.dims / 2, p.dims - p.dims / 2};
  const std::size_t conv_dim = p.dims;
  const std::size_t scenes = std::min(p.scenes, p.frames);

  SynthDataset data;
  for (std::size_t c = 0; c < p.clusters; ++c) {
    std::vector<detail::ProtoFrame> proto(p.frames);
    for (std::size_t s = 0; s < scenes; ++s) {
      const auto fc_anchor = detail::random_unit(rng, p.dims);
      const auto fc_dir = detail::random_unit(rng, p.dims);
      const auto conv_anchor = detail::random_unit(rng, conv_dim);
      const auto conv_dir = detail::random_unit(rng, conv_dim);
      const std::size_t begin = s * p.frames / scenes;
      const std::size_t end = (s + 1) * p.frames / scenes;
      for (std::size_t f = begin; f < end; ++f) {
        const double progress = end - begin > 1 ? static_cast<double>(f - begin) / static_cast<double>(end - begin - 1) : 0.0;
        auto& frame = proto[f];
        frame.fc.resize(p.dims);
        frame.conv.resize(conv_dim);
        for (std::size_t i = 0; i < p.dims; ++i) frame.fc[i] = fc_anchor[i] + p.drift * progress * fc_dir[i];
        for (std::size_t i = 0; i < conv_dim; ++i) frame.conv[i] = conv_anchor[i] + p.drift * progress * conv_dir[i];
        detail::normalize(frame.fc);
        detail::normalize(frame.conv);
      }
    }

    GroundTruth truth;
    truth.query_id = synth_video_id(c, 0);
    for (std::size_t v = 0; v < p.videos_per_cluster; ++v) {
      const std::size_t budget = static_cast<std::size_t>(std::floor(rng.uniform() * p.dropout * static_cast<double>(p.frames)));
      const std::size_t trim = budget > 0 ? rng.index(budget / 2 + 1) : 0;
      std::vector<char> keep(p.frames, 1);
      for (std::size_t f = 0; f < trim; ++f) keep[f] = 0;
      std::size_t dropped = trim;
      while (dropped < budget && dropped + 1 < p.frames) {
        const std::size_t f = rng.index(p.frames);
        if (!keep[f]) continue;
        keep[f] = 0;
        ++dropped;
      }

      VideoFeatures video;
      video.video_id = synth_video_id(c, v);
      video.fps = p.fps;
      video.fc_dim = p.dims;
      video.layer_dims = layer_dims;
      const double fc_sigma = p.noise / std::sqrt(static_cast<double>(p.dims));
      const double conv_sigma = p.noise / std::sqrt(static_cast<double>(conv_dim));
      for (std::size_t f = 0; f < p.frames; ++f) {
        if (!keep[f]) continue;
        FrameFeature frame;
        frame.frame_index = static_cast<std::uint32_t>(f);
        frame.timestamp = static_cast<double>(f) / p.fps;
        frame.fc_vector.resize(p.dims);
        for (std::size_t i = 0; i < p.dims; ++i)
          frame.fc_vector[i] = static_cast<float>(proto[f].fc[i] + (p.noise > 0.0 ? fc_sigma * rng.normal() : 0.0));
        std::vector<float> conv(conv_dim);
        for (std::size_t i = 0; i < conv_dim; ++i)
          conv[i] = static_cast<float>(proto[f].conv[i] + (p.noise > 0.0 ? conv_sigma * rng.normal() : 0.0));
        frame.conv_vectors.emplace_back(conv.begin(), conv.begin() + static_cast<std::ptrdiff_t>(layer_dims[0]));
        frame.conv_vectors.emplace_back(conv.begin() + static_cast<std::ptrdiff_t>(layer_dims[0]), conv.end());
        video.frames.push_back(std::move(frame));
      }
      data.videos.push_back(std::move(video));
      if (v > 0) truth.relevant.insert(synth_video_id(c, v));
    }
    data.truths.push_back(std::move(truth));
  }

  std::vector<std::string> all_ids;
  for (const auto& v : data.videos) all_ids.push_back(v.video_id);
  for (auto& truth : data.truths)
    for (const auto& id : all_ids)
      if (id != truth.query_id) truth.gallery.push_back(id);
  return data;
}

}  // namespace ndvr
