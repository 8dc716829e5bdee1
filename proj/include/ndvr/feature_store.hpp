#pragma once

// NDVF: one video's per-frame two-level CNN features.
//
//   "NDVF" 0x01
//   u32 header_len, JSON {video_id, fps, frame_count, fc_dim, layer_dims}
//   frame_count records: u32 frame_index, f64 timestamp,
//                        fc_dim f32, then layer_dims[l] f32 per layer
//
// All values little-endian. Conv vectors are per-channel spatial maxima, the
// pooling having been done by the producer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ndvr/binary_io.hpp"
#include "ndvr/error.hpp"

namespace ndvr {

inline constexpr char kNdvfMagic[] = "NDVF";
inline constexpr std::uint8_t kNdvfVersion = 1;

struct FrameFeature {
  std::uint32_t frame_index = 0;
  double timestamp = 0.0;
  std::vector<float> fc_vector;
  std::vector<std::vector<float>> conv_vectors;

  bool operator==(const FrameFeature&) const = default;
};

struct VideoFeatures {
  std::string video_id;
  double fps = 1.0;
  std::size_t fc_dim = 0;
  std::vector<std::size_t> layer_dims;
  std::vector<FrameFeature> frames;

  std::size_t size() const { return frames.size(); }
  bool empty() const { return frames.empty(); }
  double duration() const { return static_cast<double>(frames.size()) / fps; }

  bool operator==(const VideoFeatures&) const = default;
};

namespace detail {

inline bool all_finite(std::span<const float> v) {
  for (float x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace detail

// Checks every VideoFeatures invariant; throws kValidation naming the first violation.
inline void validate(const VideoFeatures& video) {
  if (!(video.fps > 0.0) || !std::isfinite(video.fps))
    throw Error(ErrorCode::kValidation, video.video_id + ": fps must be positive");
  for (std::size_t i = 0; i < video.frames.size(); ++i) {
    const auto& f = video.frames[i];
    const std::string where = video.video_id + " frame " + std::to_string(i);
    if (i > 0 && f.frame_index <= video.frames[i - 1].frame_index)
      throw Error(ErrorCode::kValidation, where + ": frame_index not strictly increasing");
    if (!(f.timestamp >= 0.0) || !std::isfinite(f.timestamp))
      throw Error(ErrorCode::kValidation, where + ": bad timestamp");
    if (std::abs(f.timestamp - f.frame_index / video.fps) > 1e-6 * std::max(1.0, f.timestamp))
      throw Error(ErrorCode::kValidation, where + ": timestamp is not frame_index / fps");
    if (f.fc_vector.size() != video.fc_dim)
      throw Error(ErrorCode::kValidation, where + ": fc dimension " + std::to_string(f.fc_vector.size()) +
                                              " != header " + std::to_string(video.fc_dim));
    if (f.conv_vectors.size() != video.layer_dims.size())
      throw Error(ErrorCode::kValidation, where + ": layer count mismatch");
    if (!detail::all_finite(f.fc_vector)) throw Error(ErrorCode::kValidation, where + ": non-finite fc value");
    for (std::size_t l = 0; l < f.conv_vectors.size(); ++l) {
      if (f.conv_vectors[l].size() != video.layer_dims[l])
        throw Error(ErrorCode::kValidation, where + ": layer " + std::to_string(l) + " dimension mismatch");
      if (!detail::all_finite(f.conv_vectors[l]))
        throw Error(ErrorCode::kValidation, where + ": non-finite conv value");
    }
  }
}

// Fills fc_dim / layer_dims from the first frame when they are unset.
inline void infer_dims(VideoFeatures& video) {
  if (video.frames.empty()) return;
  if (video.fc_dim == 0) video.fc_dim = video.frames.front().fc_vector.size();
  if (video.layer_dims.empty())
    for (const auto& v : video.frames.front().conv_vectors) video.layer_dims.push_back(v.size());
}

inline nlohmann::json ndvf_header(const VideoFeatures& video) {
  return nlohmann::json{{"video_id", video.video_id},
                        {"fps", video.fps},
                        {"frame_count", video.frames.size()},
                        {"fc_dim", video.fc_dim},
                        {"layer_dims", video.layer_dims}};
}

inline std::size_t write_features(const VideoFeatures& video, std::ostream& out) {
  validate(video);
  io::Writer w(out);
  w.magic(kNdvfMagic, kNdvfVersion);
  w.json_header(ndvf_header(video));
  for (const auto& f : video.frames) {
    w.u32(f.frame_index);
    w.f64(f.timestamp);
    w.f32s(f.fc_vector);
    for (const auto& layer : f.conv_vectors) w.f32s(layer);
  }
  return w.count();
}

inline VideoFeatures read_features(std::istream& in) {
  io::Reader r(in);
  r.expect_magic(kNdvfMagic, kNdvfVersion);
  const auto header = r.json_header();

  VideoFeatures video;
  video.video_id = io::header_field<std::string>(header, "video_id");
  video.fps = io::header_field<double>(header, "fps");
  video.fc_dim = io::header_field<std::size_t>(header, "fc_dim");
  video.layer_dims = io::header_field<std::vector<std::size_t>>(header, "layer_dims");
  const auto frame_count = io::header_field<std::size_t>(header, "frame_count");

  const std::size_t record_floats =
      video.fc_dim + std::accumulate(video.layer_dims.begin(), video.layer_dims.end(), std::size_t{0});
  if (record_floats > (1u << 28) || frame_count > (1u << 28))
    throw Error(ErrorCode::kCorruption, "implausible header dimensions");

  video.frames.reserve(frame_count);
  for (std::size_t i = 0; i < frame_count; ++i) {
    FrameFeature f;
    f.frame_index = r.u32("frame_index");
    f.timestamp = r.f64("timestamp");
    f.fc_vector.resize(video.fc_dim);
    r.f32s(f.fc_vector, "fc vector");
    f.conv_vectors.resize(video.layer_dims.size());
    for (std::size_t l = 0; l < video.layer_dims.size(); ++l) {
      f.conv_vectors[l].resize(video.layer_dims[l]);
      r.f32s(f.conv_vectors[l], "conv vector");
    }
    video.frames.push_back(std::move(f));
  }
  if (!r.at_end()) throw Error(ErrorCode::kCorruption, "trailing bytes after last frame");
  validate(video);
  return video;
}

inline std::size_t write_features_file(const VideoFeatures& video, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  const auto n = write_features(video, out);
  out.flush();
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
  return n;
}

inline VideoFeatures read_features_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return read_features(in);
}

// Dataset manifest: JSON array of {video_id, path}. Paths are stored as given;
// relative paths resolve against the manifest's directory.
struct ManifestEntry {
  std::string video_id;
  std::string path;

  bool operator==(const ManifestEntry&) const = default;
};

inline void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& e : entries) doc.push_back({{"video_id", e.video_id}, {"path", e.path}});
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out << doc.dump(2) << '\n';
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormat, "manifest " + path.string() + ": " + e.what());
  }
  if (!doc.is_array()) throw Error(ErrorCode::kFormat, "manifest must be a JSON array");
  std::vector<ManifestEntry> entries;
  for (const auto& item : doc) {
    if (!item.contains("video_id") || !item.contains("path"))
      throw Error(ErrorCode::kFormat, "manifest entry needs video_id and path");
    entries.push_back({item.at("video_id").get<std::string>(), item.at("path").get<std::string>()});
  }
  return entries;
}

}  // namespace ndvr
