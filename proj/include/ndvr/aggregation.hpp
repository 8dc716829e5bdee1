#pragma once

// Two feature levels per keyframe: ULF from the fully-connected vector and LLF
// from max-pooled (MAC) intermediate conv layers.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "ndvr/error.hpp"
#include "ndvr/types.hpp"

namespace ndvr {

// Dense conv activation tensor, height x width x channels, channel fastest.
class FeatureMap {
 public:
  FeatureMap(std::size_t height, std::size_t width, std::size_t channels)
      : height_(height), width_(width), channels_(channels), data_(height * width * channels, 0.0f) {}

  FeatureMap(std::size_t height, std::size_t width, std::size_t channels, std::vector<float> data)
      : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
    if (data_.size() != height * width * channels)
      throw Error(ErrorCode::kDimension, "feature map data does not match its shape");
  }

  float& operator()(std::size_t y, std::size_t x, std::size_t c) { return data_[(y * width_ + x) * channels_ + c]; }
  float operator()(std::size_t y, std::size_t x, std::size_t c) const {
    return data_[(y * width_ + x) * channels_ + c];
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t channels() const { return channels_; }
  std::span<const float> data() const { return data_; }

 private:
  std::size_t height_;
  std::size_t width_;
  std::size_t channels_;
  std::vector<float> data_;
};

// v(i) = max over all spatial positions of channel i.
inline std::vector<float> mac_pool(const FeatureMap& map) {
  if (map.height() == 0 || map.width() == 0 || map.channels() == 0)
    throw Error(ErrorCode::kDimension, "mac_pool needs a non-empty tensor");
  const auto data = map.data();
  const std::size_t c = map.channels();
  std::vector<float> out(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(c));
  for (std::size_t offset = c; offset < data.size(); offset += c)
    for (std::size_t i = 0; i < c; ++i) out[i] = std::max(out[i], data[offset + i]);
  return out;
}

enum class DescriptorLevel { kUlf, kLlf };

struct FrameDescriptor {
  DescriptorLevel level;
  Vector vector;  // unit L2 norm
};

namespace detail {

inline Vector l2_normalized(Vector v, const char* what) {
  const double norm = v.norm();
  if (!(norm > 0.0) || !std::isfinite(norm))
    throw Error(ErrorCode::kDegenerateDescriptor, std::string(what) + " has zero norm");
  v /= norm;
  return v;
}

}  // namespace detail

// Concatenate the per-layer MAC vectors, subtract the vector's own mean, L2-normalize.
inline FrameDescriptor build_llf(std::span<const std::vector<float>> conv_vectors) {
  if (conv_vectors.empty()) throw Error(ErrorCode::kDimension, "LLF needs at least one conv layer");
  std::size_t total = 0;
  for (const auto& layer : conv_vectors) total += layer.size();
  if (total == 0) throw Error(ErrorCode::kDimension, "LLF conv layers are empty");

  Vector v(static_cast<Eigen::Index>(total));
  Eigen::Index k = 0;
  for (const auto& layer : conv_vectors)
    for (float x : layer) v[k++] = x;
  v.array() -= v.mean();
  return {DescriptorLevel::kLlf, detail::l2_normalized(std::move(v), "centered LLF concatenation")};
}

inline FrameDescriptor build_ulf(std::span<const float> fc_vector) {
  if (fc_vector.empty()) throw Error(ErrorCode::kDimension, "ULF needs a non-empty fc vector");
  Vector v(static_cast<Eigen::Index>(fc_vector.size()));
  for (std::size_t i = 0; i < fc_vector.size(); ++i) v[static_cast<Eigen::Index>(i)] = fc_vector[i];
  return {DescriptorLevel::kUlf, detail::l2_normalized(std::move(v), "fc vector")};
}

}  // namespace ndvr
