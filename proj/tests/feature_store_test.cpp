#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "ndvr/feature_store.hpp"

namespace {

using namespace ndvr;
namespace fs = std::filesystem;

const fs::path kFixtures = NDVR_FIXTURES;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

VideoFeatures make_video(std::size_t frames, double fps = 10.0) {
  VideoFeatures v;
  v.video_id = "v";
  v.fps = fps;
  v.fc_dim = 3;
  v.layer_dims = {2, 1};
  for (std::size_t i = 0; i < frames; ++i) {
    FrameFeature f;
    f.frame_index = static_cast<std::uint32_t>(i);
    f.timestamp = static_cast<double>(i) / fps;
    f.fc_vector = {static_cast<float>(i), 0.5f, -1.25f};
    f.conv_vectors = {{1.0f, 2.0f}, {static_cast<float>(i) * 0.1f}};
    v.frames.push_back(f);
  }
  return v;
}

std::string serialize(const VideoFeatures& v) {
  std::ostringstream out(std::ios::binary);
  write_features(v, out);
  return out.str();
}

VideoFeatures parse(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  return read_features(in);
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kState;
}

TEST(FeatureStore, TinyFixtureMatchesValues) {
  const VideoFeatures v = read_features_file(kFixtures / "tiny.ndvf");
  const auto values = nlohmann::json::parse(slurp(kFixtures / "tiny_values.json"));
  EXPECT_EQ(v.video_id, "tiny");
  EXPECT_EQ(v.fps, 25.0);
  ASSERT_EQ(v.size(), 5u);
  EXPECT_EQ(v.fc_dim, 4u);
  EXPECT_EQ(v.layer_dims, (std::vector<std::size_t>{3, 2}));
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(v.frames[i].frame_index, i);
    EXPECT_EQ(v.frames[i].timestamp, static_cast<double>(i) / 25.0);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(v.frames[i].fc_vector[j], values["fc"][i][j].get<float>());
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t j = 0; j < v.layer_dims[l]; ++j)
        EXPECT_EQ(v.frames[i].conv_vectors[l][j], values["conv"][l][i][j].get<float>());
  }
}

TEST(FeatureStore, TinyFixtureReserializesByteIdentical) {
  const std::string golden = slurp(kFixtures / "tiny.ndvf");
  EXPECT_EQ(serialize(parse(golden)), golden);
}

TEST(FeatureStore, RoundTripIsLossless) {
  const auto v = make_video(7);
  EXPECT_EQ(parse(serialize(v)), v);
}

TEST(FeatureStore, SingleFrameRoundTrips) {
  const auto v = make_video(1);
  EXPECT_EQ(parse(serialize(v)), v);
}

TEST(FeatureStore, ZeroFramesRoundTrip) {
  auto v = make_video(0);
  const auto back = parse(serialize(v));
  EXPECT_TRUE(back.empty());
  EXPECT_EQ(back.fc_dim, 3u);
}

TEST(FeatureStore, LayoutIsLittleEndianWithLengthPrefixedHeader) {
  const std::string bytes = serialize(make_video(2));
  ASSERT_GE(bytes.size(), 9u);
  EXPECT_EQ(bytes.substr(0, 4), "NDVF");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u);
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + 5, 4);
  const auto header = nlohmann::json::parse(bytes.substr(9, len));
  EXPECT_EQ(header["frame_count"], 2);
  EXPECT_EQ(header["fc_dim"], 3);
  const std::size_t record = 4 + 8 + 4 * (3 + 2 + 1);
  EXPECT_EQ(bytes.size(), 9 + len + 2 * record);
}

TEST(FeatureStore, TruncatedFileIsCorruption) {
  const std::string bytes = serialize(make_video(3));
  EXPECT_EQ(code_of([&] { parse(bytes.substr(0, bytes.size() - 1)); }), ErrorCode::kCorruption);
  EXPECT_EQ(code_of([&] { parse(bytes.substr(0, 7)); }), ErrorCode::kCorruption);
}

TEST(FeatureStore, TrailingBytesAreCorruption) {
  EXPECT_EQ(code_of([&] { parse(serialize(make_video(3)) + "x"); }), ErrorCode::kCorruption);
}

TEST(FeatureStore, BadMagicIsFormatError) {
  std::string bytes = serialize(make_video(2));
  bytes[0] = 'X';
  EXPECT_EQ(code_of([&] { parse(bytes); }), ErrorCode::kFormat);
  bytes = serialize(make_video(2));
  bytes[4] = 2;
  EXPECT_EQ(code_of([&] { parse(bytes); }), ErrorCode::kFormat);
}

TEST(FeatureStore, MismatchedFrameDimsRejectedOnWrite) {
  auto v = make_video(3);
  v.frames[1].fc_vector.push_back(1.0f);
  EXPECT_EQ(code_of([&] { serialize(v); }), ErrorCode::kValidation);
  v = make_video(3);
  v.frames[2].conv_vectors[0].pop_back();
  EXPECT_EQ(code_of([&] { serialize(v); }), ErrorCode::kValidation);
}

TEST(FeatureStore, NonIncreasingIndicesRejected) {
  auto v = make_video(3);
  v.frames[2].frame_index = 1;
  v.frames[2].timestamp = 0.1;
  EXPECT_EQ(code_of([&] { validate(v); }), ErrorCode::kValidation);
}

TEST(FeatureStore, TimestampMustMatchIndexOverFps) {
  auto v = make_video(3);
  v.frames[1].timestamp += 0.01;
  EXPECT_EQ(code_of([&] { validate(v); }), ErrorCode::kValidation);
}

TEST(FeatureStore, NonFiniteRejected) {
  auto v = make_video(3);
  v.frames[0].fc_vector[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_EQ(code_of([&] { validate(v); }), ErrorCode::kValidation);
}

TEST(FeatureStore, NonPositiveFpsRejected) {
  auto v = make_video(2);
  v.fps = 0.0;
  EXPECT_EQ(code_of([&] { validate(v); }), ErrorCode::kValidation);
}

TEST(FeatureStore, MissingHeaderKeyIsCorruption) {
  std::ostringstream out(std::ios::binary);
  io::Writer w(out);
  w.magic(kNdvfMagic, kNdvfVersion);
  w.json_header({{"video_id", "x"}, {"fps", 1.0}});
  EXPECT_EQ(code_of([&] { parse(out.str()); }), ErrorCode::kCorruption);
}

TEST(FeatureStore, UnwritablePathIsIoError) {
  EXPECT_EQ(code_of([&] { write_features_file(make_video(1), "/nonexistent-dir/x.ndvf"); }), ErrorCode::kIo);
}

TEST(FeatureStore, ManifestRoundTrip) {
  const auto path = fs::temp_directory_path() / "ndvr_manifest_test.json";
  const std::vector<ManifestEntry> entries{{"a", "a.ndvf"}, {"b", "sub/b.ndvf"}};
  write_manifest(entries, path);
  EXPECT_EQ(read_manifest(path), entries);
  fs::remove(path);
}

}  // namespace
