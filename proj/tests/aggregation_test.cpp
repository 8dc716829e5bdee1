#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "ndvr/aggregation.hpp"
#include "ndvr/random.hpp"

namespace {

using namespace ndvr;

FeatureMap random_map(Rng& rng, std::size_t h, std::size_t w, std::size_t c) {
  FeatureMap m(h, w, c);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) m(y, x, k) = static_cast<float>(rng.normal());
  return m;
}

std::vector<float> scan_max(const FeatureMap& m) {
  std::vector<float> out;
  for (std::size_t k = 0; k < m.channels(); ++k) {
    float best = -std::numeric_limits<float>::infinity();
    for (std::size_t y = 0; y < m.height(); ++y)
      for (std::size_t x = 0; x < m.width(); ++x) best = std::max(best, m(y, x, k));
    out.push_back(best);
  }
  return out;
}

TEST(MacPool, SingleSpatialCellIsIdentity) {
  FeatureMap m(1, 1, 3, {0.5f, -2.0f, 7.0f});
  EXPECT_EQ(mac_pool(m), (std::vector<float>{0.5f, -2.0f, 7.0f}));
}

TEST(MacPool, TwoByTwoSingleChannel) {
  FeatureMap m(2, 2, 1, {1.0f, 5.0f, -2.0f, 0.0f});
  EXPECT_EQ(mac_pool(m), std::vector<float>{5.0f});
}

TEST(MacPool, MatchesExhaustiveScan) {
  Rng rng(3);
  const auto m = random_map(rng, 7, 7, 16);
  EXPECT_EQ(mac_pool(m), scan_max(m));
}

TEST(MacPool, EmptyTensorThrows) {
  try {
    mac_pool(FeatureMap(0, 3, 2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDimension);
  }
}

TEST(MacPool, ShapeMismatchThrows) { EXPECT_THROW(FeatureMap(2, 2, 2, std::vector<float>(7)), Error); }

TEST(MacPool, ConformanceFixture) {
  std::ifstream in(std::filesystem::path(NDVR_FIXTURES) / "mac_conformance.json");
  const auto doc = nlohmann::json::parse(in);
  FeatureMap m(doc["height"], doc["width"], doc["channels"], doc["input"].get<std::vector<float>>());
  const auto expected = doc["expected"].get<std::vector<float>>();
  const auto pooled = mac_pool(m);
  ASSERT_EQ(pooled.size(), expected.size());
  for (std::size_t i = 0; i < pooled.size(); ++i) EXPECT_NEAR(pooled[i], expected[i], 1e-5);
}

TEST(MacPool, SpatialPermutationInvariantAndMonotone) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_map(rng, 1 + rng.index(5), 1 + rng.index(5), 1 + rng.index(8));
    const auto base = mac_pool(m);
    // Reverse the spatial order.
    FeatureMap flipped(m.height(), m.width(), m.channels());
    for (std::size_t y = 0; y < m.height(); ++y)
      for (std::size_t x = 0; x < m.width(); ++x)
        for (std::size_t k = 0; k < m.channels(); ++k)
          flipped(m.height() - 1 - y, m.width() - 1 - x, k) = m(y, x, k);
    EXPECT_EQ(mac_pool(flipped), base);
    FeatureMap raised = m;
    raised(rng.index(m.height()), rng.index(m.width()), rng.index(m.channels())) += 1.0f;
    const auto up = mac_pool(raised);
    for (std::size_t k = 0; k < base.size(); ++k) EXPECT_GE(up[k], base[k]);
  }
}

TEST(BuildLlf, HandArithmetic) {
  const std::vector<std::vector<float>> layers{{2, 0}, {0, 2, 2}};
  const auto d = build_llf(layers);
  EXPECT_EQ(d.level, DescriptorLevel::kLlf);
  const double norm = std::sqrt(3 * 0.64 + 2 * 1.44);
  const std::vector<double> centered{0.8, -1.2, -1.2, 0.8, 0.8};
  ASSERT_EQ(d.vector.size(), 5);
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(d.vector[i], centered[i] / norm, 1e-12);
}

TEST(BuildLlf, ConstantConcatenationIsDegenerate) {
  const std::vector<std::vector<float>> layers{{3, 3}, {3}};
  try {
    build_llf(layers);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateDescriptor);
  }
}

TEST(BuildLlf, CnnArchitectureDims) {
  Rng rng(9);
  auto layers_of = [&](std::vector<std::size_t> dims) {
    std::vector<std::vector<float>> layers;
    for (auto c : dims) {
      layers.emplace_back(c);
      for (auto& x : layers.back()) x = static_cast<float>(rng.uniform());
    }
    return layers;
  };
  // AlexNet conv1..conv5 channel counts sum to 1376; GoogLeNet inception 3a..5b outputs to 5488.
  EXPECT_EQ(build_llf(layers_of({96, 256, 384, 384, 256})).vector.size(), 1376);
  EXPECT_EQ(build_llf(layers_of({256, 480, 512, 512, 512, 528, 832, 832, 1024})).vector.size(), 5488);
}

TEST(BuildLlf, CenteredAndUnitNorm) {
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<float>> layers(1 + rng.index(4));
    for (auto& l : layers) {
      l.resize(1 + rng.index(40));
      for (auto& x : l) x = static_cast<float>(rng.uniform() * 10.0);
    }
    const auto d = build_llf(layers);
    EXPECT_NEAR(d.vector.norm(), 1.0, 1e-6);
    EXPECT_NEAR(d.vector.sum(), 0.0, 1e-6 * static_cast<double>(d.vector.size()));
  }
}

TEST(BuildUlf, ThreeFour) {
  const std::vector<float> fc{3, 4};
  const auto d = build_ulf(fc);
  EXPECT_EQ(d.level, DescriptorLevel::kUlf);
  EXPECT_NEAR(d.vector[0], 0.6, 1e-15);
  EXPECT_NEAR(d.vector[1], 0.8, 1e-15);
}

TEST(BuildUlf, CnnArchitectureDims) {
  EXPECT_EQ(build_ulf(std::vector<float>(4096, 0.25f)).vector.size(), 4096);
  EXPECT_EQ(build_ulf(std::vector<float>(1024, 0.25f)).vector.size(), 1024);
}

TEST(BuildUlf, ZeroVectorIsDegenerate) {
  try {
    build_ulf(std::vector<float>(5, 0.0f));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateDescriptor);
  }
}

}  // namespace
