#include <functional>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "ndvr/ann_index.hpp"

namespace {

using namespace ndvr;

RowMatrix random_points(Rng& rng, Eigen::Index n, Eigen::Index dim) {
  RowMatrix m(n, dim);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

std::vector<std::string> make_ids(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("v" + std::to_string(i));
  return ids;
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

double recall(const NeighborList& got, const NeighborList& truth) {
  std::set<std::string> want;
  for (const auto& n : truth) want.insert(n.video_id);
  std::size_t hit = 0;
  for (const auto& n : got) hit += want.count(n.video_id);
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

TEST(BruteKnn, TwoPointsNearerWins) {
  RowMatrix p(2, 1);
  p << 0, 5;
  const Vector q = Vector::Constant(1, 4.0);
  const auto out = brute_knn(p, {"a", "b"}, q, 1);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].video_id, "b");
  EXPECT_EQ(out[0].distance, 1.0);
}

TEST(BruteKnn, LineExample) {
  RowMatrix p(3, 1);
  p << 0, 1, 2;
  const auto out = brute_knn(p, {"p0", "p1", "p2"}, Vector::Constant(1, 0.6), 2);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].video_id, "p1");
  EXPECT_EQ(out[1].video_id, "p0");
}

TEST(BruteKnn, TiesOrderedById) {
  RowMatrix p(3, 1);
  p << 1, -1, 1;
  const auto out = brute_knn(p, {"c", "b", "a"}, Vector::Zero(1), 3);
  EXPECT_EQ(out[0].video_id, "a");
  EXPECT_EQ(out[1].video_id, "b");
  EXPECT_EQ(out[2].video_id, "c");
}

TEST(BruteKnn, KAboveNThrows) {
  EXPECT_EQ(code_of([] { brute_knn(RowMatrix::Zero(2, 2), {"a", "b"}, Vector::Zero(2), 3); }), ErrorCode::kParameter);
}

TEST(AnnIndex, SinglePointIsOneLeafPerTree) {
  RowMatrix p(1, 4);
  p << 1, 2, 3, 4;
  const auto index = AnnIndex::build(p, {"only"}, {});
  for (std::size_t t = 0; t < index.num_trees(); ++t) EXPECT_EQ(index.tree_order(t).size(), 1u);
  const auto out = index.knn(Vector::Zero(4), 1, 1);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].video_id, "only");
}

TEST(AnnIndex, UnrotatedSingleTreeIsAxisAlignedKdTree) {
  Rng rng(1);
  const RowMatrix p = random_points(rng, 200, 3);
  AnnParams params;
  params.num_trees = 1;
  params.rotate = false;
  params.leaf_size = 4;
  const auto index = AnnIndex::build(p, make_ids(200), params);
  EXPECT_EQ(index.rotation(0), Matrix::Identity(3, 3));
  for (int trial = 0; trial < 20; ++trial) {
    const Vector q = random_points(rng, 1, 3).row(0).transpose();
    EXPECT_EQ(index.knn(q, 5, 200), brute_knn(index.points(), index.ids(), q, 5));
  }
}

TEST(AnnIndex, SameSeedSameStructure) {
  Rng rng(2);
  const RowMatrix p = random_points(rng, 300, 10);
  AnnParams params;
  params.seed = 42;
  const auto a = AnnIndex::build(p, make_ids(300), params);
  const auto b = AnnIndex::build(p, make_ids(300), params);
  EXPECT_TRUE(a.same_structure(b));
  params.seed = 43;
  EXPECT_FALSE(a.same_structure(AnnIndex::build(p, make_ids(300), params)));
}

TEST(AnnIndex, RotationsAreOrthonormalAndKeepDistances) {
  Rng rng(3);
  const RowMatrix p = random_points(rng, 50, 12);
  const auto index = AnnIndex::build(p, make_ids(50), {});
  for (std::size_t t = 0; t < index.num_trees(); ++t) {
    const Matrix& r = index.rotation(t);
    EXPECT_LT((r.transpose() * r - Matrix::Identity(12, 12)).cwiseAbs().maxCoeff(), 1e-12);
    const RowMatrix rotated = p * r;
    for (Eigen::Index i = 0; i < 50; ++i)
      for (Eigen::Index j = i + 1; j < 50; ++j)
        EXPECT_NEAR((rotated.row(i) - rotated.row(j)).norm(), (p.row(i) - p.row(j)).norm(), 1e-8);
  }
}

TEST(AnnIndex, EveryTreeCoversEveryPointOnce) {
  Rng rng(4);
  const auto index = AnnIndex::build(random_points(rng, 157, 5), make_ids(157), {});
  for (std::size_t t = 0; t < index.num_trees(); ++t) {
    std::vector<std::uint32_t> order = index.tree_order(t);
    std::sort(order.begin(), order.end());
    for (std::uint32_t i = 0; i < 157; ++i) EXPECT_EQ(order[i], i);
  }
}

TEST(AnnIndex, FullBudgetEqualsBruteForce) {
  Rng rng(5);
  for (int trial = 0; trial < 60; ++trial) {
    const auto n = static_cast<Eigen::Index>(1 + rng.index(300));
    const auto dim = static_cast<Eigen::Index>(1 + rng.index(64));
    AnnParams params;
    params.num_trees = 1 + static_cast<int>(rng.index(8));
    params.leaf_size = 1 + static_cast<int>(rng.index(20));
    params.seed = rng.bits();
    const auto index = AnnIndex::build(random_points(rng, n, dim), make_ids(static_cast<std::size_t>(n)), params);
    const Vector q = random_points(rng, 1, dim).row(0).transpose();
    const std::size_t k = 1 + rng.index(static_cast<std::size_t>(n));
    EXPECT_EQ(index.knn(q, k, static_cast<std::size_t>(n)), brute_knn(index.points(), index.ids(), q, k));
  }
}

TEST(AnnIndex, DuplicatePointsStillExact) {
  RowMatrix p(40, 2);
  for (Eigen::Index i = 0; i < 40; ++i) p.row(i) << static_cast<double>(i % 3), 0.0;
  const auto index = AnnIndex::build(p, make_ids(40), {});
  const Vector q = Vector::Constant(2, 0.9);
  EXPECT_EQ(index.knn(q, 17, 40), brute_knn(index.points(), index.ids(), q, 17));
}

TEST(AnnIndex, IndexedPointComesFirstAtZero) {
  Rng rng(6);
  const RowMatrix p = random_points(rng, 500, 16);
  const auto index = AnnIndex::build(p, make_ids(500), {});
  const auto out = index.knn(index.points().row(123).transpose(), 3, 64);
  EXPECT_EQ(out[0].video_id, "v123");
  EXPECT_EQ(out[0].distance, 0.0);
}

TEST(AnnIndex, RecallGrowsWithBudget) {
  Rng rng(7);
  const RowMatrix p = random_points(rng, 3000, 32);
  const auto index = AnnIndex::build(p, make_ids(3000), {});
  double previous = 0.0;
  for (std::size_t budget : {1u, 8u, 64u, 400u}) {
    Rng queries(8);
    double total = 0.0;
    for (int i = 0; i < 30; ++i) {
      const Vector q = random_points(queries, 1, 32).row(0).transpose();
      total += recall(index.knn(q, 10, budget), brute_knn(index.points(), index.ids(), q, 10));
    }
    EXPECT_GE(total / 30.0, previous);
    previous = total / 30.0;
  }
  EXPECT_GT(previous, 0.9);
}

TEST(AnnIndex, RecallAtBudget800On10kPoints) {
  Rng rng(106);
  const RowMatrix p = random_points(rng, 10000, 256);
  const auto index = AnnIndex::build(p, make_ids(10000), {});
  double total = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Vector q = random_points(rng, 1, 256).row(0).transpose();
    total += recall(index.knn(q, 50, 800), brute_knn(index.points(), index.ids(), q, 50));
  }
  EXPECT_GE(total / 100.0, 0.9);
}

TEST(AnnIndex, ErrorsAreTyped) {
  Rng rng(9);
  const auto index = AnnIndex::build(random_points(rng, 10, 3), make_ids(10), {});
  EXPECT_EQ(code_of([&] { index.knn(Vector::Zero(3), 11, 5); }), ErrorCode::kParameter);
  EXPECT_EQ(code_of([&] { index.knn(Vector::Zero(3), 1, 0); }), ErrorCode::kParameter);
  EXPECT_EQ(code_of([&] { index.knn(Vector::Zero(4), 1, 5); }), ErrorCode::kDimension);
  EXPECT_EQ(code_of([&] { AnnIndex::build(random_points(rng, 3, 2), make_ids(2), {}); }), ErrorCode::kDimension);
}

TEST(AnnIndex, FileRoundTripAnswersIdentically) {
  Rng rng(10);
  AnnParams params;
  params.seed = 5;
  const auto index = AnnIndex::build(random_points(rng, 250, 20), make_ids(250), params);
  std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
  index.write(buf);
  nlohmann::json header;
  const auto back = AnnIndex::read(buf, &header);
  EXPECT_EQ(header["N"], 250);
  EXPECT_EQ(header["dim"], 20);
  EXPECT_EQ(header["num_trees"], 8);
  EXPECT_EQ(header["leaf_size"], 16);
  EXPECT_EQ(header["seed"], 5);
  EXPECT_TRUE(back.same_structure(index));
  for (int i = 0; i < 10; ++i) {
    const Vector q = random_points(rng, 1, 20).row(0).transpose();
    EXPECT_EQ(back.knn(q, 7, 30), index.knn(q, 7, 30));
  }
}

TEST(AnnIndex, CorruptFilesRejected) {
  Rng rng(11);
  std::ostringstream out(std::ios::binary);
  AnnIndex::build(random_points(rng, 30, 4), make_ids(30), {}).write(out);
  std::string bytes = out.str();
  std::istringstream cut(bytes.substr(0, bytes.size() - 2), std::ios::binary);
  EXPECT_EQ(code_of([&] { AnnIndex::read(cut); }), ErrorCode::kCorruption);
  bytes[0] = 'Z';
  std::istringstream bad(bytes, std::ios::binary);
  EXPECT_EQ(code_of([&] { AnnIndex::read(bad); }), ErrorCode::kFormat);
}

}  // namespace
