#include <cmath>
#include <functional>
#include <sstream>

#include <gtest/gtest.h>

#include "ndvr/kpca.hpp"

namespace {

using namespace ndvr;

RowMatrix random_rows(Rng& rng, Eigen::Index n, Eigen::Index dim) {
  RowMatrix m(n, dim);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// Kernel and centering written out entry by entry.
Matrix centered_kernel_oracle(const RowMatrix& x, double sigma) {
  const Eigen::Index t = x.rows();
  Matrix k(t, t);
  for (Eigen::Index i = 0; i < t; ++i)
    for (Eigen::Index j = 0; j < t; ++j) {
      double d2 = 0.0;
      for (Eigen::Index c = 0; c < x.cols(); ++c) d2 += (x(i, c) - x(j, c)) * (x(i, c) - x(j, c));
      k(i, j) = std::exp(-d2 / (2.0 * sigma * sigma));
    }
  Matrix out(t, t);
  const double grand = k.sum() / static_cast<double>(t * t);
  for (Eigen::Index i = 0; i < t; ++i)
    for (Eigen::Index j = 0; j < t; ++j)
      out(i, j) = k(i, j) - k.row(i).sum() / static_cast<double>(t) - k.col(j).sum() / static_cast<double>(t) + grand;
  return out;
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

TEST(KpcaFit, IdenticalPointsAreRankDeficient) {
  const RowMatrix x = RowMatrix::Constant(6, 3, 0.25);
  EXPECT_EQ(code_of([&] { kpca_fit(x, 1.0, 2); }), ErrorCode::kRankDeficiency);
}

TEST(KpcaFit, TriangleCenteredRowSumsVanish) {
  RowMatrix x(3, 2);
  x << 0, 0, 1, 0, 0, 2;
  const auto model = kpca_fit(x, 1.0, 2);
  EXPECT_EQ(model.out_dim(), 2);
  const Matrix c = double_center(rbf_kernel_matrix(x, 1.0));
  EXPECT_LT(c.rowwise().sum().cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT(c.colwise().sum().cwiseAbs().maxCoeff(), 1e-10);
}

TEST(KpcaFit, FourThousandDimsDownTo256) {
  Rng rng(1);
  RowMatrix x = random_rows(rng, 500, 4096);
  x.rowwise().normalize();
  const auto model = kpca_fit(x, median_sigma(x), 256);
  EXPECT_EQ(model.out_dim(), 256);
  EXPECT_EQ(kpca_transform(model, x.row(17).transpose()).size(), 256);
}

TEST(KpcaFit, CenteredKernelMatchesOracle) {
  Rng rng(2);
  const RowMatrix x = random_rows(rng, 40, 5);
  EXPECT_LT((double_center(rbf_kernel_matrix(x, 1.7)) - centered_kernel_oracle(x, 1.7)).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(KpcaFit, EigenvaluesPositiveDescending) {
  Rng rng(3);
  const auto model = kpca_fit(random_rows(rng, 60, 8), 2.0, 20);
  for (Eigen::Index j = 0; j < model.out_dim(); ++j) EXPECT_GT(model.eigenvalues[j], 0.0);
  for (Eigen::Index j = 1; j < model.out_dim(); ++j) EXPECT_LE(model.eigenvalues[j], model.eigenvalues[j - 1]);
}

TEST(KpcaFit, LargestEntryOfEachEigenvectorIsPositive) {
  Rng rng(4);
  const auto model = kpca_fit(random_rows(rng, 30, 4), 1.5, 10);
  for (Eigen::Index j = 0; j < model.out_dim(); ++j) {
    Eigen::Index arg = 0;
    model.alphas.col(j).cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(model.alphas(arg, j), 0.0);
  }
}

TEST(KpcaFit, Deterministic) {
  Rng rng(5);
  const RowMatrix x = random_rows(rng, 50, 6);
  const auto a = kpca_fit(x, 1.0, 12), b = kpca_fit(x, 1.0, 12);
  EXPECT_EQ(a.alphas, b.alphas);
  EXPECT_EQ(a.eigenvalues, b.eigenvalues);
}

TEST(KpcaFit, PreconditionsChecked) {
  Rng rng(6);
  const RowMatrix x = random_rows(rng, 5, 3);
  EXPECT_EQ(code_of([&] { kpca_fit(x, 1.0, 5); }), ErrorCode::kParameter);
  EXPECT_EQ(code_of([&] { kpca_fit(x, 1.0, 0); }), ErrorCode::kParameter);
  EXPECT_EQ(code_of([&] { kpca_fit(x, 0.0, 2); }), ErrorCode::kParameter);
}

TEST(KpcaFit, RankDeficiencyNamesAchievableRankOrShrinks) {
  // Three distinct points repeated: the centered kernel has rank 2.
  RowMatrix x(9, 2);
  for (int i = 0; i < 9; ++i) x.row(i) << (i % 3 == 1 ? 1.0 : 0.0), (i % 3 == 2 ? 1.0 : 0.0);
  try {
    kpca_fit(x, 1.0, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kRankDeficiency);
    EXPECT_NE(std::string(e.what()).find("achievable rank 2"), std::string::npos) << e.what();
  }
  KpcaOptions options;
  options.allow_shrink = true;
  EXPECT_EQ(kpca_fit(x, 1.0, 4, options).out_dim(), 2);
}

TEST(KpcaTransform, LandmarkReproducesFittedProjection) {
  Rng rng(7);
  const RowMatrix x = random_rows(rng, 80, 10);
  const auto model = kpca_fit(x, median_sigma(x), 30);
  const RowMatrix fitted = kpca_training_projection(model);
  const RowMatrix transformed = kpca_transform_rows(model, x);
  EXPECT_LT((fitted - transformed).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(KpcaTransform, ComponentsUncorrelated) {
  Rng rng(8);
  const RowMatrix x = random_rows(rng, 120, 6);
  const auto model = kpca_fit(x, median_sigma(x), 25);
  const RowMatrix y = kpca_training_projection(model);
  const RowMatrix centered = y.rowwise() - y.colwise().mean();
  Matrix cov = centered.transpose() * centered / static_cast<double>(y.rows());
  // Correlations, so the bound does not depend on each component's variance.
  const Vector sd = cov.diagonal().cwiseSqrt();
  cov = sd.cwiseInverse().asDiagonal() * cov * sd.cwiseInverse().asDiagonal();
  cov.diagonal().setZero();
  EXPECT_LT(cov.cwiseAbs().maxCoeff(), 1e-6);
}

TEST(KpcaTransform, ProjectedDistancesMatchTopDReconstruction) {
  Rng rng(9);
  const RowMatrix x = random_rows(rng, 150, 7);
  const double sigma = median_sigma(x);
  const Eigen::Index d = 40;
  const auto model = kpca_fit(x, sigma, d);
  const RowMatrix y = kpca_training_projection(model);

  // Independent decomposition: SVD of the symmetric PSD centered kernel.
  const Matrix c = centered_kernel_oracle(x, sigma);
  Eigen::JacobiSVD<Matrix> svd(c, Eigen::ComputeFullU);
  const Matrix u = svd.matrixU().leftCols(d);
  const Matrix top = u * svd.singularValues().head(d).asDiagonal() * u.transpose();
  double worst = 0.0;
  for (Eigen::Index a = 0; a < x.rows(); ++a)
    for (Eigen::Index b = a + 1; b < x.rows(); ++b) {
      const double expected = top(a, a) + top(b, b) - 2.0 * top(a, b);
      worst = std::max(worst, std::abs((y.row(a) - y.row(b)).squaredNorm() - expected));
    }
  EXPECT_LT(worst, 1e-8);
}

TEST(KpcaTransform, FarPointApproachesKernelMeanProjection) {
  Rng rng(10);
  const RowMatrix x = random_rows(rng, 40, 3);
  const double sigma = 0.05;
  const auto model = kpca_fit(x, sigma, 10);
  // k(x, .) = 0 leaves only the centering terms: grand mean minus row means.
  Vector kbar(x.rows());
  Matrix k(x.rows(), x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.rows(); ++j) k(i, j) = rbf_kernel(x.row(i).transpose(), x.row(j).transpose(), sigma);
  for (Eigen::Index i = 0; i < x.rows(); ++i) kbar[i] = k.mean() - k.row(i).mean();
  const Vector limit = model.alphas.transpose() * kbar;
  const Vector far = Vector::Constant(3, 50.0);
  EXPECT_LT((kpca_transform(model, far) - limit).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(KpcaTransform, DimensionMismatchThrows) {
  Rng rng(11);
  const auto model = kpca_fit(random_rows(rng, 10, 4), 1.0, 3);
  EXPECT_EQ(code_of([&] { kpca_transform(model, Vector::Zero(5)); }), ErrorCode::kDimension);
}

TEST(KpcaModelFile, RoundTripsAtFloatPrecision) {
  Rng rng(12);
  const RowMatrix x = random_rows(rng, 20, 4);
  const auto model = kpca_fit(x, 1.3, 6);
  std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
  write_kpca_model(model, buf, {{"level", "fc"}});
  nlohmann::json header;
  const auto back = read_kpca_model(buf, &header);
  EXPECT_EQ(header["T"], 20);
  EXPECT_EQ(header["d"], 6);
  EXPECT_EQ(header["input_dim"], 4);
  EXPECT_EQ(header["level"], "fc");
  EXPECT_LT((back.alphas - model.alphas).cwiseAbs().maxCoeff(), 1e-5 * model.alphas.cwiseAbs().maxCoeff());
  EXPECT_LT((back.landmarks - model.landmarks).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_EQ(back.sigma, 1.3);
}

TEST(KpcaModelFile, TruncatedAndBadMagic) {
  Rng rng(13);
  std::ostringstream out(std::ios::binary);
  write_kpca_model(kpca_fit(random_rows(rng, 8, 2), 1.0, 2), out);
  std::string bytes = out.str();
  std::istringstream cut(bytes.substr(0, bytes.size() - 3), std::ios::binary);
  EXPECT_EQ(code_of([&] { read_kpca_model(cut); }), ErrorCode::kCorruption);
  bytes[1] = 'X';
  std::istringstream bad(bytes, std::ios::binary);
  EXPECT_EQ(code_of([&] { read_kpca_model(bad); }), ErrorCode::kFormat);
}

TEST(MedianSigma, TwoPoints) {
  RowMatrix x(2, 2);
  x << 0, 0, 0, 2;
  EXPECT_EQ(median_sigma(x), 2.0);
}

TEST(MedianSigma, CollinearThree) {
  RowMatrix x(3, 1);
  x << 0, 1, 2;
  EXPECT_EQ(median_sigma(x), 1.0);
}

TEST(MedianSigma, UnitNormBound) {
  Rng rng(14);
  RowMatrix x = random_rows(rng, 300, 16);
  x.rowwise().normalize();
  const double s = median_sigma(x, 3);  // 44850 pairs: the subsampled branch
  EXPECT_GT(s, 0.0);
  EXPECT_LE(s, 2.0);
  EXPECT_EQ(s, median_sigma(x, 3));
}

TEST(MedianSigma, IdenticalRowsAreDegenerate) {
  EXPECT_EQ(code_of([] { median_sigma(RowMatrix::Ones(4, 3)); }), ErrorCode::kDegenerateSample);
  EXPECT_EQ(code_of([] { median_sigma(RowMatrix::Ones(1, 3)); }), ErrorCode::kDegenerateSample);
}

}  // namespace
