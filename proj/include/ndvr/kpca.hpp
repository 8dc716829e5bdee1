#pragma once

// Kernel PCA with an RBF kernel K(x, y) = exp(-||x - y||^2 / (2 sigma^2)).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "ndvr/binary_io.hpp"
#include "ndvr/error.hpp"
#include "ndvr/random.hpp"
#include "ndvr/types.hpp"

namespace ndvr {

inline constexpr char kKpcaMagic[] = "NDKP";
inline constexpr std::uint8_t kKpcaVersion = 1;
inline constexpr std::size_t kDefaultKpcaDim = 256;

struct KpcaModel {
  RowMatrix landmarks;     // T x input_dim
  double sigma = 1.0;
  Matrix alphas;           // T x d, column j = v_j / sqrt(lambda_j)
  Vector eigenvalues;      // d, descending, of the double-centered kernel matrix
  Vector kernel_row_means; // (1/T) sum_j K(i, j)
  double kernel_grand_mean = 0.0;

  Eigen::Index training_size() const { return landmarks.rows(); }
  Eigen::Index input_dim() const { return landmarks.cols(); }
  Eigen::Index out_dim() const { return alphas.cols(); }
};

struct KpcaOptions {
  double relative_tolerance = 1e-10;
  // When set, fewer than out_dim usable eigenvalues shrink the output instead
  // of throwing. Zero usable eigenvalues always throws.
  bool allow_shrink = false;
};

inline double rbf_kernel(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b, double sigma) {
  return std::exp(-(a - b).squaredNorm() / (2.0 * sigma * sigma));
}

inline Matrix rbf_kernel_matrix(const RowMatrix& points, double sigma) {
  const Eigen::Index n = points.rows();
  const Vector sq = points.rowwise().squaredNorm();
  Matrix gram = points * points.transpose();
  Matrix k(n, n);
  const double scale = -1.0 / (2.0 * sigma * sigma);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d2 = i == j ? 0.0 : std::max(0.0, sq[i] + sq[j] - 2.0 * gram(i, j));
      k(i, j) = std::exp(d2 * scale);
    }
  return k;
}

// K~ = K - 1K - K1 + 1K1 where 1 is the all-(1/T) matrix.
inline Matrix double_center(const Matrix& k) {
  const Vector row_means = k.rowwise().mean();
  const Vector col_means = k.colwise().mean().transpose();
  const double grand = k.mean();
  Matrix out = k;
  out.colwise() -= row_means;
  out.rowwise() -= col_means.transpose();
  out.array() += grand;
  return out;
}

// Median pairwise Euclidean distance; above 10^4 pairs a seeded uniform
// subsample of 10^4 pairs is used. A zero median (mostly duplicated rows)
// falls back to the median of the positive distances.
inline double median_sigma(const RowMatrix& sample, std::uint64_t seed = 0) {
  const auto n = static_cast<std::size_t>(sample.rows());
  if (n < 2) throw Error(ErrorCode::kDegenerateSample, "median_sigma needs at least two rows");
  constexpr std::size_t kMaxPairs = 10000;
  const std::size_t total_pairs = n * (n - 1) / 2;

  std::vector<double> dists;
  if (total_pairs <= kMaxPairs) {
    dists.reserve(total_pairs);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        dists.push_back((sample.row(static_cast<Eigen::Index>(i)) - sample.row(static_cast<Eigen::Index>(j))).norm());
  } else {
    Rng rng(seed);
    dists.reserve(kMaxPairs);
    while (dists.size() < kMaxPairs) {
      const auto i = rng.index(n);
      const auto j = rng.index(n);
      if (i == j) continue;
      dists.push_back((sample.row(static_cast<Eigen::Index>(i)) - sample.row(static_cast<Eigen::Index>(j))).norm());
    }
  }

  auto median_of = [](std::vector<double> v) {
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double upper = v[mid];
    if (v.size() % 2 == 1) return upper;
    const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
  };

  const double med = median_of(dists);
  if (med > 0.0) return med;
  std::vector<double> positive;
  for (double d : dists)
    if (d > 0.0) positive.push_back(d);
  if (positive.empty()) throw Error(ErrorCode::kDegenerateSample, "all sampled rows are identical");
  return median_of(std::move(positive));
}

inline KpcaModel kpca_fit(const RowMatrix& training, double sigma, Eigen::Index out_dim,
                          const KpcaOptions& options = {}) {
  const Eigen::Index t = training.rows();
  if (out_dim < 1) throw Error(ErrorCode::kParameter, "KPCA output dimension must be >= 1");
  if (t <= out_dim)
    throw Error(ErrorCode::kParameter, "KPCA needs more training rows (" + std::to_string(t) +
                                           ") than output dimensions (" + std::to_string(out_dim) + ")");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw Error(ErrorCode::kParameter, "KPCA sigma must be positive");

  const Matrix k = rbf_kernel_matrix(training, sigma);
  const Matrix centered = double_center(k);

  Eigen::SelfAdjointEigenSolver<Matrix> solver(centered);
  if (solver.info() != Eigen::Success) throw Error(ErrorCode::kRankDeficiency, "eigen-decomposition failed");
  // Eigen returns ascending order.
  const Vector values = solver.eigenvalues().reverse();
  const Matrix vectors = solver.eigenvectors().rowwise().reverse();

  const double top = values.size() > 0 ? values[0] : 0.0;
  const double cutoff = options.relative_tolerance * std::max(top, 0.0);
  Eigen::Index usable = 0;
  while (usable < values.size() && values[usable] > cutoff && values[usable] > 0.0) ++usable;
  if (usable == 0) throw Error(ErrorCode::kRankDeficiency, "centered kernel matrix has rank 0");
  if (usable < out_dim) {
    if (!options.allow_shrink)
      throw Error(ErrorCode::kRankDeficiency, "only " + std::to_string(usable) + " of " + std::to_string(out_dim) +
                                                  " requested components are above tolerance (achievable rank " +
                                                  std::to_string(usable) + ")");
    std::clog << "warning: KPCA output shrinks from " << out_dim << " to achievable rank " << usable << '\n';
    out_dim = usable;
  }

  KpcaModel model;
  model.landmarks = training;
  model.sigma = sigma;
  model.eigenvalues = values.head(out_dim);
  model.alphas.resize(t, out_dim);
  for (Eigen::Index j = 0; j < out_dim; ++j) {
    Vector v = vectors.col(j);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0.0) v = -v;
    model.alphas.col(j) = v / std::sqrt(values[j]);
  }
  model.kernel_row_means = k.rowwise().mean();
  model.kernel_grand_mean = k.mean();
  return model;
}

// Centered kernel values between x and every landmark.
inline Vector centered_kernel_vector(const KpcaModel& model, const Eigen::Ref<const Vector>& x) {
  if (x.size() != model.input_dim())
    throw Error(ErrorCode::kDimension, "KPCA input has " + std::to_string(x.size()) + " dims, model expects " +
                                           std::to_string(model.input_dim()));
  const Eigen::Index t = model.training_size();
  Vector kx(t);
  const double scale = -1.0 / (2.0 * model.sigma * model.sigma);
  for (Eigen::Index i = 0; i < t; ++i) kx[i] = std::exp((model.landmarks.row(i).transpose() - x).squaredNorm() * scale);
  const double mean = kx.mean();
  kx -= model.kernel_row_means;
  kx.array() += model.kernel_grand_mean - mean;
  return kx;
}

inline Vector kpca_transform(const KpcaModel& model, const Eigen::Ref<const Vector>& x) {
  return model.alphas.transpose() * centered_kernel_vector(model, x);
}

inline RowMatrix kpca_transform_rows(const KpcaModel& model, const RowMatrix& rows) {
  RowMatrix out(rows.rows(), model.out_dim());
  for (Eigen::Index i = 0; i < rows.rows(); ++i) out.row(i) = kpca_transform(model, rows.row(i).transpose()).transpose();
  return out;
}

// Training projections straight from the fit: K~ alpha.
inline RowMatrix kpca_training_projection(const KpcaModel& model) {
  const Matrix centered = double_center(rbf_kernel_matrix(model.landmarks, model.sigma));
  return centered * model.alphas;
}

inline void write_kpca_model(const KpcaModel& model, std::ostream& out, const nlohmann::json& extra = {}) {
  io::Writer w(out);
  w.magic(kKpcaMagic, kKpcaVersion);
  nlohmann::json header = extra.is_object() ? extra : nlohmann::json::object();
  header["T"] = model.training_size();
  header["d"] = model.out_dim();
  header["sigma"] = model.sigma;
  header["input_dim"] = model.input_dim();
  w.json_header(header);
  auto put = [&w](const auto& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) w.f32(static_cast<float>(m(i, j)));
  };
  put(model.landmarks);
  put(model.alphas);
  put(model.eigenvalues);
  put(model.kernel_row_means);
  w.f32(static_cast<float>(model.kernel_grand_mean));
}

inline KpcaModel read_kpca_model(std::istream& in, nlohmann::json* header_out = nullptr) {
  io::Reader r(in);
  r.expect_magic(kKpcaMagic, kKpcaVersion);
  const auto header = r.json_header();
  const auto t = io::header_field<Eigen::Index>(header, "T");
  const auto d = io::header_field<Eigen::Index>(header, "d");
  const auto input_dim = io::header_field<Eigen::Index>(header, "input_dim");
  if (t < 1 || d < 1 || input_dim < 1 || t > (1 << 20) || input_dim > (1 << 20))
    throw Error(ErrorCode::kCorruption, "implausible KPCA dimensions");

  KpcaModel model;
  model.sigma = io::header_field<double>(header, "sigma");
  auto get = [&r](auto& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.f32("KPCA payload");
  };
  model.landmarks.resize(t, input_dim);
  model.alphas.resize(t, d);
  model.eigenvalues.resize(d);
  model.kernel_row_means.resize(t);
  get(model.landmarks);
  get(model.alphas);
  get(model.eigenvalues);
  get(model.kernel_row_means);
  model.kernel_grand_mean = r.f32("KPCA grand mean");
  if (header_out) *header_out = header;
  return model;
}

inline void save_kpca_model(const KpcaModel& model, const std::filesystem::path& path, const nlohmann::json& extra = {}) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  write_kpca_model(model, out, extra);
}

inline KpcaModel load_kpca_model(const std::filesystem::path& path, nlohmann::json* header_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return read_kpca_model(in, header_out);
}

}  // namespace ndvr
