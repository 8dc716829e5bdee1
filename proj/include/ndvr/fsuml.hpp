#pragma once

// Frame-specific unsupervised metric learning.
//
// For reduced frame descriptors q and g a similarity matrix between their
// coordinates, W(i,j) = exp(-|q_i - g_j|^2 / (k sigma^2)), is smoothed once by
// its row-stochastic kernel P = D^-1 W and self-normalized so that the
// diagonal is one: M* = Delta^-1 W P with Delta = diag(W P). The frame
// distance is (q - g)^T M* (q - g).
//
// M* is neither symmetric nor PSD, so that signed form goes negative on real
// descriptors. MetricForm::kMagnitude evaluates |q - g|^T M* |q - g| instead,
// which is never below ||q - g||^2 (unit diagonal, non-negative entries).

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ndvr/error.hpp"
#include "ndvr/types.hpp"

namespace ndvr {

enum class MetricForm { kSigned, kMagnitude };

inline const char* metric_form_name(MetricForm f) { return f == MetricForm::kSigned ? "signed" : "magnitude"; }

inline MetricForm parse_metric_form(const std::string& text) {
  if (text == "signed") return MetricForm::kSigned;
  if (text == "magnitude") return MetricForm::kMagnitude;
  throw Error(ErrorCode::kParameter, "metric form must be 'signed' or 'magnitude', got '" + text + "'");
}

struct SsoParams {
  double k = 2.0;
  std::optional<double> sigma;  // empty: median of the pair's coordinate distances
  int t = 1;
  MetricForm form = MetricForm::kSigned;
};

struct MetricMatrix {
  Matrix m_star;
};

inline constexpr double kNegativeDistanceSlack = 1e-9;

namespace detail {

inline void require_same_size(const Eigen::Ref<const Vector>& q, const Eigen::Ref<const Vector>& g) {
  if (q.size() != g.size() || q.size() == 0)
    throw Error(ErrorCode::kDimension, "descriptor sizes differ: " + std::to_string(q.size()) + " vs " +
                                           std::to_string(g.size()));
}

inline void require_params(const SsoParams& params) {
  if (!(params.k > 0.0) || !std::isfinite(params.k)) throw Error(ErrorCode::kParameter, "SSO k must be positive");
  if (params.sigma && (!(*params.sigma > 0.0) || !std::isfinite(*params.sigma)))
    throw Error(ErrorCode::kParameter, "SSO sigma must be positive");
  if (params.t != 1) throw Error(ErrorCode::kParameter, "SSO smoothing is defined for t = 1 only");
}

inline double median_entry(const Matrix& dist) {
  std::vector<double> values(dist.data(), dist.data() + dist.size());
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  double med = values[mid];
  if (values.size() % 2 == 0)
    med = 0.5 * (med + *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid)));
  return med;
}

}  // namespace detail

// sigma actually used for a distance matrix: the fixed value, or the median
// entry. A zero median falls back to the median positive entry, then to 1.
inline double resolve_sigma(const Matrix& dist, const SsoParams& params) {
  if (params.sigma) return *params.sigma;
  const double med = detail::median_entry(dist);
  if (med > 0.0) return med;
  std::vector<double> values;
  for (Eigen::Index i = 0; i < dist.size(); ++i)
    if (dist.data()[i] > 0.0) values.push_back(dist.data()[i]);
  if (values.empty()) return 1.0;
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  return values[mid];
}

// out(i, j) = |q_i - g_j|
inline Matrix coordinate_distance_matrix(const Eigen::Ref<const Vector>& q, const Eigen::Ref<const Vector>& g) {
  detail::require_same_size(q, g);
  const Eigen::Index n = q.size();
  return (q.replicate(1, n).array() - g.transpose().replicate(n, 1).array()).abs().matrix();
}

inline Matrix similarity_matrix(const Matrix& dist, const SsoParams& params) {
  detail::require_params(params);
  if (!dist.allFinite()) throw Error(ErrorCode::kValidation, "distance matrix has non-finite entries");
  if ((dist.array() < 0.0).any()) throw Error(ErrorCode::kValidation, "distance matrix has negative entries");
  const double sigma = resolve_sigma(dist, params);
  return (-dist.array().square() / (params.k * sigma * sigma)).exp().matrix();
}

// P = D^-1 W, row-stochastic.
inline Matrix transition_matrix(const Matrix& w) {
  if (w.rows() != w.cols() || w.rows() == 0) throw Error(ErrorCode::kDimension, "W must be square");
  const Vector row_sums = w.rowwise().sum();
  if ((row_sums.array() == 0.0).any() || !row_sums.allFinite())
    throw Error(ErrorCode::kSingularity, "W has a zero or non-finite row sum");
  return row_sums.cwiseInverse().asDiagonal() * w;
}

inline MetricMatrix sso_smooth(const Matrix& w, const SsoParams& params = {}) {
  detail::require_params(params);
  const Matrix p = transition_matrix(w);
  const Matrix smoothed = w * p;
  const Vector diag = smoothed.diagonal();
  if ((diag.array() == 0.0).any()) throw Error(ErrorCode::kSingularity, "smoothed W has a zero diagonal entry");
  // Row i divided by its own diagonal entry; x / x == 1 exactly.
  return MetricMatrix{(smoothed.array().colwise() / diag.array()).matrix()};
}

inline double clamp_distance(double value) {
  if (value >= 0.0) return value;
  if (value > -kNegativeDistanceSlack) return 0.0;
  throw Error(ErrorCode::kValidation, "metric distance is negative (" + std::to_string(value) + ")");
}

inline double metric_distance(const Eigen::Ref<const Vector>& q, const Eigen::Ref<const Vector>& g,
                              const MetricMatrix& m, MetricForm form = MetricForm::kSigned) {
  detail::require_same_size(q, g);
  if (m.m_star.rows() != q.size() || m.m_star.cols() != q.size())
    throw Error(ErrorCode::kDimension, "metric matrix does not match descriptor size");
  Vector delta = q - g;
  if (form == MetricForm::kMagnitude) delta = delta.cwiseAbs();
  return clamp_distance(delta.dot(m.m_star * delta));
}

namespace detail {

// For sorted a and b and a radius t >= 0, slides the window of b values
// within t of each successive a value: b[lo, hi) are exactly those with
// |a_i - b_j| <= t.
struct PairWindow {
  const std::vector<double>& b;
  double t;
  std::size_t lo = 0, hi = 0;

  void advance(double x) {
    const std::size_t n = b.size();
    while (lo < n && b[lo] < x && x - b[lo] > t) ++lo;
    if (hi < lo) hi = lo;
    while (hi < n && (b[hi] <= x || b[hi] - x <= t)) ++hi;
  }
};

}  // namespace detail

// Exact median of |q_i - g_j| over all n^2 pairs, without materializing them:
// bisection on the value with O(n) sliding-window counts over sorted copies,
// then selection among the few values left between the final two radii.
inline double median_abs_difference(const Eigen::Ref<const Vector>& q, const Eigen::Ref<const Vector>& g) {
  detail::require_same_size(q, g);
  std::vector<double> a(q.data(), q.data() + q.size());
  std::vector<double> b(g.data(), g.data() + g.size());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const std::size_t n = a.size();

  auto count_le = [&](double t) {
    detail::PairWindow w{b, t};
    std::size_t total = 0;
    for (double x : a) {
      w.advance(x);
      total += w.hi - w.lo;
    }
    return total;
  };

  const std::size_t zeros = count_le(0.0);
  const double range = std::max(std::abs(a.back() - b.front()), std::abs(b.back() - a.front()));

  // k-th smallest (0-based) pair distance.
  auto kth = [&](std::size_t k) {
    if (k < zeros) return 0.0;
    double low = 0.0, high = range;
    std::size_t below = zeros, upto = n * n;  // counts at low and high
    for (int iter = 0; iter < 200 && upto - below > 256; ++iter) {
      const double mid = 0.5 * (low + high);
      if (!(mid > low && mid < high)) break;
      const std::size_t c = count_le(mid);
      if (c >= k + 1) {
        high = mid;
        upto = c;
      } else {
        low = mid;
        below = c;
      }
    }
    // Values in (low, high]: the part of each high window outside its low window.
    std::vector<double> bracket;
    bracket.reserve(upto - below);
    detail::PairWindow inner{b, low}, outer{b, high};
    for (double x : a) {
      inner.advance(x);
      outer.advance(x);
      for (std::size_t j = outer.lo; j < inner.lo; ++j) bracket.push_back(std::abs(x - b[j]));
      for (std::size_t j = std::max(inner.hi, outer.lo); j < outer.hi; ++j) bracket.push_back(std::abs(x - b[j]));
    }
    const std::size_t pos = k - below;
    std::nth_element(bracket.begin(), bracket.begin() + static_cast<std::ptrdiff_t>(pos), bracket.end());
    return bracket[pos];
  };

  const std::size_t total = n * n;
  const std::size_t mid = total / 2;
  if (total % 2 == 1) return kth(mid);
  return 0.5 * (kth(mid - 1) + kth(mid));
}

struct FramePairDistance {
  double forward;   // d(q -> g)
  double backward;  // d(g -> q)
};

namespace detail {

inline double log_sum_exp(const Eigen::Ref<const Vector>& v) {
  const double top = v.maxCoeff();
  if (!std::isfinite(top)) return top;
  return top + std::log((v.array() - top).exp().sum());
}

// x^T M* x without forming M*, from E = exp(log W) (entries may have
// underflowed to zero) and the exact log W:
//   (W1 x)_i = (E (P x))_i,   W1(i,i) = sum_k E(i,k) P(k,i),   P = D^-1 E.
// M* is unchanged by scaling a row of W, so a row whose sum underflows is
// recomputed shifted to a maximum of one; a row whose W1(i,i) is lost even
// then is redone in the log domain.
template <class EMat, class LogMat>
double sso_quadratic(const EMat& e, const LogMat& logw, const Vector& x) {
  const Eigen::Index n = e.rows();
  constexpr double kWeakRow = 1e-100;  // row sums below this are recomputed shifted
  constexpr double kLost = 1e-150;     // W1(i,i) below this fraction of its row is unreliable

  const Vector row_sums = e.rowwise().sum();
  Matrix p = row_sums.cwiseInverse().asDiagonal() * e;
  Vector log_norm = row_sums.array().log();  // log of the factor dividing exp(log W) in each row of P
  std::vector<char> weak(static_cast<std::size_t>(n), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (row_sums[i] > kWeakRow) continue;
    weak[static_cast<std::size_t>(i)] = 1;
    const double top = logw.row(i).maxCoeff();
    const Eigen::RowVectorXd shifted = (logw.row(i).array() - top).exp().matrix();
    const double sum = shifted.sum();
    p.row(i) = shifted / sum;
    log_norm[i] = top + std::log(sum);
  }
  const Vector px = p * x;
  const Vector w1x = e * px;
  const Matrix p_t = p.transpose();
  const Vector diag = (e.array() * p_t.array()).rowwise().sum();

  double total = 0.0;
  Matrix log_p;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (x[i] == 0.0) continue;
    if (!weak[static_cast<std::size_t>(i)] && diag[i] > kLost * row_sums[i]) {
      total += x[i] * w1x[i] / diag[i];
      continue;
    }
    const double top = logw.row(i).maxCoeff();
    const Eigen::RowVectorXd shifted = (logw.row(i).array() - top).exp().matrix();
    const Eigen::RowVectorXd w1_row = shifted * p;
    if (w1_row[i] > kLost * shifted.sum()) {
      total += x[i] * w1_row.dot(x) / w1_row[i];
      continue;
    }
    if (log_p.size() == 0) log_p = logw.colwise() - log_norm;
    // log W1(i, j) up to the row constant, for every j.
    const Vector log_wi = logw.row(i).transpose().array() - top;
    Vector log_row(n);
    for (Eigen::Index j = 0; j < n; ++j) log_row[j] = log_sum_exp(log_wi + log_p.col(j));
    // M*(i, j) can exceed the double range here; zero terms must not become inf * 0.
    for (Eigen::Index j = 0; j < n; ++j)
      if (x[j] != 0.0) total += x[i] * std::exp(log_row[j] - log_row[i]) * x[j];
  }
  if (std::isnan(total)) throw Error(ErrorCode::kSingularity, "quadratic form is undefined (inf - inf)");
  // Only the magnitude form can get here with +inf; it saturates so rankings stay ordered.
  return std::min(total, std::numeric_limits<double>::max());
}

// x^T M* x from E and precomputed pieces when nothing underflows: sums are the
// row sums of E, diag = W1's diagonal. nullopt means take the careful route.
template <class EMat>
std::optional<double> sso_quadratic_fast(const EMat& e, const Vector& sums, const Vector& diag, const Vector& x) {
  constexpr double kWeakRow = 1e-100;
  constexpr double kLost = 1e-150;
  if (!(sums.minCoeff() > kWeakRow)) return std::nullopt;
  const Vector w1x = e * (e * x).cwiseQuotient(sums);
  double total = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (x[i] == 0.0) continue;
    if (!(diag[i] > kLost * sums[i])) return std::nullopt;
    total += x[i] * w1x[i] / diag[i];
  }
  if (std::isnan(total)) throw Error(ErrorCode::kSingularity, "quadratic form is undefined (inf - inf)");
  return std::min(total, std::numeric_limits<double>::max());
}

// Everything a frame pair needs: log W(i,j) = scale * (q_i - g_j)^2.
struct PairTerms {
  Vector q, g;
  double scale = 0.0;  // multiplies (q_i - g_j)^2, negative
  Vector delta;        // difference in the requested form

  Matrix log_w() const {
    Matrix logw(q.size(), g.size());
    for (Eigen::Index j = 0; j < g.size(); ++j) logw.col(j) = (q.array() - g[j]).square() * scale;
    return logw;
  }
  void w(Matrix& e) const {
    e.resize(q.size(), g.size());
    for (Eigen::Index j = 0; j < g.size(); ++j) e.col(j) = ((q.array() - g[j]).square() * scale).exp();
  }
};

inline PairTerms frame_pair_terms(const Eigen::Ref<const Vector>& q, const Eigen::Ref<const Vector>& g,
                                  const SsoParams& params) {
  require_same_size(q, g);
  require_params(params);
  if (!q.allFinite() || !g.allFinite()) throw Error(ErrorCode::kValidation, "descriptor has non-finite entries");
  double sigma = params.sigma ? *params.sigma : median_abs_difference(q, g);
  if (!(sigma > 0.0)) sigma = resolve_sigma(coordinate_distance_matrix(q, g), params);
  PairTerms t{q, g, -1.0 / (params.k * sigma * sigma), q - g};
  if (params.form == MetricForm::kMagnitude) t.delta = t.delta.cwiseAbs();
  return t;
}

}  // namespace detail

// Same value as metric_distance(q, g, sso_smooth(similarity_matrix(
// coordinate_distance_matrix(q, g))), form), in O(n^2), and still defined
// where W underflows.
inline double frame_distance(const Eigen::Ref<const Vector>& q, const Eigen::Ref<const Vector>& g,
                             const SsoParams& params = {}) {
  const auto t = detail::frame_pair_terms(q, g, params);
  // Scratch reused across calls: fresh n x n buffers cost more in page faults than the arithmetic.
  thread_local Matrix e;
  t.w(e);
  const Vector sums = e.rowwise().sum();
  const Vector diag = (e.array() * e.transpose().array()).matrix() * sums.cwiseInverse();
  if (const auto v = detail::sso_quadratic_fast(e, sums, diag, t.delta)) return clamp_distance(*v);
  return clamp_distance(detail::sso_quadratic(e, t.log_w(), t.delta));
}

// Both directions from one W: swapping q and g transposes W and leaves sigma
// unchanged. E o E^T serves both diagonals.
inline FramePairDistance frame_distance_both(const Eigen::Ref<const Vector>& q, const Eigen::Ref<const Vector>& g,
                                             const SsoParams& params = {}) {
  const auto t = detail::frame_pair_terms(q, g, params);
  thread_local Matrix e, h;
  t.w(e);
  h.resize(e.rows(), e.cols());
  h = e.array() * e.transpose().array();
  const Vector rows = e.rowwise().sum();
  const Vector cols = e.colwise().sum().transpose();
  auto fwd = detail::sso_quadratic_fast(e, rows, h * rows.cwiseInverse(), t.delta);
  auto bwd = detail::sso_quadratic_fast(e.transpose(), cols, h * cols.cwiseInverse(), t.delta);
  if (!fwd || !bwd) {
    const Matrix logw = t.log_w();
    if (!fwd) fwd = detail::sso_quadratic(e, logw, t.delta);
    if (!bwd) bwd = detail::sso_quadratic(e.transpose(), logw.transpose(), t.delta);
  }
  return {clamp_distance(*fwd), clamp_distance(*bwd)};
}

// Reduced keyframe descriptors of one video at one level, one per row.
struct VideoSignature {
  std::string video_id;
  RowMatrix frames;

  Vector centroid() const { return frames.colwise().mean().transpose(); }
};

// Mean over query keyframes of the closest gallery keyframe.
inline double video_distance(const RowMatrix& query, const RowMatrix& gallery, const SsoParams& params = {}) {
  if (query.rows() == 0 || gallery.rows() == 0)
    throw Error(ErrorCode::kEmptySignature, "video_distance needs non-empty signatures");
  if (query.cols() != gallery.cols()) throw Error(ErrorCode::kDimension, "signature dimensions differ");
  double total = 0.0;
  for (Eigen::Index i = 0; i < query.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < gallery.rows(); ++j)
      best = std::min(best, frame_distance(query.row(i).transpose(), gallery.row(j).transpose(), params));
    total += best;
  }
  return total / static_cast<double>(query.rows());
}

struct VideoPairDistance {
  double forward;   // query -> gallery
  double backward;  // gallery -> query
};

inline VideoPairDistance video_distance_both(const RowMatrix& query, const RowMatrix& gallery,
                                             const SsoParams& params = {}) {
  if (query.rows() == 0 || gallery.rows() == 0)
    throw Error(ErrorCode::kEmptySignature, "video_distance needs non-empty signatures");
  if (query.cols() != gallery.cols()) throw Error(ErrorCode::kDimension, "signature dimensions differ");
  Matrix forward(query.rows(), gallery.rows());
  Matrix backward(query.rows(), gallery.rows());
  for (Eigen::Index i = 0; i < query.rows(); ++i)
    for (Eigen::Index j = 0; j < gallery.rows(); ++j) {
      const auto d = frame_distance_both(query.row(i).transpose(), gallery.row(j).transpose(), params);
      forward(i, j) = d.forward;
      backward(i, j) = d.backward;
    }
  return {forward.rowwise().minCoeff().mean(), backward.colwise().minCoeff().mean()};
}

inline double video_distance(const VideoSignature& query, const VideoSignature& gallery, const SsoParams& params = {}) {
  return video_distance(query.frames, gallery.frames, params);
}

}  // namespace ndvr
