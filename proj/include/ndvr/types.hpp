#pragma once

#include <Eigen/Dense>

namespace ndvr {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
// One sample per row.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Level { kFc, kConv };

inline const char* level_name(Level level) { return level == Level::kFc ? "fc" : "conv"; }

}  // namespace ndvr
