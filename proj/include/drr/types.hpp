#pragma once

#include <Eigen/Dense>

namespace drr {

using Scalar = double;
using Vector = Eigen::VectorXd;
using Array = Eigen::ArrayXd;
using Matrix = Eigen::MatrixXd;

// Flat buffers are laid out row-major; maps below give them matrix views.
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using VecMap = Eigen::Map<Vector>;
using ConstVecMap = Eigen::Map<const Vector>;

}  // namespace drr
