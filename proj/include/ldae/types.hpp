// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

namespace ldae {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// One token per row. A token grid for an image holds (H/p)*(W/p) rows.
template <typename Scalar>
using Tokens = MatrixX<Scalar>;

using Index = Eigen::Index;

} // namespace ldae
