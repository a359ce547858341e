#pragma once

#include <Eigen/Core>
#include <vector>

namespace vap {

/// Row-major dense matrix; rows are time frames throughout the net.
template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One [frames x dims] matrix per speaker channel.
template <typename T>
using ChannelMatrices = std::vector<Matrix<T>>;

using Features = ChannelMatrices<float>;

/// Whether an optimized kernel may fan out over OpenMP threads.
enum class Exec { serial, parallel };

}  // namespace vap
