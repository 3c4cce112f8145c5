#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace bm2 {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Row-per-sample batch (n x d).
using Samples = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Precondition or configuration violation. Maps to CLI exit code 2.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite state, divergence or a failed numerical routine. Maps to CLI exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace bm2
