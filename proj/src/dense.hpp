#pragma once

// Eigen's vectorized kernels peel leading elements by address, so a product
// evaluated on raw std::vector storage can round differently depending on
// where the heap placed the buffer. Products here run on Eigen-owned
// (aligned) operands and results, which makes them a function of values and
// shapes only.

#include <Eigen/Dense>

namespace qgait::detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class A, class B>
RowMatrix product(const A& a, const B& b) {
  const RowMatrix x = a;
  const RowMatrix y = b;
  RowMatrix r(x.rows(), y.cols());
  r.noalias() = x * y;
  return r;
}

}  // namespace qgait::detail
