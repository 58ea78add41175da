#pragma once

// Central-difference gradient oracle shared by the unit tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "qgait/tensor.hpp"

namespace qgait::test {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(g);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Worst relative error of analytic vs central-difference gradients over all
/// entries of `leaves`. `f` must rebuild the graph from the current values.
inline double max_grad_rel_err(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double h = 1e-6,
                               double floor = 1e-6) {
  for (auto& l : leaves) l.zero_grad();
  backward(f());
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) {
    analytic.emplace_back(l.grad().begin(), l.grad().end());
    if (analytic.back().empty()) analytic.back().assign(l.numel(), 0.0);
  }
  double worst = 0.0;
  NoGradGuard guard;
  for (std::size_t p = 0; p < leaves.size(); ++p) {
    auto d = leaves[p].mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double x0 = d[i];
      d[i] = x0 + h;
      const double fp = f().item();
      d[i] = x0 - h;
      const double fm = f().item();
      d[i] = x0;
      const double num = (fp - fm) / (2.0 * h);
      const double a = analytic[p][i];
      const double err = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
      worst = std::max(worst, err);
    }
  }
  for (auto& l : leaves) l.zero_grad();
  return worst;
}

}  // namespace qgait::test
