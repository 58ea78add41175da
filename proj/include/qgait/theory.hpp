#pragma once

// Gradient statistics of the soft quantizer.
//
// Inside one rounding cell the non-floor part of theta_k is, in the variable
// z = k d, G(z) = tanh(z) / (2 tanh(k/2)) on [-k/2, k/2), with
// grad G(z) = coth(k/2) sech^2(z) / 2. For z uniform on that interval:
//
//   E^2[grad G]   = 1 / k^2                          (first moment, squared)
//   E[|grad G|^2] = (cosh k + 2) / (3 k sinh k)      (second moment)
//
// The first moment measures expected descent per step in the smooth-convex
// descent bound, the second the variance penalty. Both are checked here
// against composite Gauss-Legendre quadrature of the defining integrals.

#include <cmath>
#include <string>
#include <vector>

#include "qgait/error.hpp"

namespace qgait::theory {

template <class Scalar>
Scalar expected_grad_mean_sq(Scalar k) {
  if (!(k >= Scalar(1))) throw ConfigError("theory: k must be >= 1");
  return Scalar(1) / (k * k);
}

template <class Scalar>
Scalar expected_grad_sq_norm(Scalar k) {
  using std::cosh;
  using std::sinh;
  if (!(k >= Scalar(1))) throw ConfigError("theory: k must be >= 1");
  return (cosh(k) + Scalar(2)) / (Scalar(3) * k * sinh(k));
}

/// grad G(z) = coth(k/2) sech^2(z) / 2.
template <class Scalar>
Scalar grad_g(Scalar z, Scalar k) {
  using std::cosh;
  using std::tanh;
  const Scalar c = cosh(z);
  return Scalar(0.5) / tanh(k / Scalar(2)) / (c * c);
}

/// Gauss-Legendre nodes and weights on [-1, 1].
struct GaussLegendreRule {
  std::vector<double> nodes;
  std::vector<double> weights;

  static GaussLegendreRule make(int order);
};

/// Composite Gauss-Legendre integral of f over [a, b].
template <class F>
double integrate(F&& f, double a, double b, int panels, const GaussLegendreRule& rule) {
  const double h = (b - a) / panels;
  double total = 0.0;
  for (int p = 0; p < panels; ++p) {
    const double mid = a + (p + 0.5) * h;
    double s = 0.0;
    for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
      s += rule.weights[i] * f(mid + 0.5 * h * rule.nodes[i]);
    }
    total += 0.5 * h * s;
  }
  return total;
}

enum class Moment { First, Second };

/// Numerical E[grad G] before squaring.
double quadrature_mean_gradient(double k, int panels = 256, int order = 8);

/// Numerical E^2[grad G] (First) or E[|grad G|^2] (Second).
double quadrature_oracle(double k, Moment moment, int panels = 256, int order = 8);

struct CurvePoint {
  double k;
  double first_moment_sq;
  double second_moment;
};

std::vector<CurvePoint> theory_curve(double k_min, double k_max, int n_points);

/// Writes k, e2_grad, e_grad_sq, x, theta_k_at_{1,2,5,10} and round_x, one
/// row per sample. `comment`, when nonempty, is emitted as a leading "# " line.
void export_theory_curves(double k_min, double k_max, int n_points, const std::string& path,
                          const std::string& comment = "");

struct CurveCheck {
  bool ok = true;
  std::size_t rows = 0;
  std::vector<std::string> failures;
};

/// Re-reads an exported CSV and checks every theory invariant on it.
CurveCheck verify_theory_csv(const std::string& path);

}  // namespace qgait::theory
