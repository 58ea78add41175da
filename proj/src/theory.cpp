#include "qgait/theory.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "qgait/quant.hpp"

namespace qgait::theory {

namespace {

constexpr double kThetaK[] = {1.0, 2.0, 5.0, 10.0};
constexpr double kXMin = -2.0;
constexpr double kXMax = 2.0;

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

}  // namespace

GaussLegendreRule GaussLegendreRule::make(int order) {
  if (order < 1) throw ConfigError("Gauss-Legendre order must be >= 1");
  GaussLegendreRule rule;
  rule.nodes.resize(static_cast<std::size_t>(order));
  rule.weights.resize(static_cast<std::size_t>(order));
  const int half = (order + 1) / 2;
  for (int i = 0; i < half; ++i) {
    // Chebyshev-like initial guess, refined by Newton on P_n.
    double x = std::cos(std::numbers::pi * (i + 0.75) / (order + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = x;
      for (int j = 2; j <= order; ++j) {
        const double p2 = ((2.0 * j - 1.0) * x * p1 - (j - 1.0) * p0) / j;
        p0 = p1;
        p1 = p2;
      }
      if (order == 1) p0 = 1.0;
      dp = order * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    const auto a = static_cast<std::size_t>(i);
    const auto b = static_cast<std::size_t>(order - 1 - i);
    rule.nodes[a] = -x;
    rule.nodes[b] = x;
    rule.weights[a] = rule.weights[b] = 2.0 / ((1.0 - x * x) * dp * dp);
  }
  return rule;
}

double quadrature_mean_gradient(double k, int panels, int order) {
  if (!(k >= 1.0)) throw ConfigError("theory: k must be >= 1");
  const auto rule = GaussLegendreRule::make(order);
  return integrate([k](double z) { return grad_g(z, k) / k; }, -k / 2, k / 2, panels, rule);
}

double quadrature_oracle(double k, Moment moment, int panels, int order) {
  if (!(k >= 1.0)) throw ConfigError("theory: k must be >= 1");
  if (moment == Moment::First) {
    const double m = quadrature_mean_gradient(k, panels, order);
    return m * m;
  }
  const auto rule = GaussLegendreRule::make(order);
  return integrate(
      [k](double z) {
        const double g = grad_g(z, k);
        return g * g / k;
      },
      -k / 2, k / 2, panels, rule);
}

std::vector<CurvePoint> theory_curve(double k_min, double k_max, int n_points) {
  if (!(k_min >= 1.0) || !(k_max > k_min)) throw ConfigError("theory: need 1 <= kmin < kmax");
  if (n_points < 2) throw ConfigError("theory: need at least 2 points");
  std::vector<CurvePoint> pts;
  pts.reserve(static_cast<std::size_t>(n_points));
  for (int i = 0; i < n_points; ++i) {
    const double k = k_min + (k_max - k_min) * i / (n_points - 1);
    pts.push_back({k, expected_grad_mean_sq(k), expected_grad_sq_norm(k)});
  }
  return pts;
}

void export_theory_curves(double k_min, double k_max, int n_points, const std::string& path,
                          const std::string& comment) {
  const auto pts = theory_curve(k_min, k_max, n_points);
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << std::setprecision(17);
  if (!comment.empty()) os << "# " << comment << '\n';
  os << "k,e2_grad,e_grad_sq,x,theta_k_at_1,theta_k_at_2,theta_k_at_5,theta_k_at_10,round_x\n";
  for (int i = 0; i < n_points; ++i) {
    const auto& p = pts[static_cast<std::size_t>(i)];
    const double x = kXMin + (kXMax - kXMin) * i / (n_points - 1);
    os << p.k << ',' << p.first_moment_sq << ',' << p.second_moment << ',' << x;
    for (double k : kThetaK) os << ',' << soft_theta(x, k);
    os << ',' << round_half_away(x) << '\n';
  }
  if (!os) throw IoError("write failed for " + path);
}

CurveCheck verify_theory_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  CurveCheck check;
  auto fail = [&](std::string msg) {
    check.ok = false;
    check.failures.push_back(std::move(msg));
  };
  std::string line;
  bool header_seen = false;
  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;
      if (line.rfind("k,e2_grad,e_grad_sq,x,theta_k_at_1", 0) != 0) fail("unexpected header: " + line);
      continue;
    }
    std::vector<double> row;
    for (const auto& cell : split(line)) row.push_back(std::stod(cell));
    if (row.size() != 9) {
      fail("row with " + std::to_string(row.size()) + " columns");
      continue;
    }
    rows.push_back(std::move(row));
  }
  if (!header_seen) fail("missing header");
  check.rows = rows.size();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const double k = r[0];
    if (std::abs(r[1] - quadrature_oracle(k, Moment::First)) >= 1e-8) fail("first moment off at k=" + std::to_string(k));
    if (std::abs(r[2] - quadrature_oracle(k, Moment::Second)) >= 1e-8) fail("second moment off at k=" + std::to_string(k));
    if (!(r[2] > 0.0)) fail("second moment not positive at k=" + std::to_string(k));
    if (k > 1.0 && !(r[1] < 1.0)) fail("first moment not below 1 at k=" + std::to_string(k));
    if (i > 0 && !(r[1] < rows[i - 1][1])) fail("first moment not strictly decreasing at row " + std::to_string(i));
    if (i > 0 && !(r[2] < rows[i - 1][2])) fail("second moment not strictly decreasing at row " + std::to_string(i));
    for (std::size_t j = 0; j < 4; ++j) {
      if (std::abs(r[4 + j] - soft_theta(r[3], kThetaK[j])) > 1e-12) fail("theta column mismatch at row " + std::to_string(i));
    }
  }
  return check;
}

}  // namespace qgait::theory
