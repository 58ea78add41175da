#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "qgait/theory.hpp"

using namespace qgait;
using namespace qgait::theory;

TEST_SUITE("theory") {
  TEST_CASE("first moment closed form") {
    CHECK(expected_grad_mean_sq(1.0) == 1.0);
    CHECK(expected_grad_mean_sq(2.0) == 0.25);
    CHECK(expected_grad_mean_sq(10.0) == doctest::Approx(0.01).epsilon(1e-15));
    CHECK_THROWS_AS(expected_grad_mean_sq(0.5), ConfigError);
  }

  TEST_CASE("second moment closed form") {
    CHECK(expected_grad_sq_norm(1.0) == doctest::Approx(1.004957).epsilon(1e-6));
    CHECK(expected_grad_sq_norm(2.0) == doctest::Approx(0.264792).epsilon(1e-6));
    CHECK(std::abs(expected_grad_sq_norm(50.0) - 1.0 / 150.0) < 1e-6);
    CHECK_THROWS_AS(expected_grad_sq_norm(0.0), ConfigError);
  }

  TEST_CASE("quadrature oracle") {
    CHECK(std::abs(quadrature_oracle(3.0, Moment::First) - 1.0 / 9.0) < 1e-10);
    CHECK(std::abs(quadrature_oracle(3.0, Moment::Second) - expected_grad_sq_norm(3.0)) < 1e-10);
    for (double k : {1.0, 2.5, 7.0}) CHECK(std::abs(quadrature_mean_gradient(k) - 1.0 / k) < 1e-12);
    // the rule itself integrates polynomials of degree 2n-1 exactly
    auto rule = GaussLegendreRule::make(5);
    double s = 0.0;
    for (std::size_t i = 0; i < rule.nodes.size(); ++i) s += rule.weights[i] * std::pow(rule.nodes[i], 8);
    CHECK(s == doctest::Approx(2.0 / 9.0).epsilon(1e-14));
  }

  TEST_CASE("exported curves pass the verifier") {
    const auto path = (std::filesystem::temp_directory_path() / "qgait_theory_test.csv").string();
    export_theory_curves(1.0, 10.0, 50, path, "test");
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    CHECK(line == "# test");
    std::getline(is, line);
    CHECK(line.rfind("k,e2_grad,e_grad_sq", 0) == 0);
    int rows = 0;
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 50);
    auto check = verify_theory_csv(path);
    CHECK(check.ok);
    CHECK(check.rows == 50);

    // a corrupted value must be caught
    std::ifstream in(path);
    std::string all((std::istreambuf_iterator<char>(in)), {});
    const auto pos = all.find("\n1,1,");
    REQUIRE(pos != std::string::npos);
    all.replace(pos, 5, "\n1,0.9,");
    std::ofstream(path) << all;
    CHECK_FALSE(verify_theory_csv(path).ok);
    std::remove(path.c_str());
  }
}
