#include <cmath>

#include "doctest.h"
#include "fd.hpp"
#include "qgait/quant.hpp"

using namespace qgait;
using qgait::test::random_tensor;

namespace {
QuantConfig u8(double v) { return QuantConfig::uniform(8, false, v); }
}  // namespace

TEST_SUITE("quant") {
  TEST_CASE("clamp ranges") {
    auto s4 = QuantConfig::uniform(4, true);
    CHECK(s4.r1 == -8);
    CHECK(s4.r2 == 7);
    auto a8 = QuantConfig::uniform(8, false);
    CHECK(a8.r1 == 0);
    CHECK(a8.r2 == 255);
    CHECK_THROWS_AS(QuantConfig::uniform(1, true), ConfigError);
    CHECK_THROWS_AS(QuantConfig::uniform(8, false, 0.0).validate(), ConfigError);
    CHECK(QuantConfig::full_precision().effective_bits() == 32);
  }

  TEST_CASE("fake quantize examples") {
    CHECK(fake_quantize(Tensor({1}, {0.0}), u8(0.37)).item() == 0.0);
    CHECK(fake_quantize(Tensor({1}, {0.26}), u8(0.1)).item() == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(fake_quantize(Tensor({1}, {30.0}), u8(0.1)).item() == doctest::Approx(25.5).epsilon(1e-15));
    CHECK(round_half_away(2.5) == 3.0);
    CHECK(round_half_away(-2.5) == -3.0);
    CHECK(round_half_away(-0.4) == 0.0);
    CHECK_THROWS_AS(fake_quantize(Tensor({1}, {std::nan("")}), u8(0.1)), NumericError);
  }

  TEST_CASE("straight-through backward") {
    auto cfg = u8(1.0);
    auto g = Tensor::full({3}, 1.0);
    auto r = ste_backward(g, Tensor({3}, {2.5, 300.0, -1.0}), cfg);
    CHECK(r[0] == 1.0);
    CHECK(r[1] == 0.0);
    CHECK(r[2] == 0.0);
    auto z = ste_backward(Tensor::zeros({3}), Tensor({3}, {2.5, 3.0, 4.0}), cfg);
    for (double v : z.data()) CHECK(v == 0.0);
    // the autodiff path applies the same rule
    Tensor x({4}, {0.3, 1.7, 255.5, -0.2}, true);
    backward(sum(fake_quantize(x, cfg)));
    CHECK(x.grad()[0] == 1.0);
    CHECK(x.grad()[1] == 1.0);
    CHECK(x.grad()[2] == 0.0);
    CHECK(x.grad()[3] == 0.0);
  }

  TEST_CASE("soft quantizer values") {
    for (double k : {1.0, 2.0, 5.0, 20.0}) {
      for (int n = -3; n <= 3; ++n) {
        CHECK(soft_theta(static_cast<double>(n), k) == doctest::Approx(n).epsilon(1e-15));
        CHECK(soft_theta(n + 0.5, k) == doctest::Approx(n + 0.5).epsilon(1e-15));
      }
    }
    CHECK(soft_theta(0.75, 5.0) == doctest::Approx(0.929897).epsilon(1e-6));
    CHECK(std::abs(soft_theta(0.75, 5.0) - (0.5 * std::tanh(1.25) / std::tanh(2.5) + 0.5)) < 1e-15);
    CHECK_THROWS_AS(soft_theta(0.5, 0.5), ConfigError);
  }

  TEST_CASE("soft quantizer derivative") {
    CHECK(soft_theta_derivative(0.5, 5.0) == doctest::Approx(2.53393).epsilon(1e-5));
    CHECK(soft_theta_derivative(1.0, 5.0) == doctest::Approx(0.067386).epsilon(1e-5));
    const double h = 1e-6;
    for (double x : {0.1, 0.5, 0.77, 1.3, -2.2}) {
      const double num = (soft_theta(x + h, 5.0) - soft_theta(x - h, 5.0)) / (2 * h);
      CHECK(std::abs(num - soft_theta_derivative(x, 5.0)) / soft_theta_derivative(x, 5.0) < 1e-7);
    }
    auto cfg = u8(1.0);
    cfg.grad_mode = GradMode::SOFT;
    cfg.k = 5.0;
    auto r = soft_backward(Tensor::full({2}, 1.0), Tensor({2}, {0.5, 400.0}), cfg);
    CHECK(r[0] == doctest::Approx(2.53393).epsilon(1e-5));
    CHECK(r[1] == 0.0);
  }

  TEST_CASE("step gradient contributions") {
    auto cfg = u8(1.0);
    cfg.grad_scale = 1.0;
    CHECK(step_grad(Tensor({1}, {1.0}), Tensor({1}, {2.6}), cfg) == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(step_grad(Tensor({1}, {1.0}), Tensor({1}, {300.0}), cfg) == 255.0);
    CHECK(step_grad(Tensor({3}, {1.0, 1.0, 1.0}), Tensor::zeros({3}), cfg) == 0.0);
    auto s = QuantConfig::uniform(4, true, 1.0);
    s.grad_scale = 1.0;
    CHECK(step_grad(Tensor({1}, {1.0}), Tensor({1}, {-20.0}), s) == -8.0);
    auto d = u8(1.0);
    CHECK(step_grad_scale(d, 100) == doctest::Approx(1.0 / std::sqrt(100.0 * 255.0)));
    // autodiff path matches the free function
    Tensor step = Tensor::scalar(0.1, true);
    auto x = random_tensor({20}, 5, 0.0, 3.0, false);
    auto g = random_tensor({20}, 6, -1.0, 1.0, false);
    backward(sum(mul(fake_quantize(x, step, u8(0.1)), g)));
    CHECK(step.grad()[0] == doctest::Approx(step_grad(g, x, u8(0.1))).epsilon(1e-12));
  }

  TEST_CASE("quantizer initialization and clamping") {
    Quantizer q(QuantConfig::uniform(4, false));
    CHECK_FALSE(q.initialized());
    auto x = Tensor({4}, {1.0, 2.0, 3.0, 2.0});
    q(x);
    CHECK(q.initialized());
    CHECK(q.step_value() == doctest::Approx(2.0 * 2.0 / std::sqrt(15.0)));
    Quantizer z(QuantConfig::uniform(4, false));
    z.initialize_from(Tensor::zeros({3}));
    CHECK(z.step_value() == 1.0);
    q.step().mutable_data()[0] = -1.0;
    q.clamp_step();
    CHECK(q.step_value() == kMinStep);
    Quantizer copy = q;
    copy.step().mutable_data()[0] = 0.5;
    CHECK(q.step_value() == kMinStep);
  }

  TEST_CASE("layer with full-precision sentinel equals the plain layer") {
    Layer l;
    l.kind = Layer::Kind::Conv2d;
    l.weight = random_tensor({3, 2, 3, 3}, 7);
    l.bias = random_tensor({3}, 8);
    l.padding = 1;
    auto x = random_tensor({1, 2, 5, 5}, 9, 0, 1, false);
    auto ref = conv2d(x, l.weight, l.bias, 1, 1);
    attach_quantizer(l, QuantConfig::full_precision(), QuantConfig::full_precision());
    auto y = l.forward(x);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == ref[i]);
    CHECK_THROWS_AS(attach_quantizer(l, QuantConfig::full_precision(), QuantConfig::full_precision()), UsageError);
  }

  TEST_CASE("w8 weights on the grid are lossless") {
    Layer l;
    l.kind = Layer::Kind::Linear;
    const double v = 0.125;
    std::vector<double> w;
    for (int i = -6; i < 6; ++i) w.push_back(i * v);
    l.weight = Tensor({4, 3}, w, true);
    attach_quantizer(l, QuantConfig::uniform(8, true, v), QuantConfig::full_precision());
    l.weight_q.mark_initialized(v);
    auto x = random_tensor({2, 4}, 10, -1, 1, false);
    auto y = l.forward(x);
    auto ref = matmul(x, l.weight);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == ref[i]);
  }

  TEST_CASE("w4/a4 linear output matches an elementwise quantization oracle") {
    Layer l;
    l.kind = Layer::Kind::Linear;
    l.weight = random_tensor({6, 5}, 12);
    attach_quantizer(l, QuantConfig::uniform(4, true), QuantConfig::uniform(4, false));
    auto x = random_tensor({3, 6}, 13, 0, 2, false);
    auto y = l.forward(x);
    const double vw = l.weight_q.step_value(), va = l.act_q.step_value();
    double bound = 0.0, worst = 0.0;
    for (std::size_t b = 0; b < 3; ++b) {
      for (std::size_t o = 0; o < 5; ++o) {
        double s = 0.0, exact = 0.0;
        for (std::size_t i = 0; i < 6; ++i) {
          const double xq = std::clamp(round_half_away(x[b * 6 + i] / va), 0.0, 15.0) * va;
          const double wq = std::clamp(round_half_away(l.weight[i * 5 + o] / vw), -8.0, 7.0) * vw;
          s += xq * wq;
          exact += x[b * 6 + i] * l.weight[i * 5 + o];
        }
        worst = std::max(worst, std::abs(s - y[b * 5 + o]));
        bound = std::max(bound, std::abs(exact - s));
      }
    }
    CHECK(worst < 1e-12);
    CHECK(bound > 0.0);  // quantization actually changed something
  }

  TEST_CASE("part matmul gradients") {
    auto x = random_tensor({3, 2, 4}, 14);
    auto w = random_tensor({2, 4, 5}, 15);
    CHECK(test::max_grad_rel_err([&] { return sum(mul(part_matmul(x, w), part_matmul(x, w))); }, {x, w}) < 1e-6);
  }
}
