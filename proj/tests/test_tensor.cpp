#include <cmath>

#include "doctest.h"
#include "fd.hpp"
#include "qgait/tensor.hpp"

using namespace qgait;
using qgait::test::max_grad_rel_err;
using qgait::test::random_tensor;

TEST_SUITE("tensor") {
  TEST_CASE("matmul examples") {
    Tensor I({2, 2}, {1, 0, 0, 1});
    Tensor A({2, 2}, {1, 2, 3, 4});
    auto C = matmul(I, A);
    for (std::size_t i = 0; i < 4; ++i) CHECK(C[i] == A[i]);
    auto D = matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4}));
    CHECK(D.shape() == Shape{1, 1});
    CHECK(D.item() == 11.0);
    CHECK_THROWS_AS(matmul(A, Tensor({3, 1}, {1, 2, 3})), DimensionError);
  }

  TEST_CASE("grad of sum(AB) wrt A is ones * B^T") {
    auto A = random_tensor({3, 4}, 1);
    auto B = random_tensor({4, 2}, 2);
    backward(sum(matmul(A, B)));
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        CHECK(A.grad()[i * 4 + j] == doctest::Approx(B[j * 2] + B[j * 2 + 1]).epsilon(1e-14));
      }
    }
    A.zero_grad();
    B.zero_grad();
    CHECK(max_grad_rel_err([&] { return sum(matmul(A, B)); }, {A, B}, 1e-5) < 1e-6);
  }

  TEST_CASE("conv2d examples") {
    Tensor x = Tensor::full({1, 1, 2, 2}, 1.0);
    Tensor w = Tensor::full({1, 1, 2, 2}, 1.0);
    auto y = conv2d(x, w, Tensor(), 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == 4.0);
    auto z = conv2d(Tensor::zeros({1, 2, 5, 5}), random_tensor({3, 2, 3, 3}, 3, -1, 1, false), Tensor(), 1, 1);
    for (double v : z.data()) CHECK(v == 0.0);
  }

  TEST_CASE("conv2d matches a nested-loop oracle") {
    for (std::size_t stride : {1u, 2u}) {
      for (std::size_t pad : {0u, 1u}) {
        auto x = random_tensor({2, 2, 5, 5}, 11, -1, 1, false);
        auto w = random_tensor({3, 2, 3, 3}, 12, -1, 1, false);
        auto b = random_tensor({3}, 13, -1, 1, false);
        auto y = conv2d(x, w, b, stride, pad);
        const std::size_t Ho = (5 + 2 * pad - 3) / stride + 1;
        REQUIRE(y.shape() == Shape{2, 3, Ho, Ho});
        double worst = 0.0;
        for (std::size_t n = 0; n < 2; ++n)
          for (std::size_t o = 0; o < 3; ++o)
            for (std::size_t i = 0; i < Ho; ++i)
              for (std::size_t j = 0; j < Ho; ++j) {
                double s = b[o];
                for (std::size_t c = 0; c < 2; ++c)
                  for (std::size_t u = 0; u < 3; ++u)
                    for (std::size_t v = 0; v < 3; ++v) {
                      const long yy = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                      const long xx = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                      if (yy < 0 || xx < 0 || yy >= 5 || xx >= 5) continue;
                      s += x[((n * 2 + c) * 5 + yy) * 5 + xx] * w[((o * 2 + c) * 3 + u) * 3 + v];
                    }
                worst = std::max(worst, std::abs(s - y[((n * 3 + o) * Ho + i) * Ho + j]));
              }
        CHECK(worst < 1e-12);
      }
    }
  }

  TEST_CASE("conv2d gradients") {
    auto x = random_tensor({2, 3, 6, 5}, 21);
    auto w = random_tensor({4, 3, 3, 3}, 22);
    auto b = random_tensor({4}, 23);
    auto loss = [&] { return sum(mul(conv2d(x, w, b, 1, 1), conv2d(x, w, b, 1, 1))); };
    CHECK(max_grad_rel_err(loss, {x, w, b}) < 1e-5);
    auto loss2 = [&] { return sum(relu(conv2d(x, w, b, 2, 0))); };
    CHECK(max_grad_rel_err(loss2, {x, w, b}) < 1e-6);
  }

  TEST_CASE("elementwise examples") {
    auto r = relu(Tensor({2}, {-1.0, 2.0}));
    CHECK(r[0] == 0.0);
    CHECK(r[1] == 2.0);
    Tensor v({3}, {1, 2, 3}, true);
    auto m = mean(v);
    CHECK(m.item() == 2.0);
    backward(m);
    for (double g : v.grad()) CHECK(g == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }

  TEST_CASE("batch norm eval with unit statistics is the identity") {
    BatchNormState st(3);
    auto x = random_tensor({4, 3}, 31, -2, 2, false);
    auto y = batch_norm(x, Tensor::full({3}, 1.0), Tensor::zeros({3}), st, false);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-5));
  }

  TEST_CASE("batch norm training gradients") {
    BatchNormState st(3);
    auto x = random_tensor({5, 3}, 32);
    auto g = random_tensor({3}, 33, 0.5, 1.5);
    auto b = random_tensor({3}, 34);
    auto w = random_tensor({5, 3}, 35, -1, 1, false);
    auto loss = [&] {
      BatchNormState s = st;
      return sum(mul(batch_norm(x, g, b, s, true), w));
    };
    CHECK(max_grad_rel_err(loss, {x, g, b}) < 1e-5);
    CHECK_THROWS_AS(batch_norm(random_tensor({1, 3}, 1), g, b, st, true), NumericError);
  }

  TEST_CASE("pooling gradients and tie rule") {
    auto x = random_tensor({2, 3, 4, 6}, 41);
    CHECK(max_grad_rel_err([&] { return sum(mul(max_pool2d(x, 2), max_pool2d(x, 2))); }, {x}) < 1e-6);
    CHECK(max_grad_rel_err([&] { return sum(mul(max_over_axis(x, 1), max_over_axis(x, 1))); }, {x}) < 1e-6);
    Tensor t({1, 3}, {5.0, 5.0, 1.0}, true);
    backward(sum(max_over_axis(t, 1)));
    CHECK(t.grad()[0] == 1.0);
    CHECK(t.grad()[1] == 0.0);
    CHECK(t.grad()[2] == 0.0);
  }

  TEST_CASE("custom_unary decouples forward and backward") {
    Tensor x({3}, {-1.5, 0.4, 2.6}, true);
    auto r = custom_unary(x, [](double v) { return std::round(v); }, [](double g, double) { return g; });
    CHECK(r[0] == -2.0);
    CHECK(r[2] == 3.0);
    backward(sum(r));
    for (double g : x.grad()) CHECK(g == 1.0);
    x.zero_grad();
    auto id = custom_unary(x, [](double v) { return v; }, [](double g, double) { return g; });
    for (std::size_t i = 0; i < 3; ++i) CHECK(id[i] == x[i]);
    backward(sum(id));
    for (double g : x.grad()) CHECK(g == 1.0);
    x.zero_grad();
    auto sq = custom_unary(x, [](double v) { return v * v; }, [](double g, double) { return 3.0 * g; });
    backward(sum(sq));
    for (double g : x.grad()) CHECK(g == 3.0);
  }

  TEST_CASE("chain rule and fan-out") {
    Tensor x = Tensor::scalar(1.0, true);
    auto y = mul(scale(x, 2.0), scale(x, 2.0));
    backward(y);
    CHECK(x.grad()[0] == 8.0);
    Tensor z = Tensor::scalar(0.3, true);
    backward(add(z, z));
    CHECK(z.grad()[0] == 2.0);
  }

  TEST_CASE("strict backward contract") {
    Tensor x = Tensor::scalar(1.0, true);
    auto y = scale(x, 3.0);
    backward(y);
    CHECK_THROWS_AS(backward(y), UsageError);
    auto y2 = scale(x, 3.0);
    CHECK_THROWS_AS(backward(y2), UsageError);  // x.grad still populated
    x.zero_grad();
    backward(y2);
    CHECK(x.grad()[0] == 3.0);
    CHECK_THROWS_AS(backward(Tensor({2}, {1, 2}, true)), UsageError);  // not a scalar
  }

  TEST_CASE("no-grad guard records nothing") {
    Tensor x = Tensor::scalar(2.0, true);
    Tensor y;
    {
      NoGradGuard g;
      CHECK_FALSE(grad_enabled());
      y = scale(x, 2.0);
    }
    CHECK(grad_enabled());
    CHECK(y.is_leaf());
    CHECK_FALSE(y.requires_grad());
  }

  TEST_CASE("construction and access errors") {
    CHECK_THROWS_AS(Tensor({2, 0}, {}), DimensionError);
    CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), DimensionError);
    Tensor x = Tensor::scalar(1.0, true);
    auto y = scale(x, 2.0);
    CHECK_THROWS_AS(y.mutable_data(), UsageError);
    CHECK_THROWS_AS(Tensor({1}, {std::nan("")}).check_finite("t"), NumericError);
    CHECK_THROWS_AS(reshape(Tensor::zeros({2, 3}), {4}), DimensionError);
    CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
  }
}
