#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "qgait/checkpoint.hpp"
#include "qgait/intinfer.hpp"
#include "qgait/trainer.hpp"

using namespace qgait;

namespace {
struct Fixture {
  DatasetSplit data;
  Model model;
};

const Fixture& trained() {
  static const Fixture f = [] {
    DatasetConfig c;
    c.n_ids = 6;
    c.eval_ids = 2;
    c.seqs_per_id = 4;
    c.frames = 4;
    Fixture x{generate_dataset(c), Model()};
    ModelSpec s;
    s.n_classes = 4;
    x.model = Model(s, 3);
    x.model.quantize({4, 4, 0});
    TrainPlan p;
    p.stage1_iters = 10;
    p.lr = 1e-3;
    p.ids_per_batch = 4;
    p.samples_per_id = 2;
    p.train_frames = 2;
    stage1_train(x.model, x.data, p);
    return x;
  }();
  return f;
}
}  // namespace

TEST_SUITE("intinfer") {
  TEST_CASE("lowered weights are integers in range and dequantize to the fake-quant weights") {
    const auto& f = trained();
    auto lm = lower(f.model);
    REQUIRE(lm.layers.size() == 3);
    for (std::size_t i = 0; i < lm.layers.size(); ++i) {
      const auto& il = lm.layers[i];
      const Layer& src = i < 2 ? f.model.convs[i] : f.model.head;
      for (auto v : il.weight) {
        REQUIRE(v >= il.w_r1);
        REQUIRE(v <= il.w_r2);
      }
      CHECK(il.w_r1 == -8);
      CHECK(il.w_r2 == 7);
      auto deq = dequantize_weight(il);
      auto ref = fake_quantize(src.weight, src.weight_q.config());
      for (std::size_t j = 0; j < deq.numel(); ++j) REQUIRE(deq[j] == ref[j]);
    }
  }

  TEST_CASE("a 100-weight layer at 4 bits lowers into [-8, 7]") {
    ModelSpec s;
    s.channels = {4};
    s.in_height = 8;
    s.in_width = 8;
    s.parts = 4;
    s.dim = 2;
    s.n_classes = 2;
    Model m(s, 9);
    m.quantize({4, 4, 0});
    m.forward(Tensor::full({2, 1, 1, 8, 8}, 1.0));
    auto lm = lower(m);
    CHECK(lm.layers[0].weight.size() == 36);
    CHECK(lm.layers[1].weight.size() == 32);
    for (const auto& l : lm.layers)
      for (auto v : l.weight) CHECK((v >= -8 && v <= 7));
  }

  TEST_CASE("full-precision or uncalibrated models do not lower") {
    ModelSpec s;
    Model fp(s, 1);
    CHECK_THROWS_AS(lower(fp), LoweringError);
    Model q(s, 1);
    q.quantize({4, 4, 0});
    CHECK_THROWS_AS(lower(q), LoweringError);
  }

  TEST_CASE("integer forward agrees with fake quantization") {
    auto f = trained();
    auto lm = lower(f.model);
    f.model.set_training(false);
    auto S = make_batch(f.data, {f.data.probe[0], f.data.probe[3], f.data.gallery[1]});
    Tensor ref;
    {
      NoGradGuard g;
      ref = f.model.embed(S);
    }
    auto out = int_forward(lm, S);
    REQUIRE(out.shape() == ref.shape());
    double scale = 0.0, diff = 0.0;
    for (std::size_t i = 0; i < ref.numel(); ++i) {
      scale = std::max(scale, std::abs(ref[i]));
      diff = std::max(diff, std::abs(ref[i] - out[i]));
    }
    CHECK(diff <= 1e-4 * scale);
    auto grey = Tensor::full({1, 4, 1, 32, 24}, 0.5);
    CHECK_THROWS_AS(int_forward(lm, grey), UsageError);
  }

  TEST_CASE("zero input with zero biases gives zero embeddings") {
    auto f = trained();
    for (auto& c : f.model.convs) c.bias = Tensor::zeros(c.bias.shape(), true);
    auto lm = lower(f.model);
    auto out = int_forward(lm, Tensor::zeros({1, 2, 1, 32, 24}));
    for (double v : out.data()) CHECK(v == 0.0);
  }

  TEST_CASE("timing report") {
    const auto& f = trained();
    auto lm = lower(f.model);
    auto S = make_batch(f.data, {f.data.probe[0]});
    auto rows = timing_report(lm, S, 10);
    REQUIRE(rows.size() == lm.layers.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      CHECK(rows[i].layer == lm.layers[i].name);
      CHECK(rows[i].median_us_per_sample >= 0.0);
      LayerCostSpec c = lm.layers[i].cost;
      if (lm.layers[i].kind == Layer::Kind::Conv2d) c.N = 4;
      CHECK(rows[i].bitops == c.bitops());
    }
    CHECK_THROWS_AS(timing_report(lm, S, 3), UsageError);
  }

  TEST_CASE("lowered container round trip is bit-exact") {
    const auto& f = trained();
    auto lm = lower(f.model);
    const auto path = (std::filesystem::temp_directory_path() / "qgait_lowered_test.qgkt").string();
    save_lowered(path, lm, {{"seed", 1}});
    auto back = load_lowered(path);
    REQUIRE(back.layers.size() == lm.layers.size());
    for (std::size_t i = 0; i < lm.layers.size(); ++i) {
      CHECK(back.layers[i].weight == lm.layers[i].weight);
      CHECK(back.layers[i].bias == lm.layers[i].bias);
      CHECK(back.layers[i].v_w == lm.layers[i].v_w);
      CHECK(back.layers[i].v_a == lm.layers[i].v_a);
    }
    auto S = make_batch(f.data, {f.data.probe[1]});
    auto a = int_forward(lm, S), b = int_forward(back, S);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
    std::filesystem::remove(path);
  }
}
