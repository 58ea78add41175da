#include <cmath>
#include <limits>

#include "doctest.h"
#include "qgait/losses.hpp"
#include "qgait/trainer.hpp"

using namespace qgait;

namespace {
const DatasetSplit& tiny_data() {
  static const DatasetSplit d = [] {
    DatasetConfig c;
    c.n_ids = 6;
    c.eval_ids = 2;
    c.seqs_per_id = 4;
    c.frames = 4;
    c.height = 16;
    c.width = 12;
    return generate_dataset(c);
  }();
  return d;
}

ModelSpec tiny_spec() {
  ModelSpec s;
  s.in_height = 16;
  s.in_width = 12;
  s.channels = {4, 8};
  s.parts = 2;
  s.dim = 8;
  s.n_classes = 4;
  return s;
}

TrainPlan tiny_plan() {
  TrainPlan p;
  p.stage1_iters = 6;
  p.finetune_iters = 6;
  p.lr = 1e-3;
  p.ids_per_batch = 3;
  p.samples_per_id = 2;
  p.train_frames = 2;
  return p;
}
}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("k schedules") {
    KSchedule fixed{KMode::FIXED, 1.0, 0.0, 1, 5.0};
    CHECK(k_at_iter(fixed, 0) == 5.0);
    CHECK(k_at_iter(fixed, 12345) == 5.0);
    KSchedule grow2{KMode::GROW, 1.0, 0.2, 100, 3.0};
    CHECK(k_at_iter(grow2, 0) == 1.0);
    CHECK(k_at_iter(grow2, 500) == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(k_at_iter(grow2, 2000) == 3.0);
    KSchedule grow3{KMode::GROW, 1.0, 1.0, 1000, 5.0};
    CHECK(k_at_iter(grow3, 999) == 1.0);
    CHECK(k_at_iter(grow3, 1000) == 2.0);
    KSchedule bad{KMode::GROW, 0.5, 0.2, 100, 3.0};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }

  TEST_CASE("zero iterations leave the model untouched") {
    Model m(tiny_spec(), 1);
    Model before = m;
    auto p = tiny_plan();
    p.stage1_iters = 0;
    auto r = stage1_train(m, tiny_data(), p);
    CHECK(r.trace.empty());
    auto a = m.parameters(), b = before.parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
      for (std::size_t j = 0; j < a[i]->numel(); ++j) CHECK((*a[i])[j] == (*b[i])[j]);
    }
  }

  TEST_CASE("identical seed and plan give identical traces") {
    Model a(tiny_spec(), 2), b(tiny_spec(), 2);
    a.quantize({4, 4, 0});
    b.quantize({4, 4, 0});
    auto ra = stage1_train(a, tiny_data(), tiny_plan());
    auto rb = stage1_train(b, tiny_data(), tiny_plan());
    REQUIRE(ra.trace.size() == 6);
    for (std::size_t i = 0; i < ra.trace.size(); ++i) CHECK(ra.trace[i].loss == rb.trace[i].loss);
    CHECK(ra.steps == 6);
  }

  TEST_CASE("fine-tuning follows the k schedule") {
    Model m(tiny_spec(), 3);
    m.quantize({4, 4, 0});
    stage1_train(m, tiny_data(), tiny_plan());
    KSchedule s{KMode::GROW, 1.0, 0.5, 2, 2.0};
    auto r = stage2_finetune(m, tiny_data(), tiny_plan(), s);
    for (const auto& row : r.trace) {
      CHECK(row.grad_mode == GradMode::SOFT);
      CHECK(row.k == k_at_iter(s, row.iteration));
    }
    for (auto* q : m.quantizers()) {
      if (q->active()) CHECK(q->config().k == k_at_iter(s, 5));
    }
    KSchedule flat{KMode::FIXED, 1.0, 0.0, 1, 1.0};
    CHECK(stage2_finetune(m, tiny_data(), tiny_plan(), flat).trace.size() == 6);
  }

  TEST_CASE("calibration with lambda 0 is plain fine-tuning") {
    Model base(tiny_spec(), 4);
    base.quantize({4, 4, 0});
    stage1_train(base, tiny_data(), tiny_plan());
    Model teacher(tiny_spec(), 5);
    teacher.quantize({8, 8, 0});
    stage1_train(teacher, tiny_data(), tiny_plan());
    auto plan = tiny_plan();
    plan.lambda_idc = 0.0;
    KSchedule s;
    Model a = base, b = base;
    auto ra = stage2_finetune(a, tiny_data(), plan, s);
    CalibrateOptions co;
    co.schedule = s;
    co.student_mode = GradMode::SOFT;
    auto rb = calibrate_with_idc(b, teacher, tiny_data(), plan, co);
    for (std::size_t i = 0; i < ra.trace.size(); ++i) CHECK(ra.trace[i].loss == rb.trace[i].loss);
  }

  TEST_CASE("a student equal to its teacher starts with zero distillation") {
    Model t(tiny_spec(), 6);
    t.quantize({8, 8, 0});
    stage1_train(t, tiny_data(), tiny_plan());
    Model s = t;
    CalibrateOptions co;
    co.student_mode = GradMode::STE;
    auto r = calibrate_with_idc(s, t, tiny_data(), tiny_plan(), co);
    CHECK(std::abs(r.trace[0].distill_loss) < 1e-12);
    Model low(tiny_spec(), 6);
    low.quantize({4, 4, 0});
    Model high = t;
    CHECK_THROWS_AS(calibrate_with_idc(high, low, tiny_data(), tiny_plan(), co), ConfigError);
  }

  TEST_CASE("contrast traces share indexing") {
    auto p = tiny_plan();
    auto r = convergence_contrast(tiny_data(), tiny_spec(), {4, 4, 0}, p, {2.0, 5.0}, 4, 7);
    REQUIRE(r.soft.size() == 2);
    for (const auto& s : r.soft) {
      REQUIRE(s.trace.size() == r.ste.trace.size());
      for (std::size_t i = 0; i < s.trace.size(); ++i) CHECK(s.trace[i].iteration == r.ste.trace[i].iteration);
    }
    CHECK(r.ste.trace[0].loss == r.soft[0].trace[0].loss);  // shared initialization and batches
  }

  TEST_CASE("non-finite loss aborts training") {
    Model m(tiny_spec(), 8);
    m.head.weight.mutable_data()[0] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(stage1_train(m, tiny_data(), tiny_plan()), TrainingError);
  }

  TEST_CASE("class count mismatch is a config error") {
    auto s = tiny_spec();
    s.n_classes = 9;
    Model m(s, 1);
    CHECK_THROWS_AS(stage1_train(m, tiny_data(), tiny_plan()), ConfigError);
  }
}
