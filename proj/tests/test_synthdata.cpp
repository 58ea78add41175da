#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "qgait/synthdata.hpp"

using namespace qgait;

namespace {
DatasetConfig small_cfg() {
  DatasetConfig c;
  c.n_ids = 6;
  c.eval_ids = 2;
  c.seqs_per_id = 8;
  c.frames = 4;
  return c;
}

std::vector<double> mean_silhouette(const SilhouetteSequence& s) {
  std::vector<double> m(static_cast<std::size_t>(s.height * s.width), 0.0);
  for (int t = 0; t < s.frames; ++t)
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) m[static_cast<std::size_t>(y * s.width + x)] += s.at(t, y, x) / double(s.frames);
  return m;
}

double l2(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}
}  // namespace

TEST_SUITE("synthdata") {
  TEST_CASE("same seed gives identical datasets; pixels are binary") {
    auto a = generate_dataset(small_cfg());
    auto b = generate_dataset(small_cfg());
    REQUIRE(a.sequences.size() == b.sequences.size());
    for (std::size_t i = 0; i < a.sequences.size(); ++i) {
      CHECK(a.sequences[i].pixels == b.sequences[i].pixels);
      for (auto p : a.sequences[i].pixels) REQUIRE((p == 0 || p == 1));
    }
    auto cfg = small_cfg();
    cfg.seed = 8;
    auto c = generate_dataset(cfg);
    CHECK(c.sequences[0].pixels != a.sequences[0].pixels);
  }

  TEST_CASE("split layout") {
    auto d = generate_dataset(small_cfg());
    CHECK(d.sequences.size() == 48);
    CHECK(d.train.size() == 32);
    CHECK(d.gallery.size() == 8);
    CHECK(d.probe.size() == 8);
    CHECK(d.train_identities.size() == 4);
    CHECK(d.eval_identities.size() == 2);
    for (auto i : d.gallery) CHECK(d.sequences[i].covariate == Covariate::NONE);
    CHECK(d.class_of(d.train_identities[2]) == 2);
    CHECK_THROWS(d.class_of(d.eval_identities[0]));
  }

  TEST_CASE("between-identity distance exceeds within-identity distance") {
    auto cfg = small_cfg();
    cfg.n_ids = 4;
    cfg.eval_ids = 2;
    cfg.seqs_per_id = 4;
    cfg.covariate_rate = 0.0;
    auto d = generate_dataset(cfg);
    std::vector<std::vector<double>> means;
    for (const auto& s : d.sequences) means.push_back(mean_silhouette(s));
    double within = 0.0, between = 0.0;
    int nw = 0, nb = 0;
    for (std::size_t i = 0; i < means.size(); ++i) {
      for (std::size_t j = i + 1; j < means.size(); ++j) {
        const double v = l2(means[i], means[j]);
        if (d.sequences[i].identity == d.sequences[j].identity) {
          within += v;
          ++nw;
        } else {
          between += v;
          ++nb;
        }
      }
    }
    CHECK(between / nb > within / nw);
  }

  TEST_CASE("covariates") {
    auto cfg = small_cfg();
    auto who = draw_identity(cfg, 0);
    auto s = render_sequence(cfg, who, 0);
    CHECK(apply_covariate(s, Covariate::NONE).pixels == s.pixels);
    auto dil = apply_covariate(s, Covariate::DILATE);
    for (int t = 0; t < s.frames; ++t) CHECK(dil.foreground(t) >= s.foreground(t));
    auto carry = apply_covariate(s, Covariate::CARRY);
    std::size_t added = 0;
    for (std::size_t i = 0; i < s.pixels.size(); ++i) {
      CHECK(carry.pixels[i] >= s.pixels[i]);
      added += carry.pixels[i] - s.pixels[i];
    }
    CHECK(carry.foreground() == s.foreground() + added);
    CHECK(added > 0);
    CHECK(covariate_from_string("CARRY") == Covariate::CARRY);
    CHECK_THROWS_AS(covariate_from_string("HAT"), UsageError);
  }

  TEST_CASE("pixel noise flips an exact count") {
    auto cfg = small_cfg();
    auto s = render_sequence(cfg, draw_identity(cfg, 1), 2);
    auto n = s;
    apply_pixel_noise(n, cfg);
    const auto expect = static_cast<std::size_t>(std::lround(cfg.noise_rate * cfg.height * cfg.width));
    for (int t = 0; t < s.frames; ++t) {
      std::size_t diff = 0;
      for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) diff += s.at(t, y, x) != n.at(t, y, x);
      CHECK(diff == expect);
    }
  }

  TEST_CASE("invalid configs") {
    auto c = small_cfg();
    c.noise_rate = 0.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_cfg();
    c.eval_ids = 6;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_cfg();
    c.height = 0;
    CHECK_THROWS_AS(generate_dataset(c), ConfigError);
  }

  TEST_CASE("batches and frame subsets") {
    auto d = generate_dataset(small_cfg());
    auto S = make_batch(d, {0, 5});
    CHECK(S.shape() == Shape{2, 4, 1, 32, 24});
    auto S2 = make_batch(d, {0, 5}, {{1, 3}, {0, 2}});
    CHECK(S2.shape() == Shape{2, 2, 1, 32, 24});
    CHECK(S2[0] == S[1 * 32 * 24]);
    CHECK_THROWS_AS(make_batch(d, {0}, {{7}}), DimensionError);
  }

  TEST_CASE("save and load round trip") {
    auto d = generate_dataset(small_cfg());
    const auto dir = (std::filesystem::temp_directory_path() / "qgait_ds_test").string();
    std::filesystem::remove_all(dir);
    save_dataset(d, dir, "abc", 3);
    auto e = load_dataset(dir);
    REQUIRE(e.sequences.size() == d.sequences.size());
    for (std::size_t i = 0; i < d.sequences.size(); ++i) CHECK(e.sequences[i].pixels == d.sequences[i].pixels);
    CHECK(e.probe == d.probe);
    CHECK(e.gallery == d.gallery);
    std::filesystem::remove(std::filesystem::path(dir) / "seq_00000.bin");
    CHECK_THROWS_AS(load_dataset(dir), IoError);
    std::filesystem::remove_all(dir);
    CHECK_THROWS_AS(load_dataset(dir), IoError);
  }
}
