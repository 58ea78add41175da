#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "qgait/checkpoint.hpp"
#include "qgait/config.hpp"

using namespace qgait;
using nlohmann::json;

namespace {
std::string tmp(const std::string& name) { return (std::filesystem::temp_directory_path() / name).string(); }
}  // namespace

TEST_SUITE("checkpoint") {
  TEST_CASE("model round trip preserves outputs and quantizer state") {
    ModelSpec s;
    s.n_classes = 5;
    Model m(s, 4);
    m.quantize({4, 4, 0});
    auto S = Tensor::full({2, 2, 1, 32, 24}, 1.0);
    m.forward(S);  // initializes steps
    m.set_training(false);
    const auto path = tmp("qgait_ckpt_test.qgkt");
    save_checkpoint(path, m, {{"seed", 4}});
    json prov;
    Model back = load_checkpoint(path, &prov);
    CHECK(prov["seed"] == 4);
    CHECK(back.spec() == m.spec());
    back.set_training(false);
    auto a = m.forward(S), b = back.forward(S);
    for (std::size_t i = 0; i < a.X.numel(); ++i) REQUIRE(a.X[i] == b.X[i]);
    for (std::size_t i = 0; i < a.O.numel(); ++i) REQUIRE(a.O[i] == b.O[i]);
    auto qa = m.quantizers(), qb = back.quantizers();
    REQUIRE(qa.size() == qb.size());
    for (std::size_t i = 0; i < qa.size(); ++i) {
      CHECK(qa[i]->active() == qb[i]->active());
      CHECK(qa[i]->initialized() == qb[i]->initialized());
      CHECK(qa[i]->step_value() == qb[i]->step_value());
    }
    std::filesystem::remove(path);
  }

  TEST_CASE("corrupt containers are rejected") {
    const auto path = tmp("qgait_bad.qgkt");
    std::ofstream(path) << "NOTQG";
    CHECK_THROWS_AS(read_container(path), IoError);
    CHECK_THROWS_AS(read_container(tmp("does_not_exist.qgkt")), IoError);
    Container c;
    c.meta = {{"kind", "model"}};
    c.arrays.push_back({"a", {2}, {1.0, 2.0}});
    write_container(path, c);
    auto r = read_container(path);
    CHECK(r.get("a").values == std::vector<double>{1.0, 2.0});
    CHECK_THROWS_AS(load_checkpoint(path), ConfigError);
    std::ofstream(path, std::ios::app) << "x";
    CHECK_THROWS_AS(read_container(path), IoError);
    std::filesystem::remove(path);
  }
}

TEST_SUITE("config") {
  TEST_CASE("defaults round trip and hash is stable") {
    RunConfig c;
    c.model.n_classes = c.data.train_ids();
    auto j = run_config_to_json(c);
    auto back = run_config_from_json(j);
    CHECK(run_config_to_json(back) == j);
    CHECK(config_hash(back) == config_hash(back));
    CHECK(config_hash(back).size() == 16);
    back.seed = 2;
    CHECK(config_hash(back) != config_hash(c));
    CHECK(fnv1a64_hex("") == "cbf29ce484222325");
    CHECK(fnv1a64_hex("a") == "af63dc4c8601ec8c");
  }

  TEST_CASE("unknown keys and invalid values are rejected") {
    CHECK_THROWS_AS(run_config_from_json(json{{"sed", 1}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(json{{"train", {{"lr", -1.0}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(json{{"train", {{"lr", "fast"}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(json{{"data", {{"noise", 0.1}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(json{{"quant", {{"weight_bits", 1}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(json{{"kschedule", {{"mode", "LINEAR"}}}}), ConfigError);
    CHECK_THROWS_AS(load_run_config(tmp("missing_config.json")), IoError);
  }

  TEST_CASE("derived model fields follow the data section") {
    auto c = run_config_from_json(json{{"data", {{"n_ids", 10}, {"eval_ids", 4}, {"height", 16}, {"width", 12}}},
                                       {"model", {{"parts", 2}}},
                                       {"train", {{"ids_per_batch", 4}}}});
    CHECK(c.model.n_classes == 6);
    CHECK(c.model.in_height == 16);
    CHECK(c.model.in_width == 12);
  }
}
