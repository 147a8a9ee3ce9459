#include "doctest.h"
#include "vop/config.hpp"

using namespace vop;
using nlohmann::json;

TEST_CASE("defaults") {
  const PipelineConfig cfg;
  CHECK(cfg.dataset.episodes == 1000);
  CHECK(cfg.dataset.steps == 250);
  CHECK(cfg.ensemble.k == 8);
  CHECK(cfg.train.horizon == 65);
  CHECK(cfg.train.population == 2000);
  CHECK(cfg.train.minibatch == 100);
  CHECK(cfg.eval.protocol.n_starts == 100);
  CHECK(cfg.service.tick_hz == 50.0);
  CHECK_NOTHROW(cfg.validate());
  CHECK(config_from_json(json::object()).train.horizon == 65);
}

TEST_CASE("fields are read and unknown keys rejected") {
  const PipelineConfig cfg = config_from_json(json::parse(R"({
    "dataset": {"episodes": 20, "seed": 4},
    "train": {"horizon": 30, "gamma": 0.99},
    "eval": {"grid": ["0,1", "p"], "n_seeds": 3},
    "threads": 2
  })"));
  CHECK(cfg.dataset.episodes == 20);
  CHECK(cfg.dataset.seed == 4);
  CHECK(cfg.train.horizon == 30);
  CHECK(cfg.train.gamma == 0.99);
  CHECK(cfg.eval.protocol.grid.size() == 2);
  CHECK(cfg.eval.n_seeds == 3);
  CHECK(cfg.threads == 2);

  try {
    config_from_json(json::parse(R"({"train": {"horizn": 30}})"));
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("train.horizn") != std::string::npos);
  }
  CHECK_THROWS_AS(config_from_json(json::parse(R"({"extra": 1})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(json::parse(R"({"train": {"horizon": "long"}})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(json::parse(R"({"train": {"horizon": 0}})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(json::parse(R"({"eval": {"grid": ["x"]}})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(json::parse(R"([1, 2])")), ConfigError);
}

TEST_CASE("rendering round trips and the hash ignores the worker count") {
  PipelineConfig cfg;
  cfg.train.gamma = 0.97;
  cfg.eval.protocol.grid = {parse_grid_point("1,2")};
  const PipelineConfig back = config_from_json(json::parse(to_json(cfg).dump()));
  CHECK(to_json(back).dump() == to_json(cfg).dump());
  CHECK(config_hash(back) == config_hash(cfg));

  PipelineConfig threaded = cfg;
  threaded.threads = 4;
  CHECK(config_hash(threaded) == config_hash(cfg));
  PipelineConfig other = cfg;
  other.train.seed = 1;
  CHECK(config_hash(other) != config_hash(cfg));
  CHECK(hex64(0xabcULL) == "0000000000000abc");
}
