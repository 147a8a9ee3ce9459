#pragma once

// Single JSON configuration for the whole pipeline. Every field has a default;
// unknown keys are rejected so typos cannot silently fall back to defaults.

#include <cstdint>
#include <string>

#include "json.hpp"
#include "vop/cartpole.hpp"
#include "vop/ensemble.hpp"
#include "vop/evaluator.hpp"
#include "vop/policy.hpp"

namespace vop {

struct DatasetConfig {
  int episodes = 1000;
  int steps = 250;
  std::uint64_t seed = 0;
};

struct EvalSettings {
  EvalConfig protocol;
  int n_seeds = 10;
  /// Train fixed-objective baselines during `evaluate`.
  bool specialists = false;
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  /// 0 means manual ticking through POST /step only.
  double tick_hz = 50.0;
};

struct PathsConfig {
  std::string data = "data/batch.jsonl";
  std::string models = "models";
  std::string policy = "policy";
  std::string eval = "eval";
};

struct PipelineConfig {
  PhysicsParams physics;
  DatasetConfig dataset;
  EnsembleConfig ensemble;
  TrainConfig train;
  EvalSettings eval;
  ServiceConfig service;
  PathsConfig paths;
  int threads = 1;

  void validate() const;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Throws ConfigError naming the offending key path.
PipelineConfig config_from_json(const nlohmann::json& doc);
PipelineConfig load_config(const std::string& path);
nlohmann::ordered_json to_json(const PipelineConfig& cfg);

/// FNV-1a over the canonical JSON rendering, excluding the thread count.
std::uint64_t config_hash(const PipelineConfig& cfg);
std::string hex64(std::uint64_t v);

}  // namespace vop
