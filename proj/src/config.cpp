#include "vop/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace vop {

namespace {

using json = nlohmann::json;

// Reads fields from one JSON object and remembers which keys were consumed.
class Section {
 public:
  Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    const auto it = doc_.find(key);
    if (it == doc_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + " has the wrong type");
    }
  }

  Section child(const char* key) {
    seen_.insert(key);
    const auto it = doc_.find(key);
    static const json empty = json::object();
    return Section(it == doc_.end() ? empty : *it, joined(key));
  }

  bool has(const char* key) const { return doc_.contains(key); }

  void finish() const {
    for (const auto& item : doc_.items()) {
      if (!seen_.count(item.key())) throw ConfigError("unknown key " + where(item.key()));
    }
  }

  std::string joined(const std::string& key) const {
    return path_.empty() ? key : (key.empty() ? path_ : path_ + "." + key);
  }

  std::string where(const std::string& key = {}) const {
    const std::string p = joined(key);
    return p.empty() ? "<root>" : "'" + p + "'";
  }

 private:
  const json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename Fn>
void checked(const char* what, Fn&& fn) {
  try {
    fn();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
}

}  // namespace

void PipelineConfig::validate() const {
  checked("physics", [&] { physics.validate(); });
  if (dataset.episodes < 1 || dataset.steps < 1) {
    throw ConfigError("dataset.episodes and dataset.steps must be >= 1");
  }
  checked("ensemble", [&] { ensemble.validate(); });
  checked("train", [&] { train.validate(); });
  checked("eval", [&] { eval.protocol.validate(); });
  if (eval.n_seeds < 1) throw ConfigError("eval.n_seeds must be >= 1");
  if (service.port < 0 || service.port > 65535) throw ConfigError("service.port out of range");
  if (!(service.tick_hz >= 0.0 && service.tick_hz <= 1000.0)) {
    throw ConfigError("service.tick_hz must be in [0, 1000]");
  }
  if (threads < 1) throw ConfigError("threads must be >= 1");
}

PipelineConfig config_from_json(const json& doc) {
  PipelineConfig cfg;
  Section root(doc, "");
  {
    auto s = root.child("physics");
    auto& p = cfg.physics;
    s.read("gravity", p.gravity);
    s.read("cart_mass", p.cart_mass);
    s.read("pole_mass", p.pole_mass);
    s.read("pole_half_length", p.pole_half_length);
    s.read("dt", p.dt);
    s.read("force_per_action", p.force_per_action);
    s.finish();
  }
  {
    auto s = root.child("dataset");
    s.read("episodes", cfg.dataset.episodes);
    s.read("steps", cfg.dataset.steps);
    s.read("seed", cfg.dataset.seed);
    s.finish();
  }
  {
    auto s = root.child("ensemble");
    auto& e = cfg.ensemble;
    s.read("k", e.k);
    s.read("hidden", e.hidden);
    s.read("epochs", e.max_epochs);
    s.read("patience", e.patience);
    s.read("batch_size", e.batch_size);
    s.read("lr", e.learning_rate);
    s.read("holdout_fraction", e.holdout_fraction);
    s.read("seed", e.seed);
    s.finish();
  }
  {
    auto s = root.child("train");
    auto& t = cfg.train;
    s.read("horizon", t.horizon);
    s.read("gamma", t.gamma);
    s.read("population", t.population);
    s.read("minibatch", t.minibatch);
    s.read("epochs", t.max_epochs);
    s.read("lr", t.learning_rate);
    s.read("plateau_tolerance", t.plateau_tolerance);
    s.read("plateau_window", t.plateau_window);
    s.read("hidden", t.hidden);
    s.read("grad_clip", t.grad_clip);
    s.read("seed", t.seed);
    s.finish();
  }
  {
    auto s = root.child("eval");
    auto& e = cfg.eval;
    if (s.has("grid")) {
      std::vector<std::string> labels;
      s.read("grid", labels);
      e.protocol.grid.clear();
      for (const auto& l : labels) {
        try {
          e.protocol.grid.push_back(parse_grid_point(l));
        } catch (const std::invalid_argument& err) {
          throw ConfigError(std::string("eval.grid: ") + err.what());
        }
      }
    }
    s.read("n_starts", e.protocol.n_starts);
    s.read("steps", e.protocol.steps);
    s.read("virtual_horizon", e.protocol.virtual_horizon);
    s.read("start_seed", e.protocol.start_seed);
    s.read("objective_seed", e.protocol.objective_seed);
    s.read("n_seeds", e.n_seeds);
    s.read("specialists", e.specialists);
    s.finish();
  }
  {
    auto s = root.child("service");
    s.read("host", cfg.service.host);
    s.read("port", cfg.service.port);
    s.read("tick_hz", cfg.service.tick_hz);
    s.finish();
  }
  {
    auto s = root.child("paths");
    s.read("data", cfg.paths.data);
    s.read("models", cfg.paths.models);
    s.read("policy", cfg.paths.policy);
    s.read("eval", cfg.paths.eval);
    s.finish();
  }
  root.read("threads", cfg.threads);
  root.finish();
  cfg.validate();
  return cfg;
}

PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(doc);
}

nlohmann::ordered_json to_json(const PipelineConfig& cfg) {
  nlohmann::ordered_json j;
  const auto& p = cfg.physics;
  j["physics"] = {{"gravity", p.gravity},
                  {"cart_mass", p.cart_mass},
                  {"pole_mass", p.pole_mass},
                  {"pole_half_length", p.pole_half_length},
                  {"dt", p.dt},
                  {"force_per_action", p.force_per_action}};
  j["dataset"] = {{"episodes", cfg.dataset.episodes},
                  {"steps", cfg.dataset.steps},
                  {"seed", cfg.dataset.seed}};
  const auto& e = cfg.ensemble;
  j["ensemble"] = {{"k", e.k},
                   {"hidden", e.hidden},
                   {"epochs", e.max_epochs},
                   {"patience", e.patience},
                   {"batch_size", e.batch_size},
                   {"lr", e.learning_rate},
                   {"holdout_fraction", e.holdout_fraction},
                   {"seed", e.seed}};
  auto train = to_json(cfg.train);
  train.erase("fixed_objective");
  j["train"] = train;
  std::vector<std::string> grid;
  for (const auto& g : cfg.eval.protocol.grid) grid.push_back(g.label);
  const auto& ev = cfg.eval.protocol;
  j["eval"] = {{"grid", grid},
               {"n_starts", ev.n_starts},
               {"steps", ev.steps},
               {"virtual_horizon", ev.virtual_horizon},
               {"start_seed", ev.start_seed},
               {"objective_seed", ev.objective_seed},
               {"n_seeds", cfg.eval.n_seeds},
               {"specialists", cfg.eval.specialists}};
  j["service"] = {{"host", cfg.service.host},
                  {"port", cfg.service.port},
                  {"tick_hz", cfg.service.tick_hz}};
  j["paths"] = {{"data", cfg.paths.data},
                {"models", cfg.paths.models},
                {"policy", cfg.paths.policy},
                {"eval", cfg.paths.eval}};
  j["threads"] = cfg.threads;
  return j;
}

std::uint64_t config_hash(const PipelineConfig& cfg) {
  // Worker count never changes results, so it stays out of the hash.
  auto doc = to_json(cfg);
  doc.erase("threads");
  const std::string text = doc.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace vop
