#include "vop/dataset.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "vop/parallel.hpp"

namespace vop {

namespace {

std::string describe(const Transition& tr, std::size_t index) {
  std::ostringstream out;
  out << "record " << index << " (episode " << tr.episode_id << ", step " << tr.step_index
      << ")";
  return out.str();
}

// Empty string when valid.
std::string check_state(const EnvState& s) {
  if (!s.finite()) return "non-finite state";
  if (s.x < -kXLimit || s.x > kXLimit) return "x outside [-2.5, 2.5]";
  if (s.theta < -kPi || s.theta >= kPi) return "theta outside [-pi, pi)";
  return {};
}

std::string check_transition(const Transition& tr) {
  if (!std::isfinite(tr.a) || tr.a < -kActionLimit || tr.a > kActionLimit) {
    std::ostringstream out;
    out << "action " << tr.a << " outside [-2, 2]";
    return out.str();
  }
  if (auto e = check_state(tr.s); !e.empty()) return "s: " + e;
  if (auto e = check_state(tr.s_next); !e.empty()) return "sn: " + e;
  return {};
}

std::array<double, 4> as_array(const EnvState& s) { return {s.x, s.theta, s.x_dot, s.theta_dot}; }

EnvState state_from_json(const nlohmann::json& j) {
  auto v = j.get<std::vector<double>>();
  if (v.size() != 4) throw std::invalid_argument("state must have 4 components");
  return EnvState{v[0], v[1], v[2], v[3]};
}

Eigen::Vector4d vec4_from_json(const nlohmann::json& j) {
  auto v = j.get<std::vector<double>>();
  if (v.size() != 4) throw std::invalid_argument("expected a 4-vector");
  return {v[0], v[1], v[2], v[3]};
}

}  // namespace

void TransitionBatch::validate() const {
  if (transitions.empty()) {
    throw std::invalid_argument("transition batch is empty");
  }
  for (std::size_t i = 0; i < transitions.size(); ++i) {
    const Transition& tr = transitions[i];
    if (auto e = check_transition(tr); !e.empty()) {
      throw std::invalid_argument(describe(tr, i) + ": " + e);
    }
    const bool episode_start = i == 0 || transitions[i - 1].episode_id != tr.episode_id;
    const int expected = episode_start ? 0 : transitions[i - 1].step_index + 1;
    if (tr.step_index != expected) {
      throw std::invalid_argument(describe(tr, i) + ": step index not contiguous");
    }
  }
}

Eigen::Vector4d state_delta(const EnvState& s_next, const EnvState& s) {
  return {s_next.x - s.x, angle_diff(s_next.theta, s.theta), s_next.x_dot - s.x_dot,
          s_next.theta_dot - s.theta_dot};
}

EnvState apply_delta(const EnvState& s, const Eigen::Vector4d& delta) {
  return EnvState{s.x + delta(0), wrap_angle(s.theta + delta(1)), s.x_dot + delta(2),
                  s.theta_dot + delta(3)};
}

TransitionBatch generate_batch(int episodes, int steps, std::uint64_t seed,
                               const PhysicsParams& params, int threads) {
  if (episodes < 1 || steps < 1) {
    throw std::invalid_argument("generate_batch: episodes and steps must be >= 1");
  }
  params.validate();
  TransitionBatch batch;
  batch.seed = seed;
  batch.episodes = episodes;
  batch.steps = steps;
  batch.transitions.resize(static_cast<std::size_t>(episodes) * static_cast<std::size_t>(steps));

  parallel_for(static_cast<std::size_t>(episodes), threads, [&](std::size_t e) {
    Rng rng(derive_seed(seed, e));
    EnvState s = sample_initial_state(rng);
    for (int t = 0; t < steps; ++t) {
      const double a = rng.uniform(-kActionLimit, kActionLimit);
      const EnvState next = env_step(s, a, params);
      batch.transitions[e * static_cast<std::size_t>(steps) + static_cast<std::size_t>(t)] =
          Transition{s, a, next, static_cast<int>(e), t};
      s = next;
    }
  });
  return batch;
}

NormStats compute_norm_stats(const TransitionBatch& batch) {
  if (batch.transitions.empty()) {
    throw std::invalid_argument("compute_norm_stats: empty batch");
  }
  const double n = static_cast<double>(batch.transitions.size());
  Eigen::Vector4d sum_s = Eigen::Vector4d::Zero();
  Eigen::Vector4d sum_ds = Eigen::Vector4d::Zero();
  for (const auto& tr : batch.transitions) {
    sum_s += tr.s.vec();
    sum_ds += state_delta(tr.s_next, tr.s);
  }
  NormStats stats;
  stats.mu_s = sum_s / n;
  stats.mu_ds = sum_ds / n;
  // Two-pass variance.
  Eigen::Vector4d var_s = Eigen::Vector4d::Zero();
  Eigen::Vector4d var_ds = Eigen::Vector4d::Zero();
  for (const auto& tr : batch.transitions) {
    var_s += (tr.s.vec() - stats.mu_s).array().square().matrix();
    var_ds += (state_delta(tr.s_next, tr.s) - stats.mu_ds).array().square().matrix();
  }
  stats.sigma_s = (var_s / n).cwiseSqrt().cwiseMax(kSigmaFloor);
  stats.sigma_ds = (var_ds / n).cwiseSqrt().cwiseMax(kSigmaFloor);
  return stats;
}

nlohmann::ordered_json to_json(const NormStats& stats) {
  auto vec = [](const Eigen::Vector4d& v) {
    return std::vector<double>{v(0), v(1), v(2), v(3)};
  };
  return nlohmann::ordered_json{{"mu_s", vec(stats.mu_s)},
                                {"sigma_s", vec(stats.sigma_s)},
                                {"mu_ds", vec(stats.mu_ds)},
                                {"sigma_ds", vec(stats.sigma_ds)}};
}

NormStats norm_stats_from_json(const nlohmann::json& doc) {
  try {
    NormStats stats;
    stats.mu_s = vec4_from_json(doc.at("mu_s"));
    stats.sigma_s = vec4_from_json(doc.at("sigma_s"));
    stats.mu_ds = vec4_from_json(doc.at("mu_ds"));
    stats.sigma_ds = vec4_from_json(doc.at("sigma_ds"));
    if ((stats.sigma_s.array() < kSigmaFloor).any() ||
        (stats.sigma_ds.array() < kSigmaFloor).any()) {
      throw std::invalid_argument("sigma below floor");
    }
    return stats;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("malformed norm stats: ") + e.what());
  }
}

void save_norm_stats(const NormStats& stats, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << to_json(stats).dump(2) << '\n';
}

NormStats load_norm_stats(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  try {
    return norm_stats_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
}

void save_batch(const TransitionBatch& batch, const std::string& path) {
  batch.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  nlohmann::ordered_json header{{"version", 1},
                                {"seed", batch.seed},
                                {"episodes", batch.episodes},
                                {"steps", batch.steps}};
  out << header.dump() << '\n';
  for (const auto& tr : batch.transitions) {
    nlohmann::ordered_json rec{{"ep", tr.episode_id},
                               {"t", tr.step_index},
                               {"s", as_array(tr.s)},
                               {"a", tr.a},
                               {"sn", as_array(tr.s_next)}};
    out << rec.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

TransitionBatch load_batch(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);

  TransitionBatch batch;
  std::string line;
  std::size_t line_no = 0;

  if (!std::getline(in, line)) {
    throw ParseError(1, "missing header");
  }
  ++line_no;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.at("version").get<int>() != 1) {
      throw ParseError(line_no, "unsupported dataset version");
    }
    batch.seed = header.at("seed").get<std::uint64_t>();
    batch.episodes = header.at("episodes").get<int>();
    batch.steps = header.at("steps").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_no, std::string("bad header: ") + e.what());
  }
  if (batch.episodes < 1 || batch.steps < 1) {
    throw ParseError(line_no, "header episodes/steps must be >= 1");
  }
  const std::size_t expected =
      static_cast<std::size_t>(batch.episodes) * static_cast<std::size_t>(batch.steps);
  batch.transitions.reserve(expected);

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      throw ParseError(line_no, "empty line");
    }
    Transition tr;
    try {
      const auto rec = nlohmann::json::parse(line);
      tr.episode_id = rec.at("ep").get<int>();
      tr.step_index = rec.at("t").get<int>();
      tr.s = state_from_json(rec.at("s"));
      tr.a = rec.at("a").get<double>();
      tr.s_next = state_from_json(rec.at("sn"));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, e.what());
    } catch (const std::invalid_argument& e) {
      throw ParseError(line_no, e.what());
    }
    const std::size_t index = batch.transitions.size();
    if (auto e = check_transition(tr); !e.empty()) {
      throw ParseError(line_no, describe(tr, index) + ": " + e);
    }
    const int want_ep = static_cast<int>(index / static_cast<std::size_t>(batch.steps));
    const int want_t = static_cast<int>(index % static_cast<std::size_t>(batch.steps));
    if (tr.episode_id != want_ep || tr.step_index != want_t) {
      throw ParseError(line_no, describe(tr, index) + ": out of order, expected episode " +
                                    std::to_string(want_ep) + " step " +
                                    std::to_string(want_t));
    }
    batch.transitions.push_back(tr);
  }
  if (batch.transitions.size() != expected) {
    throw ParseError(line_no + 1, "truncated: expected " + std::to_string(expected) +
                                      " records, found " +
                                      std::to_string(batch.transitions.size()));
  }
  return batch;
}

}  // namespace vop
