#pragma once

// Offline transition batch collected with a state-independent uniform random
// behaviour policy, plus normalization statistics and JSON Lines persistence.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "vop/cartpole.hpp"

namespace vop {

struct Transition {
  EnvState s;
  double a = 0.0;
  EnvState s_next;
  int episode_id = 0;
  int step_index = 0;

  bool operator==(const Transition&) const = default;
};

struct TransitionBatch {
  std::vector<Transition> transitions;
  std::uint64_t seed = 0;
  int episodes = 0;
  int steps = 0;

  /// Throws std::invalid_argument on an empty batch, out-of-range records or
  /// non-contiguous step indices.
  void validate() const;
  bool operator==(const TransitionBatch&) const = default;
};

struct NormStats {
  Eigen::Vector4d mu_s = Eigen::Vector4d::Zero();
  Eigen::Vector4d sigma_s = Eigen::Vector4d::Ones();
  Eigen::Vector4d mu_ds = Eigen::Vector4d::Zero();
  Eigen::Vector4d sigma_ds = Eigen::Vector4d::Ones();

  bool operator==(const NormStats&) const = default;
};

inline constexpr double kSigmaFloor = 1e-6;

/// Error raised for malformed dataset files; carries the 1-based line.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// s_next - s with the theta component replaced by the wrapped shortest
/// angular difference.
Eigen::Vector4d state_delta(const EnvState& s_next, const EnvState& s);
/// Inverse of state_delta: s + delta with theta re-wrapped.
EnvState apply_delta(const EnvState& s, const Eigen::Vector4d& delta);

/// Episodes start from sample_initial_state; actions are i.i.d. U[-2, 2].
/// Episode e draws from its own stream derived from (seed, e).
TransitionBatch generate_batch(int episodes, int steps, std::uint64_t seed,
                               const PhysicsParams& params = {}, int threads = 1);

/// Population mean/std of states and wrapped deltas, std floored at 1e-6.
NormStats compute_norm_stats(const TransitionBatch& batch);

nlohmann::ordered_json to_json(const NormStats& stats);
NormStats norm_stats_from_json(const nlohmann::json& doc);
void save_norm_stats(const NormStats& stats, const std::string& path);
NormStats load_norm_stats(const std::string& path);

void save_batch(const TransitionBatch& batch, const std::string& path);
/// Throws ParseError (with line number) for malformed or invalid files.
TransitionBatch load_batch(const std::string& path);

}  // namespace vop
