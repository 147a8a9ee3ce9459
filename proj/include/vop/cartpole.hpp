#pragma once

// Full-angle cart-pole swing-up simulator and the objective-parameterized
// reward.
//
// Angle convention: theta = 0 is upright, theta = -pi (== pi) is hanging.

#include <array>
#include <functional>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "vop/diffcore.hpp"
#include "vop/rng.hpp"

namespace vop {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kXLimit = 2.5;
inline constexpr double kActionLimit = 2.0;
/// |theta| below which the angular-velocity smoothing penalty is active.
inline constexpr double kSmoothingGate = 0.4;

struct EnvState {
  double x = 0.0;
  double theta = 0.0;
  double x_dot = 0.0;
  double theta_dot = 0.0;

  Eigen::Vector4d vec() const { return {x, theta, x_dot, theta_dot}; }
  static EnvState from(const Eigen::Ref<const Eigen::VectorXd>& v);
  bool finite() const;
  bool operator==(const EnvState&) const = default;
};

struct Objective {
  double omega_x = 0.0;
  double omega_theta = 0.0;

  bool operator==(const Objective&) const = default;
};

/// Sampling box for objectives; also the range the steering service accepts.
struct ObjectiveBox {
  double x_lo = -2.0;
  double x_hi = 2.0;
  double theta_lo = 0.0;
  double theta_hi = 4.0;

  bool contains(const Objective& o) const {
    return o.omega_x >= x_lo && o.omega_x <= x_hi && o.omega_theta >= theta_lo &&
           o.omega_theta <= theta_hi;
  }
};

struct PhysicsParams {
  double gravity = 9.8;
  double cart_mass = 1.0;
  double pole_mass = 0.1;
  double pole_half_length = 0.5;
  double dt = 0.02;
  double force_per_action = 10.0;

  /// Throws std::invalid_argument unless every constant is strictly positive.
  void validate() const;
  bool operator==(const PhysicsParams&) const = default;
};

/// Maps any finite angle into [-pi, pi).
double wrap_angle(double theta);

/// Shortest signed angular difference to - from, in [-pi, pi).
inline double angle_diff(double to, double from) { return wrap_angle(to - from); }

/// One explicit-Euler step of the classic cart-pole equations with
/// F = force_per_action * action. Theta is re-wrapped; the cart is clamped to
/// [-2.5, 2.5] and loses any velocity pointing into the wall.
EnvState env_step(const EnvState& state, double action, const PhysicsParams& params);

/// env_step applied column-wise to a 4xB state batch and 1xB action batch.
diff::Matrix env_step_batch(const diff::Matrix& states, const diff::Matrix& actions,
                            const PhysicsParams& params);

/// -|x - omega_x| - omega_theta*|theta| - smoothing(theta_dot), where the
/// smoothing term |theta_dot / 2| applies only while |theta| < 0.4.
double reward(const EnvState& s, const Objective& obj);

/// Batched reward; omegas is 2xB (omega_x row, omega_theta row). Returns 1xB.
diff::Matrix reward_batch(const diff::Matrix& states, const diff::Matrix& omegas);

/// Taped reward over a 4xB state node. The |theta| < 0.4 gate is evaluated
/// on the forward values and held constant in the reverse pass.
diff::Tape::Var reward_taped(diff::Tape& tape, diff::Tape::Var states,
                             const diff::Matrix& omegas);

/// Total mechanical energy (cart + rigid rod pole), zero potential at the
/// pivot height.
double mechanical_energy(const EnvState& s, const PhysicsParams& params);

/// x ~ U[-2.5, 2.5], theta ~ U[-pi, pi), velocities zero.
EnvState sample_initial_state(Rng& rng);
/// omega_x ~ U[-2, 2], omega_theta ~ U[0, 4].
Objective sample_objective(Rng& rng, const ObjectiveBox& box = {});

using ActionSource = std::function<double(const EnvState& state, const Objective& obj)>;
using ObjectiveSchedule = std::function<Objective(int step)>;

struct Episode {
  std::vector<EnvState> states;       // steps + 1 entries, states[0] = start
  std::vector<double> actions;        // applied (clamped) actions
  std::vector<double> rewards;        // reward(states[t+1], objectives[t])
  std::vector<Objective> objectives;  // objective in force at each step
  double total_return = 0.0;
};

/// Closed-loop rollout on the true environment. Actions are clamped to
/// [-2, 2] before being applied.
Episode run_episode(const ActionSource& policy, const ObjectiveSchedule& schedule,
                    const EnvState& start, int steps, const PhysicsParams& params);

Episode run_episode(const ActionSource& policy, const Objective& obj, const EnvState& start,
                    int steps, const PhysicsParams& params);

}  // namespace vop
