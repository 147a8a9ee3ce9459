#include "vop/cartpole.hpp"

#include <cmath>
#include <stdexcept>

namespace vop {

EnvState EnvState::from(const Eigen::Ref<const Eigen::VectorXd>& v) {
  if (v.size() != 4) {
    throw std::invalid_argument("EnvState needs exactly 4 components");
  }
  return EnvState{v(0), v(1), v(2), v(3)};
}

bool EnvState::finite() const {
  return std::isfinite(x) && std::isfinite(theta) && std::isfinite(x_dot) &&
         std::isfinite(theta_dot);
}

void PhysicsParams::validate() const {
  const std::array<std::pair<const char*, double>, 6> fields{{
      {"gravity", gravity},
      {"cart_mass", cart_mass},
      {"pole_mass", pole_mass},
      {"pole_half_length", pole_half_length},
      {"dt", dt},
      {"force_per_action", force_per_action},
  }};
  for (const auto& [name, value] : fields) {
    if (!(value > 0.0) || !std::isfinite(value)) {
      throw std::invalid_argument(std::string("physics.") + name + " must be positive");
    }
  }
}

double wrap_angle(double theta) {
  constexpr double two_pi = 2.0 * kPi;
  double w = theta - two_pi * std::floor((theta + kPi) / two_pi);
  // floor() rounding can land exactly on +pi or a hair below -pi.
  if (w >= kPi) w -= two_pi;
  if (w < -kPi) w += two_pi;
  return w;
}

EnvState env_step(const EnvState& s, double action, const PhysicsParams& p) {
  if (!s.finite() || !std::isfinite(action)) {
    throw std::invalid_argument("env_step: non-finite state or action");
  }
  const double force = p.force_per_action * action;
  const double total_mass = p.cart_mass + p.pole_mass;
  const double polemass_length = p.pole_mass * p.pole_half_length;
  const double cos_t = std::cos(s.theta);
  const double sin_t = std::sin(s.theta);

  const double temp =
      (force + polemass_length * s.theta_dot * s.theta_dot * sin_t) / total_mass;
  const double theta_acc =
      (p.gravity * sin_t - cos_t * temp) /
      (p.pole_half_length * (4.0 / 3.0 - p.pole_mass * cos_t * cos_t / total_mass));
  const double x_acc = temp - polemass_length * theta_acc * cos_t / total_mass;

  EnvState n;
  n.x = s.x + p.dt * s.x_dot;
  n.x_dot = s.x_dot + p.dt * x_acc;
  n.theta = wrap_angle(s.theta + p.dt * s.theta_dot);
  n.theta_dot = s.theta_dot + p.dt * theta_acc;

  if (n.x >= kXLimit) {
    n.x = kXLimit;
    n.x_dot = std::min(n.x_dot, 0.0);
  } else if (n.x <= -kXLimit) {
    n.x = -kXLimit;
    n.x_dot = std::max(n.x_dot, 0.0);
  }
  return n;
}

diff::Matrix env_step_batch(const diff::Matrix& states, const diff::Matrix& actions,
                            const PhysicsParams& params) {
  if (states.rows() != 4 || actions.rows() != 1 || actions.cols() != states.cols()) {
    throw std::invalid_argument("env_step_batch: expected 4xB states and 1xB actions");
  }
  diff::Matrix out(4, states.cols());
  for (Eigen::Index c = 0; c < states.cols(); ++c) {
    out.col(c) = env_step(EnvState::from(states.col(c)), actions(0, c), params).vec();
  }
  return out;
}

double reward(const EnvState& s, const Objective& obj) {
  const double smoothing = std::abs(s.theta) < kSmoothingGate ? std::abs(s.theta_dot / 2.0) : 0.0;
  return -std::abs(s.x - obj.omega_x) - obj.omega_theta * std::abs(s.theta) - smoothing;
}

diff::Matrix reward_batch(const diff::Matrix& states, const diff::Matrix& omegas) {
  if (states.rows() != 4 || omegas.rows() != 2 || omegas.cols() != states.cols()) {
    throw std::invalid_argument("reward_batch: expected 4xB states and 2xB objectives");
  }
  diff::Matrix out(1, states.cols());
  for (Eigen::Index c = 0; c < states.cols(); ++c) {
    out(0, c) = reward(EnvState::from(states.col(c)), Objective{omegas(0, c), omegas(1, c)});
  }
  return out;
}

diff::Tape::Var reward_taped(diff::Tape& tape, diff::Tape::Var states,
                             const diff::Matrix& omegas) {
  using Var = diff::Tape::Var;
  const diff::Matrix& sv = tape.value(states);
  if (sv.rows() != 4 || omegas.rows() != 2 || omegas.cols() != sv.cols()) {
    throw std::invalid_argument("reward_taped: expected 4xB states and 2xB objectives");
  }
  const Var x = tape.rows(states, 0, 1);
  const Var theta = tape.rows(states, 1, 1);
  const Var theta_dot = tape.rows(states, 3, 1);

  const Var position_cost = tape.abs(tape.add_const(x, -omegas.row(0)));
  const Var angle_cost = tape.mul_const(tape.abs(theta), omegas.row(1));
  const diff::Matrix mask =
      (tape.value(theta).array().abs() < kSmoothingGate).cast<double>().matrix();
  const Var smoothing = tape.gate(tape.abs(tape.scale(theta_dot, 0.5)), mask);

  return tape.scale(tape.add(tape.add(position_cost, angle_cost), smoothing), -1.0);
}

double mechanical_energy(const EnvState& s, const PhysicsParams& p) {
  const double l = p.pole_half_length;
  const double m = p.pole_mass;
  const double vx = s.x_dot + l * std::cos(s.theta) * s.theta_dot;
  const double vy = -l * std::sin(s.theta) * s.theta_dot;
  const double inertia = m * l * l / 3.0;
  return 0.5 * p.cart_mass * s.x_dot * s.x_dot + 0.5 * m * (vx * vx + vy * vy) +
         0.5 * inertia * s.theta_dot * s.theta_dot + m * p.gravity * l * std::cos(s.theta);
}

EnvState sample_initial_state(Rng& rng) {
  EnvState s;
  s.x = rng.uniform(-kXLimit, kXLimit);
  s.theta = rng.uniform(-kPi, kPi);
  return s;
}

Objective sample_objective(Rng& rng, const ObjectiveBox& box) {
  Objective o;
  o.omega_x = rng.uniform(box.x_lo, box.x_hi);
  o.omega_theta = rng.uniform(box.theta_lo, box.theta_hi);
  return o;
}

Episode run_episode(const ActionSource& policy, const ObjectiveSchedule& schedule,
                    const EnvState& start, int steps, const PhysicsParams& params) {
  if (steps < 1) {
    throw std::invalid_argument("run_episode: steps must be >= 1");
  }
  Episode ep;
  ep.states.reserve(static_cast<std::size_t>(steps) + 1);
  ep.actions.reserve(static_cast<std::size_t>(steps));
  ep.rewards.reserve(static_cast<std::size_t>(steps));
  ep.objectives.reserve(static_cast<std::size_t>(steps));
  ep.states.push_back(start);
  EnvState s = start;
  for (int t = 0; t < steps; ++t) {
    const Objective obj = schedule(t);
    const double a = std::clamp(policy(s, obj), -kActionLimit, kActionLimit);
    s = env_step(s, a, params);
    const double r = reward(s, obj);
    ep.states.push_back(s);
    ep.actions.push_back(a);
    ep.rewards.push_back(r);
    ep.objectives.push_back(obj);
    ep.total_return += r;
  }
  return ep;
}

Episode run_episode(const ActionSource& policy, const Objective& obj, const EnvState& start,
                    int steps, const PhysicsParams& params) {
  return run_episode(policy, [obj](int) { return obj; }, start, steps, params);
}

}  // namespace vop
