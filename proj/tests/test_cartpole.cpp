#include <cmath>

#include "doctest.h"
#include "vop/cartpole.hpp"

using namespace vop;

namespace {

// Direct transcription of the classic cart-pole Euler update, no wall contact.
EnvState classic_step(const EnvState& s, double force) {
  const double g = 9.8, mc = 1.0, mp = 0.1, l = 0.5, dt = 0.02;
  const double total = mc + mp;
  const double ml = mp * l;
  const double temp = (force + ml * s.theta_dot * s.theta_dot * std::sin(s.theta)) / total;
  const double tacc = (g * std::sin(s.theta) - std::cos(s.theta) * temp) /
                      (l * (4.0 / 3.0 - mp * std::cos(s.theta) * std::cos(s.theta) / total));
  const double xacc = temp - ml * tacc * std::cos(s.theta) / total;
  return {s.x + dt * s.x_dot, s.theta + dt * s.theta_dot, s.x_dot + dt * xacc,
          s.theta_dot + dt * tacc};
}

}  // namespace

TEST_CASE("equilibria") {
  const PhysicsParams p;
  const EnvState up{0.0, 0.0, 0.0, 0.0};
  CHECK(env_step(up, 0.0, p) == up);

  const EnvState hanging{0.0, -kPi, 0.0, 0.0};
  const EnvState next = env_step(hanging, 0.0, p);
  CHECK(next.x == 0.0);
  CHECK(next.x_dot == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(std::abs(next.theta_dot) < 1e-12);
  CHECK(std::abs(angle_diff(next.theta, kPi)) < 1e-12);
}

TEST_CASE("one step matches the classic update") {
  const PhysicsParams p;
  for (double a : {0.0, 1.3, -2.0}) {
    const EnvState s{0.3, 0.1, -0.2, 0.7};
    const EnvState got = env_step(s, a, p);
    const EnvState want = classic_step(s, 10.0 * a);
    CHECK(std::abs(got.x - want.x) < 1e-12);
    CHECK(std::abs(got.theta - want.theta) < 1e-12);
    CHECK(std::abs(got.x_dot - want.x_dot) < 1e-12);
    CHECK(std::abs(got.theta_dot - want.theta_dot) < 1e-12);
  }
}

TEST_CASE("angles stay wrapped and walls clamp") {
  const PhysicsParams p;
  CHECK(wrap_angle(kPi) == doctest::Approx(-kPi));
  CHECK(wrap_angle(-kPi) == -kPi);
  CHECK(wrap_angle(3 * kPi + 0.1) == doctest::Approx(-kPi + 0.1));
  CHECK(angle_diff(-3.1, 3.1) == doctest::Approx(2 * kPi - 6.2));

  Rng rng(4);
  EnvState s{0.0, -kPi, 0.0, 0.0};
  for (int t = 0; t < 2000; ++t) {
    s = env_step(s, rng.uniform(-2.0, 2.0), p);
    CHECK(s.theta >= -kPi);
    CHECK(s.theta < kPi);
    CHECK(std::abs(s.x) <= kXLimit);
  }

  EnvState w{0.0, 0.0, 0.0, 0.0};
  const Episode ep = run_episode([](const EnvState&, const Objective&) { return 2.0; },
                                 Objective{0, 0}, w, 250, p);
  CHECK(ep.states.back().x == kXLimit);
  CHECK(ep.states.back().x_dot <= 0.0);
  int first = -1;
  for (std::size_t t = 0; t < ep.states.size(); ++t) {
    if (ep.states[t].x == kXLimit && first < 0) first = static_cast<int>(t);
  }
  REQUIRE(first > 0);
  for (std::size_t t = static_cast<std::size_t>(first); t < ep.states.size(); ++t) {
    CHECK(ep.states[t].x == kXLimit);
  }
}

TEST_CASE("energy drifts slowly without force") {
  const PhysicsParams p;
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    EnvState s{0.0, rng.uniform(0.5, 2.6) * (trial % 2 ? 1 : -1), 0.0, rng.uniform(-2.0, 2.0)};
    for (int t = 0; t < 100; ++t) {
      const EnvState n = env_step(s, 0.0, p);
      if (std::abs(s.theta_dot) < 5.0 && std::abs(n.x) < kXLimit) {
        CHECK(std::abs(mechanical_energy(n, p) - mechanical_energy(s, p)) < 0.05);
      }
      s = n;
    }
  }
}

TEST_CASE("reward values") {
  CHECK(reward({0, 0, 0, 0}, {0, 4}) == 0.0);
  CHECK(reward({1, 0, 0, 0}, {-1, 3}) == doctest::Approx(-2.0));
  CHECK(reward({0, 0.2, 0, 1.0}, {0, 1}) == doctest::Approx(-0.7));
  CHECK(reward({0, 0.5, 0, 1.0}, {0, 1}) == doctest::Approx(-0.5));

  Rng rng(3);
  for (int i = 0; i < 10000; ++i) {
    const EnvState s{rng.uniform(-2.5, 2.5), rng.uniform(-kPi, kPi), rng.uniform(-5, 5),
                     rng.uniform(-10, 10)};
    const Objective o = sample_objective(rng);
    CHECK(reward(s, o) <= 0.0);
  }
  CHECK(reward({1.5, 2.0, 0, 3.0}, {1.5, 0.0}) == 0.0);
  CHECK(reward({1.5, 0.1, 0, 0.0}, {1.5, 1.0}) < 0.0);
}

TEST_CASE("batched and taped rewards agree with the scalar reward") {
  Rng rng(5);
  diff::Matrix states(4, 64), omegas(2, 64);
  for (int c = 0; c < 64; ++c) {
    const EnvState s{rng.uniform(-2.5, 2.5), rng.uniform(-0.6, 0.6), 0.0, rng.uniform(-3, 3)};
    const Objective o = sample_objective(rng);
    states.col(c) = s.vec();
    omegas.col(c) << o.omega_x, o.omega_theta;
  }
  const diff::Matrix r = reward_batch(states, omegas);
  diff::Tape tape;
  const auto taped = reward_taped(tape, tape.leaf(states), omegas);
  for (int c = 0; c < 64; ++c) {
    const double want = reward(EnvState::from(states.col(c)), {omegas(0, c), omegas(1, c)});
    CHECK(r(0, c) == want);
    CHECK(tape.value(taped)(0, c) == doctest::Approx(want).epsilon(1e-14));
  }
}

TEST_CASE("rollouts") {
  const PhysicsParams p;
  const Episode still = run_episode([](const EnvState&, const Objective&) { return 0.0; },
                                    Objective{0, 2}, EnvState{}, 10, p);
  CHECK(still.total_return == 0.0);
  CHECK(still.states.size() == 11);

  auto noisy = [](std::uint64_t seed) {
    auto rng = std::make_shared<Rng>(seed);
    return [rng](const EnvState&, const Objective&) { return rng->uniform(-2.0, 2.0); };
  };
  const Episode a = run_episode(noisy(1), Objective{0, 1}, EnvState{0, -kPi, 0, 0}, 250, p);
  const Episode b = run_episode(noisy(1), Objective{0, 1}, EnvState{0, -kPi, 0, 0}, 250, p);
  CHECK(a.states == b.states);
  CHECK(a.total_return == b.total_return);

  const Episode clamp = run_episode([](const EnvState&, const Objective&) { return 7.0; },
                                    Objective{0, 1}, EnvState{}, 5, p);
  for (double act : clamp.actions) CHECK(act == kActionLimit);
}

TEST_CASE("initial state and objective sampling") {
  Rng rng(12345);
  double sum = 0.0, lo = 1e9, hi = -1e9;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const EnvState s = sample_initial_state(rng);
    sum += s.x;
    lo = std::min(lo, s.x);
    hi = std::max(hi, s.x);
    CHECK(s.x_dot == 0.0);
    CHECK(s.theta_dot == 0.0);
    CHECK(s.theta >= -kPi);
    CHECK(s.theta < kPi);
  }
  CHECK(lo >= -2.5);
  CHECK(hi <= 2.5);
  CHECK(std::abs(sum / n) < 0.03);

  Rng a(9), b(9);
  for (int i = 0; i < 10; ++i) CHECK(sample_initial_state(a) == sample_initial_state(b));

  Rng c(1);
  const ObjectiveBox box;
  for (int i = 0; i < 1000; ++i) CHECK(box.contains(sample_objective(c)));
}

TEST_CASE("invalid parameters and inputs are rejected") {
  PhysicsParams p;
  p.dt = 0.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  CHECK_THROWS_AS(env_step({0, std::nan(""), 0, 0}, 0.0, PhysicsParams{}), std::invalid_argument);
}
