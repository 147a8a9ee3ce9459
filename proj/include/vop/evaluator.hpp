#pragma once

// True-environment evaluation protocols: the objective grid, virtual/real
// comparison, specialist baselines, the runtime objective switch and
// side-by-side model/environment trajectories.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vop/cartpole.hpp"
#include "vop/ensemble.hpp"
#include "vop/policy.hpp"

namespace vop {

/// One grid entry. An empty objective means "sampled from p(omega)": every
/// start gets its own objective drawn from a fixed stream.
struct GridPoint {
  std::string label;
  std::optional<Objective> objective;
};

/// The four fixed objectives of the benchmark grid followed by p(omega).
std::vector<GridPoint> default_grid();
/// Parses labels like "-1,3" or "p" into grid points.
GridPoint parse_grid_point(const std::string& text);

struct EvalConfig {
  std::vector<GridPoint> grid = default_grid();
  int n_starts = 100;
  int steps = 250;
  int virtual_horizon = 65;
  std::uint64_t start_seed = 12345;
  std::uint64_t objective_seed = 999;

  void validate() const;
};

/// The shared evaluation start set: n_starts draws of sample_initial_state.
std::vector<EnvState> evaluation_starts(const EvalConfig& cfg);
/// Objective per start for a grid point.
std::vector<Objective> evaluation_objectives(const GridPoint& point, const EvalConfig& cfg);

struct SeedResult {
  std::vector<double> real_returns;   // one per start
  double real_mean = 0.0;
  std::optional<double> virtual_h_mean;       // H = cfg.virtual_horizon
  std::optional<double> virtual_steps_mean;   // H = cfg.steps
};

struct Summary {
  double mean = 0.0;
  /// Over seeds when there are at least two, else over episodes.
  double standard_error = 0.0;
};

struct GridRow {
  GridPoint point;
  std::vector<SeedResult> seeds;
  Summary real;
  std::optional<Summary> virtual_h;
  std::optional<Summary> virtual_steps;
};

struct EvalReport {
  EvalConfig config;
  std::vector<GridRow> rows;

  const GridRow& row(const std::string& label) const;
};

Summary summarize(const std::vector<double>& seed_means, const std::vector<double>& all_returns);

/// Evaluates one trained policy per seed. Virtual returns are included when
/// a model is given.
EvalReport evaluate_grid(const std::vector<PolicyModel>& policies, const EnsembleModel* model,
                         const EvalConfig& cfg, const PhysicsParams& params, int threads = 1);

/// Builds the controller for one episode; `episode` is unique across the grid
/// so stateful controllers stay reproducible under any thread count.
using ControllerFactory = std::function<ActionSource(std::size_t episode)>;

/// Real-environment grid evaluation of an arbitrary controller (one "seed").
EvalReport evaluate_controller(const ControllerFactory& controller, const EvalConfig& cfg,
                               const PhysicsParams& params, int threads = 1);

/// The data-generating policy: i.i.d. uniform actions, one stream per episode.
ControllerFactory random_controller(std::uint64_t seed);

nlohmann::ordered_json to_json(const EvalReport& report);
/// label,omega_x,omega_theta,seed,real_mean,virtual_h_mean,virtual_steps_mean
/// with an "all" row per grid point carrying the summaries.
std::string to_csv(const EvalReport& report);

// ---------------------------------------------------------------------------
// Specialists

struct SpecialistSet {
  Objective objective;
  std::vector<PolicyModel> policies;  // one per seed
  std::vector<std::vector<EpochStats>> curves;
};

/// Fixed-objective policies with the same training budget as the VOP.
std::vector<SpecialistSet> train_specialists(const EnsembleModel& model,
                                             const TransitionBatch& batch,
                                             const TrainConfig& base,
                                             const std::vector<Objective>& objectives,
                                             const std::vector<std::uint64_t>& seeds);

struct GapEntry {
  Objective objective;
  double vop_mean = 0.0;
  double specialist_mean = 0.0;
  double gap = 0.0;  // vop - specialist
};

std::vector<GapEntry> specialist_gap(const EvalReport& vop, const std::vector<SpecialistSet>& sets,
                                     const EvalConfig& cfg, const PhysicsParams& params,
                                     int threads = 1);

// ---------------------------------------------------------------------------
// Objective switch

struct ScenarioConfig {
  EnvState start{-kXLimit, -kPi, 0.0, 0.0};
  double first_target = -1.0;
  double second_target = 1.0;
  int switch_step = 150;
  int steps = 250;
  double reach_tolerance = 0.25;
  double upright_limit = 0.4;
  double swing_limit = kPi / 2;
};

struct ScenarioResult {
  double omega_theta = 0.0;
  Episode episode;
  bool reached_target = false;   // |x - second_target| < tol at the final step
  bool kept_upright = false;     // max |theta| after the switch < upright_limit
  bool swung_through = false;    // max |theta| after the switch > swing_limit
  /// First step index after the switch with |x - second_target| < tol; -1 if never.
  int first_reach = -1;
};

ObjectiveSchedule switch_schedule(double omega_theta, const ScenarioConfig& cfg = {});

ScenarioResult objective_switch_scenario(const PolicyModel& policy, double omega_theta,
                                         const PhysicsParams& params,
                                         const ScenarioConfig& cfg = {});

/// t,x,theta,x_dot,theta_dot,a,r,omega_x,omega_theta; the final row holds the
/// terminal state with empty action and reward.
std::string trajectory_csv(const Episode& episode);

// ---------------------------------------------------------------------------
// Model vs environment

using StepFunction = std::function<EnvState(const EnvState&, double)>;

StepFunction ensemble_step(const EnsembleModel& model);
StepFunction environment_step(const PhysicsParams& params);

struct TransferResult {
  Episode virtual_episode;
  Episode real_episode;
  /// Euclidean state distance per step (angle difference wrapped), entry 0 is
  /// the shared start.
  std::vector<double> divergence;
};

TransferResult transfer_check(const PolicyModel& policy, const StepFunction& model_step,
                              const Objective& objective, const EnvState& start, int steps,
                              const PhysicsParams& params);

/// |theta| < 0.4 and |x - omega_x| < 0.3 over the last `window` states.
bool ends_balanced(const Episode& episode, const Objective& objective, int window = 50);

/// Mean |pi(s, (omega_x, 0)) - pi(s, (omega_x, 4))| over the given states.
double conditioning_gap(const PolicyModel& policy, const std::vector<EnvState>& states,
                        double omega_x = 0.0);

/// States from the batch with 0.5 < |theta| < 2.5, chosen with a seeded stream.
std::vector<EnvState> mid_swing_states(const TransitionBatch& batch, std::size_t n,
                                       std::uint64_t seed);

}  // namespace vop
