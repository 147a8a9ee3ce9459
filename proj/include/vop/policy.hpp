#pragma once

// Objective-conditioned policy trained by backpropagation through virtual
// rollouts of a frozen dynamics ensemble.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vop/cartpole.hpp"
#include "vop/dataset.hpp"
#include "vop/diffcore.hpp"
#include "vop/ensemble.hpp"

namespace vop {

/// pi(s, omega) in [-2, 2]: a [6, hidden..., 1] rectifier net with a tanh
/// output scaled by the action limit. States are normalized with the dataset
/// statistics, objectives mapped affinely from their box onto [-1, 1].
class PolicyModel {
 public:
  PolicyModel() = default;
  PolicyModel(diff::Mlp net, Eigen::Vector4d state_mu, Eigen::Vector4d state_sigma,
              ObjectiveBox box = {});

  static PolicyModel init(const NormStats& norm, std::uint64_t seed,
                          const std::vector<int>& hidden = {10, 10}, ObjectiveBox box = {});

  const diff::Mlp& net() const { return net_; }
  diff::Mlp& net() { return net_; }
  const Eigen::Vector4d& state_mu() const { return state_mu_; }
  const Eigen::Vector4d& state_sigma() const { return state_sigma_; }
  const ObjectiveBox& box() const { return box_; }

  /// 6xB network input for 4xB states and 2xB objectives.
  diff::Matrix input(const diff::Matrix& states, const diff::Matrix& omegas) const;
  /// Objective part of the input (2xB), a constant during rollouts.
  diff::Matrix normalized_objectives(const diff::Matrix& omegas) const;

  diff::Matrix act(const diff::Matrix& states, const diff::Matrix& omegas) const;
  /// Single-state action. The steering service and the scenario runner both
  /// use this path so their trajectories agree bit for bit.
  double act(const EnvState& s, const Objective& obj) const;

  diff::Tape::Var act(diff::Tape& tape, diff::Tape::Var states, const diff::Matrix& omegas,
                      diff::GradientBuffer* grads) const;

 private:
  diff::Mlp net_;
  Eigen::Vector4d state_mu_ = Eigen::Vector4d::Zero();
  Eigen::Vector4d state_sigma_ = Eigen::Vector4d::Ones();
  ObjectiveBox box_;
};

struct TrainConfig {
  int horizon = 65;
  double gamma = 1.0;
  int population = 2000;
  int minibatch = 100;
  int max_epochs = 200;
  double learning_rate = 1e-3;
  /// Stop once the population return improved by less than this fraction
  /// over the last `plateau_window` epochs.
  double plateau_tolerance = 0.01;
  int plateau_window = 5;
  std::vector<int> hidden = {10, 10};
  /// Global gradient-norm cap applied before each Adam step; 0 disables.
  double grad_clip = 0.0;
  std::uint64_t seed = 0;
  /// Set for specialist policies: every rollout uses this objective.
  std::optional<Objective> fixed_objective;

  void validate() const;
};

/// The fixed set of (s0, objective) pairs a training run optimizes over.
struct RolloutPopulation {
  diff::Matrix starts;      // 4xN
  diff::Matrix objectives;  // 2xN

  std::size_t size() const { return static_cast<std::size_t>(starts.cols()); }
};

/// s0 drawn uniformly from the batch's states; objectives from the sampling
/// box unless cfg.fixed_objective is set.
RolloutPopulation sample_population(const TransitionBatch& batch, const TrainConfig& cfg);

struct RolloutTrace {
  std::vector<diff::Matrix> states;    // horizon + 1 entries, 4xB
  std::vector<diff::Matrix> actions;   // horizon entries, 1xB
  std::vector<diff::Matrix> rewards;   // horizon entries, 1xB
  Eigen::RowVectorXd returns;          // discounted return per column
};

/// Untaped rollout through any batched dynamics. Rewards are evaluated on
/// the successor state. Throws std::runtime_error with the step index if a
/// state becomes non-finite.
RolloutTrace rollout(const PolicyModel& policy, const BatchTransition& dynamics,
                     const diff::Matrix& starts, const diff::Matrix& omegas, int horizon,
                     double gamma);

/// Taped rollout through the frozen ensemble. Returns the 1x1 node holding
/// the summed discounted return over the batch; per-column returns go into
/// `returns` when non-null.
diff::Tape::Var rollout_taped(const PolicyModel& policy, diff::GradientBuffer* grads,
                              const EnsembleModel& model, const diff::Matrix& starts,
                              const diff::Matrix& omegas, int horizon, double gamma,
                              diff::Tape& tape, Eigen::RowVectorXd* returns = nullptr);

struct LossAndGrad {
  double loss = 0.0;
  Eigen::RowVectorXd returns;
  diff::GradientBuffer grads;
};

/// L(psi) = -mean(R) over the given pairs and its gradient w.r.t. psi.
LossAndGrad policy_loss_and_grad(const PolicyModel& policy, const EnsembleModel& model,
                                 const diff::Matrix& starts, const diff::Matrix& omegas,
                                 int horizon, double gamma);

struct EpochStats {
  int epoch = 0;
  double mean_virtual_return = 0.0;
  double std_virtual_return = 0.0;
  double mean_minibatch_loss = 0.0;
};

struct PolicyTrainResult {
  PolicyModel policy;
  std::vector<EpochStats> curve;  // entry 0 is the untrained policy
  bool plateaued = false;
  std::uint64_t model_hash_before = 0;
  std::uint64_t model_hash_after = 0;
};

/// Requires a frozen ensemble. Throws std::runtime_error with diagnostics
/// (epoch, minibatch, first non-finite step) if the loss turns non-finite.
PolicyTrainResult train_policy(const EnsembleModel& model, const TransitionBatch& batch,
                               const TrainConfig& cfg);

/// Max relative difference between the taped gradient and central finite
/// differences (step h) over every policy parameter. Components are compared
/// relative to max(|a|, |b|, 1e-3 * max_j |fd_j|).
double policy_gradient_check(const PolicyModel& policy, const EnsembleModel& model,
                             const diff::Matrix& starts, const diff::Matrix& omegas,
                             int horizon, double gamma, double h = 1e-5);

void save_policy(const PolicyModel& policy, const TrainConfig& cfg, const std::string& dir);
PolicyModel load_policy(const std::string& dir);
void save_learning_curve(const std::vector<EpochStats>& curve, const std::string& path);

nlohmann::ordered_json to_json(const TrainConfig& cfg);

}  // namespace vop
