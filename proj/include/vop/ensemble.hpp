#pragma once

// Ensemble of one-step dynamics models trained on normalized state deltas.
// The transition used inside rollouts is the member mean.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vop/dataset.hpp"
#include "vop/diffcore.hpp"

namespace vop {

struct EnsembleConfig {
  int k = 8;
  std::vector<int> hidden = {20, 20};
  int max_epochs = 100;
  int patience = 10;
  int batch_size = 256;
  double learning_rate = 1e-3;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

class EnsembleModel {
 public:
  EnsembleModel() = default;
  EnsembleModel(std::vector<diff::Mlp> members, NormStats norm);

  std::size_t size() const { return members_.size(); }
  const diff::Mlp& member(std::size_t k) const { return members_.at(k); }
  /// Throws std::logic_error once the model is frozen.
  diff::Mlp& mutable_member(std::size_t k);
  const NormStats& norm() const { return norm_; }

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  /// Combined FNV-1a hash over every member's parameters.
  std::uint64_t parameter_hash() const;

  /// Mean normalized member output for 4xB states, 1xB actions (4xB result).
  diff::Matrix mean_normalized_output(const diff::Matrix& states,
                                      const diff::Matrix& actions) const;

 private:
  std::vector<diff::Mlp> members_;
  NormStats norm_;
  bool frozen_ = false;
};

/// Batched next-state prediction, columns are samples.
diff::Matrix predict_mean(const EnsembleModel& model, const diff::Matrix& states,
                          const diff::Matrix& actions);
EnvState predict_mean(const EnsembleModel& model, const EnvState& s, double a);

/// Taped prediction: gradients flow to the state and action nodes only.
diff::Tape::Var predict_mean(const EnsembleModel& model, diff::Tape& tape,
                             diff::Tape::Var states, diff::Tape::Var actions);

struct MemberReport {
  std::uint64_t init_seed = 0;
  std::uint64_t shuffle_seed = 0;
  int epochs_run = 0;
  int best_epoch = 0;
  double holdout_mse = 0.0;
  std::vector<double> holdout_curve;
};

struct EnsembleTrainResult {
  EnsembleModel model;
  std::vector<MemberReport> members;
  std::vector<int> holdout_episodes;
};

/// Trains each member independently by minibatch Adam on the normalized
/// one-step delta MSE with an episode-level train/holdout split and early
/// stopping on holdout MSE. Throws std::runtime_error naming a member whose
/// loss diverges.
EnsembleTrainResult train_ensemble(const TransitionBatch& batch, const EnsembleConfig& cfg,
                                   int threads = 1);

/// Batched transition function: (4xB states, 1xB actions) -> 4xB next states.
using BatchTransition = std::function<diff::Matrix(const diff::Matrix&, const diff::Matrix&)>;

BatchTransition ensemble_transition(const EnsembleModel& model);
BatchTransition env_transition(const PhysicsParams& params);

struct DriftPoint {
  int horizon = 0;
  Eigen::Vector4d rmse = Eigen::Vector4d::Zero();
  /// sqrt(mean over dims of (rmse / sigma_s)^2).
  double normalized = 0.0;
  std::size_t samples = 0;
};

struct ModelReport {
  Eigen::Vector4d one_step_rmse = Eigen::Vector4d::Zero();
  std::vector<DriftPoint> drift;
  /// Fraction of consecutive horizon pairs whose normalized drift decreases.
  double drift_violation_fraction = 0.0;
};

/// Open-loop replay of logged actions from every valid start state of the
/// given episodes. One-step RMSE is the h = 1 drift entry.
ModelReport model_report(const BatchTransition& model, const TransitionBatch& batch,
                         const std::vector<int>& episodes, const NormStats& norm,
                         const std::vector<int>& horizons = {1, 10, 65, 80});

/// Directory checkpoint: member_<k>.json, norm_stats.json, manifest.json.
void save_ensemble(const EnsembleModel& model, const std::vector<MemberReport>& reports,
                   const EnsembleConfig& cfg, const std::string& dir);
EnsembleModel load_ensemble(const std::string& dir);

}  // namespace vop
