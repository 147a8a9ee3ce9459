#include "vop/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "vop/parallel.hpp"

namespace vop {

using diff::Matrix;
using diff::Tape;

namespace {

constexpr std::uint64_t kHoldoutStream = 0x484F4C44;  // "HOLD"

Eigen::Vector4d inv(const Eigen::Vector4d& v) { return v.cwiseInverse(); }

// (s - mu) / sigma written as a row-wise scale and shift, shared by the taped
// and untaped paths so both produce identical values.
Matrix normalize_states(const Matrix& states, const NormStats& norm) {
  const Eigen::Vector4d scale = inv(norm.sigma_s);
  const Eigen::Vector4d shift = -norm.mu_s.cwiseProduct(scale);
  Matrix out = scale.asDiagonal() * states;
  out.colwise() += shift;
  return out;
}

Matrix wrap_offsets(const Matrix& next) {
  Matrix offsets = Matrix::Zero(next.rows(), next.cols());
  for (Eigen::Index c = 0; c < next.cols(); ++c) {
    offsets(1, c) = wrap_angle(next(1, c)) - next(1, c);
  }
  return offsets;
}

void check_inputs(const Matrix& states, const Matrix& actions) {
  if (states.rows() != 4 || actions.rows() != 1 || actions.cols() != states.cols()) {
    throw std::invalid_argument("ensemble: expected 4xB states and 1xB actions");
  }
}

}  // namespace

void EnsembleConfig::validate() const {
  if (k < 1) throw std::invalid_argument("ensemble.k must be >= 1");
  if (max_epochs < 1) throw std::invalid_argument("ensemble.epochs must be >= 1");
  if (patience < 1) throw std::invalid_argument("ensemble.patience must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("ensemble.batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("ensemble.lr must be positive");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
    throw std::invalid_argument("ensemble.holdout_fraction must be in (0, 1)");
  }
  for (int h : hidden) {
    if (h < 1) throw std::invalid_argument("ensemble.hidden entries must be >= 1");
  }
}

EnsembleModel::EnsembleModel(std::vector<diff::Mlp> members, NormStats norm)
    : members_(std::move(members)), norm_(norm) {
  if (members_.empty()) {
    throw std::invalid_argument("EnsembleModel needs at least one member");
  }
  for (const auto& m : members_) {
    if (m.dims() != members_.front().dims() ||
        m.output_activation() != members_.front().output_activation()) {
      throw std::invalid_argument("EnsembleModel members must share one architecture");
    }
  }
  if (members_.front().input_dim() != 5 || members_.front().output_dim() != 4) {
    throw std::invalid_argument("EnsembleModel members must map 5 inputs to 4 outputs");
  }
  if (members_.front().output_activation() != diff::Activation::identity) {
    throw std::invalid_argument("EnsembleModel members need a linear output layer");
  }
}

diff::Mlp& EnsembleModel::mutable_member(std::size_t k) {
  if (frozen_) {
    throw std::logic_error("EnsembleModel is frozen");
  }
  return members_.at(k);
}

std::uint64_t EnsembleModel::parameter_hash() const {
  std::uint64_t h = 0;
  for (const auto& m : members_) {
    h = mix_seed(h ^ diff::parameter_hash(m));
  }
  return h;
}

Matrix EnsembleModel::mean_normalized_output(const Matrix& states, const Matrix& actions) const {
  check_inputs(states, actions);
  Matrix input(5, states.cols());
  input.topRows(4) = normalize_states(states, norm_);
  input.row(4) = actions;
  Matrix acc = members_.front().forward(input);
  for (std::size_t k = 1; k < members_.size(); ++k) {
    acc += members_[k].forward(input);
  }
  return acc * (1.0 / static_cast<double>(members_.size()));
}

Matrix predict_mean(const EnsembleModel& model, const Matrix& states, const Matrix& actions) {
  Matrix mean = model.mean_normalized_output(states, actions);
  Matrix delta = model.norm().sigma_ds.asDiagonal() * mean;
  delta.colwise() += model.norm().mu_ds;
  Matrix next = states + delta;
  next += wrap_offsets(next);
  return next;
}

EnvState predict_mean(const EnsembleModel& model, const EnvState& s, double a) {
  Matrix states = s.vec();
  Matrix actions = Matrix::Constant(1, 1, a);
  return EnvState::from(predict_mean(model, states, actions).col(0));
}

Tape::Var predict_mean(const EnsembleModel& model, Tape& tape, Tape::Var states,
                       Tape::Var actions) {
  check_inputs(tape.value(states), tape.value(actions));
  const NormStats& norm = model.norm();
  const Eigen::Vector4d scale = inv(norm.sigma_s);
  const Tape::Var normalized =
      tape.row_affine(states, scale, -norm.mu_s.cwiseProduct(scale));
  const Tape::Var input = tape.vstack({normalized, actions});

  // One tape node for the whole frozen ensemble; per-member activations are
  // kept for the reverse pass.
  const Matrix& x = tape.value(input);
  const std::size_t k_count = model.size();
  const double inv_k = 1.0 / static_cast<double>(k_count);
  std::vector<std::vector<Matrix>> acts(k_count);
  Matrix acc;
  for (std::size_t k = 0; k < k_count; ++k) {
    const diff::Mlp& net = model.member(k);
    auto& a = acts[k];
    a.reserve(net.num_layers());
    const Matrix* h = &x;
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
      Matrix z = net.weight(l) * *h;
      z.colwise() += net.bias(l);
      if (l + 1 < net.num_layers()) z = z.cwiseMax(0.0);
      a.push_back(std::move(z));
      h = &a.back();
    }
    if (k == 0) {
      acc = a.back();
    } else {
      acc += a.back();
    }
  }
  acc *= inv_k;
  const EnsembleModel* mp = &model;
  const Tape::Var mean = tape.unary(
      input, std::move(acc), [mp, inv_k, acts = std::move(acts)](const Matrix& g) {
        Matrix gx;
        for (std::size_t k = 0; k < acts.size(); ++k) {
          const diff::Mlp& net = mp->member(k);
          Matrix gz = g * inv_k;
          for (std::size_t l = net.num_layers(); l-- > 0;) {
            if (l + 1 < net.num_layers()) {
              gz = (acts[k][l].array() > 0.0).select(gz.array(), 0.0).matrix();
            }
            gz = net.weight(l).transpose() * gz;
          }
          if (k == 0) {
            gx = std::move(gz);
          } else {
            gx += gz;
          }
        }
        return gx;
      });
  const Tape::Var delta = tape.row_affine(mean, norm.sigma_ds, norm.mu_ds);
  const Tape::Var next = tape.add(states, delta);
  return tape.add_const(next, wrap_offsets(tape.value(next)));
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct Regression {
  Matrix inputs;   // 5 x N
  Matrix targets;  // 4 x N
  std::vector<int> train;
  std::vector<int> holdout;
};

Regression build_regression(const TransitionBatch& batch, const NormStats& norm,
                            const std::set<int>& holdout_eps) {
  const auto n = static_cast<Eigen::Index>(batch.transitions.size());
  Regression reg;
  Matrix states(4, n);
  reg.inputs.resize(5, n);
  reg.targets.resize(4, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Transition& tr = batch.transitions[static_cast<std::size_t>(i)];
    states.col(i) = tr.s.vec();
    reg.inputs(4, i) = tr.a;
    reg.targets.col(i) = (state_delta(tr.s_next, tr.s) - norm.mu_ds).cwiseQuotient(norm.sigma_ds);
    (holdout_eps.count(tr.episode_id) ? reg.holdout : reg.train).push_back(static_cast<int>(i));
  }
  reg.inputs.topRows(4) = normalize_states(states, norm);
  return reg;
}

double mse(const diff::Mlp& net, const Regression& reg, const std::vector<int>& idx) {
  if (idx.empty()) return 0.0;
  constexpr std::size_t chunk = 8192;
  double total = 0.0;
  for (std::size_t start = 0; start < idx.size(); start += chunk) {
    const std::size_t end = std::min(idx.size(), start + chunk);
    std::vector<int> cols(idx.begin() + static_cast<std::ptrdiff_t>(start),
                          idx.begin() + static_cast<std::ptrdiff_t>(end));
    const Matrix pred = net.forward(Matrix(reg.inputs(Eigen::all, cols)));
    total += (pred - reg.targets(Eigen::all, cols)).squaredNorm();
  }
  return total / (4.0 * static_cast<double>(idx.size()));
}

MemberReport train_member(diff::Mlp& net, const Regression& reg, const EnsembleConfig& cfg,
                          std::size_t member, MemberReport report) {
  diff::AdamState adam(net, diff::AdamConfig{cfg.learning_rate});
  Rng shuffle_rng(report.shuffle_seed);
  std::vector<int> order = reg.train;
  // Without a holdout split the training MSE drives early stopping.
  const std::vector<int>& monitor = reg.holdout.empty() ? reg.train : reg.holdout;

  diff::Mlp best = net;
  double best_mse = mse(net, reg, monitor);
  int since_best = 0;
  diff::GradientBuffer grads(net);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<int> cols(order.begin() + static_cast<std::ptrdiff_t>(start),
                            order.begin() + static_cast<std::ptrdiff_t>(end));
      Tape tape;
      const auto x = tape.leaf(reg.inputs(Eigen::all, cols));
      const auto pred = diff::mlp_forward(net, tape, x, &grads);
      const auto err = tape.add_const(pred, -reg.targets(Eigen::all, cols));
      const auto loss =
          tape.scale(tape.sum(tape.square(err)), 1.0 / (4.0 * static_cast<double>(cols.size())));
      if (!std::isfinite(tape.value(loss)(0, 0))) {
        throw std::runtime_error("ensemble member " + std::to_string(member) +
                                 " diverged (non-finite loss) in epoch " +
                                 std::to_string(epoch));
      }
      grads.zero();
      tape.backward(loss);
      diff::adam_step(net, grads, adam);
    }
    const double holdout = mse(net, reg, monitor);
    if (!std::isfinite(holdout)) {
      throw std::runtime_error("ensemble member " + std::to_string(member) +
                               " diverged (non-finite holdout MSE) in epoch " +
                               std::to_string(epoch));
    }
    report.holdout_curve.push_back(holdout);
    report.epochs_run = epoch;
    if (holdout < best_mse) {
      best_mse = holdout;
      best = net;
      report.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  net = best;
  report.holdout_mse = best_mse;
  return report;
}

}  // namespace

EnsembleTrainResult train_ensemble(const TransitionBatch& batch, const EnsembleConfig& cfg,
                                   int threads) {
  cfg.validate();
  if (batch.transitions.size() < 1000) {
    throw std::invalid_argument("train_ensemble: need at least 1000 transitions");
  }
  const NormStats norm = compute_norm_stats(batch);

  std::set<int> episode_ids;
  for (const auto& tr : batch.transitions) episode_ids.insert(tr.episode_id);
  std::vector<int> episodes(episode_ids.begin(), episode_ids.end());
  Rng split_rng(derive_seed(cfg.seed, kHoldoutStream));
  split_rng.shuffle(episodes.begin(), episodes.end());
  std::size_t n_holdout = episodes.size() < 2
                              ? 0
                              : std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(
                                                             cfg.holdout_fraction *
                                                             static_cast<double>(episodes.size()))));
  std::vector<int> holdout(episodes.begin(), episodes.begin() + static_cast<std::ptrdiff_t>(n_holdout));
  std::sort(holdout.begin(), holdout.end());
  const Regression reg = build_regression(batch, norm, std::set<int>(holdout.begin(), holdout.end()));

  std::vector<int> dims{5};
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  dims.push_back(4);

  const auto k = static_cast<std::size_t>(cfg.k);
  std::vector<diff::Mlp> members(k);
  std::vector<MemberReport> reports(k);
  parallel_for(k, threads, [&](std::size_t m) {
    MemberReport rep;
    rep.init_seed = derive_seed(cfg.seed, 1000 + m);
    rep.shuffle_seed = derive_seed(cfg.seed, 2000 + m);
    members[m] = diff::Mlp::init(dims, diff::Activation::identity, rep.init_seed);
    reports[m] = train_member(members[m], reg, cfg, m, rep);
  });

  EnsembleTrainResult result{EnsembleModel(std::move(members), norm), std::move(reports),
                             std::move(holdout)};
  result.model.freeze();
  return result;
}

BatchTransition ensemble_transition(const EnsembleModel& model) {
  return [&model](const Matrix& s, const Matrix& a) { return predict_mean(model, s, a); };
}

BatchTransition env_transition(const PhysicsParams& params) {
  return [params](const Matrix& s, const Matrix& a) { return env_step_batch(s, a, params); };
}

ModelReport model_report(const BatchTransition& model, const TransitionBatch& batch,
                         const std::vector<int>& episodes, const NormStats& norm,
                         const std::vector<int>& horizons) {
  if (batch.steps < 1 || batch.transitions.size() !=
                             static_cast<std::size_t>(batch.episodes) *
                                 static_cast<std::size_t>(batch.steps)) {
    throw std::invalid_argument("model_report: batch layout must be episodes x steps");
  }
  const auto at = [&](int ep, int t) -> const Transition& {
    return batch.transitions[static_cast<std::size_t>(ep) * static_cast<std::size_t>(batch.steps) +
                             static_cast<std::size_t>(t)];
  };

  ModelReport report;
  for (int h : horizons) {
    if (h < 1) throw std::invalid_argument("model_report: horizons must be >= 1");
    DriftPoint point;
    point.horizon = h;
    std::vector<std::pair<int, int>> starts;
    for (int ep : episodes) {
      for (int t0 = 0; t0 + h <= batch.steps; ++t0) starts.emplace_back(ep, t0);
    }
    if (starts.empty()) {
      report.drift.push_back(point);
      continue;
    }
    const auto m = static_cast<Eigen::Index>(starts.size());
    Matrix s(4, m);
    for (Eigen::Index i = 0; i < m; ++i) {
      s.col(i) = at(starts[static_cast<std::size_t>(i)].first,
                    starts[static_cast<std::size_t>(i)].second).s.vec();
    }
    Matrix a(1, m);
    for (int j = 0; j < h; ++j) {
      for (Eigen::Index i = 0; i < m; ++i) {
        const auto& [ep, t0] = starts[static_cast<std::size_t>(i)];
        a(0, i) = at(ep, t0 + j).a;
      }
      s = model(s, a);
    }
    Eigen::Vector4d sq = Eigen::Vector4d::Zero();
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto& [ep, t0] = starts[static_cast<std::size_t>(i)];
      const EnvState truth = at(ep, t0 + h - 1).s_next;
      sq += state_delta(EnvState::from(s.col(i)), truth).array().square().matrix();
    }
    point.samples = static_cast<std::size_t>(m);
    point.rmse = (sq / static_cast<double>(m)).cwiseSqrt();
    point.normalized = std::sqrt(point.rmse.cwiseQuotient(norm.sigma_s).squaredNorm() / 4.0);
    report.drift.push_back(point);
  }
  for (const auto& p : report.drift) {
    if (p.horizon == 1) report.one_step_rmse = p.rmse;
  }
  if (report.drift.size() > 1) {
    int violations = 0;
    for (std::size_t i = 1; i < report.drift.size(); ++i) {
      if (report.drift[i].normalized < report.drift[i - 1].normalized) ++violations;
    }
    report.drift_violation_fraction =
        static_cast<double>(violations) / static_cast<double>(report.drift.size() - 1);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_ensemble(const EnsembleModel& model, const std::vector<MemberReport>& reports,
                   const EnsembleConfig& cfg, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::ordered_json members = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < model.size(); ++k) {
    const std::string file = "member_" + std::to_string(k) + ".json";
    diff::save_mlp(model.member(k), (fs::path(dir) / file).string());
    nlohmann::ordered_json entry{{"file", file}};
    if (k < reports.size()) {
      entry["init_seed"] = reports[k].init_seed;
      entry["shuffle_seed"] = reports[k].shuffle_seed;
      entry["epochs_run"] = reports[k].epochs_run;
      entry["best_epoch"] = reports[k].best_epoch;
      entry["holdout_mse"] = reports[k].holdout_mse;
    }
    members.push_back(entry);
  }
  save_norm_stats(model.norm(), (fs::path(dir) / "norm_stats.json").string());
  nlohmann::ordered_json manifest{{"k", model.size()},
                                  {"hidden", cfg.hidden},
                                  {"seed", cfg.seed},
                                  {"norm_stats", "norm_stats.json"},
                                  {"members", members}};
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw std::runtime_error("cannot write ensemble manifest in " + dir);
  out << manifest.dump(2) << '\n';
}

EnsembleModel load_ensemble(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = fs::path(dir) / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot read " + manifest_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(manifest_path.string() + ": " + e.what());
  }
  std::vector<diff::Mlp> members;
  for (const auto& entry : manifest.at("members")) {
    members.push_back(diff::load_mlp((fs::path(dir) / entry.at("file").get<std::string>()).string()));
  }
  NormStats norm = load_norm_stats(
      (fs::path(dir) / manifest.at("norm_stats").get<std::string>()).string());
  EnsembleModel model(std::move(members), norm);
  model.freeze();
  return model;
}

}  // namespace vop
