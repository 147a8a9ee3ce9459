#include "vop/policy.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace vop {

using diff::Matrix;
using diff::Tape;

namespace {

constexpr std::uint64_t kPopulationStream = 0x504F50;  // "POP"
constexpr std::uint64_t kInitStream = 0x494E4954;      // "INIT"
constexpr std::uint64_t kShuffleStream = 0x53485546;   // "SHUF"

std::pair<Eigen::Vector2d, Eigen::Vector2d> objective_scaling(const ObjectiveBox& box) {
  const Eigen::Vector2d mid{(box.x_lo + box.x_hi) / 2.0, (box.theta_lo + box.theta_hi) / 2.0};
  const Eigen::Vector2d half{(box.x_hi - box.x_lo) / 2.0, (box.theta_hi - box.theta_lo) / 2.0};
  const Eigen::Vector2d scale = half.cwiseInverse();
  return {scale, -mid.cwiseProduct(scale)};
}

Matrix gather(const Matrix& m, const std::vector<int>& cols) { return m(Eigen::all, cols); }

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

PolicyModel::PolicyModel(diff::Mlp net, Eigen::Vector4d state_mu, Eigen::Vector4d state_sigma,
                         ObjectiveBox box)
    : net_(std::move(net)), state_mu_(state_mu), state_sigma_(state_sigma), box_(box) {
  if (net_.input_dim() != 6 || net_.output_dim() != 1 ||
      net_.output_activation() != diff::Activation::tanh) {
    throw std::invalid_argument("PolicyModel: network must map 6 inputs to 1 tanh output");
  }
  if ((state_sigma_.array() <= 0.0).any()) {
    throw std::invalid_argument("PolicyModel: state sigma must be positive");
  }
  if (!(box_.x_hi > box_.x_lo) || !(box_.theta_hi > box_.theta_lo)) {
    throw std::invalid_argument("PolicyModel: empty objective box");
  }
}

PolicyModel PolicyModel::init(const NormStats& norm, std::uint64_t seed,
                              const std::vector<int>& hidden, ObjectiveBox box) {
  std::vector<int> dims{6};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(1);
  return PolicyModel(diff::Mlp::init(dims, diff::Activation::tanh, seed), norm.mu_s,
                     norm.sigma_s, box);
}

Matrix PolicyModel::normalized_objectives(const Matrix& omegas) const {
  const auto [scale, shift] = objective_scaling(box_);
  Matrix out = scale.asDiagonal() * omegas;
  out.colwise() += shift;
  return out;
}

Matrix PolicyModel::input(const Matrix& states, const Matrix& omegas) const {
  if (states.rows() != 4 || omegas.rows() != 2 || omegas.cols() != states.cols()) {
    throw std::invalid_argument("PolicyModel: expected 4xB states and 2xB objectives");
  }
  const Eigen::Vector4d scale = state_sigma_.cwiseInverse();
  Matrix in(6, states.cols());
  in.topRows(4) = scale.asDiagonal() * states;
  in.topRows(4).colwise() += -state_mu_.cwiseProduct(scale);
  in.bottomRows(2) = normalized_objectives(omegas);
  return in;
}

Matrix PolicyModel::act(const Matrix& states, const Matrix& omegas) const {
  return net_.forward(input(states, omegas)) * kActionLimit;
}

double PolicyModel::act(const EnvState& s, const Objective& obj) const {
  const Matrix in = input(s.vec(), Eigen::Vector2d{obj.omega_x, obj.omega_theta});
  const diff::Vector v = in.col(0);
  return diff::mlp_forward(net_, v)(0) * kActionLimit;
}

Tape::Var PolicyModel::act(Tape& tape, Tape::Var states, const Matrix& omegas,
                           diff::GradientBuffer* grads) const {
  const Eigen::Vector4d scale = state_sigma_.cwiseInverse();
  const Tape::Var s = tape.row_affine(states, scale, -state_mu_.cwiseProduct(scale));
  const Tape::Var o = tape.leaf(normalized_objectives(omegas));
  const Tape::Var out = diff::mlp_forward(net_, tape, tape.vstack({s, o}), grads);
  return tape.scale(out, kActionLimit);
}

void TrainConfig::validate() const {
  if (horizon < 1 || horizon > 200) throw std::invalid_argument("train.horizon must be in [1, 200]");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("train.gamma must be in (0, 1]");
  if (population < 1) throw std::invalid_argument("train.population must be >= 1");
  if (minibatch < 1) throw std::invalid_argument("train.minibatch must be >= 1");
  if (max_epochs < 0) throw std::invalid_argument("train.epochs must be >= 0");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train.lr must be positive");
  if (plateau_window < 1) throw std::invalid_argument("train.plateau_window must be >= 1");
  if (!(grad_clip >= 0.0)) throw std::invalid_argument("train.grad_clip must be >= 0");
  for (int h : hidden) {
    if (h < 1) throw std::invalid_argument("train.hidden entries must be >= 1");
  }
}

RolloutPopulation sample_population(const TransitionBatch& batch, const TrainConfig& cfg) {
  if (batch.transitions.empty()) {
    throw std::invalid_argument("sample_population: empty batch");
  }
  Rng rng(derive_seed(cfg.seed, kPopulationStream));
  RolloutPopulation pop;
  pop.starts.resize(4, cfg.population);
  pop.objectives.resize(2, cfg.population);
  for (int i = 0; i < cfg.population; ++i) {
    const auto& tr = batch.transitions[rng.below(batch.transitions.size())];
    pop.starts.col(i) = tr.s.vec();
    const Objective o = cfg.fixed_objective ? *cfg.fixed_objective : sample_objective(rng);
    pop.objectives.col(i) = Eigen::Vector2d{o.omega_x, o.omega_theta};
  }
  return pop;
}

RolloutTrace rollout(const PolicyModel& policy, const BatchTransition& dynamics,
                     const Matrix& starts, const Matrix& omegas, int horizon, double gamma) {
  if (horizon < 1) throw std::invalid_argument("rollout: horizon must be >= 1");
  RolloutTrace trace;
  trace.states.push_back(starts);
  trace.returns = Eigen::RowVectorXd::Zero(starts.cols());
  double discount = 1.0;
  for (int t = 0; t < horizon; ++t) {
    const Matrix a = policy.act(trace.states.back(), omegas);
    Matrix next = dynamics(trace.states.back(), a);
    if (!next.allFinite()) {
      throw std::runtime_error("rollout: non-finite state at step " + std::to_string(t + 1));
    }
    const Matrix r = reward_batch(next, omegas);
    trace.returns += discount * r;
    discount *= gamma;
    trace.actions.push_back(a);
    trace.rewards.push_back(r);
    trace.states.push_back(std::move(next));
  }
  return trace;
}

Tape::Var rollout_taped(const PolicyModel& policy, diff::GradientBuffer* grads,
                        const EnsembleModel& model, const Matrix& starts, const Matrix& omegas,
                        int horizon, double gamma, Tape& tape, Eigen::RowVectorXd* returns) {
  if (horizon < 1) throw std::invalid_argument("rollout: horizon must be >= 1");
  if (!model.frozen()) {
    throw std::logic_error("rollout: dynamics ensemble must be frozen");
  }
  Tape::Var s = tape.leaf(starts);
  Tape::Var ret{};
  double discount = 1.0;
  for (int t = 0; t < horizon; ++t) {
    const Tape::Var a = policy.act(tape, s, omegas, grads);
    s = predict_mean(model, tape, s, a);
    if (!tape.value(s).allFinite()) {
      throw std::runtime_error("rollout: non-finite state at step " + std::to_string(t + 1));
    }
    const Tape::Var r = tape.scale(reward_taped(tape, s, omegas), discount);
    ret = t == 0 ? r : tape.add(ret, r);
    discount *= gamma;
  }
  if (returns != nullptr) *returns = tape.value(ret).row(0);
  return tape.sum(ret);
}

LossAndGrad policy_loss_and_grad(const PolicyModel& policy, const EnsembleModel& model,
                                 const Matrix& starts, const Matrix& omegas, int horizon,
                                 double gamma) {
  LossAndGrad out;
  out.grads = diff::GradientBuffer(policy.net());
  Tape tape;
  const Tape::Var total =
      rollout_taped(policy, &out.grads, model, starts, omegas, horizon, gamma, tape, &out.returns);
  const Tape::Var loss = tape.scale(total, -1.0 / static_cast<double>(starts.cols()));
  out.loss = tape.value(loss)(0, 0);
  tape.backward(loss);
  return out;
}

namespace {

std::pair<double, double> population_return(const PolicyModel& policy, const EnsembleModel& model,
                                            const RolloutPopulation& pop, const TrainConfig& cfg) {
  const auto dynamics = ensemble_transition(model);
  std::vector<double> all;
  all.reserve(pop.size());
  for (std::size_t start = 0; start < pop.size(); start += static_cast<std::size_t>(cfg.minibatch)) {
    const auto n = static_cast<Eigen::Index>(
        std::min(pop.size() - start, static_cast<std::size_t>(cfg.minibatch)));
    const auto s = static_cast<Eigen::Index>(start);
    const RolloutTrace tr = rollout(policy, dynamics, pop.starts.middleCols(s, n),
                                    pop.objectives.middleCols(s, n), cfg.horizon, cfg.gamma);
    for (Eigen::Index c = 0; c < n; ++c) all.push_back(tr.returns(c));
  }
  double mean = 0.0;
  for (double r : all) mean += r;
  mean /= static_cast<double>(all.size());
  double var = 0.0;
  for (double r : all) var += (r - mean) * (r - mean);
  return {mean, std::sqrt(var / static_cast<double>(all.size()))};
}

}  // namespace

PolicyTrainResult train_policy(const EnsembleModel& model, const TransitionBatch& batch,
                               const TrainConfig& cfg) {
  cfg.validate();
  if (!model.frozen()) {
    throw std::logic_error("train_policy: dynamics ensemble must be frozen");
  }
  PolicyTrainResult result;
  result.model_hash_before = model.parameter_hash();

  const RolloutPopulation pop = sample_population(batch, cfg);
  PolicyModel policy =
      PolicyModel::init(model.norm(), derive_seed(cfg.seed, kInitStream), cfg.hidden);
  diff::AdamState adam(policy.net(), diff::AdamConfig{cfg.learning_rate});
  Rng shuffle_rng(derive_seed(cfg.seed, kShuffleStream));

  std::vector<int> order(pop.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  {
    const auto [mean, sd] = population_return(policy, model, pop, cfg);
    result.curve.push_back(EpochStats{0, mean, sd, -mean});
  }

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    int minibatches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.minibatch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.minibatch));
      const std::vector<int> cols(order.begin() + static_cast<std::ptrdiff_t>(start),
                                  order.begin() + static_cast<std::ptrdiff_t>(end));
      const auto context = [&] {
        return "epoch " + std::to_string(epoch) + ", minibatch " + std::to_string(minibatches) +
               " (pairs " + std::to_string(start) + ".." + std::to_string(end - 1) + ")";
      };
      LossAndGrad lg;
      try {
        lg = policy_loss_and_grad(policy, model, gather(pop.starts, cols),
                                  gather(pop.objectives, cols), cfg.horizon, cfg.gamma);
      } catch (const std::runtime_error& e) {
        throw std::runtime_error("train_policy: " + context() + ": " + e.what());
      }
      if (!std::isfinite(lg.loss)) {
        throw std::runtime_error("train_policy: non-finite loss in " + context());
      }
      if (cfg.grad_clip > 0.0) {
        const double norm = std::sqrt(lg.grads.squared_norm());
        if (norm > cfg.grad_clip) lg.grads.scale(cfg.grad_clip / norm);
      }
      try {
        diff::adam_step(policy.net(), lg.grads, adam);
      } catch (const std::domain_error& e) {
        throw std::runtime_error("train_policy: " + context() + ": " + e.what());
      }
      loss_sum += lg.loss;
      ++minibatches;
    }
    const auto [mean, sd] = population_return(policy, model, pop, cfg);
    result.curve.push_back(EpochStats{epoch, mean, sd, loss_sum / minibatches});

    if (epoch >= cfg.plateau_window) {
      const double before = result.curve[static_cast<std::size_t>(epoch - cfg.plateau_window)]
                                .mean_virtual_return;
      const double improvement = (mean - before) / std::max(std::abs(before), 1e-12);
      if (improvement < cfg.plateau_tolerance) {
        result.plateaued = true;
        break;
      }
    }
  }
  result.policy = std::move(policy);
  result.model_hash_after = model.parameter_hash();
  return result;
}

double policy_gradient_check(const PolicyModel& policy, const EnsembleModel& model,
                             const Matrix& starts, const Matrix& omegas, int horizon, double gamma,
                             double h) {
  const LossAndGrad analytic = policy_loss_and_grad(policy, model, starts, omegas, horizon, gamma);
  const auto dynamics = ensemble_transition(model);
  const double n = static_cast<double>(starts.cols());
  PolicyModel probe = policy;
  auto loss_at = [&]() {
    return -rollout(probe, dynamics, starts, omegas, horizon, gamma).returns.sum() / n;
  };

  std::vector<double> fd;
  std::vector<double> bp;
  for (std::size_t layer = 0; layer < probe.net().num_layers(); ++layer) {
    auto visit = [&](double& param, double grad) {
      const double saved = param;
      param = saved + h;
      const double up = loss_at();
      param = saved - h;
      const double down = loss_at();
      param = saved;
      fd.push_back((up - down) / (2.0 * h));
      bp.push_back(grad);
    };
    Matrix& w = probe.net().weight(layer);
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) visit(w(r, c), analytic.grads.weights[layer](r, c));
    }
    diff::Vector& b = probe.net().bias(layer);
    for (Eigen::Index r = 0; r < b.size(); ++r) visit(b(r), analytic.grads.biases[layer](r));
  }
  double scale = 0.0;
  for (double g : fd) scale = std::max(scale, std::abs(g));
  const double floor = std::max(1e-3 * scale, 1e-12);
  double worst = 0.0;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    const double denom = std::max({std::abs(fd[i]), std::abs(bp[i]), floor});
    worst = std::max(worst, std::abs(fd[i] - bp[i]) / denom);
  }
  return worst;
}

nlohmann::ordered_json to_json(const TrainConfig& cfg) {
  nlohmann::ordered_json j{{"horizon", cfg.horizon},
                           {"gamma", cfg.gamma},
                           {"population", cfg.population},
                           {"minibatch", cfg.minibatch},
                           {"epochs", cfg.max_epochs},
                           {"lr", cfg.learning_rate},
                           {"plateau_tolerance", cfg.plateau_tolerance},
                           {"plateau_window", cfg.plateau_window},
                           {"hidden", cfg.hidden},
                           {"grad_clip", cfg.grad_clip},
                           {"seed", cfg.seed}};
  if (cfg.fixed_objective) {
    j["fixed_objective"] = {cfg.fixed_objective->omega_x, cfg.fixed_objective->omega_theta};
  } else {
    j["fixed_objective"] = nullptr;
  }
  return j;
}

void save_policy(const PolicyModel& policy, const TrainConfig& cfg, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  diff::save_mlp(policy.net(), (fs::path(dir) / "policy.json").string());
  const auto v4 = [](const Eigen::Vector4d& v) { return std::vector<double>{v(0), v(1), v(2), v(3)}; };
  const ObjectiveBox& box = policy.box();
  nlohmann::ordered_json manifest{
      {"network", "policy.json"},
      {"action_limit", kActionLimit},
      {"state_mu", v4(policy.state_mu())},
      {"state_sigma", v4(policy.state_sigma())},
      {"objective_box",
       {{"omega_x", {box.x_lo, box.x_hi}}, {"omega_theta", {box.theta_lo, box.theta_hi}}}},
      {"config", to_json(cfg)}};
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw std::runtime_error("cannot write policy manifest in " + dir);
  out << manifest.dump(2) << '\n';
}

PolicyModel load_policy(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = fs::path(dir) / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot read " + manifest_path.string());
  try {
    const auto manifest = nlohmann::json::parse(in);
    const auto mu = manifest.at("state_mu").get<std::vector<double>>();
    const auto sigma = manifest.at("state_sigma").get<std::vector<double>>();
    const auto bx = manifest.at("objective_box").at("omega_x").get<std::vector<double>>();
    const auto bt = manifest.at("objective_box").at("omega_theta").get<std::vector<double>>();
    if (mu.size() != 4 || sigma.size() != 4 || bx.size() != 2 || bt.size() != 2) {
      throw std::invalid_argument("policy manifest has malformed normalization fields");
    }
    auto net = diff::load_mlp((fs::path(dir) / manifest.at("network").get<std::string>()).string());
    return PolicyModel(std::move(net), Eigen::Vector4d{mu[0], mu[1], mu[2], mu[3]},
                       Eigen::Vector4d{sigma[0], sigma[1], sigma[2], sigma[3]},
                       ObjectiveBox{bx[0], bx[1], bt[0], bt[1]});
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(manifest_path.string() + ": " + e.what());
  }
}

void save_learning_curve(const std::vector<EpochStats>& curve, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch,mean_virtual_return,std_virtual_return\n";
  for (const auto& e : curve) {
    out << e.epoch << ',' << fmt_double(e.mean_virtual_return) << ','
        << fmt_double(e.std_virtual_return) << '\n';
  }
}

}  // namespace vop
