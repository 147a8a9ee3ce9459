#include "vop/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "vop/parallel.hpp"

namespace vop {

using diff::Matrix;

namespace {

std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double standard_error(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  const double n = static_cast<double>(v.size());
  return std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
}

Matrix state_matrix(const std::vector<EnvState>& states) {
  Matrix m(4, static_cast<Eigen::Index>(states.size()));
  for (std::size_t i = 0; i < states.size(); ++i) {
    m.col(static_cast<Eigen::Index>(i)) = states[i].vec();
  }
  return m;
}

Matrix objective_matrix(const std::vector<Objective>& objectives) {
  Matrix m(2, static_cast<Eigen::Index>(objectives.size()));
  for (std::size_t i = 0; i < objectives.size(); ++i) {
    m(0, static_cast<Eigen::Index>(i)) = objectives[i].omega_x;
    m(1, static_cast<Eigen::Index>(i)) = objectives[i].omega_theta;
  }
  return m;
}

std::vector<double> real_returns(const ControllerFactory& factory, std::size_t episode_base,
                                 const std::vector<EnvState>& starts,
                                 const std::vector<Objective>& objectives, int steps,
                                 const PhysicsParams& params, int threads) {
  std::vector<double> out(starts.size());
  parallel_for(starts.size(), threads, [&](std::size_t i) {
    const ActionSource controller = factory(episode_base + i);
    out[i] = run_episode(controller, objectives[i], starts[i], steps, params).total_return;
  });
  return out;
}

ControllerFactory policy_controller(const PolicyModel& policy) {
  return [&policy](std::size_t) -> ActionSource {
    return [&policy](const EnvState& s, const Objective& o) { return policy.act(s, o); };
  };
}

void finish_row(GridRow& row) {
  std::vector<double> real_means;
  std::vector<double> all;
  std::vector<double> vh;
  std::vector<double> vs;
  for (const auto& seed : row.seeds) {
    real_means.push_back(seed.real_mean);
    all.insert(all.end(), seed.real_returns.begin(), seed.real_returns.end());
    if (seed.virtual_h_mean) vh.push_back(*seed.virtual_h_mean);
    if (seed.virtual_steps_mean) vs.push_back(*seed.virtual_steps_mean);
  }
  row.real = summarize(real_means, all);
  // Virtual returns are per-seed means only; with one seed the spread is
  // unavailable and reported as zero.
  if (!vh.empty()) row.virtual_h = Summary{mean_of(vh), standard_error(vh)};
  if (!vs.empty()) row.virtual_steps = Summary{mean_of(vs), standard_error(vs)};
}

nlohmann::ordered_json summary_json(const Summary& s) {
  return {{"mean", s.mean}, {"standard_error", s.standard_error}};
}

}  // namespace

std::vector<GridPoint> default_grid() {
  return {{"-1,0", Objective{-1.0, 0.0}},
          {"-1,3", Objective{-1.0, 3.0}},
          {"0,1", Objective{0.0, 1.0}},
          {"1,2", Objective{1.0, 2.0}},
          {"p", std::nullopt}};
}

GridPoint parse_grid_point(const std::string& text) {
  if (text == "p") return {"p", std::nullopt};
  const auto comma = text.find(',');
  if (comma == std::string::npos) {
    throw std::invalid_argument("grid point '" + text + "' must be 'omega_x,omega_theta' or 'p'");
  }
  Objective obj;
  try {
    std::size_t used_x = 0;
    std::size_t used_t = 0;
    const std::string xs = text.substr(0, comma);
    const std::string ts = text.substr(comma + 1);
    const double ox = std::stod(xs, &used_x);
    const double ot = std::stod(ts, &used_t);
    if (used_x != xs.size() || used_t != ts.size()) throw std::invalid_argument("trailing");
    obj = Objective{ox, ot};
  } catch (const std::exception&) {
    throw std::invalid_argument("grid point '" + text + "' is not a number pair");
  }
  if (!ObjectiveBox{}.contains(obj)) {
    throw std::invalid_argument("grid point '" + text + "' lies outside the objective box");
  }
  return {text, obj};
}

void EvalConfig::validate() const {
  if (grid.empty()) throw std::invalid_argument("eval.grid must not be empty");
  if (n_starts < 1) throw std::invalid_argument("eval.n_starts must be >= 1");
  if (steps < 1) throw std::invalid_argument("eval.steps must be >= 1");
  if (virtual_horizon < 1) throw std::invalid_argument("eval.virtual_horizon must be >= 1");
}

std::vector<EnvState> evaluation_starts(const EvalConfig& cfg) {
  Rng rng(cfg.start_seed);
  std::vector<EnvState> starts;
  starts.reserve(static_cast<std::size_t>(cfg.n_starts));
  for (int i = 0; i < cfg.n_starts; ++i) starts.push_back(sample_initial_state(rng));
  return starts;
}

std::vector<Objective> evaluation_objectives(const GridPoint& point, const EvalConfig& cfg) {
  if (point.objective) {
    return std::vector<Objective>(static_cast<std::size_t>(cfg.n_starts), *point.objective);
  }
  Rng rng(cfg.objective_seed);
  std::vector<Objective> out;
  out.reserve(static_cast<std::size_t>(cfg.n_starts));
  for (int i = 0; i < cfg.n_starts; ++i) out.push_back(sample_objective(rng));
  return out;
}

const GridRow& EvalReport::row(const std::string& label) const {
  for (const auto& r : rows) {
    if (r.point.label == label) return r;
  }
  throw std::out_of_range("no grid row '" + label + "'");
}

Summary summarize(const std::vector<double>& seed_means, const std::vector<double>& all_returns) {
  if (all_returns.empty()) throw std::invalid_argument("summarize: no returns");
  Summary s;
  s.mean = mean_of(all_returns);
  s.standard_error = seed_means.size() >= 2 ? standard_error(seed_means)
                                            : standard_error(all_returns);
  return s;
}

EvalReport evaluate_grid(const std::vector<PolicyModel>& policies, const EnsembleModel* model,
                         const EvalConfig& cfg, const PhysicsParams& params, int threads) {
  cfg.validate();
  if (policies.empty()) throw std::invalid_argument("evaluate_grid: no policies");
  const auto starts = evaluation_starts(cfg);
  const Matrix start_m = state_matrix(starts);

  EvalReport report;
  report.config = cfg;
  for (const auto& point : cfg.grid) {
    GridRow row;
    row.point = point;
    const auto objectives = evaluation_objectives(point, cfg);
    const Matrix omega_m = objective_matrix(objectives);
    for (const auto& policy : policies) {
      SeedResult seed;
      seed.real_returns =
          real_returns(policy_controller(policy), 0, starts, objectives, cfg.steps, params, threads);
      seed.real_mean = mean_of(seed.real_returns);
      if (model != nullptr) {
        const auto dyn = ensemble_transition(*model);
        seed.virtual_h_mean =
            rollout(policy, dyn, start_m, omega_m, cfg.virtual_horizon, 1.0).returns.mean();
        seed.virtual_steps_mean =
            rollout(policy, dyn, start_m, omega_m, cfg.steps, 1.0).returns.mean();
      }
      row.seeds.push_back(std::move(seed));
    }
    finish_row(row);
    report.rows.push_back(std::move(row));
  }
  return report;
}

EvalReport evaluate_controller(const ControllerFactory& controller, const EvalConfig& cfg,
                               const PhysicsParams& params, int threads) {
  cfg.validate();
  const auto starts = evaluation_starts(cfg);
  EvalReport report;
  report.config = cfg;
  std::size_t base = 0;
  for (const auto& point : cfg.grid) {
    GridRow row;
    row.point = point;
    SeedResult seed;
    seed.real_returns = real_returns(controller, base, starts, evaluation_objectives(point, cfg),
                                     cfg.steps, params, threads);
    seed.real_mean = mean_of(seed.real_returns);
    row.seeds.push_back(std::move(seed));
    finish_row(row);
    report.rows.push_back(std::move(row));
    base += starts.size();
  }
  return report;
}

ControllerFactory random_controller(std::uint64_t seed) {
  return [seed](std::size_t episode) -> ActionSource {
    auto rng = std::make_shared<Rng>(derive_seed(seed, episode));
    return [rng](const EnvState&, const Objective&) {
      return rng->uniform(-kActionLimit, kActionLimit);
    };
  };
}

nlohmann::ordered_json to_json(const EvalReport& report) {
  nlohmann::ordered_json doc;
  doc["n_starts"] = report.config.n_starts;
  doc["steps"] = report.config.steps;
  doc["virtual_horizon"] = report.config.virtual_horizon;
  doc["start_seed"] = report.config.start_seed;
  doc["objective_seed"] = report.config.objective_seed;
  doc["rows"] = nlohmann::ordered_json::array();
  for (const auto& row : report.rows) {
    nlohmann::ordered_json r;
    r["label"] = row.point.label;
    if (row.point.objective) {
      r["omega"] = {row.point.objective->omega_x, row.point.objective->omega_theta};
    } else {
      r["omega"] = nullptr;
    }
    r["real"] = summary_json(row.real);
    r["virtual_h"] = row.virtual_h ? summary_json(*row.virtual_h) : nlohmann::ordered_json();
    r["virtual_steps"] =
        row.virtual_steps ? summary_json(*row.virtual_steps) : nlohmann::ordered_json();
    auto seeds = nlohmann::ordered_json::array();
    for (const auto& s : row.seeds) {
      nlohmann::ordered_json js;
      js["real_mean"] = s.real_mean;
      js["virtual_h_mean"] = s.virtual_h_mean ? nlohmann::ordered_json(*s.virtual_h_mean)
                                              : nlohmann::ordered_json();
      js["virtual_steps_mean"] = s.virtual_steps_mean
                                     ? nlohmann::ordered_json(*s.virtual_steps_mean)
                                     : nlohmann::ordered_json();
      js["real_returns"] = s.real_returns;
      seeds.push_back(std::move(js));
    }
    r["seeds"] = std::move(seeds);
    doc["rows"].push_back(std::move(r));
  }
  return doc;
}

std::string to_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "label,omega_x,omega_theta,seed,real_mean,real_se,virtual_h_mean,virtual_steps_mean\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
  for (const auto& row : report.rows) {
    const std::string ox = row.point.objective ? format_number(row.point.objective->omega_x) : "";
    const std::string ot =
        row.point.objective ? format_number(row.point.objective->omega_theta) : "";
    for (std::size_t i = 0; i < row.seeds.size(); ++i) {
      const auto& s = row.seeds[i];
      out << '"' << row.point.label << "\"," << ox << ',' << ot << ',' << i << ','
          << format_number(s.real_mean) << ",," << opt(s.virtual_h_mean) << ','
          << opt(s.virtual_steps_mean) << '\n';
    }
    out << '"' << row.point.label << "\"," << ox << ',' << ot << ",all,"
        << format_number(row.real.mean) << ',' << format_number(row.real.standard_error) << ','
        << (row.virtual_h ? format_number(row.virtual_h->mean) : "") << ','
        << (row.virtual_steps ? format_number(row.virtual_steps->mean) : "") << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------

std::vector<SpecialistSet> train_specialists(const EnsembleModel& model,
                                             const TransitionBatch& batch,
                                             const TrainConfig& base,
                                             const std::vector<Objective>& objectives,
                                             const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw std::invalid_argument("train_specialists: no seeds");
  std::vector<SpecialistSet> sets;
  for (const auto& obj : objectives) {
    SpecialistSet set;
    set.objective = obj;
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg = base;
      cfg.seed = seed;
      cfg.fixed_objective = obj;
      auto result = train_policy(model, batch, cfg);
      set.policies.push_back(std::move(result.policy));
      set.curves.push_back(std::move(result.curve));
    }
    sets.push_back(std::move(set));
  }
  return sets;
}

std::vector<GapEntry> specialist_gap(const EvalReport& vop, const std::vector<SpecialistSet>& sets,
                                     const EvalConfig& cfg, const PhysicsParams& params,
                                     int threads) {
  std::vector<GapEntry> out;
  for (const auto& set : sets) {
    const GridRow* vop_row = nullptr;
    for (const auto& row : vop.rows) {
      if (row.point.objective && *row.point.objective == set.objective) vop_row = &row;
    }
    if (vop_row == nullptr) {
      throw std::invalid_argument("specialist_gap: VOP report lacks a specialist objective");
    }
    EvalConfig single = cfg;
    single.grid = {vop_row->point};
    const EvalReport spec = evaluate_grid(set.policies, nullptr, single, params, threads);
    GapEntry e;
    e.objective = set.objective;
    e.vop_mean = vop_row->real.mean;
    e.specialist_mean = spec.rows.front().real.mean;
    e.gap = e.vop_mean - e.specialist_mean;
    out.push_back(e);
  }
  return out;
}

// ---------------------------------------------------------------------------

ObjectiveSchedule switch_schedule(double omega_theta, const ScenarioConfig& cfg) {
  return [omega_theta, cfg](int step) {
    return Objective{step < cfg.switch_step ? cfg.first_target : cfg.second_target, omega_theta};
  };
}

ScenarioResult objective_switch_scenario(const PolicyModel& policy, double omega_theta,
                                         const PhysicsParams& params, const ScenarioConfig& cfg) {
  if (cfg.switch_step < 0 || cfg.switch_step > cfg.steps) {
    throw std::invalid_argument("scenario: switch step outside the episode");
  }
  ScenarioResult r;
  r.omega_theta = omega_theta;
  r.episode = run_episode([&policy](const EnvState& s, const Objective& o) { return policy.act(s, o); },
                          switch_schedule(omega_theta, cfg), cfg.start, cfg.steps, params);
  const auto& states = r.episode.states;
  r.reached_target = std::abs(states.back().x - cfg.second_target) < cfg.reach_tolerance;
  double max_theta = 0.0;
  for (int t = cfg.switch_step; t <= cfg.steps; ++t) {
    const EnvState& s = states[static_cast<std::size_t>(t)];
    max_theta = std::max(max_theta, std::abs(s.theta));
    if (r.first_reach < 0 && t > cfg.switch_step &&
        std::abs(s.x - cfg.second_target) < cfg.reach_tolerance) {
      r.first_reach = t;
    }
  }
  r.kept_upright = max_theta < cfg.upright_limit;
  r.swung_through = max_theta > cfg.swing_limit;
  return r;
}

std::string trajectory_csv(const Episode& episode) {
  std::ostringstream out;
  out << "t,x,theta,x_dot,theta_dot,a,r,omega_x,omega_theta\n";
  const std::size_t steps = episode.actions.size();
  for (std::size_t t = 0; t < episode.states.size(); ++t) {
    const EnvState& s = episode.states[t];
    out << t << ',' << format_number(s.x) << ',' << format_number(s.theta) << ','
        << format_number(s.x_dot) << ',' << format_number(s.theta_dot) << ',';
    if (t < steps) {
      const Objective& o = episode.objectives[t];
      out << format_number(episode.actions[t]) << ',' << format_number(episode.rewards[t]) << ','
          << format_number(o.omega_x) << ',' << format_number(o.omega_theta) << '\n';
    } else {
      const Objective o = steps > 0 ? episode.objectives.back() : Objective{};
      out << ",," << format_number(o.omega_x) << ',' << format_number(o.omega_theta) << '\n';
    }
  }
  return out.str();
}

// ---------------------------------------------------------------------------

StepFunction ensemble_step(const EnsembleModel& model) {
  return [&model](const EnvState& s, double a) { return predict_mean(model, s, a); };
}

StepFunction environment_step(const PhysicsParams& params) {
  return [params](const EnvState& s, double a) { return env_step(s, a, params); };
}

TransferResult transfer_check(const PolicyModel& policy, const StepFunction& model_step,
                              const Objective& objective, const EnvState& start, int steps,
                              const PhysicsParams& params) {
  if (steps < 1) throw std::invalid_argument("transfer_check: steps must be >= 1");
  TransferResult r;
  const ActionSource act = [&policy](const EnvState& s, const Objective& o) {
    return policy.act(s, o);
  };
  r.real_episode = run_episode(act, objective, start, steps, params);

  Episode& v = r.virtual_episode;
  v.states.push_back(start);
  for (int t = 0; t < steps; ++t) {
    const double a = std::clamp(act(v.states.back(), objective), -kActionLimit, kActionLimit);
    const EnvState next = model_step(v.states.back(), a);
    if (!next.finite()) {
      throw std::runtime_error("transfer_check: model state non-finite at step " +
                               std::to_string(t + 1));
    }
    const double rew = reward(next, objective);
    v.states.push_back(next);
    v.actions.push_back(a);
    v.rewards.push_back(rew);
    v.objectives.push_back(objective);
    v.total_return += rew;
  }

  for (std::size_t t = 0; t < v.states.size(); ++t) {
    const EnvState& a = v.states[t];
    const EnvState& b = r.real_episode.states[t];
    const Eigen::Vector4d d{a.x - b.x, angle_diff(a.theta, b.theta), a.x_dot - b.x_dot,
                            a.theta_dot - b.theta_dot};
    r.divergence.push_back(d.norm());
  }
  return r;
}

bool ends_balanced(const Episode& episode, const Objective& objective, int window) {
  const auto& st = episode.states;
  if (window < 1 || static_cast<std::size_t>(window) > st.size()) return false;
  for (std::size_t t = st.size() - static_cast<std::size_t>(window); t < st.size(); ++t) {
    if (std::abs(st[t].theta) >= 0.4 || std::abs(st[t].x - objective.omega_x) >= 0.3) {
      return false;
    }
  }
  return true;
}

double conditioning_gap(const PolicyModel& policy, const std::vector<EnvState>& states,
                        double omega_x) {
  if (states.empty()) throw std::invalid_argument("conditioning_gap: no states");
  double total = 0.0;
  for (const auto& s : states) {
    total += std::abs(policy.act(s, Objective{omega_x, 0.0}) - policy.act(s, Objective{omega_x, 4.0}));
  }
  return total / static_cast<double>(states.size());
}

std::vector<EnvState> mid_swing_states(const TransitionBatch& batch, std::size_t n,
                                       std::uint64_t seed) {
  std::vector<EnvState> pool;
  for (const auto& tr : batch.transitions) {
    const double a = std::abs(tr.s.theta);
    if (a > 0.5 && a < 2.5) pool.push_back(tr.s);
  }
  if (pool.size() < n) throw std::invalid_argument("mid_swing_states: not enough candidates");
  Rng rng(seed);
  rng.shuffle(pool.begin(), pool.end());
  pool.resize(n);
  return pool;
}

}  // namespace vop
