#include "vop/cli.hpp"

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "vop/config.hpp"
#include "vop/dataset.hpp"
#include "vop/ensemble.hpp"
#include "vop/evaluator.hpp"
#include "vop/policy.hpp"
#include "vop/service.hpp"

namespace vop {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

constexpr const char* kVersion = "0.1.0";

std::atomic<bool> g_interrupted{false};

extern "C" void on_signal(int) { g_interrupted = true; }

class MissingArtifact : public std::runtime_error {
 public:
  explicit MissingArtifact(const fs::path& p)
      : std::runtime_error("missing artifact: " + p.string()), path(p) {}
  fs::path path;
};

void require(const fs::path& p) {
  if (!fs::exists(p)) throw MissingArtifact(p);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_json(const fs::path& path, const ojson& doc) { write_text(path, doc.dump(2) + "\n"); }

std::string seed_dir(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "seed_%02d", i);
  return buf;
}

std::string label_dir(const std::string& label) {
  std::string out = "omega_";
  for (char c : label) out += (c == ',') ? '_' : c;
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// Run-level manifest: one entry per stage, rewritten whenever a stage runs.
void record_stage(const fs::path& out_dir, const PipelineConfig& cfg, const std::string& stage,
                  ojson details) {
  const fs::path path = out_dir / "manifest.json";
  ojson manifest;
  if (fs::exists(path)) {
    std::ifstream in(path);
    try {
      manifest = ojson::parse(in);
    } catch (const nlohmann::json::parse_error&) {
      manifest = ojson();
    }
  }
  if (!manifest.is_object()) manifest = ojson::object();
  manifest["tool"] = "vop";
  manifest["version"] = kVersion;
  if (!manifest.contains("stages")) manifest["stages"] = ojson::object();
  details["config_hash"] = hex64(config_hash(cfg));
  details["config"] = to_json(cfg);
  details["config"].erase("threads");
  manifest["stages"][stage] = std::move(details);
  write_json(path, manifest);
}

struct Context {
  PipelineConfig cfg;
  fs::path out;
  std::ostream& log;

  fs::path data() const { return out / cfg.paths.data; }
  fs::path models() const { return out / cfg.paths.models; }
  fs::path policy_root() const { return out / cfg.paths.policy; }
  fs::path eval() const { return out / cfg.paths.eval; }
  fs::path policy(int i) const { return policy_root() / seed_dir(i); }
};

TransitionBatch load_data(const Context& ctx) {
  require(ctx.data());
  return load_batch(ctx.data().string());
}

EnsembleModel load_models(const Context& ctx) {
  require(ctx.models() / "manifest.json");
  return load_ensemble(ctx.models().string());
}

PolicyModel load_policy_seed(const Context& ctx, int i) {
  require(ctx.policy(i) / "manifest.json");
  return load_policy(ctx.policy(i).string());
}

std::vector<PolicyModel> load_policies(const Context& ctx) {
  std::vector<PolicyModel> out;
  for (int i = 0; i < ctx.cfg.eval.n_seeds; ++i) out.push_back(load_policy_seed(ctx, i));
  return out;
}

// ---------------------------------------------------------------------------

void cmd_gen_data(const Context& ctx) {
  const auto& d = ctx.cfg.dataset;
  const TransitionBatch batch =
      generate_batch(d.episodes, d.steps, d.seed, ctx.cfg.physics, ctx.cfg.threads);
  fs::create_directories(ctx.data().parent_path());
  save_batch(batch, ctx.data().string());
  ctx.log << "wrote " << batch.transitions.size() << " transitions to " << ctx.data().string()
          << "\n";
  record_stage(ctx.out, ctx.cfg, "gen-data",
               {{"outputs", {ctx.cfg.paths.data}}, {"records", batch.transitions.size()}});
}

void cmd_train_models(const Context& ctx) {
  const TransitionBatch batch = load_data(ctx);
  const auto result = train_ensemble(batch, ctx.cfg.ensemble, ctx.cfg.threads);
  save_ensemble(result.model, result.members, ctx.cfg.ensemble, ctx.models().string());

  const ModelReport report =
      model_report(ensemble_transition(result.model), batch, result.holdout_episodes,
                   result.model.norm());
  const auto v4 = [](const Eigen::Vector4d& v) { return std::vector<double>{v(0), v(1), v(2), v(3)}; };
  ojson drift = ojson::array();
  for (const auto& p : report.drift) {
    drift.push_back({{"horizon", p.horizon},
                     {"rmse", v4(p.rmse)},
                     {"normalized", p.normalized},
                     {"samples", p.samples}});
  }
  ojson mse = ojson::array();
  for (const auto& m : result.members) mse.push_back(m.holdout_mse);
  write_json(ctx.models() / "report.json",
             {{"holdout_episodes", result.holdout_episodes},
              {"member_holdout_mse", mse},
              {"one_step_rmse", v4(report.one_step_rmse)},
              {"drift", drift},
              {"drift_violation_fraction", report.drift_violation_fraction},
              {"parameter_hash", hex64(result.model.parameter_hash())}});
  ctx.log << "ensemble of " << result.model.size() << " members saved to "
          << ctx.models().string() << "; one-step RMSE x " << report.one_step_rmse(0)
          << " theta " << report.one_step_rmse(1) << "\n";
  record_stage(ctx.out, ctx.cfg, "train-models",
               {{"outputs", {ctx.cfg.paths.models}},
                {"parameter_hash", hex64(result.model.parameter_hash())}});
}

void cmd_train_policy(const Context& ctx, std::optional<Objective> fixed) {
  const TransitionBatch batch = load_data(ctx);
  const EnsembleModel model = load_models(ctx);
  ojson seeds = ojson::array();
  for (int i = 0; i < ctx.cfg.eval.n_seeds; ++i) {
    TrainConfig tc = ctx.cfg.train;
    tc.seed = ctx.cfg.train.seed + static_cast<std::uint64_t>(i);
    tc.fixed_objective = fixed;
    const auto result = train_policy(model, batch, tc);
    const fs::path dir = ctx.policy(i);
    save_policy(result.policy, tc, dir.string());
    save_learning_curve(result.curve, (dir / "learning_curve.csv").string());
    const auto& last = result.curve.back();
    write_json(dir / "training.json",
               {{"epochs_run", last.epoch},
                {"plateaued", result.plateaued},
                {"final_virtual_return", last.mean_virtual_return},
                {"model_hash_before", hex64(result.model_hash_before)},
                {"model_hash_after", hex64(result.model_hash_after)}});
    ctx.log << seed_dir(i) << ": " << last.epoch << " epochs, virtual return "
            << fmt(last.mean_virtual_return) << "\n";
    seeds.push_back(seed_dir(i));
  }
  record_stage(ctx.out, ctx.cfg, "train-policy",
               {{"outputs", {ctx.cfg.paths.policy}}, {"seeds", seeds}});
}

void cmd_evaluate(const Context& ctx, bool specialists) {
  const TransitionBatch batch = load_data(ctx);
  const EnsembleModel model = load_models(ctx);
  const auto policies = load_policies(ctx);
  const auto& protocol = ctx.cfg.eval.protocol;
  const EvalReport report =
      evaluate_grid(policies, &model, protocol, ctx.cfg.physics, ctx.cfg.threads);
  const EvalReport baseline = evaluate_controller(random_controller(ctx.cfg.dataset.seed), protocol,
                                                  ctx.cfg.physics, ctx.cfg.threads);

  ojson doc = to_json(report);
  doc["random_policy"] = to_json(baseline)["rows"];
  const auto mid = mid_swing_states(batch, 100, protocol.start_seed);
  ojson cond = ojson::array();
  for (const auto& p : policies) cond.push_back(conditioning_gap(p, mid));
  doc["conditioning_gap"] = cond;

  if (specialists) {
    std::vector<Objective> fixed;
    for (const auto& g : protocol.grid) {
      if (g.objective) fixed.push_back(*g.objective);
    }
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < ctx.cfg.eval.n_seeds; ++i) {
      seeds.push_back(ctx.cfg.train.seed + static_cast<std::uint64_t>(i));
    }
    const auto sets = train_specialists(model, batch, ctx.cfg.train, fixed, seeds);
    for (std::size_t k = 0; k < sets.size(); ++k) {
      for (std::size_t i = 0; i < sets[k].policies.size(); ++i) {
        TrainConfig tc = ctx.cfg.train;
        tc.seed = seeds[i];
        tc.fixed_objective = sets[k].objective;
        const GridPoint* point = nullptr;
        for (const auto& g : protocol.grid) {
          if (g.objective && *g.objective == sets[k].objective) point = &g;
        }
        const fs::path dir =
            ctx.out / "specialists" / label_dir(point->label) / seed_dir(static_cast<int>(i));
        save_policy(sets[k].policies[i], tc, dir.string());
        save_learning_curve(sets[k].curves[i], (dir / "learning_curve.csv").string());
      }
    }
    ojson gaps = ojson::array();
    for (const auto& g : specialist_gap(report, sets, protocol, ctx.cfg.physics, ctx.cfg.threads)) {
      gaps.push_back({{"omega", {g.objective.omega_x, g.objective.omega_theta}},
                      {"vop_mean", g.vop_mean},
                      {"specialist_mean", g.specialist_mean},
                      {"gap", g.gap}});
    }
    doc["specialist_gap"] = gaps;
  }

  write_json(ctx.eval() / "report.json", doc);
  write_text(ctx.eval() / "report.csv", to_csv(report));
  for (const auto& row : report.rows) {
    ctx.log << "omega " << row.point.label << ": real " << fmt(row.real.mean) << " +- "
            << fmt(row.real.standard_error);
    if (row.virtual_steps) ctx.log << ", virtual " << fmt(row.virtual_steps->mean);
    ctx.log << "\n";
  }
  record_stage(ctx.out, ctx.cfg, "evaluate",
               {{"outputs", {ctx.cfg.paths.eval + "/report.json", ctx.cfg.paths.eval + "/report.csv"}},
                {"specialists", specialists}});
}

void cmd_scenario(const Context& ctx, int policy_seed, std::optional<double> omega_x,
                  std::optional<double> omega_theta) {
  const PolicyModel policy = load_policy_seed(ctx, policy_seed);
  const EnsembleModel model = load_models(ctx);
  std::vector<double> thetas =
      omega_theta ? std::vector<double>{*omega_theta} : std::vector<double>{3.0, 1.0};
  ojson runs = ojson::array();
  for (double ot : thetas) {
    const ScenarioResult r = objective_switch_scenario(policy, ot, ctx.cfg.physics);
    const std::string name = "scenario_theta_" + fmt(ot) + ".csv";
    write_text(ctx.eval() / name, trajectory_csv(r.episode));
    runs.push_back({{"omega_theta", ot},
                    {"trajectory", name},
                    {"return", r.episode.total_return},
                    {"reached_target", r.reached_target},
                    {"kept_upright", r.kept_upright},
                    {"swung_through", r.swung_through},
                    {"first_reach", r.first_reach}});
    ctx.log << "omega_theta " << fmt(ot) << ": reached " << r.reached_target << ", upright "
            << r.kept_upright << ", swung " << r.swung_through << ", first reach "
            << r.first_reach << "\n";
  }

  const Objective obj{omega_x.value_or(0.0), omega_theta.value_or(1.0)};
  const EnvState start{0.0, -kPi, 0.0, 0.0};
  const TransferResult tr =
      transfer_check(policy, ensemble_step(model), obj, start, ctx.cfg.eval.protocol.steps,
                     ctx.cfg.physics);
  write_text(ctx.eval() / "transfer_virtual.csv", trajectory_csv(tr.virtual_episode));
  write_text(ctx.eval() / "transfer_real.csv", trajectory_csv(tr.real_episode));
  write_json(ctx.eval() / "scenario.json",
             {{"policy", seed_dir(policy_seed)},
              {"switch", runs},
              {"transfer",
               {{"omega", {obj.omega_x, obj.omega_theta}},
                {"virtual_return", tr.virtual_episode.total_return},
                {"real_return", tr.real_episode.total_return},
                {"virtual_balanced", ends_balanced(tr.virtual_episode, obj)},
                {"real_balanced", ends_balanced(tr.real_episode, obj)},
                {"divergence", tr.divergence}}}});
  record_stage(ctx.out, ctx.cfg, "scenario", {{"outputs", {ctx.cfg.paths.eval + "/scenario.json"}}});
}

void cmd_serve(const Context& ctx, int policy_seed, std::optional<double> omega_x,
               std::optional<double> omega_theta, double duration) {
  const fs::path dir = ctx.policy(policy_seed);
  PolicyModel policy = load_policy_seed(ctx, policy_seed);
  const Objective initial{omega_x.value_or(0.0), omega_theta.value_or(1.0)};
  auto session = std::make_shared<SteerSession>(std::move(policy), ctx.cfg.physics, dir.string(),
                                                EnvState{0.0, -kPi, 0.0, 0.0}, initial);
  SteerService service(session, ServiceOptions{ctx.cfg.service.host, ctx.cfg.service.port,
                                               ctx.cfg.service.tick_hz});
  service.start();
  ctx.log << "listening on http://" << ctx.cfg.service.host << ":" << service.port() << "\n"
          << std::flush;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  const auto begin = std::chrono::steady_clock::now();
  while (!g_interrupted) {
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    if (duration > 0 &&
        std::chrono::duration<double>(std::chrono::steady_clock::now() - begin).count() >= duration) {
      break;
    }
  }
  service.stop();
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const PipelineConfig defaults;
  CLI::App app{"Variable-objective policy pipeline for the cart-pole swing-up benchmark", "vop"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  std::string config_path;
  std::string out_dir = "run";
  std::uint64_t seed = 0;
  int threads = defaults.threads;
  app.add_option("--config", config_path, "JSON config file (flags override it)");
  app.add_option("--out", out_dir, "Run directory for all outputs")->capture_default_str();
  auto* seed_opt = app.add_option("--seed", seed, "Seed of the stage being run")
                       ->capture_default_str();
  auto* threads_opt =
      app.add_option("--threads", threads, "Worker threads")->capture_default_str()->check(
          CLI::PositiveNumber);

  int episodes = defaults.dataset.episodes;
  int steps = defaults.dataset.steps;
  int k = defaults.ensemble.k;
  int model_epochs = defaults.ensemble.max_epochs;
  int policy_epochs = defaults.train.max_epochs;
  int horizon = defaults.train.horizon;
  double gamma = defaults.train.gamma;
  int n_seeds = defaults.eval.n_seeds;
  double omega_x = 0.0;
  double omega_theta = 1.0;
  int policy_seed = 0;
  int port = defaults.service.port;
  double tick_hz = defaults.service.tick_hz;
  double duration = 0.0;
  bool specialists = false;

  auto* gen = app.add_subcommand("gen-data", "Collect the random-action transition batch");
  auto* ep_opt = gen->add_option("--episodes", episodes, "Episodes")->capture_default_str();
  auto* st_opt = gen->add_option("--steps", steps, "Steps per episode")->capture_default_str();

  auto* tm = app.add_subcommand("train-models", "Train the dynamics ensemble");
  auto* k_opt = tm->add_option("--k", k, "Ensemble members")->capture_default_str();
  auto* me_opt = tm->add_option("--epochs", model_epochs, "Maximum epochs per member")
                     ->capture_default_str();

  auto* tp = app.add_subcommand("train-policy", "Train policies by backpropagation through model rollouts");
  auto* h_opt = tp->add_option("--horizon", horizon, "Rollout horizon")->capture_default_str();
  auto* g_opt = tp->add_option("--gamma", gamma, "Discount factor")->capture_default_str();
  auto* pe_opt = tp->add_option("--epochs", policy_epochs, "Maximum epochs")->capture_default_str();
  auto* ns_tp = tp->add_option("--n-seeds", n_seeds, "Independent training seeds")
                    ->capture_default_str();
  auto* ox_tp = tp->add_option("--omega-x", omega_x,
                               "Fix omega_x (with --omega-theta: train a specialist)")
                    ->capture_default_str();
  auto* ot_tp = tp->add_option("--omega-theta", omega_theta,
                               "Fix omega_theta (with --omega-x: train a specialist)")
                    ->capture_default_str();

  auto* ev = app.add_subcommand("evaluate", "Evaluate trained policies on the objective grid");
  auto* ns_ev = ev->add_option("--n-seeds", n_seeds, "Policy seeds to evaluate")
                    ->capture_default_str();
  auto* sp_flag = ev->add_flag("--specialists", specialists,
                               "Also train and compare fixed-objective specialists");

  auto* sc = app.add_subcommand("scenario", "Run the objective-switch scenario and a model/env comparison");
  sc->add_option("--policy-seed", policy_seed, "Policy seed directory to use")->capture_default_str();
  auto* ox_sc = sc->add_option("--omega-x", omega_x, "omega_x for the model/env comparison")
                    ->capture_default_str();
  auto* ot_sc = sc->add_option("--omega-theta", omega_theta,
                               "Single omega_theta to run (default: 3 and 1)")
                    ->capture_default_str();

  auto* sv = app.add_subcommand("serve", "Run the live steering service");
  sv->add_option("--policy-seed", policy_seed, "Policy seed directory to serve")->capture_default_str();
  auto* port_opt = sv->add_option("--port", port, "HTTP port (0 picks a free port)")
                       ->capture_default_str()->check(CLI::Range(0, 65535));
  auto* hz_opt = sv->add_option("--tick-hz", tick_hz, "Simulation ticks per second (0: manual)")
                     ->capture_default_str();
  auto* ox_sv = sv->add_option("--omega-x", omega_x, "Initial omega_x")->capture_default_str();
  auto* ot_sv = sv->add_option("--omega-theta", omega_theta, "Initial omega_theta")
                    ->capture_default_str();
  sv->add_option("--duration", duration, "Stop after this many seconds (0: run until interrupted)")
      ->capture_default_str();

  for (auto* sub : {gen, tm, tp, ev, sc, sv}) sub->fallthrough();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  PipelineConfig cfg;
  try {
    if (!config_path.empty()) {
      if (!fs::exists(config_path)) {
        err << "error: missing artifact: " << config_path << "\n";
        return kExitUsage;
      }
      cfg = load_config(config_path);
    }
    if (threads_opt->count()) cfg.threads = threads;
    if (gen->parsed()) {
      if (seed_opt->count()) cfg.dataset.seed = seed;
      if (ep_opt->count()) cfg.dataset.episodes = episodes;
      if (st_opt->count()) cfg.dataset.steps = steps;
    }
    if (tm->parsed()) {
      if (seed_opt->count()) cfg.ensemble.seed = seed;
      if (k_opt->count()) cfg.ensemble.k = k;
      if (me_opt->count()) cfg.ensemble.max_epochs = model_epochs;
    }
    if (tp->parsed()) {
      if (seed_opt->count()) cfg.train.seed = seed;
      if (h_opt->count()) cfg.train.horizon = horizon;
      if (g_opt->count()) cfg.train.gamma = gamma;
      if (pe_opt->count()) cfg.train.max_epochs = policy_epochs;
      if (ns_tp->count()) cfg.eval.n_seeds = n_seeds;
    }
    if (ev->parsed()) {
      if (seed_opt->count()) cfg.train.seed = seed;
      if (ns_ev->count()) cfg.eval.n_seeds = n_seeds;
      specialists = sp_flag->count() > 0 || cfg.eval.specialists;
    }
    if (sv->parsed()) {
      if (port_opt->count()) cfg.service.port = port;
      if (hz_opt->count()) cfg.service.tick_hz = tick_hz;
    }
    cfg.validate();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  const auto opt_value = [](CLI::Option* o, double v) {
    return o->count() ? std::optional<double>(v) : std::nullopt;
  };

  Context ctx{cfg, fs::path(out_dir), out};
  try {
    if (gen->parsed()) {
      cmd_gen_data(ctx);
    } else if (tm->parsed()) {
      cmd_train_models(ctx);
    } else if (tp->parsed()) {
      const bool fx = ox_tp->count() > 0;
      const bool ft = ot_tp->count() > 0;
      if (fx != ft) {
        err << "error: --omega-x and --omega-theta must be given together\n";
        return kExitUsage;
      }
      std::optional<Objective> fixed;
      if (fx) {
        fixed = Objective{omega_x, omega_theta};
        if (!ObjectiveBox{}.contains(*fixed)) {
          err << "error: objective outside the training box\n";
          return kExitUsage;
        }
      }
      cmd_train_policy(ctx, fixed);
    } else if (ev->parsed()) {
      cmd_evaluate(ctx, specialists);
    } else if (sc->parsed()) {
      cmd_scenario(ctx, policy_seed, opt_value(ox_sc, omega_x), opt_value(ot_sc, omega_theta));
    } else if (sv->parsed()) {
      cmd_serve(ctx, policy_seed, opt_value(ox_sv, omega_x), opt_value(ot_sv, omega_theta),
                duration);
    }
  } catch (const MissingArtifact& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace vop
