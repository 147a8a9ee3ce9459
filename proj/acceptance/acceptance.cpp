// End-to-end acceptance run: trains every stage at full scale and prints one
// PASS/FAIL line per criterion, followed by the measured values.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vop/config.hpp"
#include "vop/dataset.hpp"
#include "vop/ensemble.hpp"
#include "vop/evaluator.hpp"
#include "vop/policy.hpp"

using namespace vop;
using diff::Matrix;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << text;
}

struct Verdict {
  std::string name;
  bool pass = false;
  std::vector<std::string> details;
};

std::vector<Verdict> g_verdicts;

void report(Verdict v) {
  std::printf("%s  %s\n", v.pass ? "PASS" : "FAIL", v.name.c_str());
  for (const auto& d : v.details) std::printf("      %s\n", d.c_str());
  std::fflush(stdout);
  g_verdicts.push_back(std::move(v));
}

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, a, b, c);
  return buf;
}

void progress(const std::string& what) {
  std::fprintf(stderr, "[acceptance] %s\n", what.c_str());
}

// Random composite losses on random nets against central differences.
double diffcore_fd_error() {
  Rng rng(2024);
  const std::vector<std::vector<int>> shapes = {{4, 10, 1}, {6, 20, 20, 4}, {3, 7, 2}, {5, 4, 4, 3}};
  const diff::Activation outs[] = {diff::Activation::identity, diff::Activation::tanh};
  const double h = 1e-5;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto& dims = shapes[static_cast<std::size_t>(trial) % shapes.size()];
    diff::Mlp net = diff::Mlp::init(dims, outs[trial % 2], 1000 + static_cast<std::uint64_t>(trial));
    // Nonzero biases keep pre-activations off the rectifier kink at exactly 0.
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
      for (Eigen::Index i = 0; i < net.bias(l).size(); ++i) net.bias(l)(i) = rng.uniform(-0.3, 0.3);
    }
    Matrix x(dims.front(), 3), w(dims.back(), 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1.5, 1.5);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-1, 1);
    auto loss = [&](const diff::Mlp& n, diff::GradientBuffer* g, diff::Tape& tape) {
      const auto out = diff::mlp_forward(n, tape, tape.leaf(x), g);
      return tape.sum(tape.add(tape.square(out), tape.mul_const(tape.tanh(out), w)));
    };
    diff::GradientBuffer grads(net);
    {
      diff::Tape tape;
      tape.backward(loss(net, &grads, tape));
    }
    std::vector<double> fd, bp;
    diff::Mlp probe = net;
    auto value = [&] {
      diff::Tape tape;
      return tape.value(loss(probe, nullptr, tape))(0, 0);
    };
    for (std::size_t l = 0; l < probe.num_layers(); ++l) {
      auto visit = [&](double& p, double g) {
        const double saved = p;
        p = saved + h;
        const double up = value();
        p = saved - h;
        const double down = value();
        p = saved;
        fd.push_back((up - down) / (2 * h));
        bp.push_back(g);
      };
      for (Eigen::Index i = 0; i < probe.weight(l).size(); ++i) {
        visit(probe.weight(l).data()[i], grads.weights[l].data()[i]);
      }
      for (Eigen::Index i = 0; i < probe.bias(l).size(); ++i) visit(probe.bias(l)(i), grads.biases[l](i));
    }
    double scale = 0.0;
    for (double g : fd) scale = std::max(scale, std::abs(g));
    for (std::size_t i = 0; i < fd.size(); ++i) {
      const double denom = std::max({std::abs(fd[i]), std::abs(bp[i]), 1e-3 * scale, 1e-10});
      worst = std::max(worst, std::abs(fd[i] - bp[i]) / denom);
    }
  }
  return worst;
}

void check_gradients() {
  const auto t0 = Clock::now();
  const double core = diffcore_fd_error();

  std::vector<diff::Mlp> members;
  for (int i = 0; i < 2; ++i) {
    members.push_back(diff::Mlp::init({5, 20, 20, 4}, diff::Activation::identity, 7 + i));
  }
  NormStats norm;
  norm.sigma_s << 1.4, 1.8, 1.1, 2.5;
  norm.sigma_ds << 0.02, 0.05, 0.3, 0.4;
  EnsembleModel model(members, norm);
  model.freeze();
  const PolicyModel policy = PolicyModel::init(norm, 11);
  Matrix s1(4, 1), o1(2, 1);
  s1 << 0.4, 0.9, 0.2, -0.5;
  o1 << 0.5, 2.0;
  const double single = policy_gradient_check(policy, model, s1, o1, 1, 1.0);
  Matrix s4(4, 4), o4(2, 4);
  s4 << 0.4, -1.0, 1.2, 0.0,
        0.9, 2.5, -1.0, 1.8,
        0.2, 0.0, 0.3, 0.0,
        -0.5, 0.0, 1.0, 0.0;
  o4 << 0.5, -1.0, 1.0, 0.0,
        2.0, 3.0, 1.0, 0.5;
  const double chain = policy_gradient_check(policy, model, s4, o4, 5, 1.0);
  const double elapsed = seconds_since(t0);
  report({"gradient oracle: finite-difference checks",
          core < 1e-4 && single < 1e-4 && chain < 1e-3 && elapsed < 60.0,
          {fmt("network primitives, 100 random trials: max rel error %.3g (< 1e-4)", core),
           fmt("policy loss, H=1: %.3g (< 1e-4); H=5 over 4 pairs: %.3g (< 1e-3)", single, chain),
           fmt("elapsed %.1f s (< 60 s)", elapsed)}});
}

// Per-seed learning-curve checks.
struct CurveCheck {
  bool monotone = true;
  int worst_epoch = -1;
  double worst_drop = 0.0;
};

CurveCheck check_curve(const std::vector<EpochStats>& curve) {
  CurveCheck c;
  for (std::size_t e = 1; e < curve.size(); ++e) {
    const double prev = curve[e - 1].mean_virtual_return;
    const double cur = curve[e].mean_virtual_return;
    const double drop = (prev - cur) / std::abs(prev);
    if (drop > c.worst_drop) {
      c.worst_drop = drop;
      c.worst_epoch = static_cast<int>(e);
    }
    if (cur < prev - 0.10 * std::abs(prev)) c.monotone = false;
  }
  return c;
}

bool first_reach_earlier(int fast, int slow) {
  if (fast < 0) return false;
  return slow < 0 || fast < slow;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Full-scale acceptance run"};
  std::string out_dir = "acceptance_run";
  int seeds = 3;
  int threads = 1;
  app.add_option("--out", out_dir, "Directory for the artifacts of this run")->capture_default_str();
  app.add_option("--seeds", seeds, "Policy training seeds")->capture_default_str();
  app.add_option("--threads", threads, "Worker threads")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  const fs::path out(out_dir);
  fs::create_directories(out);
  const PipelineConfig cfg;
  const PhysicsParams& params = cfg.physics;

  check_gradients();

  // Data and dynamics models.
  progress("collecting the transition batch");
  const TransitionBatch batch =
      generate_batch(cfg.dataset.episodes, cfg.dataset.steps, cfg.dataset.seed, params, threads);
  fs::create_directories(out / "data");
  save_batch(batch, (out / "data" / "batch.jsonl").string());

  progress("training the dynamics ensemble");
  auto t0 = Clock::now();
  auto ens = train_ensemble(batch, cfg.ensemble, threads);
  const double ensemble_seconds = seconds_since(t0);
  ens.model.freeze();
  save_ensemble(ens.model, ens.members, cfg.ensemble, (out / "models").string());
  const ModelReport mr =
      model_report(ensemble_transition(ens.model), batch, ens.holdout_episodes, ens.model.norm());
  {
    double d65 = -1, d80 = -1;
    for (const auto& p : mr.drift) {
      if (p.horizon == 65) d65 = p.normalized;
      if (p.horizon == 80) d80 = p.normalized;
    }
    std::vector<double> mses;
    for (const auto& m : ens.members) mses.push_back(m.holdout_mse);
    std::vector<double> sorted = mses;
    std::sort(sorted.begin(), sorted.end());
    const double median = 0.5 * (sorted[(sorted.size() - 1) / 2] + sorted[sorted.size() / 2]);
    const bool healthy = sorted.back() <= 5.0 * median && sorted.front() >= median / 5.0;
    report({"model quality: one-step holdout RMSE and open-loop drift",
            mr.one_step_rmse(0) < 0.02 && mr.one_step_rmse(1) < 0.02 && d65 < d80 &&
                ensemble_seconds < 20 * 60,
            {fmt("one-step RMSE x %.4f m, theta %.4f rad (< 0.02 each)", mr.one_step_rmse(0),
                 mr.one_step_rmse(1)),
             fmt("normalized drift h=65 %.4f vs h=80 %.4f", d65, d80),
             fmt("training time %.0f s (< 1200 s)", ensemble_seconds),
             fmt("member holdout MSE median %.3g, spread within 5x of median: ", median) +
                 (healthy ? "yes" : "no")}});
  }

  // Variable-objective policies.
  std::vector<PolicyTrainResult> vops;
  t0 = Clock::now();
  for (int i = 0; i < seeds; ++i) {
    progress("training policy seed " + std::to_string(i));
    TrainConfig tc = cfg.train;
    tc.seed = cfg.train.seed + static_cast<std::uint64_t>(i);
    vops.push_back(train_policy(ens.model, batch, tc));
    char dir[32];
    std::snprintf(dir, sizeof dir, "seed_%02d", i);
    save_policy(vops.back().policy, tc, (out / "policy" / dir).string());
    save_learning_curve(vops.back().curve, (out / "policy" / dir / "learning_curve.csv").string());
  }
  std::vector<PolicyModel> policies;
  for (const auto& r : vops) policies.push_back(r.policy);
  progress("evaluating");
  const EvalReport rep = evaluate_grid(policies, &ens.model, cfg.eval.protocol, params, threads);
  const double vop_seconds = seconds_since(t0);
  write_text(out / "eval" / "report.json", to_json(rep).dump(2) + "\n");
  write_text(out / "eval" / "report.csv", to_csv(rep));

  {
    const std::vector<std::pair<std::string, double>> targets = {
        {"-1,0", -44}, {"-1,3", -166}, {"0,1", -74}, {"1,2", -121}, {"p", -121}};
    bool ok = vop_seconds < 2 * 3600;
    std::vector<std::string> lines;
    for (const auto& [label, target] : targets) {
      const auto& row = rep.row(label);
      const bool in = std::abs(row.real.mean - target) <= 0.25 * std::abs(target);
      ok = ok && in;
      lines.push_back("omega " + label + fmt(": real %.1f +- %.1f, target %.0f +- 25%", row.real.mean,
                                             row.real.standard_error, target) +
                      (in ? "" : "  <- outside"));
    }
    lines.push_back(fmt("training + evaluation %.0f s (< 7200 s)", vop_seconds));
    report({"benchmark grid: real-environment returns within 25% of the reference", ok, lines});
  }
  {
    bool ok = true;
    std::vector<std::string> lines;
    for (const auto& row : rep.rows) {
      const double gap = std::abs(row.virtual_steps->mean - row.real.mean);
      ok = ok && gap <= 30.0;
      lines.push_back("omega " + row.point.label +
                      fmt(": virtual %.1f (H=65: %.1f), real %.1f", row.virtual_steps->mean,
                          row.virtual_h->mean, row.real.mean) +
                      fmt(", |gap| %.1f (<= 30)", gap));
    }
    report({"virtual/real consistency", ok, lines});
  }

  // Specialists.
  {
    std::vector<Objective> fixed;
    for (const auto& g : cfg.eval.protocol.grid) {
      if (g.objective) fixed.push_back(*g.objective);
    }
    std::vector<std::uint64_t> seed_list;
    for (int i = 0; i < seeds; ++i) seed_list.push_back(cfg.train.seed + static_cast<std::uint64_t>(i));
    progress("training specialists");
    const auto sets = train_specialists(ens.model, batch, cfg.train, fixed, seed_list);
    const auto gaps = specialist_gap(rep, sets, cfg.eval.protocol, params, threads);
    bool ok = true;
    std::vector<std::string> lines;
    nlohmann::ordered_json doc = nlohmann::ordered_json::array();
    for (const auto& g : gaps) {
      // Returns are negative: "within 15%" means at most 15% more cost.
      const bool on_par = g.vop_mean >= 1.15 * g.specialist_mean;
      ok = ok && on_par;
      lines.push_back(fmt("omega (%g,%g): ", g.objective.omega_x, g.objective.omega_theta) +
                      fmt("VOP %.1f, specialist %.1f, bound %.1f", g.vop_mean, g.specialist_mean,
                          1.15 * g.specialist_mean));
      doc.push_back({{"omega", {g.objective.omega_x, g.objective.omega_theta}},
                     {"vop_mean", g.vop_mean},
                     {"specialist_mean", g.specialist_mean}});
    }
    write_text(out / "eval" / "specialists.json", doc.dump(2) + "\n");
    report({"specialist parity", ok, lines});
  }

  // Objective switch.
  {
    int passing = 0;
    std::vector<std::string> lines;
    for (int i = 0; i < seeds; ++i) {
      const auto slow = objective_switch_scenario(policies[static_cast<std::size_t>(i)], 3.0, params);
      const auto fast = objective_switch_scenario(policies[static_cast<std::size_t>(i)], 1.0, params);
      write_text(out / "eval" / ("scenario_seed" + std::to_string(i) + "_theta3.csv"),
                 trajectory_csv(slow.episode));
      write_text(out / "eval" / ("scenario_seed" + std::to_string(i) + "_theta1.csv"),
                 trajectory_csv(fast.episode));
      const bool ok = slow.reached_target && slow.kept_upright && fast.reached_target &&
                      fast.swung_through && first_reach_earlier(fast.first_reach, slow.first_reach);
      passing += ok ? 1 : 0;
      lines.push_back("seed " + std::to_string(i) +
                      fmt(": omega_theta=3 reach %g upright %g first %g; ", slow.reached_target,
                          slow.kept_upright, slow.first_reach) +
                      fmt("omega_theta=1 reach %g swing %g first %g", fast.reached_target,
                          fast.swung_through, fast.first_reach));
    }
    lines.push_back(fmt("%g of %g seeds pass (need 2)", passing, seeds));
    report({"objective switch scenario", passing >= 2, lines});
  }

  // Learning curves.
  {
    bool ok = true;
    std::vector<std::string> lines;
    for (int i = 0; i < seeds; ++i) {
      const auto& r = vops[static_cast<std::size_t>(i)];
      const CurveCheck c = check_curve(r.curve);
      const int epochs = r.curve.back().epoch;
      const bool plateau = r.plateaued && epochs >= 40 && epochs <= 200;
      ok = ok && c.monotone && plateau;
      lines.push_back("seed " + std::to_string(i) +
                      fmt(": %g epochs, plateaued %g, worst epoch-to-epoch drop %.1f%%", epochs,
                          r.plateaued, 100 * c.worst_drop) +
                      fmt(", training-population return %.1f -> %.1f",
                          r.curve.front().mean_virtual_return, r.curve.back().mean_virtual_return));
    }
    const double final_virtual = rep.row("p").virtual_steps->mean;
    ok = ok && final_virtual >= -130.0;
    lines.push_back(fmt("final virtual return under sampled objectives %.1f (>= -130)", final_virtual));
    report({"learning-curve shape", ok, lines});
  }

  // Objective conditioning.
  {
    const auto states = mid_swing_states(batch, 100, cfg.eval.protocol.start_seed);
    bool ok = true;
    std::vector<std::string> lines;
    for (int i = 0; i < seeds; ++i) {
      const double gap = conditioning_gap(policies[static_cast<std::size_t>(i)], states);
      ok = ok && gap > 0.05;
      lines.push_back("seed " + std::to_string(i) + fmt(": mean |a(theta w 0) - a(theta w 4)| %.3f (> 0.05)", gap));
    }
    report({"objective conditioning effectiveness", ok, lines});
  }

  // Random baseline, for context.
  {
    const EvalReport base =
        evaluate_controller(random_controller(cfg.dataset.seed), cfg.eval.protocol, params, threads);
    std::printf("      random behaviour policy:");
    for (const auto& row : base.rows) std::printf(" %s %.1f;", row.point.label.c_str(), row.real.mean);
    std::printf("\n");
  }

  // Determinism: repeat every stage and compare serialized artifacts.
  {
    progress("repeating every stage for the determinism check");
    std::vector<std::string> lines;
    bool ok = true;
    auto same = [&](const std::string& stage, const fs::path& a, const fs::path& b) {
      const bool eq = fs::exists(b) && read_all(a) == read_all(b);
      ok = ok && eq;
      lines.push_back(stage + (eq ? ": identical" : ": DIFFERS"));
    };
    const fs::path again = out / "repeat";
    fs::create_directories(again / "data");
    save_batch(generate_batch(cfg.dataset.episodes, cfg.dataset.steps, cfg.dataset.seed, params, threads),
               (again / "data" / "batch.jsonl").string());
    same("dataset", out / "data" / "batch.jsonl", again / "data" / "batch.jsonl");

    auto ens2 = train_ensemble(batch, cfg.ensemble, threads);
    save_ensemble(ens2.model, ens2.members, cfg.ensemble, (again / "models").string());
    bool models_eq = true;
    for (const auto& e : fs::directory_iterator(out / "models")) {
      models_eq = models_eq && read_all(e.path()) == read_all(again / "models" / e.path().filename());
    }
    ok = ok && models_eq;
    lines.push_back(std::string("dynamics ensemble: ") + (models_eq ? "identical" : "DIFFERS"));

    TrainConfig tc = cfg.train;
    const auto pol = train_policy(ens.model, batch, tc);
    save_policy(pol.policy, tc, (again / "policy" / "seed_00").string());
    save_learning_curve(pol.curve, (again / "policy" / "seed_00" / "learning_curve.csv").string());
    same("policy seed 0", out / "policy" / "seed_00" / "policy.json",
         again / "policy" / "seed_00" / "policy.json");
    same("learning curve seed 0", out / "policy" / "seed_00" / "learning_curve.csv",
         again / "policy" / "seed_00" / "learning_curve.csv");

    const EvalReport rep2 = evaluate_grid(policies, &ens.model, cfg.eval.protocol, params, threads + 1);
    write_text(again / "eval" / "report.json", to_json(rep2).dump(2) + "\n");
    same("evaluation report", out / "eval" / "report.json", again / "eval" / "report.json");
    write_text(again / "eval" / "scenario_seed0_theta3.csv",
               trajectory_csv(objective_switch_scenario(policies[0], 3.0, params).episode));
    same("scenario trajectory", out / "eval" / "scenario_seed0_theta3.csv",
         again / "eval" / "scenario_seed0_theta3.csv");
    report({"determinism: every stage byte-reproducible", ok, lines});
  }

  int failed = 0;
  for (const auto& v : g_verdicts) failed += v.pass ? 0 : 1;
  std::printf("%zu criteria, %d passed, %d failed\n", g_verdicts.size(),
              static_cast<int>(g_verdicts.size()) - failed, failed);
  return failed == 0 ? 0 : 1;
}
