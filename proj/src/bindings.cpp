#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "vop/cli.hpp"
#include "vop/config.hpp"
#include "vop/dataset.hpp"
#include "vop/ensemble.hpp"
#include "vop/evaluator.hpp"
#include "vop/policy.hpp"

namespace py = pybind11;
using namespace vop;

namespace {

py::object to_python(const nlohmann::ordered_json& doc) {
  return py::module_::import("json").attr("loads")(doc.dump());
}

py::dict episode_dict(const Episode& ep) {
  std::vector<std::array<double, 4>> states;
  for (const auto& s : ep.states) states.push_back({s.x, s.theta, s.x_dot, s.theta_dot});
  std::vector<std::array<double, 2>> objectives;
  for (const auto& o : ep.objectives) objectives.push_back({o.omega_x, o.omega_theta});
  py::dict d;
  d["states"] = states;
  d["actions"] = ep.actions;
  d["rewards"] = ep.rewards;
  d["objectives"] = objectives;
  d["total_return"] = ep.total_return;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Variable-objective policy search on the cart-pole swing-up";

  py::class_<PhysicsParams>(m, "PhysicsParams")
      .def(py::init<>())
      .def_readwrite("gravity", &PhysicsParams::gravity)
      .def_readwrite("cart_mass", &PhysicsParams::cart_mass)
      .def_readwrite("pole_mass", &PhysicsParams::pole_mass)
      .def_readwrite("pole_half_length", &PhysicsParams::pole_half_length)
      .def_readwrite("dt", &PhysicsParams::dt)
      .def_readwrite("force_per_action", &PhysicsParams::force_per_action);

  py::class_<EnvState>(m, "EnvState")
      .def(py::init<>())
      .def(py::init([](double x, double theta, double x_dot, double theta_dot) {
             return EnvState{x, theta, x_dot, theta_dot};
           }),
           py::arg("x"), py::arg("theta"), py::arg("x_dot") = 0.0, py::arg("theta_dot") = 0.0)
      .def_readwrite("x", &EnvState::x)
      .def_readwrite("theta", &EnvState::theta)
      .def_readwrite("x_dot", &EnvState::x_dot)
      .def_readwrite("theta_dot", &EnvState::theta_dot)
      .def("vec", &EnvState::vec)
      .def(py::self == py::self)
      .def("__repr__", [](const EnvState& s) {
        std::ostringstream out;
        out.precision(17);
        out << "EnvState(" << s.x << ", " << s.theta << ", " << s.x_dot << ", " << s.theta_dot << ")";
        return out.str();
      });

  py::class_<Objective>(m, "Objective")
      .def(py::init([](double ox, double ot) { return Objective{ox, ot}; }), py::arg("omega_x"),
           py::arg("omega_theta"))
      .def_readwrite("omega_x", &Objective::omega_x)
      .def_readwrite("omega_theta", &Objective::omega_theta)
      .def(py::self == py::self);

  m.def("wrap_angle", &wrap_angle);
  m.def("env_step", &env_step, py::arg("state"), py::arg("action"), py::arg("params") = PhysicsParams{});
  m.def("reward", &reward, py::arg("state"), py::arg("objective"));
  m.def("mechanical_energy", &mechanical_energy, py::arg("state"), py::arg("params") = PhysicsParams{});

  py::class_<TransitionBatch>(m, "TransitionBatch")
      .def("__len__", [](const TransitionBatch& b) { return b.transitions.size(); })
      .def_readonly("seed", &TransitionBatch::seed)
      .def_readonly("episodes", &TransitionBatch::episodes)
      .def_readonly("steps", &TransitionBatch::steps)
      .def("arrays",
           [](const TransitionBatch& b) {
             const auto n = static_cast<Eigen::Index>(b.transitions.size());
             Eigen::MatrixXd s(n, 4), sn(n, 4);
             Eigen::VectorXd a(n);
             Eigen::VectorXi ep(n), t(n);
             for (Eigen::Index i = 0; i < n; ++i) {
               const auto& tr = b.transitions[static_cast<std::size_t>(i)];
               s.row(i) = tr.s.vec().transpose();
               sn.row(i) = tr.s_next.vec().transpose();
               a(i) = tr.a;
               ep(i) = tr.episode_id;
               t(i) = tr.step_index;
             }
             py::dict d;
             d["s"] = s;
             d["a"] = a;
             d["s_next"] = sn;
             d["episode"] = ep;
             d["step"] = t;
             return d;
           },
           "Columns as numpy arrays: s, a, s_next, episode, step.")
      .def(py::self == py::self);

  m.def("generate_batch", &generate_batch, py::arg("episodes"), py::arg("steps"), py::arg("seed"),
        py::arg("params") = PhysicsParams{}, py::arg("threads") = 1,
        py::call_guard<py::gil_scoped_release>());
  m.def("save_batch", &save_batch, py::arg("batch"), py::arg("path"));
  m.def("load_batch", &load_batch, py::arg("path"));

  py::class_<EnsembleConfig>(m, "EnsembleConfig")
      .def(py::init<>())
      .def_readwrite("k", &EnsembleConfig::k)
      .def_readwrite("hidden", &EnsembleConfig::hidden)
      .def_readwrite("max_epochs", &EnsembleConfig::max_epochs)
      .def_readwrite("patience", &EnsembleConfig::patience)
      .def_readwrite("batch_size", &EnsembleConfig::batch_size)
      .def_readwrite("learning_rate", &EnsembleConfig::learning_rate)
      .def_readwrite("holdout_fraction", &EnsembleConfig::holdout_fraction)
      .def_readwrite("seed", &EnsembleConfig::seed);

  py::class_<EnsembleModel>(m, "EnsembleModel")
      .def_property_readonly("size", &EnsembleModel::size)
      .def_property_readonly("frozen", &EnsembleModel::frozen)
      .def("freeze", &EnsembleModel::freeze)
      .def("parameter_hash", &EnsembleModel::parameter_hash)
      .def("predict",
           [](const EnsembleModel& model, const EnvState& s, double a) { return predict_mean(model, s, a); },
           py::arg("state"), py::arg("action"));

  m.def(
      "train_ensemble",
      [](const TransitionBatch& batch, const EnsembleConfig& cfg, int threads) {
        EnsembleTrainResult r;
        {
          py::gil_scoped_release release;
          r = train_ensemble(batch, cfg, threads);
        }
        r.model.freeze();
        std::vector<double> mse;
        for (const auto& mr : r.members) mse.push_back(mr.holdout_mse);
        return py::make_tuple(r.model, mse, r.holdout_episodes);
      },
      py::arg("batch"), py::arg("config") = EnsembleConfig{}, py::arg("threads") = 1,
      "Returns (frozen model, member holdout MSEs, holdout episode ids).");
  m.def("load_ensemble", [](const std::string& dir) {
    EnsembleModel model = load_ensemble(dir);
    model.freeze();
    return model;
  });
  m.def(
      "model_report",
      [](const EnsembleModel& model, const TransitionBatch& batch, const std::vector<int>& episodes) {
        const ModelReport r = model_report(ensemble_transition(model), batch, episodes, model.norm());
        py::dict d;
        d["one_step_rmse"] = Eigen::Vector4d(r.one_step_rmse);
        py::list drift;
        for (const auto& p : r.drift) {
          py::dict e;
          e["horizon"] = p.horizon;
          e["rmse"] = Eigen::Vector4d(p.rmse);
          e["normalized"] = p.normalized;
          drift.append(e);
        }
        d["drift"] = drift;
        return d;
      },
      py::arg("model"), py::arg("batch"), py::arg("episodes"));

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("horizon", &TrainConfig::horizon)
      .def_readwrite("gamma", &TrainConfig::gamma)
      .def_readwrite("population", &TrainConfig::population)
      .def_readwrite("minibatch", &TrainConfig::minibatch)
      .def_readwrite("max_epochs", &TrainConfig::max_epochs)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("plateau_tolerance", &TrainConfig::plateau_tolerance)
      .def_readwrite("plateau_window", &TrainConfig::plateau_window)
      .def_readwrite("hidden", &TrainConfig::hidden)
      .def_readwrite("grad_clip", &TrainConfig::grad_clip)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("fixed_objective", &TrainConfig::fixed_objective);

  py::class_<PolicyModel>(m, "PolicyModel")
      .def("act", py::overload_cast<const EnvState&, const Objective&>(&PolicyModel::act, py::const_),
           py::arg("state"), py::arg("objective"))
      .def("parameter_hash", [](const PolicyModel& p) { return diff::parameter_hash(p.net()); });

  py::class_<EpochStats>(m, "EpochStats")
      .def_readonly("epoch", &EpochStats::epoch)
      .def_readonly("mean_virtual_return", &EpochStats::mean_virtual_return)
      .def_readonly("std_virtual_return", &EpochStats::std_virtual_return)
      .def_readonly("mean_minibatch_loss", &EpochStats::mean_minibatch_loss);

  m.def(
      "train_policy",
      [](const EnsembleModel& model, const TransitionBatch& batch, const TrainConfig& cfg) {
        PolicyTrainResult r;
        {
          py::gil_scoped_release release;
          r = train_policy(model, batch, cfg);
        }
        return py::make_tuple(r.policy, r.curve, r.plateaued);
      },
      py::arg("model"), py::arg("batch"), py::arg("config") = TrainConfig{}, "Returns (policy, learning curve, plateaued).");
  m.def("save_policy", &save_policy, py::arg("policy"), py::arg("config"), py::arg("dir"));
  m.def("load_policy", &load_policy, py::arg("dir"));

  m.def(
      "evaluate",
      [](const std::vector<PolicyModel>& policies, const EnsembleModel* model, int n_starts, int steps,
         int threads) {
        EvalConfig cfg;
        cfg.n_starts = n_starts;
        cfg.steps = steps;
        return to_python(to_json(evaluate_grid(policies, model, cfg, PhysicsParams{}, threads)));
      },
      py::arg("policies"), py::arg("model") = nullptr, py::arg("n_starts") = 100, py::arg("steps") = 250,
      py::arg("threads") = 1, "Grid evaluation report as a dict.");
  m.def(
      "objective_switch_scenario",
      [](const PolicyModel& policy, double omega_theta) {
        const ScenarioResult r = objective_switch_scenario(policy, omega_theta, PhysicsParams{});
        py::dict d = episode_dict(r.episode);
        d["reached_target"] = r.reached_target;
        d["kept_upright"] = r.kept_upright;
        d["swung_through"] = r.swung_through;
        d["first_reach"] = r.first_reach;
        return d;
      },
      py::arg("policy"), py::arg("omega_theta"));
  m.def(
      "run_episode",
      [](const std::function<double(const EnvState&, const Objective&)>& controller,
         const Objective& objective, const EnvState& start, int steps) {
        return episode_dict(run_episode(controller, objective, start, steps, PhysicsParams{}));
      },
      py::arg("controller"), py::arg("objective"), py::arg("start"), py::arg("steps") = 250);

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = cli_main(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line front end; returns (exit code, stdout, stderr).");
}
