#include <algorithm>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "vop/ensemble.hpp"

using namespace vop;
using diff::Matrix;

namespace {

TransitionBatch toy_batch(int episodes, int steps, std::uint64_t seed, bool linear) {
  Rng rng(seed);
  TransitionBatch b;
  b.seed = seed;
  b.episodes = episodes;
  b.steps = steps;
  for (int e = 0; e < episodes; ++e) {
    for (int t = 0; t < steps; ++t) {
      const EnvState s{rng.uniform(-2, 2), rng.uniform(-3, 3), rng.uniform(-1, 1), rng.uniform(-1, 1)};
      const double a = rng.uniform(-2, 2);
      EnvState n = s;
      if (linear) n.x += 0.1 * a;
      b.transitions.push_back({s, a, n, e, t});
    }
  }
  return b;
}

Matrix random_states(Rng& rng, int n) {
  Matrix m(4, n);
  for (int c = 0; c < n; ++c) {
    m.col(c) << rng.uniform(-2, 2), rng.uniform(-3, 3), rng.uniform(-2, 2), rng.uniform(-4, 4);
  }
  return m;
}

Matrix random_actions(Rng& rng, int n) {
  Matrix m(1, n);
  for (int c = 0; c < n; ++c) m(0, c) = rng.uniform(-2, 2);
  return m;
}

EnsembleModel random_model(int k, std::uint64_t seed) {
  std::vector<diff::Mlp> members;
  for (int i = 0; i < k; ++i) {
    members.push_back(diff::Mlp::init({5, 20, 20, 4}, diff::Activation::identity, seed + i));
  }
  NormStats norm;
  norm.mu_s << 0.1, -0.2, 0.0, 0.3;
  norm.sigma_s << 1.4, 1.8, 1.1, 2.5;
  norm.mu_ds << 0.0, 0.01, -0.02, 0.0;
  norm.sigma_ds << 0.02, 0.05, 0.3, 0.4;
  return EnsembleModel(members, norm);
}

}  // namespace

TEST_CASE("zero-delta dynamics are learned almost exactly") {
  EnsembleConfig cfg;
  cfg.k = 2;
  cfg.max_epochs = 5;
  const TransitionBatch b = toy_batch(40, 50, 1, false);
  const auto r = train_ensemble(b, cfg);
  double mse = 0.0;
  std::size_t n = 0;
  for (const auto& t : b.transitions) {
    if (std::find(r.holdout_episodes.begin(), r.holdout_episodes.end(), t.episode_id) ==
        r.holdout_episodes.end()) {
      continue;
    }
    const EnvState p = predict_mean(r.model, t.s, t.a);
    Eigen::Vector4d d = p.vec() - t.s_next.vec();
    d(1) = angle_diff(p.theta, t.s_next.theta);
    mse += d.squaredNorm() / 4.0;
    ++n;
  }
  REQUIRE(n > 0);
  CHECK(mse / static_cast<double>(n) < 1e-6);
}

TEST_CASE("linear toy dynamics are fitted") {
  EnsembleConfig cfg;
  cfg.k = 2;
  cfg.max_epochs = 100;
  const TransitionBatch b = toy_batch(200, 100, 2, true);
  const auto r = train_ensemble(b, cfg);
  Rng rng(3);
  const Matrix s = random_states(rng, 500);
  const Matrix a = random_actions(rng, 500);
  for (std::size_t k = 0; k < r.model.size(); ++k) {
    const EnsembleModel single({r.model.member(k)}, r.model.norm());
    const Matrix pred = predict_mean(single, s, a);
    double mse = 0.0;
    for (int c = 0; c < 500; ++c) {
      const EnvState want{s(0, c) + 0.1 * a(0, c), s(1, c), s(2, c), s(3, c)};
      Eigen::Vector4d d = pred.col(c) - want.vec();
      d(1) = angle_diff(pred(1, c), want.theta);
      mse += d.squaredNorm() / 4.0;
    }
    CHECK(mse / 500 < 1e-5);
  }
}

TEST_CASE("ensemble mean arithmetic") {
  const EnsembleModel full = random_model(3, 10);
  Rng rng(1);
  const Matrix s = random_states(rng, 16);
  const Matrix a = random_actions(rng, 16);

  SUBCASE("a single member is its own denormalized prediction") {
    const EnsembleModel one({full.member(0)}, full.norm());
    const Matrix pred = predict_mean(one, s, a);
    const auto& n = full.norm();
    for (int c = 0; c < 16; ++c) {
      Eigen::Matrix<double, 5, 1> in;
      in.head<4>() = (s.col(c) - n.mu_s).cwiseQuotient(n.sigma_s);
      in(4) = a(0, c);
      const Eigen::Vector4d out = full.member(0).forward(diff::Vector(in));
      const Eigen::Vector4d delta = n.mu_ds + n.sigma_ds.cwiseProduct(out);
      const EnvState want = apply_delta(EnvState::from(s.col(c)), delta);
      CHECK((pred.col(c) - want.vec()).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("opposite constant members cancel") {
    diff::Mlp plus({5, 4}, diff::Activation::identity), minus({5, 4}, diff::Activation::identity);
    plus.bias(0) << 0.5, -1.0, 2.0, 0.25;
    minus.bias(0) = -plus.bias(0);
    const EnsembleModel m({plus, minus}, full.norm());
    const Matrix pred = predict_mean(m, s, a);
    for (int c = 0; c < 16; ++c) {
      const EnvState want = apply_delta(EnvState::from(s.col(c)), full.norm().mu_ds);
      CHECK((pred.col(c) - want.vec()).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("member order does not matter") {
    const EnsembleModel swapped({full.member(2), full.member(0), full.member(1)}, full.norm());
    CHECK((predict_mean(full, s, a) - predict_mean(swapped, s, a)).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("taped and plain predictions agree bit for bit") {
    diff::Tape tape;
    const auto out = predict_mean(full, tape, tape.leaf(s), tape.leaf(a));
    CHECK(tape.value(out) == predict_mean(full, s, a));
    const EnvState one = predict_mean(full, EnvState::from(s.col(3)), a(0, 3));
    CHECK(one.vec() == Eigen::Vector4d(predict_mean(full, s, a).col(3)));
  }
}

TEST_CASE("input gradients match finite differences") {
  const EnsembleModel model = random_model(4, 40);
  Rng rng(6);
  Matrix s = random_states(rng, 5);
  s.row(1).setConstant(0.7);  // away from the angle wrap
  Matrix a = random_actions(rng, 5);
  Matrix w = random_states(rng, 5);

  auto loss = [&](const Matrix& ss, const Matrix& aa) {
    return predict_mean(model, ss, aa).cwiseProduct(w).sum();
  };
  diff::Tape tape;
  const auto sv = tape.leaf(s);
  const auto av = tape.leaf(a);
  tape.backward(tape.sum(tape.mul_const(predict_mean(model, tape, sv, av), w)));

  const double h = 1e-6;
  double worst = 0.0, scale = 0.0;
  std::vector<std::pair<double, double>> pairs;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    Matrix up = s, dn = s;
    up.data()[i] += h;
    dn.data()[i] -= h;
    pairs.push_back({(loss(up, a) - loss(dn, a)) / (2 * h), tape.grad(sv).data()[i]});
  }
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    Matrix up = a, dn = a;
    up.data()[i] += h;
    dn.data()[i] -= h;
    pairs.push_back({(loss(s, up) - loss(s, dn)) / (2 * h), tape.grad(av).data()[i]});
  }
  for (const auto& [fd, bp] : pairs) scale = std::max(scale, std::abs(fd));
  for (const auto& [fd, bp] : pairs) {
    worst = std::max(worst, std::abs(fd - bp) / std::max({std::abs(fd), std::abs(bp), 1e-3 * scale}));
  }
  INFO("max relative error " << worst);
  CHECK(worst < 1e-4);
}

TEST_CASE("frozen models refuse mutation") {
  EnsembleModel m = random_model(2, 0);
  const auto h = m.parameter_hash();
  CHECK_NOTHROW(m.mutable_member(0));
  m.freeze();
  CHECK_THROWS_AS(m.mutable_member(0), std::logic_error);
  CHECK(m.parameter_hash() == h);
  CHECK_THROWS(EnsembleModel({diff::Mlp::init({5, 4, 4}, diff::Activation::tanh, 0)}, NormStats{}));
}

TEST_CASE("drift report") {
  const TransitionBatch b = generate_batch(6, 100, 9);
  const NormStats norm = compute_norm_stats(b);
  const ModelReport oracle = model_report(env_transition(PhysicsParams{}), b, {0, 1, 2}, norm);
  for (const auto& p : oracle.drift) CHECK(p.normalized == 0.0);
  CHECK(oracle.one_step_rmse.isZero(0.0));

  const EnsembleModel m = random_model(2, 5);
  const ModelReport rep = model_report(ensemble_transition(m), b, {3, 4}, norm);
  REQUIRE(rep.drift.front().horizon == 1);
  CHECK(rep.drift.front().rmse == rep.one_step_rmse);
  CHECK(rep.drift_violation_fraction >= 0.0);
  CHECK(rep.drift_violation_fraction <= 1.0);
}

TEST_CASE("training is deterministic and checkpoints round trip") {
  EnsembleConfig cfg;
  cfg.k = 2;
  cfg.max_epochs = 3;
  const TransitionBatch b = generate_batch(20, 50, 4);
  const auto r1 = train_ensemble(b, cfg, 1);
  const auto r2 = train_ensemble(b, cfg, 2);
  CHECK(r1.model.parameter_hash() == r2.model.parameter_hash());
  CHECK(r1.holdout_episodes == r2.holdout_episodes);

  const auto dir = std::filesystem::temp_directory_path() / "vop_test_ensemble";
  save_ensemble(r1.model, r1.members, cfg, dir.string());
  const EnsembleModel back = load_ensemble(dir.string());
  CHECK(back.parameter_hash() == r1.model.parameter_hash());
  CHECK(back.norm() == r1.model.norm());
  CHECK_THROWS(load_ensemble((dir / "missing").string()));
}

TEST_CASE("configuration is validated") {
  EnsembleConfig cfg;
  cfg.k = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.holdout_fraction = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
