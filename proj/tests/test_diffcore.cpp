#include <cmath>
#include <vector>

#include "doctest.h"
#include "vop/diffcore.hpp"
#include "vop/rng.hpp"

using namespace vop;
using namespace vop::diff;

namespace {

Matrix random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (int c = 0; c < cols; ++c) {
    for (int r = 0; r < rows; ++r) m(r, c) = rng.uniform(-scale, scale);
  }
  return m;
}

// Plain matrix-product oracle, independent of Mlp::forward.
Matrix oracle_forward(const Mlp& net, const Matrix& x) {
  Matrix h = x;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    Matrix z(net.weight(l).rows(), h.cols());
    for (Eigen::Index c = 0; c < h.cols(); ++c) {
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        double acc = net.bias(l)(i);
        for (Eigen::Index j = 0; j < h.rows(); ++j) acc += net.weight(l)(i, j) * h(j, c);
        const Activation act = net.activation_of(l);
        z(i, c) = act == Activation::relu ? std::max(acc, 0.0)
                  : act == Activation::tanh ? std::tanh(acc)
                                            : acc;
      }
    }
    h = z;
  }
  return h;
}

double rel_err(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Scalar loss built from several primitives; `variant` picks the composition.
Tape::Var composite_loss(Tape& tape, const Mlp& net, GradientBuffer* grads, Tape::Var x,
                         int variant, const Matrix& c) {
  Tape::Var out = mlp_forward(net, tape, x, grads);
  switch (variant % 4) {
    case 0:
      return tape.sum(tape.square(out));
    case 1:
      return tape.sum(tape.mul_const(tape.tanh(out), c));
    case 2:
      return tape.sum(tape.add(tape.abs(tape.add_const(out, c)), tape.scale(out, 0.3)));
    default: {
      Tape::Var top = tape.rows(out, 0, 1);
      Tape::Var both = tape.vstack({top, out});
      const Matrix& bv = tape.value(both);
      return tape.sum(tape.square(tape.sub(both, tape.leaf(Matrix::Constant(bv.rows(), bv.cols(), 0.2)))));
    }
  }
}

}  // namespace

TEST_CASE("init draws bounded weights and zero biases deterministically") {
  const Mlp a = Mlp::init({4, 10, 10, 1}, Activation::tanh, 0);
  for (std::size_t l = 0; l < a.num_layers(); ++l) CHECK(a.bias(l).isZero(0.0));

  CHECK(Mlp::init({2, 1}, Activation::identity, 7) == Mlp::init({2, 1}, Activation::identity, 7));

  const Mlp b = Mlp::init({6, 20, 20, 4}, Activation::identity, 1);
  for (std::size_t l = 0; l < b.num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(b.weight(l).cols()));
    CHECK(b.weight(l).cwiseAbs().maxCoeff() <= bound);
  }
  CHECK(b.parameter_count() == 6 * 20 + 20 + 20 * 20 + 20 + 20 * 4 + 4);
}

TEST_CASE("forward matches simple cases and a matrix-product oracle") {
  const Mlp zero({3, 5, 2}, Activation::identity);
  CHECK(zero.forward(Vector(Vector::Ones(3))).isZero(0.0));

  Mlp ident({3, 3}, Activation::identity);
  ident.weight(0) = Matrix::Identity(3, 3);
  const Vector v = Vector::LinSpaced(3, -1.0, 2.0);
  CHECK(ident.forward(v) == v);

  Rng rng(11);
  const Mlp net = Mlp::init({3, 5, 2}, Activation::tanh, 3);
  const Matrix x = random_matrix(rng, 3, 17, 2.0);
  CHECK((net.forward(x) - oracle_forward(net, x)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("mlp_forward rejects bad inputs") {
  const Mlp net = Mlp::init({3, 2}, Activation::identity, 0);
  CHECK_THROWS_AS(mlp_forward(net, Vector::Zero(2)), std::invalid_argument);
  Vector bad = Vector::Zero(3);
  bad(1) = std::nan("");
  CHECK_THROWS_AS(mlp_forward(net, bad), std::invalid_argument);
  CHECK_THROWS_AS(Mlp({3}, Activation::identity), std::invalid_argument);
}

TEST_CASE("hand-derived gradients") {
  SUBCASE("linear") {
    Tape tape;
    const auto w = tape.leaf(Matrix::Constant(1, 1, 0.5));
    const auto l = tape.mul_const(w, Matrix::Constant(1, 1, 3.0));
    tape.backward(tape.sum(l));
    CHECK(tape.grad(w)(0, 0) == doctest::Approx(3.0).epsilon(1e-15));
  }
  SUBCASE("square of product") {
    Tape tape;
    const auto w = tape.leaf(Matrix::Constant(1, 1, 2.0));
    const auto l = tape.square(tape.mul_const(w, Matrix::Constant(1, 1, 1.0)));
    tape.backward(tape.sum(l));
    CHECK(tape.grad(w)(0, 0) == doctest::Approx(4.0).epsilon(1e-15));
  }
  SUBCASE("abs has zero subgradient at the origin and gate blocks masked entries") {
    Tape tape;
    Matrix v(1, 3);
    v << 0.0, -2.0, 3.0;
    const auto a = tape.leaf(v);
    Matrix mask(1, 3);
    mask << 1.0, 1.0, 0.0;
    tape.backward(tape.sum(tape.gate(tape.abs(a), mask)));
    CHECK(tape.grad(a)(0, 0) == 0.0);
    CHECK(tape.grad(a)(0, 1) == -1.0);
    CHECK(tape.grad(a)(0, 2) == 0.0);
  }
  SUBCASE("row_affine and custom unary op") {
    Tape tape;
    Matrix v(2, 2);
    v << 1.0, 2.0, 3.0, 4.0;
    const auto a = tape.leaf(v);
    const auto b = tape.row_affine(a, Vector::Constant(2, 3.0), Vector::Constant(2, 1.0));
    const auto c = tape.unary(b, tape.value(b) * 2.0, [](const Matrix& g) { return Matrix(g * 2.0); });
    tape.backward(tape.sum(c));
    CHECK(tape.grad(a).isApprox(Matrix::Constant(2, 2, 6.0)));
  }
}

TEST_CASE("backward runs once per tape") {
  Tape tape;
  const auto a = tape.leaf(Matrix::Ones(1, 1));
  const auto s = tape.sum(tape.square(a));
  tape.backward(s);
  CHECK_THROWS(tape.backward(s));
}

TEST_CASE("reverse-mode gradients match central differences on random nets") {
  Rng rng(2024);
  const std::vector<std::vector<int>> shapes = {{4, 10, 1}, {6, 20, 20, 4}, {3, 7, 2}, {5, 4, 4, 3}};
  const Activation outs[] = {Activation::identity, Activation::tanh, Activation::relu};
  const double h = 1e-5;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto& dims = shapes[static_cast<std::size_t>(trial) % shapes.size()];
    Mlp net = Mlp::init(dims, outs[trial % 3], 1000 + static_cast<std::uint64_t>(trial));
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
      net.bias(l) = random_matrix(rng, static_cast<int>(net.bias(l).size()), 1, 0.3);
    }
    const Matrix x = random_matrix(rng, dims.front(), 3, 1.5);
    const Matrix c = random_matrix(rng, dims.back(), 3, 1.0);

    GradientBuffer grads(net);
    Tape tape;
    const auto xin = tape.leaf(x);
    tape.backward(composite_loss(tape, net, &grads, xin, trial, c));
    const Matrix dx = tape.grad(xin);

    auto loss_at = [&](const Mlp& probe, const Matrix& input) {
      Tape t;
      return t.value(composite_loss(t, probe, nullptr, t.leaf(input), trial, c))(0, 0);
    };

    std::vector<double> fd, bp;
    Mlp probe = net;
    for (std::size_t l = 0; l < probe.num_layers(); ++l) {
      auto visit = [&](double& p, double g) {
        const double saved = p;
        p = saved + h;
        const double up = loss_at(probe, x);
        p = saved - h;
        const double down = loss_at(probe, x);
        p = saved;
        fd.push_back((up - down) / (2 * h));
        bp.push_back(g);
      };
      for (Eigen::Index i = 0; i < probe.weight(l).size(); ++i) {
        visit(probe.weight(l).data()[i], grads.weights[l].data()[i]);
      }
      for (Eigen::Index i = 0; i < probe.bias(l).size(); ++i) {
        visit(probe.bias(l)(i), grads.biases[l](i));
      }
    }
    Matrix xp = x;
    for (Eigen::Index i = 0; i < xp.size(); ++i) {
      const double saved = xp.data()[i];
      xp.data()[i] = saved + h;
      const double up = loss_at(net, xp);
      xp.data()[i] = saved - h;
      const double down = loss_at(net, xp);
      xp.data()[i] = saved;
      fd.push_back((up - down) / (2 * h));
      bp.push_back(dx.data()[i]);
    }
    double scale = 0.0;
    for (double g : fd) scale = std::max(scale, std::abs(g));
    for (std::size_t i = 0; i < fd.size(); ++i) {
      worst = std::max(worst, rel_err(fd[i], bp[i], std::max(1e-3 * scale, 1e-10)));
    }
  }
  INFO("max relative error " << worst);
  CHECK(worst < 1e-4);
}

TEST_CASE("fresh tapes give identical gradients") {
  const Mlp net = Mlp::init({6, 20, 20, 4}, Activation::identity, 5);
  Rng rng(3);
  const Matrix x = random_matrix(rng, 6, 8);
  auto run = [&] {
    GradientBuffer g(net);
    Tape tape;
    tape.backward(tape.sum(tape.square(mlp_forward(net, tape, tape.leaf(x), &g))));
    return g;
  };
  const GradientBuffer a = run();
  const GradientBuffer b = run();
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    CHECK(a.weights[l] == b.weights[l]);
    CHECK(a.biases[l] == b.biases[l]);
  }
}

TEST_CASE("adam updates") {
  SUBCASE("zero gradient leaves parameters and counts the step") {
    Mlp net = Mlp::init({3, 2}, Activation::identity, 1);
    const Mlp before = net;
    AdamState st(net);
    GradientBuffer g(net);
    adam_step(net, g, st);
    CHECK(net == before);
    CHECK(st.step_count() == 1);
  }
  SUBCASE("first bias-corrected step moves by the learning rate") {
    Mlp net({1, 1}, Activation::identity);
    AdamState st(net, AdamConfig{0.1});
    GradientBuffer g(net);
    g.weights[0](0, 0) = 1.0;
    adam_step(net, g, st);
    const double expected = -0.1 * 1.0 / (1.0 + 1e-8);
    CHECK(net.weight(0)(0, 0) == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("identical inputs give identical updates") {
    Mlp a = Mlp::init({4, 6, 2}, Activation::identity, 9);
    Mlp b = a;
    AdamState sa(a), sb(b);
    GradientBuffer g(a);
    g.weights[1].setConstant(0.25);
    g.biases[0].setConstant(-1.0);
    for (int i = 0; i < 3; ++i) {
      adam_step(a, g, sa);
      adam_step(b, g, sb);
    }
    CHECK(a == b);
  }
  SUBCASE("non-finite gradients are rejected") {
    Mlp net = Mlp::init({2, 2}, Activation::identity, 0);
    AdamState st(net);
    GradientBuffer g(net);
    g.biases[0](1) = std::nan("");
    CHECK_THROWS_AS(adam_step(net, g, st), std::domain_error);
  }
}

TEST_CASE("mlp json round trip keeps parameters") {
  const Mlp net = Mlp::init({6, 10, 10, 1}, Activation::tanh, 4);
  const Mlp back = mlp_from_json(nlohmann::json::parse(to_json(net).dump()));
  CHECK(back == net);
  CHECK(parameter_hash(back) == parameter_hash(net));
}
