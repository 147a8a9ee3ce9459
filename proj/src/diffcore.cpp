#include "vop/diffcore.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "vop/rng.hpp"

namespace vop::diff {

namespace {

void apply_activation(Matrix& m, Activation act) {
  switch (act) {
    case Activation::identity:
      break;
    case Activation::relu:
      m = m.cwiseMax(0.0);
      break;
    case Activation::tanh:
      m = m.array().tanh().matrix();
      break;
  }
}

void check_dims(const std::vector<int>& dims) {
  if (dims.size() < 2) {
    throw std::invalid_argument("Mlp needs at least an input and an output layer");
  }
  for (int d : dims) {
    if (d < 1) {
      throw std::invalid_argument("Mlp layer dimensions must be >= 1");
    }
  }
}

}  // namespace

std::string to_string(Activation act) {
  switch (act) {
    case Activation::identity:
      return "identity";
    case Activation::relu:
      return "relu";
    case Activation::tanh:
      return "tanh";
  }
  return "identity";
}

Activation activation_from_string(const std::string& name) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

Mlp::Mlp(std::vector<int> layer_dims, Activation output_activation)
    : dims_(std::move(layer_dims)), output_activation_(output_activation) {
  check_dims(dims_);
  for (std::size_t i = 0; i + 1 < dims_.size(); ++i) {
    weights_.push_back(Matrix::Zero(dims_[i + 1], dims_[i]));
    biases_.push_back(Vector::Zero(dims_[i + 1]));
  }
}

Mlp Mlp::init(std::vector<int> layer_dims, Activation output_activation,
              std::uint64_t seed) {
  Mlp net(std::move(layer_dims), output_activation);
  Rng rng(seed);
  for (auto& w : net.weights_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
    // Row-major fill order so the draw sequence matches the checkpoint layout.
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) {
        w(r, c) = rng.uniform(-bound, bound);
      }
    }
  }
  return net;
}

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    n += static_cast<std::size_t>(weights_[i].size() + biases_[i].size());
  }
  return n;
}

bool Mlp::all_finite() const {
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    if (!weights_[i].allFinite() || !biases_[i].allFinite()) return false;
  }
  return true;
}

Matrix Mlp::forward(const Matrix& input) const {
  Matrix h = input;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    Matrix next = weights_[i] * h;
    next.colwise() += biases_[i];
    apply_activation(next, activation_of(i));
    h = std::move(next);
  }
  return h;
}

Vector Mlp::forward(const Vector& input) const {
  Vector h = input;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    Matrix next = weights_[i] * h + biases_[i];
    apply_activation(next, activation_of(i));
    h = next;
  }
  return h;
}

bool operator==(const Mlp& a, const Mlp& b) {
  return a.dims_ == b.dims_ && a.output_activation_ == b.output_activation_ &&
         a.weights_ == b.weights_ && a.biases_ == b.biases_;
}

std::uint64_t parameter_hash(const Mlp& net) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const double* data, Eigen::Index n) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < static_cast<std::size_t>(n) * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (std::size_t i = 0; i < net.num_layers(); ++i) {
    feed(net.weight(i).data(), net.weight(i).size());
    feed(net.bias(i).data(), net.bias(i).size());
  }
  return h;
}

Vector mlp_forward(const Mlp& net, const Vector& input) {
  if (input.size() != net.input_dim()) {
    std::ostringstream msg;
    msg << "mlp_forward: input has " << input.size() << " entries, network expects "
        << net.input_dim();
    throw std::invalid_argument(msg.str());
  }
  if (!input.allFinite()) {
    throw std::invalid_argument("mlp_forward: non-finite input");
  }
  return net.forward(input);
}

// ---------------------------------------------------------------------------
// GradientBuffer / Adam

GradientBuffer::GradientBuffer(const Mlp& net) {
  for (std::size_t i = 0; i < net.num_layers(); ++i) {
    weights.push_back(Matrix::Zero(net.weight(i).rows(), net.weight(i).cols()));
    biases.push_back(Vector::Zero(net.bias(i).size()));
  }
}

void GradientBuffer::zero() {
  for (auto& w : weights) w.setZero();
  for (auto& b : biases) b.setZero();
}

void GradientBuffer::scale(double factor) {
  for (auto& w : weights) w *= factor;
  for (auto& b : biases) b *= factor;
}

GradientBuffer& GradientBuffer::operator+=(const GradientBuffer& other) {
  if (other.weights.size() != weights.size()) {
    throw std::invalid_argument("GradientBuffer: shape mismatch in +=");
  }
  for (std::size_t i = 0; i < weights.size(); ++i) {
    weights[i] += other.weights[i];
    biases[i] += other.biases[i];
  }
  return *this;
}

bool GradientBuffer::congruent_with(const Mlp& net) const {
  if (weights.size() != net.num_layers() || biases.size() != net.num_layers()) {
    return false;
  }
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i].rows() != net.weight(i).rows() ||
        weights[i].cols() != net.weight(i).cols() ||
        biases[i].size() != net.bias(i).size()) {
      return false;
    }
  }
  return true;
}

double GradientBuffer::squared_norm() const {
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    s += weights[i].squaredNorm() + biases[i].squaredNorm();
  }
  return s;
}

AdamState::AdamState(const Mlp& net, AdamConfig config)
    : config_(config), first_moment_(net), second_moment_(net) {
  if (!(config_.learning_rate > 0.0) || !(config_.beta1 >= 0.0 && config_.beta1 < 1.0) ||
      !(config_.beta2 >= 0.0 && config_.beta2 < 1.0) || !(config_.epsilon > 0.0)) {
    throw std::invalid_argument("AdamState: hyperparameters out of range");
  }
}

void adam_step(Mlp& net, const GradientBuffer& grads, AdamState& state) {
  if (!grads.congruent_with(net) || !state.first_moment_.congruent_with(net)) {
    throw std::invalid_argument("adam_step: gradient/optimizer shape mismatch");
  }
  for (std::size_t i = 0; i < grads.weights.size(); ++i) {
    if (!grads.weights[i].allFinite()) {
      throw std::domain_error("adam_step: non-finite gradient in layer " +
                              std::to_string(i) + " weights");
    }
    if (!grads.biases[i].allFinite()) {
      throw std::domain_error("adam_step: non-finite gradient in layer " +
                              std::to_string(i) + " biases");
    }
  }

  const auto& cfg = state.config_;
  state.step_ += 1;
  const double t = static_cast<double>(state.step_);
  const double corr1 = 1.0 - std::pow(cfg.beta1, t);
  const double corr2 = 1.0 - std::pow(cfg.beta2, t);

  auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    param.array() -= cfg.learning_rate * (m.array() / corr1) /
                     ((v.array() / corr2).sqrt() + cfg.epsilon);
  };
  for (std::size_t i = 0; i < grads.weights.size(); ++i) {
    update(net.weight(i), grads.weights[i], state.first_moment_.weights[i],
           state.second_moment_.weights[i]);
    update(net.bias(i), grads.biases[i], state.first_moment_.biases[i],
           state.second_moment_.biases[i]);
  }
}

// ---------------------------------------------------------------------------
// Tape

Tape::Var Tape::push(Matrix value, std::function<void(Tape&, const Matrix&)> backprop) {
  if (backward_done_) {
    throw std::logic_error("Tape: cannot record after backward; use a fresh tape");
  }
  nodes_.push_back(Node{std::move(value), Matrix(), std::move(backprop)});
  return Var{nodes_.size() - 1};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) {
    throw std::out_of_range("Tape: variable does not belong to this tape");
  }
  return nodes_[v.id];
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& n = nodes_[v.id];
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

const Matrix& Tape::value(Var v) const { return node(v).value; }

const Matrix& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!backward_done_) {
    throw std::logic_error("Tape: gradients requested before backward");
  }
  return n.grad;
}

void Tape::clear() {
  nodes_.clear();
  backward_done_ = false;
}

Tape::Var Tape::leaf(Matrix value) { return push(std::move(value), nullptr); }

Tape::Var Tape::affine(Var x, const Mlp& net, std::size_t layer, GradientBuffer* grads) {
  const Matrix& in = value(x);
  if (layer >= net.num_layers()) {
    throw std::out_of_range("Tape::affine: layer index out of range");
  }
  if (in.rows() != net.weight(layer).cols()) {
    throw std::invalid_argument("Tape::affine: input rows do not match layer fan-in");
  }
  if (grads != nullptr && !grads->congruent_with(net)) {
    throw std::invalid_argument("Tape::affine: gradient buffer not congruent with net");
  }
  Matrix out = net.weight(layer) * in;
  out.colwise() += net.bias(layer);
  const Mlp* np = &net;
  return push(std::move(out), [x, np, layer, grads](Tape& t, const Matrix& g) {
    if (grads != nullptr) {
      grads->weights[layer].noalias() += g * t.nodes_[x.id].value.transpose();
      grads->biases[layer] += g.rowwise().sum();
    }
    t.accumulate(x, np->weight(layer).transpose() * g);
  });
}

Tape::Var Tape::activation(Var x, Activation act) {
  Matrix out = value(x);
  apply_activation(out, act);
  switch (act) {
    case Activation::identity:
      return push(std::move(out), [x](Tape& t, const Matrix& g) { t.accumulate(x, g); });
    case Activation::relu:
      return push(std::move(out), [x](Tape& t, const Matrix& g) {
        const Matrix& in = t.nodes_[x.id].value;
        t.accumulate(x, (in.array() > 0.0).select(g.array(), 0.0).matrix());
      });
    case Activation::tanh: {
      const std::size_t self = nodes_.size();
      return push(std::move(out), [x, self](Tape& t, const Matrix& g) {
        const Matrix& y = t.nodes_[self].value;
        t.accumulate(x, (g.array() * (1.0 - y.array().square())).matrix());
      });
    }
  }
  throw std::logic_error("unreachable");
}

Tape::Var Tape::add(Var a, Var b) {
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) {
    throw std::invalid_argument("Tape::add: shape mismatch");
  }
  return push(va + vb, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Tape::Var Tape::sub(Var a, Var b) {
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) {
    throw std::invalid_argument("Tape::sub: shape mismatch");
  }
  return push(va - vb, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Tape::Var Tape::scale(Var a, double factor) {
  return push(value(a) * factor,
              [a, factor](Tape& t, const Matrix& g) { t.accumulate(a, g * factor); });
}

Tape::Var Tape::add_const(Var a, Matrix c) {
  const Matrix& va = value(a);
  if (va.rows() != c.rows() || va.cols() != c.cols()) {
    throw std::invalid_argument("Tape::add_const: shape mismatch");
  }
  return push(va + c, [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

Tape::Var Tape::row_affine(Var a, Vector row_scale, Vector row_shift) {
  const Matrix& va = value(a);
  if (va.rows() != row_scale.size() || va.rows() != row_shift.size()) {
    throw std::invalid_argument("Tape::row_affine: row count mismatch");
  }
  Matrix out = row_scale.asDiagonal() * va;
  out.colwise() += row_shift;
  return push(std::move(out), [a, s = std::move(row_scale)](Tape& t, const Matrix& g) {
    t.accumulate(a, s.asDiagonal() * g);
  });
}

Tape::Var Tape::mul_const(Var a, Matrix c) {
  const Matrix& va = value(a);
  if (va.rows() != c.rows() || va.cols() != c.cols()) {
    throw std::invalid_argument("Tape::mul_const: shape mismatch");
  }
  Matrix out = va.cwiseProduct(c);
  return push(std::move(out), [a, c = std::move(c)](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(c));
  });
}

Tape::Var Tape::unary(Var a, Matrix out, std::function<Matrix(const Matrix&)> vjp) {
  value(a);
  if (!vjp) throw std::invalid_argument("Tape::unary: empty vjp");
  return push(std::move(out), [a, f = std::move(vjp)](Tape& t, const Matrix& g) {
    t.accumulate(a, f(g));
  });
}

Tape::Var Tape::gate(Var a, Matrix mask) { return mul_const(a, std::move(mask)); }

Tape::Var Tape::abs(Var a) {
  return push(value(a).cwiseAbs(), [a](Tape& t, const Matrix& g) {
    const Matrix& in = t.nodes_[a.id].value;
    t.accumulate(a, (g.array() * in.array().sign()).matrix());
  });
}

Tape::Var Tape::square(Var a) {
  return push(value(a).cwiseAbs2(), [a](Tape& t, const Matrix& g) {
    const Matrix& in = t.nodes_[a.id].value;
    t.accumulate(a, (2.0 * g.array() * in.array()).matrix());
  });
}

Tape::Var Tape::rows(Var a, int start, int count) {
  const Matrix& va = value(a);
  if (start < 0 || count < 0 || start + count > va.rows()) {
    throw std::out_of_range("Tape::rows: slice out of range");
  }
  const Eigen::Index total = va.rows();
  return push(va.middleRows(start, count),
              [a, start, count, total](Tape& t, const Matrix& g) {
                Matrix full = Matrix::Zero(total, g.cols());
                full.middleRows(start, count) = g;
                t.accumulate(a, full);
              });
}

Tape::Var Tape::vstack(const std::vector<Var>& parts) {
  if (parts.empty()) {
    throw std::invalid_argument("Tape::vstack: no parts");
  }
  const Eigen::Index cols = value(parts.front()).cols();
  Eigen::Index total = 0;
  for (Var p : parts) {
    if (value(p).cols() != cols) {
      throw std::invalid_argument("Tape::vstack: column count mismatch");
    }
    total += value(p).rows();
  }
  Matrix out(total, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index row = 0;
  for (Var p : parts) {
    offsets.push_back(row);
    out.middleRows(row, value(p).rows()) = value(p);
    row += value(p).rows();
  }
  return push(std::move(out), [parts, offsets](Tape& t, const Matrix& g) {
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const Eigen::Index n = t.nodes_[parts[i].id].value.rows();
      t.accumulate(parts[i], g.middleRows(offsets[i], n));
    }
  });
}

Tape::Var Tape::sum(Var a) {
  const Matrix& va = value(a);
  Matrix out(1, 1);
  out(0, 0) = va.sum();
  const Eigen::Index r = va.rows();
  const Eigen::Index c = va.cols();
  return push(std::move(out), [a, r, c](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(r, c, g(0, 0)));
  });
}

void Tape::backward(Var out, double seed) {
  if (nodes_.empty()) {
    throw std::logic_error("Tape::backward: nothing recorded (backward before forward)");
  }
  if (backward_done_) {
    throw std::logic_error("Tape::backward: tape already consumed");
  }
  const Node& root = node(out);
  if (root.value.rows() != 1 || root.value.cols() != 1) {
    throw std::invalid_argument("Tape::backward: output node is not scalar");
  }
  backward_done_ = true;
  nodes_[out.id].grad = Matrix::Constant(1, 1, seed);
  for (std::size_t i = out.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0) {
      n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
      continue;
    }
    if (n.backprop) {
      // Copy: backprop may append to other nodes' grads but never this one.
      const Matrix g = n.grad;
      n.backprop(*this, g);
    }
  }
  for (std::size_t i = out.id + 1; i < nodes_.size(); ++i) {
    nodes_[i].grad = Matrix::Zero(nodes_[i].value.rows(), nodes_[i].value.cols());
  }
}

Tape::Var mlp_forward(const Mlp& net, Tape& tape, Tape::Var input, GradientBuffer* grads) {
  Tape::Var h = input;
  for (std::size_t i = 0; i < net.num_layers(); ++i) {
    h = tape.affine(h, net, i, grads);
    if (net.activation_of(i) != Activation::identity) {
      h = tape.activation(h, net.activation_of(i));
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoints

nlohmann::json to_json(const Mlp& net) {
  nlohmann::json weights = nlohmann::json::array();
  nlohmann::json biases = nlohmann::json::array();
  for (std::size_t i = 0; i < net.num_layers(); ++i) {
    const Matrix& w = net.weight(i);
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(w.size()));
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) flat.push_back(w(r, c));
    }
    weights.push_back(flat);
    const Vector& b = net.bias(i);
    biases.push_back(std::vector<double>(b.data(), b.data() + b.size()));
  }
  return nlohmann::json{{"dims", net.dims()},
                        {"output_activation", to_string(net.output_activation())},
                        {"weights", std::move(weights)},
                        {"biases", std::move(biases)}};
}

Mlp mlp_from_json(const nlohmann::json& doc) {
  try {
    auto dims = doc.at("dims").get<std::vector<int>>();
    Mlp net(dims, activation_from_string(doc.at("output_activation").get<std::string>()));
    const auto& weights = doc.at("weights");
    const auto& biases = doc.at("biases");
    if (weights.size() != net.num_layers() || biases.size() != net.num_layers()) {
      throw std::invalid_argument("layer count does not match dims");
    }
    for (std::size_t i = 0; i < net.num_layers(); ++i) {
      auto flat = weights[i].get<std::vector<double>>();
      auto b = biases[i].get<std::vector<double>>();
      Matrix& w = net.weight(i);
      if (flat.size() != static_cast<std::size_t>(w.size()) ||
          b.size() != static_cast<std::size_t>(net.bias(i).size())) {
        throw std::invalid_argument("parameter block " + std::to_string(i) +
                                    " has the wrong size");
      }
      std::size_t k = 0;
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = flat[k++];
      }
      net.bias(i) = Eigen::Map<const Vector>(b.data(), static_cast<Eigen::Index>(b.size()));
    }
    if (!net.all_finite()) {
      throw std::invalid_argument("non-finite parameter");
    }
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("malformed Mlp checkpoint: ") + e.what());
  }
}

void save_mlp(const Mlp& net, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << to_json(net).dump() << '\n';
}

Mlp load_mlp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
  return mlp_from_json(doc);
}

}  // namespace vop::diff
