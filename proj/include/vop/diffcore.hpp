#pragma once

// Dense-network numerics: feed-forward nets, a reverse-mode tape over
// batched column matrices, and Adam.
//
// Batches are column-major: one sample per column, one feature per row.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

namespace vop::diff {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { identity, relu, tanh };

std::string to_string(Activation act);
Activation activation_from_string(const std::string& name);

class GradientBuffer;

class Mlp {
 public:
  Mlp() = default;

  /// Zero-initialized network. Hidden layers use the rectifier.
  Mlp(std::vector<int> layer_dims, Activation output_activation);

  /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
  static Mlp init(std::vector<int> layer_dims, Activation output_activation,
                  std::uint64_t seed);

  const std::vector<int>& dims() const { return dims_; }
  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }
  std::size_t num_layers() const { return weights_.size(); }
  Activation output_activation() const { return output_activation_; }
  Activation activation_of(std::size_t layer) const {
    return layer + 1 == num_layers() ? output_activation_ : Activation::relu;
  }

  const Matrix& weight(std::size_t layer) const { return weights_[layer]; }
  const Vector& bias(std::size_t layer) const { return biases_[layer]; }
  Matrix& weight(std::size_t layer) { return weights_[layer]; }
  Vector& bias(std::size_t layer) { return biases_[layer]; }

  std::size_t parameter_count() const;
  bool all_finite() const;

  /// Batched evaluation, one sample per column.
  Matrix forward(const Matrix& input) const;
  Vector forward(const Vector& input) const;

  friend bool operator==(const Mlp& a, const Mlp& b);

 private:
  std::vector<int> dims_;
  Activation output_activation_ = Activation::identity;
  std::vector<Matrix> weights_;
  std::vector<Vector> biases_;
};

/// FNV-1a over the raw bytes of every parameter, layer by layer.
std::uint64_t parameter_hash(const Mlp& net);

/// Accumulators shaped like an Mlp's parameters.
class GradientBuffer {
 public:
  GradientBuffer() = default;
  explicit GradientBuffer(const Mlp& net);

  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  void zero();
  void scale(double factor);
  GradientBuffer& operator+=(const GradientBuffer& other);
  bool congruent_with(const Mlp& net) const;
  double squared_norm() const;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class AdamState {
 public:
  AdamState(const Mlp& net, AdamConfig config = {});

  const AdamConfig& config() const { return config_; }
  std::uint64_t step_count() const { return step_; }

 private:
  friend void adam_step(Mlp&, const GradientBuffer&, AdamState&);
  AdamConfig config_;
  std::uint64_t step_ = 0;
  GradientBuffer first_moment_;
  GradientBuffer second_moment_;
};

/// One bias-corrected Adam update. Throws std::domain_error naming the
/// parameter block if any gradient entry is non-finite.
void adam_step(Mlp& net, const GradientBuffer& grads, AdamState& state);

/// Reverse-mode recording of batched matrix computations.
///
/// Every operation appends one node holding its value. `backward` walks the
/// nodes in reverse exactly once, accumulating into node gradients and into
/// the GradientBuffers registered by `affine` calls.
class Tape {
 public:
  struct Var {
    std::size_t id = 0;
  };

  Var leaf(Matrix value);

  /// weight(layer) * x + bias(layer). Parameter gradients go to `grads`
  /// when non-null; a null buffer makes the layer a frozen constant.
  Var affine(Var x, const Mlp& net, std::size_t layer, GradientBuffer* grads);
  Var activation(Var x, Activation act);
  Var relu(Var x) { return activation(x, Activation::relu); }
  Var tanh(Var x) { return activation(x, Activation::tanh); }

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double factor);
  /// a + c with c constant, same shape as a.
  Var add_const(Var a, Matrix c);
  /// Row-wise scale and shift, broadcast over columns.
  Var row_affine(Var a, Vector row_scale, Vector row_shift);
  /// Elementwise product with a constant 0/1 mask. The mask is treated as
  /// constant in the reverse pass.
  Var gate(Var a, Matrix mask);
  /// Elementwise product with a constant matrix.
  Var mul_const(Var a, Matrix c);
  /// Subgradient 0 at the origin.
  Var abs(Var a);
  Var square(Var a);

  /// Custom op with a caller-supplied value and vector-Jacobian product.
  /// `vjp` maps the output gradient to the gradient w.r.t. `a`.
  Var unary(Var a, Matrix value, std::function<Matrix(const Matrix& out_grad)> vjp);

  Var rows(Var a, int start, int count);
  Var vstack(const std::vector<Var>& parts);
  /// Sum of all entries as a 1x1 node.
  Var sum(Var a);

  /// Seeds d(out)/d(out) = seed for a 1x1 node and runs the reverse pass.
  void backward(Var out, double seed = 1.0);

  const Matrix& value(Var v) const;
  const Matrix& grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  void clear();

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Tape&, const Matrix& out_grad)> backprop;
  };

  Var push(Matrix value, std::function<void(Tape&, const Matrix&)> backprop);
  void accumulate(Var v, const Matrix& g);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

/// Taped forward pass; see Tape::affine for the meaning of `grads`.
Tape::Var mlp_forward(const Mlp& net, Tape& tape, Tape::Var input,
                      GradientBuffer* grads);

/// Checks input size and finiteness, then evaluates one sample.
Vector mlp_forward(const Mlp& net, const Vector& input);

nlohmann::json to_json(const Mlp& net);
Mlp mlp_from_json(const nlohmann::json& doc);
void save_mlp(const Mlp& net, const std::string& path);
Mlp load_mlp(const std::string& path);

}  // namespace vop::diff
