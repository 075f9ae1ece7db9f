#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "flowdet/rng.hpp"

namespace flowdet::nn {

struct Tensor {
  std::vector<int> shape;
  std::vector<double> values;

  Tensor() = default;
  Tensor(std::vector<int> shape_in, std::vector<double> values_in)
      : shape(std::move(shape_in)), values(std::move(values_in)) {}

  static Tensor zeros(std::vector<int> shape);

  std::size_t numel() const { return values.size(); }
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Named parameters with gradient accumulators and optimizer moments.
// std::map keeps iteration order deterministic for updates and checkpoints.
class ParamStore {
 public:
  struct Parameter {
    Tensor value;
    std::vector<double> grad;
    std::vector<double> moment1;
    std::vector<double> moment2;
    bool has_grad = false;
  };

  Tensor& create(const std::string& name, std::vector<int> shape);
  bool has(const std::string& name) const { return params_.count(name) > 0; }
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;

  void zero_grad();
  // Decoupled weight-decay adaptive-moment update. Requires every parameter
  // to have received a gradient since the last step; clears gradients.
  void adam_step(const AdamConfig& cfg);

  std::int64_t step_count() const { return step_count_; }
  void set_step_count(std::int64_t n) { step_count_ = n; }

  const std::map<std::string, Parameter>& entries() const { return params_; }
  std::map<std::string, Parameter>& entries() { return params_; }

 private:
  std::map<std::string, Parameter> params_;
  std::int64_t step_count_ = 0;
};

// Fan-based uniform init, gain sqrt(6/(fan_in+fan_out)).
void init_xavier(Tensor& t, Rng& rng);

using NodeId = int;

// Reverse-mode tape. Ops append nodes in topological order; backward walks
// the tape once in reverse. Every op checks its output for non-finite values
// and throws NumericalDivergence on the first one it sees.
class Tape {
 public:
  using BackFn = std::function<void(const std::vector<double>& out_grad, Tape&)>;

  NodeId leaf(Tensor value);
  NodeId param(ParamStore& store, const std::string& name);
  NodeId emplace(Tensor value, BackFn back);

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  // Gradient buffer for a node, allocated on first touch.
  std::vector<double>& grad(NodeId id);
  bool has_grad(NodeId id) const { return !nodes_[id].grad.empty(); }

  // Seeds d(loss)/d(loss) = 1, walks the tape backwards, then accumulates
  // gradients of param-bound leaves into their ParamStore entries.
  void backward(NodeId loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    BackFn back;
  };
  std::vector<Node> nodes_;
  std::vector<std::pair<NodeId, ParamStore::Parameter*>> bindings_;
};

// --- forward primitives (each registers its exact backward on the tape) ---

// x [N,Din] * w [Din,Dout] + b [Dout] -> [N,Dout]
NodeId affine(Tape& tape, NodeId x, NodeId w, NodeId b);
NodeId relu(Tape& tape, NodeId x);
// Normalizes over the last dimension of [N,D]; learnable gain/bias [D].
NodeId layer_norm(Tape& tape, NodeId x, NodeId gain, NodeId bias,
                  double eps = 1e-5);
// Single-head scaled dot-product attention over rows; q,k,v all [N,D].
NodeId attention(Tape& tape, NodeId q, NodeId k, NodeId v);
NodeId add(Tape& tape, NodeId a, NodeId b);
// FiLM modulation: out[i,j] = h[i,j] * gamma[j] + beta[j].
NodeId film_modulate(Tape& tape, NodeId h, NodeId gamma, NodeId beta);
NodeId sigmoid_op(Tape& tape, NodeId x);
// Column slice [c0, c1) of a 2-D tensor.
NodeId slice_cols(Tape& tape, NodeId x, int c0, int c1);
// Clamp [N,4] (cx,cy,w,h) rows to the unit square via their corner form.
NodeId clip_unit_boxes(Tape& tape, NodeId boxes);
// Scale/log clamp bound for apply_box_deltas (log(1000/16), R-CNN convention).
inline constexpr double kDeltaClamp = 4.135;
// R-CNN delta application against constant reference boxes [N,4] (cx,cy,w,h):
// cx' = cx + dx*w, cy' = cy + dy*h, w' = w*exp(dw), h' = h*exp(dh), with
// dw/dh clamped to +-kDeltaClamp before the exponential.
NodeId apply_box_deltas(Tape& tape, NodeId deltas, const Tensor& ref);
// sum((pred - target)^2) as a scalar node; target is a constant.
NodeId squared_error_sum(Tape& tape, NodeId pred, const Tensor& target);
// Scalar node: sum_i weight_i * term_i (terms must be scalars).
NodeId weighted_sum(Tape& tape,
                    const std::vector<std::pair<NodeId, double>>& terms);

// Interleaved sin/cos embedding at geometric frequencies (base 1e4):
// out[2i] = sin(t * w_i), out[2i+1] = cos(t * w_i), w_i = 10000^(-2i/dim).
std::vector<double> sinusoidal_embed(double t, int dim);

// Plain row-major matmul used by the ops above; exposed for oracle tests.
void matmul(const double* a, const double* b, double* c, int m, int k, int n);

}  // namespace flowdet::nn
