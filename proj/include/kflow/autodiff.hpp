#pragma once

// Reverse-mode automatic differentiation on an explicit tape.
//
// A Tape owns every value computed during one forward build. Ops append a
// node holding the output value, the input node ids and a closure computing
// the vector-Jacobian product. `Tape::backward` walks the nodes in reverse
// append order once; afterwards the tape is consumed and must be reset.

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kflow/linalg.hpp"
#include "kflow/tensor.hpp"

namespace kflow::ad {

enum class OpKind {
  Leaf,
  Add,
  Sub,
  Scale,
  Matmul,
  Mul,
  Div,
  Relu,
  Exp,
  Log,
  Sum,
  Mean,
  Square,
  Transpose,
  Reshape,
  Select,
  Conv2d,
  MaxPool2x2,
  AvgPoolGlobal,
  SoftmaxCrossEntropy,
  BatchNorm,
  DropoutMaskApply,
  PairwiseSqDist,
  Solve,
};

std::string_view to_string(OpKind kind);

class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while its tape lives
/// and has not been reset.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  double item() const { return value().item(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct BackwardContext {
  const Tensor& grad_out;
  const Tensor& out;
  std::span<const Tensor* const> inputs;
  /// nullptr for inputs that do not require gradients.
  std::span<Tensor* const> input_grads;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

class Gradients {
 public:
  /// Gradient of a named variable; summed when the name was registered more than once.
  const Tensor& operator[](const std::string& name) const;
  const Tensor& of(const Var& v) const;
  bool contains(const std::string& name) const { return named_.contains(name); }
  const std::map<std::string, Tensor>& named() const noexcept { return named_; }

 private:
  friend class Tape;
  std::map<std::string, Tensor> named_;
  std::map<std::size_t, Tensor> by_id_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// A leaf whose gradient is reported by backward(); `name` keys the gradient map.
  Var variable(Tensor value, std::string name = {});

  Var record(OpKind kind, Tensor value, std::vector<Var> inputs, BackwardFn backward);

  /// One reverse sweep from a scalar loss. Consumes the tape.
  Gradients backward(const Var& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }
  void reset();

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

 private:
  struct Node {
    OpKind kind = OpKind::Leaf;
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    std::string name;
  };

  void check_open() const;

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

// ---- ops -------------------------------------------------------------------

enum class Padding { Valid, Same };

/// Elementwise a + b; `b` may also match the trailing dimensions of `a` (bias broadcast).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double c);
/// `s` must be a single-element tensor.
Var scale(const Var& a, const Var& s);
Var relu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);
/// Sub-matrix a[rows, cols] of a rank-2 tensor.
Var select(const Var& a, std::span<const std::size_t> rows, std::span<const std::size_t> cols);

/// NHWC input, weight (KH, KW, Cin, Cout), bias (Cout); stride 1.
Var conv2d(const Var& x, const Var& weight, const Var& bias, Padding padding);
/// 2x2 window, stride 2, odd trailing rows/cols dropped; ties route to the first maximum.
Var maxpool2x2(const Var& x);
/// (N, H, W, C) -> (N, C) channel means.
Var avgpool_global(const Var& x);
/// Sum over samples of cross-entropy between softmax(logits) and the label rows.
Var softmax_cross_entropy(const Var& logits, const Tensor& labels);

struct BatchStats {
  Tensor mean;
  Tensor var;  // biased batch variance
};
/// Normalizes over every axis but the last using batch statistics.
Var batchnorm_train(const Var& x, const Var& gamma, const Var& beta, double eps, BatchStats* stats = nullptr);
Var batchnorm_eval(const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
                   const Tensor& running_var, double eps);
/// x * mask with a fixed mask (already scaled by 1/(1-p)).
Var dropout_apply(const Var& x, const Tensor& mask);
/// (N, d) -> (N, N) with D_ij = ||f_i - f_j||^2, exact zeros on the diagonal.
Var pairwise_sqdist(const Var& f);
/// V = (A + eps I)^{-1} B with eps from the nugget ladder; reverse rule via linalg::solve_adjoint.
Var solve(const Var& a, const Var& b, const linalg::NuggetPolicy& policy = {});

/// Generic entry point for ops without attributes (unary or binary). Ops
/// that need attributes (Scale, Reshape, Select, Conv2d, ...) throw UnsupportedOp.
Var forward_op(OpKind kind, std::span<const Var> inputs);

// ---- finite-difference checking ---------------------------------------------

struct ParamRef {
  std::string name;
  Tensor* tensor;
};

/// Builds the scalar loss on the given tape, registering every ParamRef under
/// its name via Tape::variable and reading the live tensor values.
using Program = std::function<Var(Tape&)>;

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  bool deterministic = true;
  bool passed = false;
  double tolerance = 0.0;

  double max_rel_error() const;
  std::string summary() const;
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor relative to max(1, |f|); absorbs finite-difference roundoff on near-zero entries.
  double relative_floor = 1e-6;
};

/// Central differences against the tape gradient, entry by entry.
GradCheckReport grad_check(const Program& f, std::span<const ParamRef> params, double tol,
                           const GradCheckOptions& options = {});

}  // namespace kflow::ad
