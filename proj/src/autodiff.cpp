#include "kflow/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>

#include <Eigen/Core>

#include "kflow/error.hpp"

namespace kflow::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMap(t.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MutMap as_mat(Tensor& t, std::size_t rows, std::size_t cols) {
  return MutMap(t.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

[[noreturn]] void shape_error(std::string_view op, const std::string& detail) {
  throw Error(ErrorKind::ShapeMismatch, std::string(op) + ": " + detail);
}

void same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw Error(ErrorKind::ShapeMismatch, "operands live on different tapes");
}

void require_same_shape(std::string_view op, const Var& a, const Var& b) {
  same_tape(a, b);
  if (a.shape() != b.shape())
    shape_error(op, shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

template <class F>
Var unary(OpKind kind, const Var& a, F&& forward, BackwardFn backward) {
  const Tensor& x = a.value();
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = forward(x.data[i]);
  return a.tape().record(kind, std::move(out), {a}, std::move(backward));
}

}  // namespace

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Scale: return "scale";
    case OpKind::Matmul: return "matmul";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Relu: return "relu";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Square: return "square";
    case OpKind::Transpose: return "transpose";
    case OpKind::Reshape: return "reshape";
    case OpKind::Select: return "select";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::MaxPool2x2: return "maxpool2x2";
    case OpKind::AvgPoolGlobal: return "avgpool-global";
    case OpKind::SoftmaxCrossEntropy: return "softmax-crossentropy";
    case OpKind::BatchNorm: return "batchnorm";
    case OpKind::DropoutMaskApply: return "dropout-mask-apply";
    case OpKind::PairwiseSqDist: return "pairwise-sqdist";
    case OpKind::Solve: return "solve";
  }
  return "unknown";
}

// ---- Var / Gradients / Tape ----------------------------------------------------

const Tensor& Var::value() const {
  if (!tape_) throw Error(ErrorKind::ShapeMismatch, "use of an empty Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

const Tensor& Gradients::operator[](const std::string& name) const {
  auto it = named_.find(name);
  if (it == named_.end()) throw Error(ErrorKind::IndexOutOfRange, "no gradient named '" + name + "'");
  return it->second;
}

const Tensor& Gradients::of(const Var& v) const {
  auto it = by_id_.find(v.id());
  if (it == by_id_.end()) throw Error(ErrorKind::IndexOutOfRange, "variable has no gradient");
  return it->second;
}

void Tape::check_open() const {
  if (consumed_) throw Error(ErrorKind::TapeConsumed, "tape already ran backward; reset it first");
}

Var Tape::constant(Tensor value) {
  check_open();
  Node n;
  n.value = std::move(value);
  n.value.requires_grad = false;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value, std::string name) {
  check_open();
  Node n;
  n.value = std::move(value);
  n.value.requires_grad = true;
  n.requires_grad = true;
  n.name = name.empty() ? "#" + std::to_string(nodes_.size()) : std::move(name);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(OpKind kind, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  check_open();
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw Error(ErrorKind::ShapeMismatch, "input recorded on a different tape");
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
  }
  n.value.requires_grad = n.requires_grad;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(const Var& loss) {
  check_open();
  if (&loss.tape() != this) throw Error(ErrorKind::ShapeMismatch, "loss recorded on a different tape");
  if (loss.value().size() != 1)
    throw Error(ErrorKind::NotScalar, "backward from shape " + shape_string(loss.shape()));
  consumed_ = true;

  std::vector<Tensor> grads(nodes_.size());
  grads[loss.id()] = Tensor(loss.shape(), 1.0);

  std::vector<const Tensor*> in_values;
  std::vector<Tensor*> in_grads;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || grads[i].data.empty() || node.kind == OpKind::Leaf) continue;
    in_values.clear();
    in_grads.clear();
    for (std::size_t in : node.inputs) {
      in_values.push_back(&nodes_[in].value);
      if (nodes_[in].requires_grad) {
        if (grads[in].data.empty()) grads[in] = Tensor(nodes_[in].value.shape, 0.0);
        in_grads.push_back(&grads[in]);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    node.backward(BackwardContext{grads[i], node.value, in_values, in_grads});
    grads[i] = Tensor();
  }

  Gradients out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& node = nodes_[i];
    if (node.kind != OpKind::Leaf || !node.requires_grad) continue;
    Tensor g = grads[i].data.empty() ? Tensor(node.value.shape, 0.0) : std::move(grads[i]);
    auto it = out.named_.find(node.name);
    if (it == out.named_.end()) {
      out.named_.emplace(node.name, g);
    } else {
      for (std::size_t k = 0; k < g.size(); ++k) it->second.data[k] += g.data[k];
    }
    out.by_id_.emplace(i, std::move(g));
  }
  return out;
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
}

// ---- elementwise ------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape == y.shape) {
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] + y.data[i];
    return a.tape().record(OpKind::Add, std::move(out), {a, b}, [](const BackwardContext& c) {
      for (std::size_t k = 0; k < 2; ++k)
        if (Tensor* g = c.input_grads[k])
          for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += c.grad_out.data[i];
    });
  }
  // trailing-dimension broadcast of b over a
  const bool suffix = y.rank() <= x.rank() && y.size() > 0 &&
                      std::equal(y.shape.rbegin(), y.shape.rend(), x.shape.rbegin());
  if (!suffix) shape_error("add", shape_string(x.shape) + " + " + shape_string(y.shape));
  const std::size_t inner = y.size();
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] + y.data[i % inner];
  return a.tape().record(OpKind::Add, std::move(out), {a, b}, [inner](const BackwardContext& c) {
    if (Tensor* g = c.input_grads[0])
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += c.grad_out.data[i];
    if (Tensor* g = c.input_grads[1])
      for (std::size_t i = 0; i < c.grad_out.size(); ++i) g->data[i % inner] += c.grad_out.data[i];
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] - y.data[i];
  return a.tape().record(OpKind::Sub, std::move(out), {a, b}, [](const BackwardContext& c) {
    if (Tensor* g = c.input_grads[0])
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += c.grad_out.data[i];
    if (Tensor* g = c.input_grads[1])
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] -= c.grad_out.data[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] * y.data[i];
  return a.tape().record(OpKind::Mul, std::move(out), {a, b}, [](const BackwardContext& c) {
    const Tensor& x = *c.inputs[0];
    const Tensor& y = *c.inputs[1];
    if (Tensor* g = c.input_grads[0])
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += c.grad_out.data[i] * y.data[i];
    if (Tensor* g = c.input_grads[1])
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += c.grad_out.data[i] * x.data[i];
  });
}

Var div(const Var& a, const Var& b) {
  require_same_shape("div", a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] / y.data[i];
  return a.tape().record(OpKind::Div, std::move(out), {a, b}, [](const BackwardContext& c) {
    const Tensor& y = *c.inputs[1];
    if (Tensor* g = c.input_grads[0])
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += c.grad_out.data[i] / y.data[i];
    if (Tensor* g = c.input_grads[1])
      for (std::size_t i = 0; i < g->size(); ++i)
        g->data[i] -= c.grad_out.data[i] * c.out.data[i] / y.data[i];
  });
}

Var scale(const Var& a, double s) {
  return unary(OpKind::Scale, a, [s](double v) { return s * v; }, [s](const BackwardContext& c) {
    Tensor* g = c.input_grads[0];
    for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += s * c.grad_out.data[i];
  });
}

Var scale(const Var& a, const Var& s) {
  same_tape(a, s);
  if (s.value().size() != 1) shape_error("scale", "factor has shape " + shape_string(s.shape()));
  const double f = s.value().data[0];
  const Tensor& x = a.value();
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = f * x.data[i];
  return a.tape().record(OpKind::Scale, std::move(out), {a, s}, [](const BackwardContext& c) {
    const Tensor& x = *c.inputs[0];
    const double f = c.inputs[1]->data[0];
    if (Tensor* g = c.input_grads[0])
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += f * c.grad_out.data[i];
    if (Tensor* g = c.input_grads[1]) {
      double acc = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) acc += c.grad_out.data[i] * x.data[i];
      g->data[0] += acc;
    }
  });
}

Var relu(const Var& a) {
  return unary(OpKind::Relu, a, [](double v) { return v > 0.0 ? v : 0.0; }, [](const BackwardContext& c) {
    Tensor* g = c.input_grads[0];
    const Tensor& x = *c.inputs[0];
    for (std::size_t i = 0; i < g->size(); ++i)
      if (x.data[i] > 0.0) g->data[i] += c.grad_out.data[i];
  });
}

Var exp(const Var& a) {
  return unary(OpKind::Exp, a, [](double v) { return std::exp(v); }, [](const BackwardContext& c) {
    Tensor* g = c.input_grads[0];
    for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += c.grad_out.data[i] * c.out.data[i];
  });
}

Var log(const Var& a) {
  return unary(OpKind::Log, a, [](double v) { return std::log(v); }, [](const BackwardContext& c) {
    Tensor* g = c.input_grads[0];
    const Tensor& x = *c.inputs[0];
    for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += c.grad_out.data[i] / x.data[i];
  });
}

Var square(const Var& a) {
  return unary(OpKind::Square, a, [](double v) { return v * v; }, [](const BackwardContext& c) {
    Tensor* g = c.input_grads[0];
    const Tensor& x = *c.inputs[0];
    for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += 2.0 * x.data[i] * c.grad_out.data[i];
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return a.tape().record(OpKind::Sum, Tensor::scalar(s), {a}, [](const BackwardContext& c) {
    Tensor* g = c.input_grads[0];
    const double go = c.grad_out.data[0];
    for (double& v : g->data) v += go;
  });
}

Var mean(const Var& a) {
  const std::size_t n = a.value().size();
  if (n == 0) shape_error("mean", "empty tensor");
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return a.tape().record(OpKind::Mean, Tensor::scalar(s / static_cast<double>(n)), {a},
                         [n](const BackwardContext& c) {
                           Tensor* g = c.input_grads[0];
                           const double go = c.grad_out.data[0] / static_cast<double>(n);
                           for (double& v : g->data) v += go;
                         });
}

// ---- linear algebra -----------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.shape[1] != y.shape[0])
    shape_error("matmul", shape_string(x.shape) + " x " + shape_string(y.shape));
  const std::size_t n = x.shape[0], k = x.shape[1], m = y.shape[1];
  Tensor out({n, m});
  as_mat(out, n, m).noalias() = as_mat(x, n, k) * as_mat(y, k, m);
  return a.tape().record(OpKind::Matmul, std::move(out), {a, b}, [n, k, m](const BackwardContext& c) {
    auto go = as_mat(c.grad_out, n, m);
    if (Tensor* g = c.input_grads[0]) as_mat(*g, n, k).noalias() += go * as_mat(*c.inputs[1], k, m).transpose();
    if (Tensor* g = c.input_grads[1]) as_mat(*g, k, m).noalias() += as_mat(*c.inputs[0], n, k).transpose() * go;
  });
}

Var transpose(const Var& a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) shape_error("transpose", shape_string(x.shape));
  const std::size_t r = x.shape[0], cl = x.shape[1];
  Tensor out({cl, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < cl; ++j) out.data[j * r + i] = x.data[i * cl + j];
  return a.tape().record(OpKind::Transpose, std::move(out), {a}, [r, cl](const BackwardContext& c) {
    Tensor* g = c.input_grads[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < cl; ++j) g->data[i * cl + j] += c.grad_out.data[j * r + i];
  });
}

Var reshape(const Var& a, Shape shape) {
  const Tensor& x = a.value();
  if (shape_size(shape) != x.size())
    shape_error("reshape", shape_string(x.shape) + " -> " + shape_string(shape));
  Tensor out(std::move(shape), x.data);
  return a.tape().record(OpKind::Reshape, std::move(out), {a}, [](const BackwardContext& c) {
    Tensor* g = c.input_grads[0];
    for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += c.grad_out.data[i];
  });
}

Var select(const Var& a, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
  const Tensor& x = a.value();
  if (x.rank() != 2) shape_error("select", shape_string(x.shape));
  const std::size_t width = x.shape[1];
  for (std::size_t r : rows)
    if (r >= x.shape[0]) throw Error(ErrorKind::IndexOutOfRange, "select row " + std::to_string(r));
  for (std::size_t c : cols)
    if (c >= width) throw Error(ErrorKind::IndexOutOfRange, "select col " + std::to_string(c));
  std::vector<std::size_t> rs(rows.begin(), rows.end());
  std::vector<std::size_t> cs(cols.begin(), cols.end());
  Tensor out({rs.size(), cs.size()});
  for (std::size_t i = 0; i < rs.size(); ++i)
    for (std::size_t j = 0; j < cs.size(); ++j) out.data[i * cs.size() + j] = x.data[rs[i] * width + cs[j]];
  return a.tape().record(OpKind::Select, std::move(out), {a},
                         [rs = std::move(rs), cs = std::move(cs), width](const BackwardContext& c) {
                           Tensor* g = c.input_grads[0];
                           for (std::size_t i = 0; i < rs.size(); ++i)
                             for (std::size_t j = 0; j < cs.size(); ++j)
                               g->data[rs[i] * width + cs[j]] += c.grad_out.data[i * cs.size() + j];
                         });
}

Var solve(const Var& a, const Var& b, const linalg::NuggetPolicy& policy) {
  same_tape(a, b);
  const Tensor& at = a.value();
  const Tensor& bt = b.value();
  if (at.rank() != 2 || at.shape[0] != at.shape[1])
    shape_error("solve", "lhs " + shape_string(at.shape) + " is not square");
  if (bt.rank() != 2 || bt.shape[0] != at.shape[0])
    shape_error("solve", "rhs " + shape_string(bt.shape) + " vs lhs " + shape_string(at.shape));
  auto factor = std::make_shared<linalg::CholeskyFactor>(linalg::cholesky(at.to_matrix(), policy));
  Tensor out = Tensor::from_matrix(linalg::solve(*factor, bt.to_matrix()));
  return a.tape().record(OpKind::Solve, std::move(out), {a, b}, [factor](const BackwardContext& c) {
    const auto adj = linalg::solve_adjoint(*factor, c.out.to_matrix(), c.grad_out.to_matrix());
    if (Tensor* g = c.input_grads[0]) {
      auto src = adj.a_bar.data();
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += src[i];
    }
    if (Tensor* g = c.input_grads[1]) {
      auto src = adj.b_bar.data();
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += src[i];
    }
  });
}

Var pairwise_sqdist(const Var& f) {
  const Tensor& x = f.value();
  if (x.rank() != 2) shape_error("pairwise_sqdist", shape_string(x.shape));
  const std::size_t n = x.shape[0], d = x.shape[1];
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = x.data[i * d + k] - x.data[j * d + k];
        s += diff * diff;
      }
      out.data[i * n + j] = s;
      out.data[j * n + i] = s;
    }
  }
  return f.tape().record(OpKind::PairwiseSqDist, std::move(out), {f}, [n, d](const BackwardContext& c) {
    Tensor* g = c.input_grads[0];
    const Tensor& x = *c.inputs[0];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const double w = 2.0 * (c.grad_out.data[i * n + j] + c.grad_out.data[j * n + i]);
        if (w == 0.0) continue;
        for (std::size_t k = 0; k < d; ++k) g->data[i * d + k] += w * (x.data[i * d + k] - x.data[j * d + k]);
      }
    }
  });
}

// ---- convolutional pieces -------------------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t n, h, w, cin, kh, kw, cout, ho, wo, pad_top, pad_left;
  std::size_t patch() const { return kh * kw * cin; }
};

void im2col(const double* image, const ConvGeometry& g, double* cols) {
  const std::size_t patch = g.patch();
  for (std::size_t oy = 0; oy < g.ho; ++oy) {
    for (std::size_t ox = 0; ox < g.wo; ++ox) {
      double* dst = cols + (oy * g.wo + ox) * patch;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
        for (std::size_t kx = 0; kx < g.kw; ++kx, dst += g.cin) {
          const auto ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
          if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.h) || ix >= static_cast<std::ptrdiff_t>(g.w)) {
            std::fill_n(dst, g.cin, 0.0);
          } else {
            std::copy_n(image + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.cin, g.cin, dst);
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* image) {
  const std::size_t patch = g.patch();
  for (std::size_t oy = 0; oy < g.ho; ++oy) {
    for (std::size_t ox = 0; ox < g.wo; ++ox) {
      const double* src = cols + (oy * g.wo + ox) * patch;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
        for (std::size_t kx = 0; kx < g.kw; ++kx, src += g.cin) {
          const auto ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
          if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.h) || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
          double* dst = image + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.cin;
          for (std::size_t ch = 0; ch < g.cin; ++ch) dst[ch] += src[ch];
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, Padding padding) {
  same_tape(x, weight);
  same_tape(x, bias);
  const Tensor& in = x.value();
  const Tensor& wt = weight.value();
  const Tensor& bt = bias.value();
  if (in.rank() != 4) shape_error("conv2d", "input " + shape_string(in.shape) + " is not NHWC");
  if (wt.rank() != 4 || wt.shape[2] != in.shape[3])
    shape_error("conv2d", "weight " + shape_string(wt.shape) + " vs input " + shape_string(in.shape));
  if (bt.rank() != 1 || bt.shape[0] != wt.shape[3]) shape_error("conv2d", "bias " + shape_string(bt.shape));

  ConvGeometry g{};
  g.n = in.shape[0];
  g.h = in.shape[1];
  g.w = in.shape[2];
  g.cin = in.shape[3];
  g.kh = wt.shape[0];
  g.kw = wt.shape[1];
  g.cout = wt.shape[3];
  if (padding == Padding::Valid) {
    if (g.h < g.kh || g.w < g.kw) shape_error("conv2d", "kernel larger than input " + shape_string(in.shape));
    g.ho = g.h - g.kh + 1;
    g.wo = g.w - g.kw + 1;
  } else {
    g.ho = g.h;
    g.wo = g.w;
    g.pad_top = (g.kh - 1) / 2;
    g.pad_left = (g.kw - 1) / 2;
  }

  const std::size_t pixels = g.ho * g.wo;
  const std::size_t patch = g.patch();
  Tensor out({g.n, g.ho, g.wo, g.cout});
  Buffer cols(pixels * patch);
  auto wm = as_mat(wt, patch, g.cout);
  Eigen::Map<const Eigen::RowVectorXd> bv(bt.data.data(), static_cast<Eigen::Index>(g.cout));
  for (std::size_t s = 0; s < g.n; ++s) {
    im2col(in.data.data() + s * g.h * g.w * g.cin, g, cols.data());
    MutMap o(out.data.data() + s * pixels * g.cout, static_cast<Eigen::Index>(pixels), static_cast<Eigen::Index>(g.cout));
    o.noalias() = ConstMap(cols.data(), static_cast<Eigen::Index>(pixels), static_cast<Eigen::Index>(patch)) * wm;
    o.rowwise() += bv;
  }

  return x.tape().record(OpKind::Conv2d, std::move(out), {x, weight, bias}, [g](const BackwardContext& c) {
    const std::size_t pixels = g.ho * g.wo;
    const std::size_t patch = g.patch();
    const auto P = static_cast<Eigen::Index>(pixels);
    const auto K = static_cast<Eigen::Index>(patch);
    const auto C = static_cast<Eigen::Index>(g.cout);
    Tensor* gx = c.input_grads[0];
    Tensor* gw = c.input_grads[1];
    Tensor* gb = c.input_grads[2];
    const Tensor& in = *c.inputs[0];
    auto wm = as_mat(*c.inputs[1], patch, g.cout);
    Buffer cols(gw ? pixels * patch : 0);
    Buffer dcols(gx ? pixels * patch : 0);
    for (std::size_t s = 0; s < g.n; ++s) {
      ConstMap go(c.grad_out.data.data() + s * pixels * g.cout, P, C);
      if (gw) {
        im2col(in.data.data() + s * g.h * g.w * g.cin, g, cols.data());
        as_mat(*gw, patch, g.cout).noalias() += ConstMap(cols.data(), P, K).transpose() * go;
      }
      if (gb) {
        Eigen::Map<Eigen::RowVectorXd>(gb->data.data(), C) += go.colwise().sum();
      }
      if (gx) {
        MutMap(dcols.data(), P, K).noalias() = go * wm.transpose();
        col2im_add(dcols.data(), g, gx->data.data() + s * g.h * g.w * g.cin);
      }
    }
  });
}

Var maxpool2x2(const Var& x) {
  const Tensor& in = x.value();
  if (in.rank() != 4) shape_error("maxpool2x2", shape_string(in.shape));
  const std::size_t n = in.shape[0], h = in.shape[1], w = in.shape[2], ch = in.shape[3];
  const std::size_t ho = h / 2, wo = w / 2;
  if (ho == 0 || wo == 0) shape_error("maxpool2x2", "input too small " + shape_string(in.shape));
  Tensor out({n, ho, wo, ch});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox)
        for (std::size_t k = 0; k < ch; ++k) {
          std::size_t best = ((s * h + 2 * oy) * w + 2 * ox) * ch + k;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = ((s * h + 2 * oy + dy) * w + 2 * ox + dx) * ch + k;
              if (in.data[idx] > in.data[best]) best = idx;  // strict: first max wins
            }
          const std::size_t o = ((s * ho + oy) * wo + ox) * ch + k;
          out.data[o] = in.data[best];
          (*argmax)[o] = static_cast<std::uint32_t>(best);
        }
  return x.tape().record(OpKind::MaxPool2x2, std::move(out), {x}, [argmax](const BackwardContext& c) {
    Tensor* g = c.input_grads[0];
    for (std::size_t o = 0; o < argmax->size(); ++o) g->data[(*argmax)[o]] += c.grad_out.data[o];
  });
}

Var avgpool_global(const Var& x) {
  const Tensor& in = x.value();
  if (in.rank() != 4) shape_error("avgpool_global", shape_string(in.shape));
  const std::size_t n = in.shape[0], hw = in.shape[1] * in.shape[2], ch = in.shape[3];
  Tensor out({n, ch});
  const double inv = 1.0 / static_cast<double>(hw);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t k = 0; k < ch; ++k) out.data[s * ch + k] += in.data[(s * hw + p) * ch + k];
    for (std::size_t k = 0; k < ch; ++k) out.data[s * ch + k] *= inv;
  }
  return x.tape().record(OpKind::AvgPoolGlobal, std::move(out), {x}, [n, hw, ch, inv](const BackwardContext& c) {
    Tensor* g = c.input_grads[0];
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t k = 0; k < ch; ++k) g->data[(s * hw + p) * ch + k] += inv * c.grad_out.data[s * ch + k];
  });
}

Var softmax_cross_entropy(const Var& logits, const Tensor& labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || labels.shape != z.shape)
    shape_error("softmax_cross_entropy", shape_string(z.shape) + " vs labels " + shape_string(labels.shape));
  const std::size_t n = z.shape[0], m = z.shape[1];
  auto probs = std::make_shared<std::vector<double>>(z.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* zi = z.data.data() + i * m;
    const double* yi = labels.data.data() + i * m;
    const double zmax = *std::max_element(zi, zi + m);
    double se = 0.0;
    for (std::size_t k = 0; k < m; ++k) se += std::exp(zi[k] - zmax);
    const double lse = zmax + std::log(se);
    for (std::size_t k = 0; k < m; ++k) {
      (*probs)[i * m + k] = std::exp(zi[k] - lse);
      loss += yi[k] * (lse - zi[k]);
    }
  }
  return logits.tape().record(OpKind::SoftmaxCrossEntropy, Tensor::scalar(loss), {logits},
                              [probs, labels, n, m](const BackwardContext& c) {
                                Tensor* g = c.input_grads[0];
                                const double go = c.grad_out.data[0];
                                for (std::size_t i = 0; i < n; ++i) {
                                  double mass = 0.0;
                                  for (std::size_t k = 0; k < m; ++k) mass += labels.data[i * m + k];
                                  for (std::size_t k = 0; k < m; ++k)
                                    g->data[i * m + k] += go * (mass * (*probs)[i * m + k] - labels.data[i * m + k]);
                                }
                              });
}

Var batchnorm_train(const Var& x, const Var& gamma, const Var& beta, double eps, BatchStats* stats) {
  same_tape(x, gamma);
  same_tape(x, beta);
  const Tensor& in = x.value();
  if (in.rank() < 2) shape_error("batchnorm", shape_string(in.shape));
  const std::size_t ch = in.shape.back();
  if (gamma.value().size() != ch || beta.value().size() != ch)
    shape_error("batchnorm", "scale/shift size vs channels " + std::to_string(ch));
  const std::size_t rows = in.size() / ch;
  if (rows < 2) shape_error("batchnorm", "training mode needs at least two values per channel");

  std::vector<double> mu(ch, 0.0), var(ch, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < ch; ++k) mu[k] += in.data[r * ch + k];
  for (double& v : mu) v /= static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < ch; ++k) {
      const double d = in.data[r * ch + k] - mu[k];
      var[k] += d * d;
    }
  for (double& v : var) v /= static_cast<double>(rows);

  auto inv_std = std::make_shared<std::vector<double>>(ch);
  for (std::size_t k = 0; k < ch; ++k) (*inv_std)[k] = 1.0 / std::sqrt(var[k] + eps);
  auto xhat = std::make_shared<std::vector<double>>(in.size());
  Tensor out(in.shape);
  const Tensor& gm = gamma.value();
  const Tensor& bt = beta.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < ch; ++k) {
      const std::size_t i = r * ch + k;
      (*xhat)[i] = (in.data[i] - mu[k]) * (*inv_std)[k];
      out.data[i] = gm.data[k] * (*xhat)[i] + bt.data[k];
    }
  if (stats) {
    stats->mean = Tensor({ch}, mu);
    stats->var = Tensor({ch}, var);
  }

  return x.tape().record(OpKind::BatchNorm, std::move(out), {x, gamma, beta},
                         [inv_std, xhat, rows, ch](const BackwardContext& c) {
                           std::vector<double> sum_g(ch, 0.0), sum_gx(ch, 0.0);
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t k = 0; k < ch; ++k) {
                               const double go = c.grad_out.data[r * ch + k];
                               sum_g[k] += go;
                               sum_gx[k] += go * (*xhat)[r * ch + k];
                             }
                           if (Tensor* g = c.input_grads[1])
                             for (std::size_t k = 0; k < ch; ++k) g->data[k] += sum_gx[k];
                           if (Tensor* g = c.input_grads[2])
                             for (std::size_t k = 0; k < ch; ++k) g->data[k] += sum_g[k];
                           if (Tensor* g = c.input_grads[0]) {
                             const Tensor& gm = *c.inputs[1];
                             const double inv_m = 1.0 / static_cast<double>(rows);
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t k = 0; k < ch; ++k) {
                                 const std::size_t i = r * ch + k;
                                 g->data[i] += gm.data[k] * (*inv_std)[k] *
                                               (c.grad_out.data[i] - inv_m * sum_g[k] - inv_m * (*xhat)[i] * sum_gx[k]);
                               }
                           }
                         });
}

Var batchnorm_eval(const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
                   const Tensor& running_var, double eps) {
  same_tape(x, gamma);
  same_tape(x, beta);
  const Tensor& in = x.value();
  const std::size_t ch = in.shape.empty() ? 0 : in.shape.back();
  if (ch == 0 || gamma.value().size() != ch || beta.value().size() != ch || running_mean.size() != ch ||
      running_var.size() != ch)
    shape_error("batchnorm", "parameter sizes vs " + shape_string(in.shape));
  const std::size_t rows = in.size() / ch;
  std::vector<double> inv_std(ch);
  for (std::size_t k = 0; k < ch; ++k) inv_std[k] = 1.0 / std::sqrt(running_var.data[k] + eps);
  Tensor out(in.shape);
  const Tensor& gm = gamma.value();
  const Tensor& bt = beta.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < ch; ++k) {
      const std::size_t i = r * ch + k;
      out.data[i] = gm.data[k] * (in.data[i] - running_mean.data[k]) * inv_std[k] + bt.data[k];
    }
  return x.tape().record(OpKind::BatchNorm, std::move(out), {x, gamma, beta},
                         [inv_std = std::move(inv_std), mu = running_mean, rows, ch](const BackwardContext& c) {
                           const Tensor& in = *c.inputs[0];
                           const Tensor& gm = *c.inputs[1];
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t k = 0; k < ch; ++k) {
                               const std::size_t i = r * ch + k;
                               const double go = c.grad_out.data[i];
                               if (Tensor* g = c.input_grads[0]) g->data[i] += go * gm.data[k] * inv_std[k];
                               if (Tensor* g = c.input_grads[1]) g->data[k] += go * (in.data[i] - mu.data[k]) * inv_std[k];
                               if (Tensor* g = c.input_grads[2]) g->data[k] += go;
                             }
                         });
}

Var dropout_apply(const Var& x, const Tensor& mask) {
  const Tensor& in = x.value();
  if (mask.shape != in.shape) shape_error("dropout_apply", shape_string(mask.shape) + " vs " + shape_string(in.shape));
  Tensor out(in.shape);
  for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = in.data[i] * mask.data[i];
  return x.tape().record(OpKind::DropoutMaskApply, std::move(out), {x}, [mask](const BackwardContext& c) {
    Tensor* g = c.input_grads[0];
    for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += c.grad_out.data[i] * mask.data[i];
  });
}

Var forward_op(OpKind kind, std::span<const Var> inputs) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n)
      throw Error(ErrorKind::ShapeMismatch, std::string(to_string(kind)) + " takes " + std::to_string(n) + " inputs");
  };
  switch (kind) {
    case OpKind::Add: need(2); return add(inputs[0], inputs[1]);
    case OpKind::Sub: need(2); return sub(inputs[0], inputs[1]);
    case OpKind::Mul: need(2); return mul(inputs[0], inputs[1]);
    case OpKind::Div: need(2); return div(inputs[0], inputs[1]);
    case OpKind::Matmul: need(2); return matmul(inputs[0], inputs[1]);
    case OpKind::Solve: need(2); return solve(inputs[0], inputs[1]);
    case OpKind::Relu: need(1); return relu(inputs[0]);
    case OpKind::Exp: need(1); return exp(inputs[0]);
    case OpKind::Log: need(1); return log(inputs[0]);
    case OpKind::Square: need(1); return square(inputs[0]);
    case OpKind::Sum: need(1); return sum(inputs[0]);
    case OpKind::Mean: need(1); return mean(inputs[0]);
    case OpKind::Transpose: need(1); return transpose(inputs[0]);
    case OpKind::MaxPool2x2: need(1); return maxpool2x2(inputs[0]);
    case OpKind::AvgPoolGlobal: need(1); return avgpool_global(inputs[0]);
    case OpKind::PairwiseSqDist: need(1); return pairwise_sqdist(inputs[0]);
    default:
      throw Error(ErrorKind::UnsupportedOp, std::string(to_string(kind)) + " needs attributes; call it directly");
  }
}

// ---- grad_check ---------------------------------------------------------------

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& p : params) m = std::max(m, p.max_rel_error);
  return m;
}

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "PASS" : "FAIL") << " tol=" << tolerance;
  if (!deterministic) os << " (program is nondeterministic)";
  for (const auto& p : params) {
    os << "\n  " << p.name << ": max rel err " << p.max_rel_error << " at [" << p.worst_index
       << "] analytic=" << p.analytic << " numeric=" << p.numeric;
  }
  return os.str();
}

GradCheckReport grad_check(const Program& f, std::span<const ParamRef> params, double tol,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  report.tolerance = tol;

  auto evaluate = [&]() {
    Tape tape;
    return f(tape).item();
  };

  Tape tape;
  const Var loss = f(tape);
  const double f0 = loss.item();
  const Gradients grads = tape.backward(loss);

  const double again = evaluate();
  report.deterministic = (again == f0);

  const double floor = options.relative_floor * std::max(1.0, std::abs(f0));
  const double h = options.step;
  for (const ParamRef& p : params) {
    ParamCheck check;
    check.name = p.name;
    const Tensor& analytic = grads[p.name];
    for (std::size_t i = 0; i < p.tensor->size(); ++i) {
      double& slot = p.tensor->data[i];
      const double saved = slot;
      slot = saved + h;
      const double up = evaluate();
      slot = saved - h;
      const double down = evaluate();
      slot = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic.data[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double err = std::abs(a - numeric) / denom;
      if (!(err <= check.max_rel_error)) {
        check.max_rel_error = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
        check.worst_index = i;
        check.analytic = a;
        check.numeric = numeric;
      }
    }
    report.params.push_back(std::move(check));
  }
  report.passed = report.deterministic && report.max_rel_error() <= tol;
  return report;
}

}  // namespace kflow::ad
