#include "kcmd/tensor.hpp"

#include <Eigen/Core>
#include <cmath>
#include <numeric>
#include <sstream>

#include "kcmd/error.hpp"

namespace kcmd::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void ensure_grad(Node& n) {
  if (n.requires_grad && n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), 0.0);
}

const char* unary_name(UnaryOp op) {
  switch (op) {
    case UnaryOp::exp: return "exp";
    case UnaryOp::log: return "log";
    case UnaryOp::relu: return "relu";
    case UnaryOp::square: return "square";
    case UnaryOp::negate: return "negate";
  }
  return "?";
}

const char* binary_name(BinaryOp op) {
  switch (op) {
    case BinaryOp::add: return "add";
    case BinaryOp::sub: return "sub";
    case BinaryOp::mul: return "mul";
    case BinaryOp::div: return "div";
  }
  return "?";
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return filled(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->data.assign(shape_size(shape), value);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_size(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_string(shape));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  if (s.size() == 1) return 1;
  if (s.size() != 2) throw DimensionError("rows() on rank-" + std::to_string(s.size()) + " tensor");
  return s[0];
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  if (s.size() == 1) return s[0];
  if (s.size() != 2) throw DimensionError("cols() on rank-" + std::to_string(s.size()) + " tensor");
  return s[1];
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return node_->data[0];
}

Tensor Tensor::clone() const {
  auto n = std::make_shared<Node>(*node_);
  n->grad.clear();
  return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------

void Tape::check_live() const {
  if (spent_) throw TapeError("tape already ran backward; reset() before recording a new forward pass");
}

Tensor Tape::record(std::vector<Tensor> inputs, Tensor output, BackwardFn backward, std::string name) {
  check_live();
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  output.set_requires_grad(any && recording_);
  if (!any || !recording_) return output;
  Op op;
  op.inputs.reserve(inputs.size());
  for (const auto& t : inputs) op.inputs.push_back(t.handle());
  op.output = output.handle();
  op.backward = std::move(backward);
  op.name = std::move(name);
  ops_.push_back(std::move(op));
  return output;
}

Tensor Tape::custom(std::vector<Tensor> inputs, Tensor output, BackwardFn backward, std::string name) {
  return record(std::move(inputs), std::move(output), std::move(backward), std::move(name));
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul expects rank-2 operands, got " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul inner dimensions differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  MapMat(out.mutable_data().data(), m, n).noalias() =
      ConstMapMat(a.data().data(), m, k) * ConstMapMat(b.data().data(), k, n);
  return record(
      {a, b}, out,
      [m, k, n](const Node& o, std::span<Node* const> in) {
        ConstMapMat dc(o.grad.data(), m, n);
        if (in[0]->requires_grad) {
          MapMat(in[0]->grad.data(), m, k).noalias() += dc * ConstMapMat(in[1]->data.data(), k, n).transpose();
        }
        if (in[1]->requires_grad) {
          MapMat(in[1]->grad.data(), k, n).noalias() += ConstMapMat(in[0]->data.data(), m, k).transpose() * dc;
        }
      },
      "matmul");
}

Tensor Tape::unary(UnaryOp op, const Tensor& a) {
  const auto x = a.data();
  std::vector<double> y(x.size());
  switch (op) {
    case UnaryOp::exp:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::exp(x[i]);
      break;
    case UnaryOp::log:
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > 0.0)) throw DomainError("log of nonpositive value " + std::to_string(x[i]));
        y[i] = std::log(x[i]);
      }
      break;
    case UnaryOp::relu:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
      break;
    case UnaryOp::square:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * x[i];
      break;
    case UnaryOp::negate:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = -x[i];
      break;
  }
  Tensor out = Tensor::from(a.shape(), std::move(y));
  return record(
      {a}, out,
      [op](const Node& o, std::span<Node* const> in) {
        Node& a = *in[0];
        const std::size_t n = a.data.size();
        switch (op) {
          case UnaryOp::exp:
            for (std::size_t i = 0; i < n; ++i) a.grad[i] += o.grad[i] * o.data[i];
            break;
          case UnaryOp::log:
            for (std::size_t i = 0; i < n; ++i) a.grad[i] += o.grad[i] / a.data[i];
            break;
          case UnaryOp::relu:
            for (std::size_t i = 0; i < n; ++i)
              if (a.data[i] > 0.0) a.grad[i] += o.grad[i];
            break;
          case UnaryOp::square:
            for (std::size_t i = 0; i < n; ++i) a.grad[i] += 2.0 * a.data[i] * o.grad[i];
            break;
          case UnaryOp::negate:
            for (std::size_t i = 0; i < n; ++i) a.grad[i] -= o.grad[i];
            break;
        }
      },
      unary_name(op));
}

Tensor Tape::binary(BinaryOp op, const Tensor& a, const Tensor& b) {
  const bool a_scalar = a.size() == 1 && b.size() != 1;
  const bool b_scalar = b.size() == 1 && a.size() != 1;
  if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
    throw DimensionError(std::string(binary_name(op)) + " shape mismatch: " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  const Shape out_shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_size(out_shape);
  const auto x = a.data();
  const auto z = b.data();
  auto ai = [&](std::size_t i) { return a_scalar ? x[0] : x[i]; };
  auto bi = [&](std::size_t i) { return b_scalar ? z[0] : z[i]; };
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (op) {
      case BinaryOp::add: y[i] = ai(i) + bi(i); break;
      case BinaryOp::sub: y[i] = ai(i) - bi(i); break;
      case BinaryOp::mul: y[i] = ai(i) * bi(i); break;
      case BinaryOp::div:
        if (bi(i) == 0.0) throw DomainError("division by zero");
        y[i] = ai(i) / bi(i);
        break;
    }
  }
  Tensor out = Tensor::from(out_shape, std::move(y));
  return record(
      {a, b}, out,
      [op, a_scalar, b_scalar, n](const Node& o, std::span<Node* const> in) {
        Node& a = *in[0];
        Node& b = *in[1];
        auto av = [&](std::size_t i) { return a_scalar ? a.data[0] : a.data[i]; };
        auto bv = [&](std::size_t i) { return b_scalar ? b.data[0] : b.data[i]; };
        auto ga = [&](std::size_t i) -> double& { return a_scalar ? a.grad[0] : a.grad[i]; };
        auto gb = [&](std::size_t i) -> double& { return b_scalar ? b.grad[0] : b.grad[i]; };
        for (std::size_t i = 0; i < n; ++i) {
          const double g = o.grad[i];
          switch (op) {
            case BinaryOp::add:
              if (a.requires_grad) ga(i) += g;
              if (b.requires_grad) gb(i) += g;
              break;
            case BinaryOp::sub:
              if (a.requires_grad) ga(i) += g;
              if (b.requires_grad) gb(i) -= g;
              break;
            case BinaryOp::mul:
              if (a.requires_grad) ga(i) += g * bv(i);
              if (b.requires_grad) gb(i) += g * av(i);
              break;
            case BinaryOp::div:
              if (a.requires_grad) ga(i) += g / bv(i);
              if (b.requires_grad) gb(i) -= g * av(i) / (bv(i) * bv(i));
              break;
          }
        }
      },
      binary_name(op));
}

Tensor Tape::reduce(ReduceOp op, const Tensor& a, std::optional<std::size_t> axis) {
  const bool mean = op == ReduceOp::mean;
  if (!axis) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    const double scale = mean ? 1.0 / static_cast<double>(a.size()) : 1.0;
    Tensor out = Tensor::scalar(s * scale);
    return record(
        {a}, out,
        [scale](const Node& o, std::span<Node* const> in) {
          for (double& g : in[0]->grad) g += o.grad[0] * scale;
        },
        mean ? "mean" : "sum");
  }
  if (*axis >= a.rank()) {
    throw DimensionError("reduce axis " + std::to_string(*axis) + " out of range for rank " +
                         std::to_string(a.rank()));
  }
  const auto& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < *axis; ++i) outer *= s[i];
  for (std::size_t i = *axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[*axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != *axis) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  const double scale = mean ? 1.0 / static_cast<double>(len) : 1.0;
  std::vector<double> y(outer * inner, 0.0);
  const auto x = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) y[o * inner + i] += x[(o * len + l) * inner + i];
  for (double& v : y) v *= scale;
  Tensor out = Tensor::from(out_shape, std::move(y));
  return record(
      {a}, out,
      [outer, inner, len, scale](const Node& o, std::span<Node* const> in) {
        auto& g = in[0]->grad;
        for (std::size_t oo = 0; oo < outer; ++oo)
          for (std::size_t l = 0; l < len; ++l)
            for (std::size_t i = 0; i < inner; ++i) g[(oo * len + l) * inner + i] += o.grad[oo * inner + i] * scale;
      },
      mean ? "mean_axis" : "sum_axis");
}

Tensor Tape::add_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() != 2 || b.size() != x.shape()[1]) {
    throw DimensionError("add_bias: bias " + shape_string(b.shape()) + " does not match " +
                         shape_string(x.shape()));
  }
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor out = x.clone();
  out.set_requires_grad(false);
  out.named("");
  auto y = out.mutable_data();
  const auto bv = b.data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) y[r * n + c] += bv[c];
  return record(
      {x, b}, out,
      [m, n](const Node& o, std::span<Node* const> in) {
        if (in[0]->requires_grad)
          for (std::size_t i = 0; i < m * n; ++i) in[0]->grad[i] += o.grad[i];
        if (in[1]->requires_grad)
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) in[1]->grad[c] += o.grad[r * n + c];
      },
      "add_bias");
}

Tensor Tape::column(const Tensor& x, std::size_t col) {
  if (x.rank() != 2 || col >= x.shape()[1]) {
    throw DimensionError("column " + std::to_string(col) + " out of range for " + shape_string(x.shape()));
  }
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  std::vector<double> y(m);
  for (std::size_t r = 0; r < m; ++r) y[r] = x.data()[r * n + col];
  Tensor out = Tensor::from({m}, std::move(y));
  return record(
      {x}, out,
      [m, n, col](const Node& o, std::span<Node* const> in) {
        for (std::size_t r = 0; r < m; ++r) in[0]->grad[r * n + col] += o.grad[r];
      },
      "column");
}

void Tape::backward(const Tensor& loss) {
  check_live();
  if (loss.size() != 1) throw DimensionError("backward() needs a scalar loss, got " + shape_string(loss.shape()));
  spent_ = true;
  if (!loss.requires_grad()) return;
  for (auto& op : ops_) {
    for (auto& in : op.inputs) ensure_grad(*in);
    ensure_grad(*op.output);
  }
  loss.node()->grad.assign(1, 1.0);
  std::vector<Node*> inputs;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    inputs.clear();
    for (auto& in : it->inputs) inputs.push_back(in.get());
    it->backward(*it->output, inputs);
  }
}

void Tape::reset() {
  ops_.clear();
  spent_ = false;
}

const std::vector<std::string> Tape::op_names() const {
  std::vector<std::string> names;
  names.reserve(ops_.size());
  for (const auto& op : ops_) names.push_back(op.name);
  return names;
}

}  // namespace kcmd::ad
