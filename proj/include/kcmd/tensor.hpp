#pragma once

// Dense row-major float64 tensors with a reverse-mode tape.
//
// A Tensor is a shared handle to a node holding shape, data and (after a
// backward pass) a gradient. Tape methods compute results eagerly and, when
// any operand requires a gradient, record a backward rule. Parameters are
// plain leaf tensors with requires_grad set; their gradients accumulate
// across backward passes until zero_grad() is called.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kcmd::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until populated
  bool requires_grad = false;
  std::string name;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  // Rank-2 helpers; a rank-1 tensor of length n is treated as 1 x n.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double item() const;
  double at(std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  const std::string& name() const { return node_->name; }
  Tensor& named(std::string name) {
    node_->name = std::move(name);
    return *this;
  }

  // Deep copy detached from any tape; keeps requires_grad and name.
  Tensor clone() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& handle() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

enum class UnaryOp { exp, log, relu, square, negate };
enum class BinaryOp { add, sub, mul, div };
enum class ReduceOp { sum, mean };

// Local backward rule: receives the op's output node (with grad populated)
// and its input nodes; must accumulate into the grads of inputs that
// require them (grads are pre-sized by the tape).
using BackwardFn = std::function<void(const Node& out, std::span<Node* const> inputs)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Tensor matmul(const Tensor& a, const Tensor& b);

  Tensor unary(UnaryOp op, const Tensor& a);
  Tensor binary(BinaryOp op, const Tensor& a, const Tensor& b);
  Tensor reduce(ReduceOp op, const Tensor& a, std::optional<std::size_t> axis = std::nullopt);

  Tensor add(const Tensor& a, const Tensor& b) { return binary(BinaryOp::add, a, b); }
  Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinaryOp::sub, a, b); }
  Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinaryOp::mul, a, b); }
  Tensor div(const Tensor& a, const Tensor& b) { return binary(BinaryOp::div, a, b); }
  Tensor exp(const Tensor& a) { return unary(UnaryOp::exp, a); }
  Tensor log(const Tensor& a) { return unary(UnaryOp::log, a); }
  Tensor relu(const Tensor& a) { return unary(UnaryOp::relu, a); }
  Tensor square(const Tensor& a) { return unary(UnaryOp::square, a); }
  Tensor negate(const Tensor& a) { return unary(UnaryOp::negate, a); }
  Tensor sum(const Tensor& a) { return reduce(ReduceOp::sum, a); }
  Tensor mean(const Tensor& a) { return reduce(ReduceOp::mean, a); }

  // x[m x n] + b[n] broadcast over rows (dense-layer bias).
  Tensor add_bias(const Tensor& x, const Tensor& b);
  // Select a single column of a rank-2 tensor as a rank-1 tensor.
  Tensor column(const Tensor& x, std::size_t col);

  // Records an externally computed op. `output` must be freshly created;
  // its requires_grad flag is set from the inputs.
  Tensor custom(std::vector<Tensor> inputs, Tensor output, BackwardFn backward,
                std::string name = "custom");

  // Reverse pass from a scalar loss. Allowed once per recorded forward.
  void backward(const Tensor& loss);

  void reset();
  // With recording off, ops compute values only (inference).
  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }
  std::size_t op_count() const { return ops_.size(); }
  bool spent() const { return spent_; }
  const std::vector<std::string> op_names() const;

 private:
  struct Op {
    std::vector<std::shared_ptr<Node>> inputs;
    std::shared_ptr<Node> output;
    BackwardFn backward;
    std::string name;
  };

  Tensor record(std::vector<Tensor> inputs, Tensor output, BackwardFn backward, std::string name);
  void check_live() const;

  std::vector<Op> ops_;
  bool spent_ = false;
  bool recording_ = true;
};

}  // namespace kcmd::ad
