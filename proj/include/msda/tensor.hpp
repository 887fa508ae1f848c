#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace msda {

using Shape = std::vector<std::size_t>;

/// Raised when operand extents are incompatible with an operator.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::int64_t node_id = -1;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

}  // namespace detail

/// Shared handle to an n-dimensional array of doubles participating in a
/// reverse-mode graph. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::TensorNode>()) {
    for (auto extent : shape) {
      if (extent == 0 && shape.size() != 4) {
        throw ShapeError("tensor extents must be positive, got " +
                         shape_str(shape));
      }
    }
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
    if (requires_grad) node_->ensure_grad();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value),
                  requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t dim(std::size_t axis) const { return node().shape.at(axis); }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t numel() const { return node().values.size(); }

  std::span<const double> values() const { return node().values; }
  /// Direct write access; intended for parameter updates between graphs.
  std::span<double> mutable_values() { return node().values; }

  bool requires_grad() const { return node().requires_grad; }
  bool is_leaf() const { return node().is_leaf; }
  std::int64_t node_id() const { return node().node_id; }

  bool has_grad() const {
    return !node().grad.empty() && node().grad.size() == numel();
  }
  std::span<const double> grad() const { return node().grad; }
  // Grad buffers are accumulation targets shared by every handle, so this is
  // available through const handles captured by backward closures.
  std::span<double> mutable_grad() const {
    node().ensure_grad();
    return node().grad;
  }
  void zero_grad() {
    if (node().requires_grad) node().grad.assign(numel(), 0.0);
  }

  double item() const {
    if (numel() != 1) {
      throw ShapeError("item() needs a single-element tensor, got " +
                       shape_str(shape()));
    }
    return node().values[0];
  }

  double operator[](std::size_t i) const { return node().values.at(i); }

  /// Deep copy of values only; the result is a fresh leaf.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), node().values, requires_grad);
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  detail::TensorNode& node() const {
    if (!node_) throw std::logic_error("use of undefined tensor");
    return *node_;
  }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

/// Tape of operation records in creation (topological) order.
///
/// Ops append a record only when some input requires a gradient, so pure
/// inference builds an empty tape. backward() walks the tape once in reverse.
class Graph {
 public:
  struct Record {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  /// True when the result of an op over these inputs must be differentiable.
  static bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    for (const auto* t : inputs) {
      if (t && t->defined() && t->requires_grad()) return true;
    }
    return false;
  }

  /// Registers `output` as produced by `op`. `backward` reads output's grad
  /// and accumulates into the inputs' grads.
  void record(std::string_view op, std::vector<Tensor> inputs, Tensor& output,
              std::function<void()> backward) {
    for (const auto& in : inputs) {
      if (in.defined() && !in.is_leaf() &&
          (in.node_id() < 0 || static_cast<std::size_t>(in.node_id()) >=
                                   records_.size() ||
           !records_[in.node_id()].output.same_node(in))) {
        throw std::logic_error("op '" + std::string(op) +
                               "' consumes a tensor from another graph");
      }
    }
    auto& n = output.node();
    n.requires_grad = true;
    n.is_leaf = false;
    n.node_id = static_cast<std::int64_t>(records_.size());
    records_.push_back(
        Record{std::string(op), std::move(inputs), output, std::move(backward)});
  }

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }

  /// Reverse sweep from a scalar loss. Intermediate grads are reset on every
  /// call; leaf grads accumulate across calls.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
      throw ShapeError("backward needs a scalar loss, got " +
                       shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
      throw std::invalid_argument("backward: loss does not depend on any "
                                  "tensor that requires grad");
    }
    for (auto& r : records_) {
      r.output.node().grad.assign(r.output.numel(), 0.0);
      for (auto& in : r.inputs) {
        if (in.defined() && in.requires_grad()) in.node().ensure_grad();
      }
    }
    if (loss.is_leaf()) {
      loss.node().grad[0] += 1.0;
      return;
    }
    loss.node().grad[0] = 1.0;
    const auto last = static_cast<std::size_t>(loss.node_id());
    for (std::size_t i = last + 1; i-- > 0;) records_[i].backward();
  }

 private:
  std::vector<Record> records_;
};

}  // namespace msda
