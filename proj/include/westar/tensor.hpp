#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace westar {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Tape;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major f64 value. Cheap to copy: the buffer is shared and never
/// mutated once constructed. A tensor that is attached to a tape carries the
/// id of the node that produced it and participates in backward().
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_matrix(const RowMatrix& m);

  const Shape& shape() const { return shape_; }
  std::size_t dim() const { return shape_.size(); }
  std::size_t numel() const { return data_->size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  const std::vector<double>& values() const { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double item() const;

  Eigen::Map<const RowMatrix> matrix() const;

  bool requires_grad() const { return node_.has_value(); }
  std::optional<NodeId> node_id() const { return node_; }
  Tape* tape() const { return tape_; }

  /// Same values, no tape attachment.
  Tensor detached() const;

  bool same_values(const Tensor& other) const;

 private:
  friend class Tape;

  std::shared_ptr<const std::vector<double>> data_;
  Shape shape_;
  Tape* tape_ = nullptr;
  std::optional<NodeId> node_;
};

/// Per-node gradient accumulators handed to a backward rule. Slot k refers to
/// the k-th input of the node being differentiated.
class GradSink {
 public:
  bool wants(std::size_t slot) const;
  std::span<double> slot(std::size_t slot);

 private:
  friend class Tape;
  GradSink(Tape& tape, const std::vector<std::optional<NodeId>>& inputs)
      : tape_(tape), inputs_(inputs) {}

  Tape& tape_;
  const std::vector<std::optional<NodeId>>& inputs_;
};

using BackwardRule = std::function<void(std::span<const double> grad_out, GradSink& sink)>;

/// Leaf gradients produced by one backward pass.
class Gradients {
 public:
  std::optional<Tensor> of(const Tensor& leaf) const;
  const Tensor& at(const Tensor& leaf) const;
  bool contains(const Tensor& leaf) const;
  std::size_t size() const;

 private:
  friend class Tape;
  std::vector<std::optional<Tensor>> by_node_;
};

/// Define-by-run record of differentiable operations. Owned by exactly one
/// training step; not thread-safe. Node inputs always precede the node.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `value` as a gradient-receiving leaf on this tape.
  Tensor watch(const Tensor& value);

  /// Records a node produced from `inputs`. Returns an untracked tensor if no
  /// input requires grad.
  static Tensor record(Shape shape, std::vector<double> data,
                       std::initializer_list<const Tensor*> inputs, BackwardRule rule);

  Gradients backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  friend class GradSink;

  struct Node {
    std::vector<std::optional<NodeId>> inputs;
    std::size_t numel = 0;
    Shape shape;
    BackwardRule rule;
    bool leaf = false;
  };

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool consumed_ = false;
};

enum class BinaryKind { Add, Sub, Mul, Div };
enum class ReduceKind { Sum, Mean };

Tensor ew_op(const Tensor& a, const Tensor& b, BinaryKind kind);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor reduce(const Tensor& a, ReduceKind kind, std::optional<std::size_t> axis = std::nullopt);
Tensor sum(const Tensor& a, std::optional<std::size_t> axis = std::nullopt);
Tensor mean(const Tensor& a, std::optional<std::size_t> axis = std::nullopt);

Tensor abs_op(const Tensor& a);
Tensor hinge(const Tensor& a);
Tensor square(const Tensor& a);

// Order statistics. Even lengths average the two middle elements; ties go to
// the lowest flat index.
Tensor median(const Tensor& a);
Tensor mad(const Tensor& a);

Tensor stop_gradient(const Tensor& a);
Tensor gather(const Tensor& a, std::span<const std::size_t> indices);
Tensor reshape(const Tensor& a, Shape shape);

// Network building blocks.
Tensor softplus(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor add_rows(const Tensor& x, const Tensor& bias);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor softmax_rows(const Tensor& x);
Tensor layer_norm_rows(const Tensor& x, double eps = 1e-5);

}  // namespace westar
