#include "westar/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "westar/error.hpp"

namespace westar {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor() : data_(std::make_shared<const std::vector<double>>()), shape_{0} {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != data.size()) {
    throw Error(ErrorKind::Shape, "tensor shape " + shape_string(shape_) + " does not match " +
                                      std::to_string(data.size()) + " values");
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::from_matrix(const RowMatrix& m) {
  std::vector<double> v(m.data(), m.data() + m.size());
  return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                std::move(v));
}

std::size_t Tensor::rows() const {
  if (dim() != 2) throw Error(ErrorKind::Shape, "expected a matrix, got " + shape_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (dim() != 2) throw Error(ErrorKind::Shape, "expected a matrix, got " + shape_string(shape_));
  return shape_[1];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw Error(ErrorKind::Shape, "item() on non-scalar tensor " + shape_string(shape_));
  }
  return (*data_)[0];
}

Eigen::Map<const RowMatrix> Tensor::matrix() const {
  return {data_->data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
}

Tensor Tensor::detached() const {
  Tensor t;
  t.data_ = data_;
  t.shape_ = shape_;
  return t;
}

bool Tensor::same_values(const Tensor& other) const {
  return shape_ == other.shape_ && *data_ == *other.data_;
}

// ---------------------------------------------------------------- Tape

bool GradSink::wants(std::size_t slot) const { return inputs_[slot].has_value(); }

std::span<double> GradSink::slot(std::size_t slot) {
  const NodeId id = *inputs_[slot];
  auto& g = tape_.grads_[id];
  if (g.empty()) g.assign(tape_.nodes_[id].numel, 0.0);
  return g;
}

std::optional<Tensor> Gradients::of(const Tensor& leaf) const {
  const auto id = leaf.node_id();
  if (!id || *id >= by_node_.size()) return std::nullopt;
  return by_node_[*id];
}

const Tensor& Gradients::at(const Tensor& leaf) const {
  const auto id = leaf.node_id();
  if (!id || *id >= by_node_.size() || !by_node_[*id]) {
    throw Error(ErrorKind::State, "no gradient recorded for tensor");
  }
  return *by_node_[*id];
}

bool Gradients::contains(const Tensor& leaf) const { return of(leaf).has_value(); }

std::size_t Gradients::size() const {
  return static_cast<std::size_t>(
      std::count_if(by_node_.begin(), by_node_.end(), [](const auto& g) { return g.has_value(); }));
}

Tensor Tape::watch(const Tensor& value) {
  if (consumed_) throw Error(ErrorKind::State, "tape already consumed by backward()");
  Node node;
  node.numel = value.numel();
  node.shape = value.shape();
  node.leaf = true;
  nodes_.push_back(std::move(node));
  Tensor t = value.detached();
  t.tape_ = this;
  t.node_ = nodes_.size() - 1;
  return t;
}

Tensor Tape::record(Shape shape, std::vector<double> data,
                    std::initializer_list<const Tensor*> inputs, BackwardRule rule) {
  Tape* tape = nullptr;
  for (const Tensor* in : inputs) {
    if (!in->requires_grad()) continue;
    if (tape && tape != in->tape()) {
      throw Error(ErrorKind::State, "operation mixes tensors from different tapes");
    }
    tape = in->tape();
  }
  Tensor out(std::move(shape), std::move(data));
  if (!tape) return out;
  if (tape->consumed_) throw Error(ErrorKind::State, "tape already consumed by backward()");

  Node node;
  node.numel = out.numel();
  node.rule = std::move(rule);
  for (const Tensor* in : inputs) node.inputs.push_back(in->node_id());
  tape->nodes_.push_back(std::move(node));
  out.tape_ = tape;
  out.node_ = tape->nodes_.size() - 1;
  return out;
}

Gradients Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw Error(ErrorKind::Shape, "backward() needs a scalar loss, got " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad() || loss.tape() != this) {
    throw Error(ErrorKind::State, "loss is not on this tape");
  }
  if (consumed_) throw Error(ErrorKind::State, "backward() already ran on this tape");
  consumed_ = true;

  grads_.assign(nodes_.size(), {});
  grads_[*loss.node_id()] = {1.0};
  for (std::size_t k = *loss.node_id() + 1; k-- > 0;) {
    Node& node = nodes_[k];
    if (grads_[k].empty() || node.leaf) continue;
    GradSink sink(*this, node.inputs);
    node.rule(grads_[k], sink);
    // Interior gradients are not needed once propagated.
    std::vector<double>().swap(grads_[k]);
  }

  Gradients out;
  out.by_node_.resize(nodes_.size());
  for (std::size_t k = 0; k < nodes_.size(); ++k) {
    if (!nodes_[k].leaf) continue;
    auto g = std::move(grads_[k]);
    if (g.empty()) g.assign(nodes_[k].numel, 0.0);
    out.by_node_[k] = Tensor(nodes_[k].shape, std::move(g));
  }
  grads_.clear();
  return out;
}

// ---------------------------------------------------------------- elementwise

namespace {

bool is_scalar_like(const Tensor& t) { return t.numel() == 1; }

Shape broadcast_shape(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return a.shape();
  if (is_scalar_like(b)) return a.shape();
  if (is_scalar_like(a)) return b.shape();
  throw Error(ErrorKind::Shape, "shape mismatch: " + shape_string(a.shape()) + " vs " +
                                    shape_string(b.shape()));
}

// Accumulates a per-output gradient into an input that may have been broadcast.
void accumulate(std::span<double> dst, std::size_t i, double g) {
  if (dst.size() == 1) {
    dst[0] += g;
  } else {
    dst[i] += g;
  }
}

template <class F>
std::vector<double> map_values(const Tensor& a, F f) {
  std::vector<double> out(a.numel());
  const auto& v = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(v[i]);
  return out;
}

}  // namespace

Tensor ew_op(const Tensor& a, const Tensor& b, BinaryKind kind) {
  Shape shape = broadcast_shape(a, b);
  const std::size_t n = shape_numel(shape);
  const auto& av = a.values();
  const auto& bv = b.values();
  const bool a_bc = av.size() != n;
  const bool b_bc = bv.size() != n;
  auto at = [&](const std::vector<double>& v, bool bc, std::size_t i) { return bc ? v[0] : v[i]; };

  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = at(av, a_bc, i);
    const double y = at(bv, b_bc, i);
    switch (kind) {
      case BinaryKind::Add: out[i] = x + y; break;
      case BinaryKind::Sub: out[i] = x - y; break;
      case BinaryKind::Mul: out[i] = x * y; break;
      case BinaryKind::Div:
        if (y == 0.0) throw Error(ErrorKind::Domain, "division by zero at element " + std::to_string(i));
        out[i] = x / y;
        break;
    }
  }

  return Tape::record(
      std::move(shape), std::move(out), {&a, &b},
      [a = a.detached(), b = b.detached(), kind, a_bc, b_bc](std::span<const double> g,
                                                           GradSink& sink) {
        const auto& av = a.values();
        const auto& bv = b.values();
        auto at = [](const std::vector<double>& v, bool bc, std::size_t i) { return bc ? v[0] : v[i]; };
        if (sink.wants(0)) {
          auto ga = sink.slot(0);
          for (std::size_t i = 0; i < g.size(); ++i) {
            double d = g[i];
            if (kind == BinaryKind::Mul) d *= at(bv, b_bc, i);
            if (kind == BinaryKind::Div) d /= at(bv, b_bc, i);
            accumulate(ga, i, d);
          }
        }
        if (sink.wants(1)) {
          auto gb = sink.slot(1);
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = at(bv, b_bc, i);
            double d = g[i];
            switch (kind) {
              case BinaryKind::Add: break;
              case BinaryKind::Sub: d = -d; break;
              case BinaryKind::Mul: d *= at(av, a_bc, i); break;
              case BinaryKind::Div: d *= -at(av, a_bc, i) / (y * y); break;
            }
            accumulate(gb, i, d);
          }
        }
      });
}

Tensor add(const Tensor& a, const Tensor& b) { return ew_op(a, b, BinaryKind::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return ew_op(a, b, BinaryKind::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return ew_op(a, b, BinaryKind::Mul); }
Tensor div(const Tensor& a, const Tensor& b) { return ew_op(a, b, BinaryKind::Div); }
Tensor scale(const Tensor& a, double factor) { return mul(a, Tensor::scalar(factor)); }

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.cols() != b.rows()) {
    throw Error(ErrorKind::Shape, "matmul inner extents disagree: " + shape_string(a.shape()) +
                                      " x " + shape_string(b.shape()));
  }
  RowMatrix c = a.matrix() * b.matrix();
  std::vector<double> out(c.data(), c.data() + c.size());
  return Tape::record({a.rows(), b.cols()}, std::move(out), {&a, &b},
                      [a = a.detached(), b = b.detached()](std::span<const double> g, GradSink& sink) {
                        Eigen::Map<const RowMatrix> gm(g.data(), a.rows(), b.cols());
                        if (sink.wants(0)) {
                          auto ga = sink.slot(0);
                          Eigen::Map<RowMatrix>(ga.data(), a.rows(), a.cols()).noalias() +=
                              gm * b.matrix().transpose();
                        }
                        if (sink.wants(1)) {
                          auto gb = sink.slot(1);
                          Eigen::Map<RowMatrix>(gb.data(), b.rows(), b.cols()).noalias() +=
                              a.matrix().transpose() * gm;
                        }
                      });
}

Tensor transpose(const Tensor& a) {
  RowMatrix t = a.matrix().transpose();
  std::vector<double> out(t.data(), t.data() + t.size());
  const auto r = a.rows();
  const auto c = a.cols();
  return Tape::record({c, r}, std::move(out), {&a}, [r, c](std::span<const double> g, GradSink& sink) {
    auto ga = sink.slot(0);
    Eigen::Map<RowMatrix>(ga.data(), r, c) += Eigen::Map<const RowMatrix>(g.data(), c, r).transpose();
  });
}

// ---------------------------------------------------------------- reductions

Tensor reduce(const Tensor& a, ReduceKind kind, std::optional<std::size_t> axis) {
  const auto& v = a.values();
  if (!axis) {
    if (kind == ReduceKind::Mean && v.empty()) {
      throw Error(ErrorKind::Domain, "mean of an empty tensor");
    }
    double s = 0.0;
    for (double x : v) s += x;
    const double factor = kind == ReduceKind::Mean ? 1.0 / static_cast<double>(v.size()) : 1.0;
    return Tape::record({}, {s * factor}, {&a}, [factor](std::span<const double> g, GradSink& sink) {
      for (double& x : sink.slot(0)) x += g[0] * factor;
    });
  }

  if (*axis >= a.dim()) {
    throw Error(ErrorKind::Index, "reduce axis " + std::to_string(*axis) + " out of range for " +
                                      shape_string(a.shape()));
  }
  const auto& shape = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < *axis; ++d) outer *= shape[d];
  for (std::size_t d = *axis + 1; d < shape.size(); ++d) inner *= shape[d];
  const std::size_t n = shape[*axis];
  if (kind == ReduceKind::Mean && n == 0) throw Error(ErrorKind::Domain, "mean over an empty axis");
  const double factor = kind == ReduceKind::Mean ? 1.0 / static_cast<double>(n) : 1.0;

  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += v[(o * n + k) * inner + i];
  for (double& x : out) x *= factor;

  Shape out_shape = shape;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(*axis));
  return Tape::record(std::move(out_shape), std::move(out), {&a},
                      [outer, inner, n, factor](std::span<const double> g, GradSink& sink) {
                        auto ga = sink.slot(0);
                        for (std::size_t o = 0; o < outer; ++o)
                          for (std::size_t k = 0; k < n; ++k)
                            for (std::size_t i = 0; i < inner; ++i)
                              ga[(o * n + k) * inner + i] += g[o * inner + i] * factor;
                      });
}

Tensor sum(const Tensor& a, std::optional<std::size_t> axis) { return reduce(a, ReduceKind::Sum, axis); }
Tensor mean(const Tensor& a, std::optional<std::size_t> axis) { return reduce(a, ReduceKind::Mean, axis); }

// ---------------------------------------------------------------- pointwise

Tensor abs_op(const Tensor& a) {
  return Tape::record(a.shape(), map_values(a, [](double x) { return std::abs(x); }), {&a},
                      [a = a.detached()](std::span<const double> g, GradSink& sink) {
                        auto ga = sink.slot(0);
                        const auto& v = a.values();
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          const double sign = v[i] > 0.0 ? 1.0 : (v[i] < 0.0 ? -1.0 : 0.0);
                          ga[i] += g[i] * sign;
                        }
                      });
}

Tensor hinge(const Tensor& a) {
  return Tape::record(a.shape(), map_values(a, [](double x) { return x > 0.0 ? x : 0.0; }), {&a},
                      [a = a.detached()](std::span<const double> g, GradSink& sink) {
                        auto ga = sink.slot(0);
                        const auto& v = a.values();
                        for (std::size_t i = 0; i < g.size(); ++i)
                          if (v[i] > 0.0) ga[i] += g[i];
                      });
}

Tensor square(const Tensor& a) {
  return Tape::record(a.shape(), map_values(a, [](double x) { return x * x; }), {&a},
                      [a = a.detached()](std::span<const double> g, GradSink& sink) {
                        auto ga = sink.slot(0);
                        const auto& v = a.values();
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * v[i] * g[i];
                      });
}

Tensor softplus(const Tensor& a) {
  auto f = [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); };
  return Tape::record(a.shape(), map_values(a, f), {&a},
                      [a = a.detached()](std::span<const double> g, GradSink& sink) {
                        auto ga = sink.slot(0);
                        const auto& v = a.values();
                        for (std::size_t i = 0; i < g.size(); ++i)
                          ga[i] += g[i] / (1.0 + std::exp(-v[i]));
                      });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
  auto f = [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluK * x * x * x))); };
  return Tape::record(a.shape(), map_values(a, f), {&a},
                      [a = a.detached()](std::span<const double> g, GradSink& sink) {
                        auto ga = sink.slot(0);
                        const auto& v = a.values();
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          const double x = v[i];
                          const double th = std::tanh(kGeluC * (x + kGeluK * x * x * x));
                          const double dth = (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluK * x * x);
                          ga[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * x * dth);
                        }
                      });
}

// ---------------------------------------------------------------- order statistics

namespace {

// Indices of the middle order statistic(s) under (value, index) ordering.
std::vector<std::size_t> middle_indices(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t n = v.size();
  auto less = [&](std::size_t i, std::size_t j) { return v[i] < v[j] || (v[i] == v[j] && i < j); };
  const std::size_t hi = n / 2;
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(hi), order.end(), less);
  if (n % 2 == 1) return {order[hi]};
  // The lower middle is the maximum of the elements left of the partition point.
  const auto lo = *std::max_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(hi), less);
  return {lo, order[hi]};
}

}  // namespace

Tensor median(const Tensor& a) {
  if (a.numel() == 0) throw Error(ErrorKind::Domain, "median of an empty tensor");
  const auto& v = a.values();
  auto picks = middle_indices(v);
  double value = 0.0;
  for (auto i : picks) value += v[i];
  value /= static_cast<double>(picks.size());
  const double w = 1.0 / static_cast<double>(picks.size());
  return Tape::record({}, {value}, {&a},
                      [picks = std::move(picks), w](std::span<const double> g, GradSink& sink) {
                        auto ga = sink.slot(0);
                        for (auto i : picks) ga[i] += g[0] * w;
                      });
}

Tensor mad(const Tensor& a) {
  if (a.numel() == 0) throw Error(ErrorKind::Domain, "mad of an empty tensor");
  return median(abs_op(sub(a, median(a))));
}

// ---------------------------------------------------------------- structural

Tensor stop_gradient(const Tensor& a) { return a.detached(); }

Tensor gather(const Tensor& a, std::span<const std::size_t> indices) {
  const auto& v = a.values();
  std::vector<double> out(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= v.size()) {
      throw Error(ErrorKind::Index, "gather index " + std::to_string(indices[k]) +
                                        " out of bounds for " + std::to_string(v.size()) + " elements");
    }
    out[k] = v[indices[k]];
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return Tape::record({indices.size()}, std::move(out), {&a},
                      [idx = std::move(idx)](std::span<const double> g, GradSink& sink) {
                        auto ga = sink.slot(0);
                        for (std::size_t k = 0; k < idx.size(); ++k) ga[idx[k]] += g[k];
                      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw Error(ErrorKind::Shape, "cannot reshape " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  return Tape::record(std::move(shape), a.values(), {&a}, [](std::span<const double> g, GradSink& sink) {
    auto ga = sink.slot(0);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Tensor add_rows(const Tensor& x, const Tensor& bias) {
  const auto n = x.rows();
  const auto d = x.cols();
  if (bias.numel() != d) {
    throw Error(ErrorKind::Shape, "row bias " + shape_string(bias.shape()) + " does not fit " +
                                      shape_string(x.shape()));
  }
  std::vector<double> out(x.values());
  const auto& b = bias.values();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += b[c];
  return Tape::record(x.shape(), std::move(out), {&x, &bias},
                      [n, d](std::span<const double> g, GradSink& sink) {
                        if (sink.wants(0)) {
                          auto gx = sink.slot(0);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                        }
                        if (sink.wants(1)) {
                          auto gb = sink.slot(1);
                          for (std::size_t r = 0; r < n; ++r)
                            for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
                        }
                      });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  const auto n = x.rows();
  const auto d = x.cols();
  if (begin + count > d) {
    throw Error(ErrorKind::Index, "column slice [" + std::to_string(begin) + ", " +
                                      std::to_string(begin + count) + ") exceeds " + shape_string(x.shape()));
  }
  std::vector<double> out(n * count);
  const auto& v = x.values();
  for (std::size_t r = 0; r < n; ++r)
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(r * d + begin), count,
                out.begin() + static_cast<std::ptrdiff_t>(r * count));
  return Tape::record({n, count}, std::move(out), {&x},
                      [n, d, begin, count](std::span<const double> g, GradSink& sink) {
                        auto gx = sink.slot(0);
                        for (std::size_t r = 0; r < n; ++r)
                          for (std::size_t c = 0; c < count; ++c) gx[r * d + begin + c] += g[r * count + c];
                      });
}

Tensor softmax_rows(const Tensor& x) {
  const auto n = x.rows();
  const auto d = x.cols();
  RowMatrix y = x.matrix();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    y.row(r).array() -= y.row(r).maxCoeff();
    y.row(r) = y.row(r).array().exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  auto yt = Tensor::from_matrix(y);
  std::vector<double> out = yt.values();
  return Tape::record({n, d}, std::move(out), {&x}, [yt, n, d](std::span<const double> g, GradSink& sink) {
    auto gx = sink.slot(0);
    const auto& yv = yt.values();
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += g[r * d + c] * yv[r * d + c];
      for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += yv[r * d + c] * (g[r * d + c] - dot);
    }
  });
}

Tensor layer_norm_rows(const Tensor& x, double eps) {
  const auto n = x.rows();
  const auto d = x.cols();
  const auto& v = x.values();
  std::vector<double> out(n * d);
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += v[r * d + c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (v[r * d + c] - mu) * (v[r * d + c] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = (v[r * d + c] - mu) * inv_std[r];
  }
  Tensor normed({n, d}, out);
  return Tape::record({n, d}, std::move(out), {&x},
                      [normed, inv_std = std::move(inv_std), n, d](std::span<const double> g, GradSink& sink) {
                        auto gx = sink.slot(0);
                        const auto& xh = normed.values();
                        const double inv_d = 1.0 / static_cast<double>(d);
                        for (std::size_t r = 0; r < n; ++r) {
                          double sg = 0.0, sgx = 0.0;
                          for (std::size_t c = 0; c < d; ++c) {
                            sg += g[r * d + c];
                            sgx += g[r * d + c] * xh[r * d + c];
                          }
                          for (std::size_t c = 0; c < d; ++c) {
                            gx[r * d + c] +=
                                inv_std[r] * (g[r * d + c] - inv_d * sg - xh[r * d + c] * inv_d * sgx);
                          }
                        }
                      });
}

}  // namespace westar
