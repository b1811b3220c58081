#pragma once
// Reverse-mode differentiation over dense row-major matrices.
//
// Every operation is evaluated eagerly and appended to a Tape. backward()
// sweeps the tape numerically. input_gradient() instead records its reverse
// sweep as new tape nodes, so the resulting gradient is itself a
// differentiable value: a later backward() yields parameter derivatives of
// expressions that contain input gradients of a network.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace fkeig {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
};

inline std::string to_string(Shape s) {
  return std::to_string(s.rows) + "x" + std::to_string(s.cols);
}

/// Dense row-major matrix of doubles.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : shape_{rows, cols}, data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
      : shape_{rows, cols}, data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(1, 1, v); }

  Shape shape() const { return shape_; }
  std::size_t rows() const { return shape_.rows; }
  std::size_t cols() const { return shape_.cols; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_.cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_.cols + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() & { return data_; }
  std::span<const double> values() const& { return data_; }
  // A span into a temporary would dangle (e.g. in a range-for).
  std::span<const double> values() const&& = delete;
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * shape_.cols, shape_.cols);
  }
  std::span<double> row(std::size_t r) {
    return std::span<double>(data_).subspan(r * shape_.cols, shape_.cols);
  }
  const std::vector<double>& storage() const { return data_; }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

enum class OpKind : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Scale,
  AddConst,
  MatMul,
  AddBias,
  Sum,
  SumRows,
  SumCols,
  BroadcastScalar,
  BroadcastRows,
  BroadcastCols,
  Relu,
  ReluMask,
  Sin,
  Cos,
  Square,
  Sqrt,
  Reciprocal,
  Clip,
  ClipMask,
  ConcatCols,
  SliceCols,
  EmbedCols,
  SliceRows,
  EmbedRows,
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape is not cleared.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  Shape shape() const;
  std::size_t rows() const { return shape().rows; }
  std::size_t cols() const { return shape().cols; }
  std::span<const double> values() const;
  double item() const;  // value of a 1x1 Var
  Tensor value() const;

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();

  struct Node {
    OpKind op = OpKind::Leaf;
    std::array<std::uint32_t, 2> in{kNone, kNone};
    Shape shape;
    double p0 = 0.0;
    double p1 = 0.0;
    std::size_t i0 = 0;
    std::size_t i1 = 0;
    bool requires_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// Trainable leaf; backward() reports its gradient.
  Var parameter(const Tensor& t) { return leaf(t, true); }
  /// Leaf that never receives gradient (data, coefficients).
  Var constant(const Tensor& t) { return leaf(t, false); }
  Var constant(double v) { return leaf(Tensor::scalar(v), false); }
  Var leaf(const Tensor& t, bool requires_grad) {
    Node n;
    n.shape = t.shape();
    n.requires_grad = requires_grad;
    auto id = push(n);
    auto& buf = values_[id];
    std::copy(t.values().begin(), t.values().end(), buf.begin());
    return Var(this, id);
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::uint32_t id) const { return nodes_[id]; }
  std::span<const double> value(std::uint32_t id) const { return values_[id]; }

  /// Drops all nodes, keeping buffers for reuse by the next recording.
  void clear() {
    for (auto& v : values_) recycle(std::move(v));
    for (auto& a : adjoints_) recycle(std::move(a));
    nodes_.clear();
    values_.clear();
    adjoints_.clear();
  }

  /// Numeric reverse sweep from a 1x1 root. Replaces adjoints of any previous sweep.
  void backward(Var root);

  /// Gradient of the last backward() root with respect to v (zeros when unreachable).
  Tensor grad(Var v) const {
    Tensor out(nodes_[v.id()].shape.rows, nodes_[v.id()].shape.cols);
    if (v.id() < adjoints_.size() && !adjoints_[v.id()].empty()) {
      std::copy(adjoints_[v.id()].begin(), adjoints_[v.id()].end(), out.values().begin());
    }
    return out;
  }

  /// Smallest distance from any ReLU or clip input entry to its kink.
  double min_kink_distance() const {
    double best = std::numeric_limits<double>::infinity();
    for (std::uint32_t id = 0; id < nodes_.size(); ++id) {
      const auto& n = nodes_[id];
      if (n.op == OpKind::Relu || n.op == OpKind::ReluMask) {
        for (double z : values_[n.in[0]]) best = std::min(best, std::abs(z));
      } else if (n.op == OpKind::Clip || n.op == OpKind::ClipMask) {
        for (double z : values_[n.in[0]]) {
          best = std::min({best, std::abs(z - n.p0), std::abs(z - n.p1)});
        }
      }
    }
    return best;
  }

  // Recording entry point used by the op functions below.
  Var record(Node n, std::span<const Var> inputs);

 private:
  friend Var input_gradient(Var output, Var wrt);

  std::uint32_t push(const Node& n) {
    if (nodes_.size() >= kNone) throw std::length_error("tape too large");
    nodes_.push_back(n);
    values_.push_back(acquire(n.shape.size()));
    return static_cast<std::uint32_t>(nodes_.size() - 1);
  }

  std::vector<double> acquire(std::size_t n) {
    auto it = pool_.find(n);
    if (it != pool_.end() && !it->second.empty()) {
      auto v = std::move(it->second.back());
      it->second.pop_back();
      return v;
    }
    return std::vector<double>(n);
  }
  void recycle(std::vector<double>&& v) {
    if (v.empty()) return;
    auto n = v.size();
    pool_[n].push_back(std::move(v));
  }

  std::vector<double>& adjoint(std::uint32_t id) {
    auto& a = adjoints_[id];
    if (a.empty()) {
      a = acquire(nodes_[id].shape.size());
      std::fill(a.begin(), a.end(), 0.0);
    }
    return a;
  }

  void forward(std::uint32_t id);
  void backward_node(std::uint32_t id);

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> values_;
  std::vector<std::vector<double>> adjoints_;
  std::unordered_map<std::size_t, std::vector<std::vector<double>>> pool_;
};

inline Shape Var::shape() const { return tape_->node(id_).shape; }
inline std::span<const double> Var::values() const { return tape_->value(id_); }
inline double Var::item() const {
  if (shape().size() != 1) throw ShapeError("item() on non-scalar " + to_string(shape()));
  return values()[0];
}
inline Tensor Var::value() const {
  auto v = values();
  return Tensor(rows(), cols(), std::vector<double>(v.begin(), v.end()));
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

inline CMap cmap(std::span<const double> v, Shape s) { return CMap(v.data(), s.rows, s.cols); }
inline MMap mmap(std::span<double> v, Shape s) { return MMap(v.data(), s.rows, s.cols); }

inline Tape& same_tape(Var a, Var b) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw std::invalid_argument("operands belong to different tapes");
  }
  return a.tape();
}

inline void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

inline Var unary(OpKind op, Var a, Shape out, double p0 = 0.0, double p1 = 0.0,
                 std::size_t i0 = 0, std::size_t i1 = 0) {
  Tape::Node n;
  n.op = op;
  n.shape = out;
  n.p0 = p0;
  n.p1 = p1;
  n.i0 = i0;
  n.i1 = i1;
  std::array<Var, 1> in{a};
  return a.tape().record(n, in);
}

inline Var binary(OpKind op, Var a, Var b, Shape out, std::size_t i0 = 0, std::size_t i1 = 0) {
  Tape& t = same_tape(a, b);
  Tape::Node n;
  n.op = op;
  n.shape = out;
  n.i0 = i0;
  n.i1 = i1;
  std::array<Var, 2> in{a, b};
  return t.record(n, in);
}

}  // namespace detail

// ---- primitive operations --------------------------------------------------

inline Var add(Var a, Var b) {
  detail::require_same_shape(a, b, "add");
  return detail::binary(OpKind::Add, a, b, a.shape());
}
inline Var sub(Var a, Var b) {
  detail::require_same_shape(a, b, "sub");
  return detail::binary(OpKind::Sub, a, b, a.shape());
}
/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_shape(a, b, "mul");
  return detail::binary(OpKind::Mul, a, b, a.shape());
}
inline Var scale(Var a, double c) { return detail::unary(OpKind::Scale, a, a.shape(), c); }
inline Var add_const(Var a, double c) { return detail::unary(OpKind::AddConst, a, a.shape(), c); }

/// op(a) * op(b) where op transposes when the corresponding flag is set.
inline Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
  Shape sa = a.shape(), sb = b.shape();
  std::size_t m = trans_a ? sa.cols : sa.rows;
  std::size_t k = trans_a ? sa.rows : sa.cols;
  std::size_t k2 = trans_b ? sb.cols : sb.rows;
  std::size_t n = trans_b ? sb.rows : sb.cols;
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions differ (" + to_string(sa) + ", " + to_string(sb) +
                     ")");
  }
  return detail::binary(OpKind::MatMul, a, b, Shape{m, n}, trans_a ? 1 : 0, trans_b ? 1 : 0);
}

/// Adds a 1 x cols row to every row of a.
inline Var add_bias(Var a, Var bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw ShapeError("add_bias: bias " + to_string(bias.shape()) + " for " + to_string(a.shape()));
  }
  return detail::binary(OpKind::AddBias, a, bias, a.shape());
}

inline Var sum(Var a) { return detail::unary(OpKind::Sum, a, Shape{1, 1}); }
/// rows x cols -> rows x 1
inline Var sum_rows(Var a) { return detail::unary(OpKind::SumRows, a, Shape{a.rows(), 1}); }
/// rows x cols -> 1 x cols
inline Var sum_cols(Var a) { return detail::unary(OpKind::SumCols, a, Shape{1, a.cols()}); }

inline Var broadcast_scalar(Var a, std::size_t rows, std::size_t cols) {
  if (a.shape().size() != 1) throw ShapeError("broadcast_scalar: input " + to_string(a.shape()));
  return detail::unary(OpKind::BroadcastScalar, a, Shape{rows, cols});
}
inline Var broadcast_rows(Var a, std::size_t rows) {
  if (a.rows() != 1) throw ShapeError("broadcast_rows: input " + to_string(a.shape()));
  return detail::unary(OpKind::BroadcastRows, a, Shape{rows, a.cols()});
}
inline Var broadcast_cols(Var a, std::size_t cols) {
  if (a.cols() != 1) throw ShapeError("broadcast_cols: input " + to_string(a.shape()));
  return detail::unary(OpKind::BroadcastCols, a, Shape{a.rows(), cols});
}

inline Var relu(Var a) { return detail::unary(OpKind::Relu, a, a.shape()); }
/// 1 where a > 0, else 0. Carries no gradient.
inline Var relu_mask(Var a) { return detail::unary(OpKind::ReluMask, a, a.shape()); }
inline Var sin(Var a) { return detail::unary(OpKind::Sin, a, a.shape()); }
inline Var cos(Var a) { return detail::unary(OpKind::Cos, a, a.shape()); }
inline Var square(Var a) { return detail::unary(OpKind::Square, a, a.shape()); }
inline Var sqrt(Var a) { return detail::unary(OpKind::Sqrt, a, a.shape()); }
inline Var reciprocal(Var a) { return detail::unary(OpKind::Reciprocal, a, a.shape()); }

/// Clamp to [lo, hi]. Derivative is 1 strictly inside and 0 elsewhere, bounds included.
inline Var clip(Var a, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("clip: lower bound must be below upper bound");
  return detail::unary(OpKind::Clip, a, a.shape(), lo, hi);
}
inline Var clip_mask(Var a, double lo, double hi) {
  return detail::unary(OpKind::ClipMask, a, a.shape(), lo, hi);
}

inline Var concat_cols(Var a, Var b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("concat_cols: " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  return detail::binary(OpKind::ConcatCols, a, b, Shape{a.rows(), a.cols() + b.cols()});
}
inline Var slice_cols(Var a, std::size_t start, std::size_t count) {
  if (start + count > a.cols()) throw ShapeError("slice_cols out of range");
  return detail::unary(OpKind::SliceCols, a, Shape{a.rows(), count}, 0, 0, start);
}
/// Places a into columns [start, start + a.cols()) of a zero matrix with total_cols columns.
inline Var embed_cols(Var a, std::size_t start, std::size_t total_cols) {
  if (start + a.cols() > total_cols) throw ShapeError("embed_cols out of range");
  return detail::unary(OpKind::EmbedCols, a, Shape{a.rows(), total_cols}, 0, 0, start);
}
inline Var slice_rows(Var a, std::size_t start, std::size_t count) {
  if (start + count > a.rows()) throw ShapeError("slice_rows out of range");
  return detail::unary(OpKind::SliceRows, a, Shape{count, a.cols()}, 0, 0, start);
}
inline Var embed_rows(Var a, std::size_t start, std::size_t total_rows) {
  if (start + a.rows() > total_rows) throw ShapeError("embed_rows out of range");
  return detail::unary(OpKind::EmbedRows, a, Shape{total_rows, a.cols()}, 0, 0, start);
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator-(Var a) { return scale(a, -1.0); }

/// Expands a 1x1, 1xC or Rx1 Var to rows x cols.
inline Var broadcast_to(Var a, std::size_t rows, std::size_t cols) {
  Shape s = a.shape();
  if (s == Shape{rows, cols}) return a;
  if (s.size() == 1) return broadcast_scalar(a, rows, cols);
  if (s.rows == 1 && s.cols == cols) return broadcast_rows(a, rows);
  if (s.cols == 1 && s.rows == rows) return broadcast_cols(a, cols);
  throw ShapeError("cannot broadcast " + to_string(s) + " to " + to_string(Shape{rows, cols}));
}

// ---- recording and evaluation ----------------------------------------------

inline Var Tape::record(Node n, std::span<const Var> inputs) {
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (&inputs[i].tape() != this) throw std::invalid_argument("input belongs to another tape");
    n.in[i] = inputs[i].id();
  }
  bool masks = n.op == OpKind::ReluMask || n.op == OpKind::ClipMask;
  n.requires_grad = false;
  if (!masks) {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      n.requires_grad = n.requires_grad || nodes_[n.in[i]].requires_grad;
    }
  }
  auto id = push(n);
  forward(id);
  return Var(this, id);
}

inline void Tape::forward(std::uint32_t id) {
  const Node& n = nodes_[id];
  std::span<double> out = values_[id];
  auto in0 = [&]() -> std::span<const double> { return values_[n.in[0]]; };
  auto in1 = [&]() -> std::span<const double> { return values_[n.in[1]]; };
  const Shape s0 = n.in[0] != kNone ? nodes_[n.in[0]].shape : Shape{};
  const std::size_t sz = out.size();

  switch (n.op) {
    case OpKind::Leaf:
      break;
    case OpKind::Add: {
      auto a = in0(), b = in1();
      for (std::size_t i = 0; i < sz; ++i) out[i] = a[i] + b[i];
      break;
    }
    case OpKind::Sub: {
      auto a = in0(), b = in1();
      for (std::size_t i = 0; i < sz; ++i) out[i] = a[i] - b[i];
      break;
    }
    case OpKind::Mul: {
      auto a = in0(), b = in1();
      for (std::size_t i = 0; i < sz; ++i) out[i] = a[i] * b[i];
      break;
    }
    case OpKind::Scale: {
      auto a = in0();
      for (std::size_t i = 0; i < sz; ++i) out[i] = n.p0 * a[i];
      break;
    }
    case OpKind::AddConst: {
      auto a = in0();
      for (std::size_t i = 0; i < sz; ++i) out[i] = a[i] + n.p0;
      break;
    }
    case OpKind::MatMul: {
      auto a = detail::cmap(in0(), s0);
      auto b = detail::cmap(in1(), nodes_[n.in[1]].shape);
      auto c = detail::mmap(out, n.shape);
      if (!n.i0 && !n.i1) c.noalias() = a * b;
      else if (!n.i0 && n.i1) c.noalias() = a * b.transpose();
      else if (n.i0 && !n.i1) c.noalias() = a.transpose() * b;
      else c.noalias() = a.transpose() * b.transpose();
      break;
    }
    case OpKind::AddBias: {
      auto a = in0(), b = in1();
      const std::size_t cols = n.shape.cols;
      for (std::size_t r = 0; r < n.shape.rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = a[r * cols + c] + b[c];
      }
      break;
    }
    case OpKind::Sum: {
      double acc = 0.0;
      for (double v : in0()) acc += v;
      out[0] = acc;
      break;
    }
    case OpKind::SumRows: {
      auto a = in0();
      for (std::size_t r = 0; r < s0.rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < s0.cols; ++c) acc += a[r * s0.cols + c];
        out[r] = acc;
      }
      break;
    }
    case OpKind::SumCols: {
      auto a = in0();
      std::fill(out.begin(), out.end(), 0.0);
      for (std::size_t r = 0; r < s0.rows; ++r) {
        for (std::size_t c = 0; c < s0.cols; ++c) out[c] += a[r * s0.cols + c];
      }
      break;
    }
    case OpKind::BroadcastScalar:
      std::fill(out.begin(), out.end(), in0()[0]);
      break;
    case OpKind::BroadcastRows: {
      auto a = in0();
      for (std::size_t r = 0; r < n.shape.rows; ++r) {
        std::copy(a.begin(), a.end(), out.begin() + static_cast<std::ptrdiff_t>(r * n.shape.cols));
      }
      break;
    }
    case OpKind::BroadcastCols: {
      auto a = in0();
      for (std::size_t r = 0; r < n.shape.rows; ++r) {
        for (std::size_t c = 0; c < n.shape.cols; ++c) out[r * n.shape.cols + c] = a[r];
      }
      break;
    }
    case OpKind::Relu: {
      auto a = in0();
      for (std::size_t i = 0; i < sz; ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
      break;
    }
    case OpKind::ReluMask: {
      auto a = in0();
      for (std::size_t i = 0; i < sz; ++i) out[i] = a[i] > 0.0 ? 1.0 : 0.0;
      break;
    }
    case OpKind::Sin: {
      auto a = in0();
      for (std::size_t i = 0; i < sz; ++i) out[i] = std::sin(a[i]);
      break;
    }
    case OpKind::Cos: {
      auto a = in0();
      for (std::size_t i = 0; i < sz; ++i) out[i] = std::cos(a[i]);
      break;
    }
    case OpKind::Square: {
      auto a = in0();
      for (std::size_t i = 0; i < sz; ++i) out[i] = a[i] * a[i];
      break;
    }
    case OpKind::Sqrt: {
      auto a = in0();
      for (std::size_t i = 0; i < sz; ++i) out[i] = std::sqrt(a[i]);
      break;
    }
    case OpKind::Reciprocal: {
      auto a = in0();
      for (std::size_t i = 0; i < sz; ++i) out[i] = 1.0 / a[i];
      break;
    }
    case OpKind::Clip: {
      auto a = in0();
      for (std::size_t i = 0; i < sz; ++i) out[i] = std::clamp(a[i], n.p0, n.p1);
      break;
    }
    case OpKind::ClipMask: {
      auto a = in0();
      for (std::size_t i = 0; i < sz; ++i) out[i] = (a[i] > n.p0 && a[i] < n.p1) ? 1.0 : 0.0;
      break;
    }
    case OpKind::ConcatCols: {
      auto a = in0(), b = in1();
      const std::size_t ca = s0.cols, cb = nodes_[n.in[1]].shape.cols;
      for (std::size_t r = 0; r < n.shape.rows; ++r) {
        std::copy_n(a.begin() + static_cast<std::ptrdiff_t>(r * ca), ca,
                    out.begin() + static_cast<std::ptrdiff_t>(r * (ca + cb)));
        std::copy_n(b.begin() + static_cast<std::ptrdiff_t>(r * cb), cb,
                    out.begin() + static_cast<std::ptrdiff_t>(r * (ca + cb) + ca));
      }
      break;
    }
    case OpKind::SliceCols: {
      auto a = in0();
      for (std::size_t r = 0; r < n.shape.rows; ++r) {
        std::copy_n(a.begin() + static_cast<std::ptrdiff_t>(r * s0.cols + n.i0), n.shape.cols,
                    out.begin() + static_cast<std::ptrdiff_t>(r * n.shape.cols));
      }
      break;
    }
    case OpKind::EmbedCols: {
      auto a = in0();
      std::fill(out.begin(), out.end(), 0.0);
      for (std::size_t r = 0; r < n.shape.rows; ++r) {
        std::copy_n(a.begin() + static_cast<std::ptrdiff_t>(r * s0.cols), s0.cols,
                    out.begin() + static_cast<std::ptrdiff_t>(r * n.shape.cols + n.i0));
      }
      break;
    }
    case OpKind::SliceRows: {
      auto a = in0();
      std::copy_n(a.begin() + static_cast<std::ptrdiff_t>(n.i0 * s0.cols), sz, out.begin());
      break;
    }
    case OpKind::EmbedRows: {
      auto a = in0();
      std::fill(out.begin(), out.end(), 0.0);
      std::copy(a.begin(), a.end(), out.begin() + static_cast<std::ptrdiff_t>(n.i0 * s0.cols));
      break;
    }
  }
}

inline void Tape::backward(Var root) {
  if (&root.tape() != this) throw std::invalid_argument("backward: root on another tape");
  if (root.shape().size() != 1) {
    throw ShapeError("backward: root must be scalar, got " + to_string(root.shape()));
  }
  for (auto& a : adjoints_) recycle(std::move(a));
  adjoints_.assign(nodes_.size(), {});
  adjoint(root.id())[0] = 1.0;
  for (std::uint32_t id = root.id() + 1; id-- > 0;) {
    if (adjoints_[id].empty() || !nodes_[id].requires_grad) continue;
    backward_node(id);
  }
}

inline void Tape::backward_node(std::uint32_t id) {
  const Node& n = nodes_[id];
  const std::span<const double> g = adjoints_[id];
  const std::size_t sz = g.size();
  auto wants = [&](int k) {
    return n.in[static_cast<std::size_t>(k)] != kNone &&
           nodes_[n.in[static_cast<std::size_t>(k)]].requires_grad;
  };
  auto val = [&](int k) -> std::span<const double> {
    return values_[n.in[static_cast<std::size_t>(k)]];
  };
  auto adj = [&](int k) -> std::span<double> {
    return adjoint(n.in[static_cast<std::size_t>(k)]);
  };
  const Shape s0 = n.in[0] != kNone ? nodes_[n.in[0]].shape : Shape{};

  switch (n.op) {
    case OpKind::Leaf:
    case OpKind::ReluMask:
    case OpKind::ClipMask:
      break;
    case OpKind::Add:
      if (wants(0)) { auto a = adj(0); for (std::size_t i = 0; i < sz; ++i) a[i] += g[i]; }
      if (wants(1)) { auto b = adj(1); for (std::size_t i = 0; i < sz; ++i) b[i] += g[i]; }
      break;
    case OpKind::Sub:
      if (wants(0)) { auto a = adj(0); for (std::size_t i = 0; i < sz; ++i) a[i] += g[i]; }
      if (wants(1)) { auto b = adj(1); for (std::size_t i = 0; i < sz; ++i) b[i] -= g[i]; }
      break;
    case OpKind::Mul:
      if (wants(0)) {
        auto a = adj(0);
        auto y = val(1);
        for (std::size_t i = 0; i < sz; ++i) a[i] += g[i] * y[i];
      }
      if (wants(1)) {
        auto b = adj(1);
        auto x = val(0);
        for (std::size_t i = 0; i < sz; ++i) b[i] += g[i] * x[i];
      }
      break;
    case OpKind::Scale:
      if (wants(0)) { auto a = adj(0); for (std::size_t i = 0; i < sz; ++i) a[i] += n.p0 * g[i]; }
      break;
    case OpKind::AddConst:
      if (wants(0)) { auto a = adj(0); for (std::size_t i = 0; i < sz; ++i) a[i] += g[i]; }
      break;
    case OpKind::MatMul: {
      const Shape s1 = nodes_[n.in[1]].shape;
      auto gm = detail::cmap(g, n.shape);
      if (wants(0)) {
        auto b = detail::cmap(val(1), s1);
        auto ga = detail::mmap(adj(0), s0);
        if (!n.i0 && !n.i1) ga.noalias() += gm * b.transpose();
        else if (!n.i0 && n.i1) ga.noalias() += gm * b;
        else if (n.i0 && !n.i1) ga.noalias() += b * gm.transpose();
        else ga.noalias() += b.transpose() * gm.transpose();
      }
      if (wants(1)) {
        auto a = detail::cmap(val(0), s0);
        auto gb = detail::mmap(adj(1), s1);
        if (!n.i0 && !n.i1) gb.noalias() += a.transpose() * gm;
        else if (!n.i0 && n.i1) gb.noalias() += gm.transpose() * a;
        else if (n.i0 && !n.i1) gb.noalias() += a * gm;
        else gb.noalias() += gm.transpose() * a.transpose();
      }
      break;
    }
    case OpKind::AddBias:
      if (wants(0)) { auto a = adj(0); for (std::size_t i = 0; i < sz; ++i) a[i] += g[i]; }
      if (wants(1)) {
        auto b = adj(1);
        const std::size_t cols = n.shape.cols;
        for (std::size_t r = 0; r < n.shape.rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) b[c] += g[r * cols + c];
        }
      }
      break;
    case OpKind::Sum:
      if (wants(0)) { auto a = adj(0); for (double& v : a) v += g[0]; }
      break;
    case OpKind::SumRows:
      if (wants(0)) {
        auto a = adj(0);
        for (std::size_t r = 0; r < s0.rows; ++r) {
          for (std::size_t c = 0; c < s0.cols; ++c) a[r * s0.cols + c] += g[r];
        }
      }
      break;
    case OpKind::SumCols:
      if (wants(0)) {
        auto a = adj(0);
        for (std::size_t r = 0; r < s0.rows; ++r) {
          for (std::size_t c = 0; c < s0.cols; ++c) a[r * s0.cols + c] += g[c];
        }
      }
      break;
    case OpKind::BroadcastScalar:
      if (wants(0)) {
        double acc = 0.0;
        for (double v : g) acc += v;
        adj(0)[0] += acc;
      }
      break;
    case OpKind::BroadcastRows:
      if (wants(0)) {
        auto a = adj(0);
        for (std::size_t r = 0; r < n.shape.rows; ++r) {
          for (std::size_t c = 0; c < n.shape.cols; ++c) a[c] += g[r * n.shape.cols + c];
        }
      }
      break;
    case OpKind::BroadcastCols:
      if (wants(0)) {
        auto a = adj(0);
        for (std::size_t r = 0; r < n.shape.rows; ++r) {
          double acc = 0.0;
          for (std::size_t c = 0; c < n.shape.cols; ++c) acc += g[r * n.shape.cols + c];
          a[r] += acc;
        }
      }
      break;
    case OpKind::Relu:
      if (wants(0)) {
        auto a = adj(0);
        auto x = val(0);
        for (std::size_t i = 0; i < sz; ++i) a[i] += x[i] > 0.0 ? g[i] : 0.0;
      }
      break;
    case OpKind::Sin:
      if (wants(0)) {
        auto a = adj(0);
        auto x = val(0);
        for (std::size_t i = 0; i < sz; ++i) a[i] += g[i] * std::cos(x[i]);
      }
      break;
    case OpKind::Cos:
      if (wants(0)) {
        auto a = adj(0);
        auto x = val(0);
        for (std::size_t i = 0; i < sz; ++i) a[i] -= g[i] * std::sin(x[i]);
      }
      break;
    case OpKind::Square:
      if (wants(0)) {
        auto a = adj(0);
        auto x = val(0);
        for (std::size_t i = 0; i < sz; ++i) a[i] += 2.0 * x[i] * g[i];
      }
      break;
    case OpKind::Sqrt:
      if (wants(0)) {
        auto a = adj(0);
        auto y = std::span<const double>(values_[id]);
        for (std::size_t i = 0; i < sz; ++i) a[i] += 0.5 * g[i] / y[i];
      }
      break;
    case OpKind::Reciprocal:
      if (wants(0)) {
        auto a = adj(0);
        auto y = std::span<const double>(values_[id]);
        for (std::size_t i = 0; i < sz; ++i) a[i] -= g[i] * y[i] * y[i];
      }
      break;
    case OpKind::Clip:
      if (wants(0)) {
        auto a = adj(0);
        auto x = val(0);
        for (std::size_t i = 0; i < sz; ++i) {
          if (x[i] > n.p0 && x[i] < n.p1) a[i] += g[i];
        }
      }
      break;
    case OpKind::ConcatCols: {
      const std::size_t ca = s0.cols, cb = nodes_[n.in[1]].shape.cols;
      if (wants(0)) {
        auto a = adj(0);
        for (std::size_t r = 0; r < n.shape.rows; ++r) {
          for (std::size_t c = 0; c < ca; ++c) a[r * ca + c] += g[r * (ca + cb) + c];
        }
      }
      if (wants(1)) {
        auto b = adj(1);
        for (std::size_t r = 0; r < n.shape.rows; ++r) {
          for (std::size_t c = 0; c < cb; ++c) b[r * cb + c] += g[r * (ca + cb) + ca + c];
        }
      }
      break;
    }
    case OpKind::SliceCols:
      if (wants(0)) {
        auto a = adj(0);
        for (std::size_t r = 0; r < n.shape.rows; ++r) {
          for (std::size_t c = 0; c < n.shape.cols; ++c) {
            a[r * s0.cols + n.i0 + c] += g[r * n.shape.cols + c];
          }
        }
      }
      break;
    case OpKind::EmbedCols:
      if (wants(0)) {
        auto a = adj(0);
        for (std::size_t r = 0; r < s0.rows; ++r) {
          for (std::size_t c = 0; c < s0.cols; ++c) {
            a[r * s0.cols + c] += g[r * n.shape.cols + n.i0 + c];
          }
        }
      }
      break;
    case OpKind::SliceRows:
      if (wants(0)) {
        auto a = adj(0);
        const std::size_t off = n.i0 * s0.cols;
        for (std::size_t i = 0; i < sz; ++i) a[off + i] += g[i];
      }
      break;
    case OpKind::EmbedRows:
      if (wants(0)) {
        auto a = adj(0);
        const std::size_t off = n.i0 * s0.cols;
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += g[off + i];
      }
      break;
  }
}

namespace detail {

// Vector-Jacobian product of node `id` with adjoint `g`, recorded on the tape.
// Returns one Var per input; an invalid Var means "no contribution".
inline std::array<Var, 2> recorded_vjp(Tape& t, std::uint32_t id, Var g) {
  const auto n = t.node(id);  // copy: recording below may reallocate node storage
  auto in = [&](int k) { return Var(&t, n.in[static_cast<std::size_t>(k)]); };
  switch (n.op) {
    case OpKind::Leaf:
    case OpKind::ReluMask:
    case OpKind::ClipMask:
      return {};
    case OpKind::Add:
      return {g, g};
    case OpKind::Sub:
      return {g, scale(g, -1.0)};
    case OpKind::Mul:
      return {mul(g, in(1)), mul(g, in(0))};
    case OpKind::Scale:
      return {scale(g, n.p0), Var{}};
    case OpKind::AddConst:
      return {g, Var{}};
    case OpKind::MatMul: {
      Var a = in(0), b = in(1);
      if (!n.i0 && !n.i1) return {matmul(g, b, false, true), matmul(a, g, true, false)};
      if (!n.i0 && n.i1) return {matmul(g, b), matmul(g, a, true, false)};
      if (n.i0 && !n.i1) return {matmul(b, g, false, true), matmul(a, g)};
      return {matmul(b, g, true, true), matmul(g, a, true, true)};
    }
    case OpKind::AddBias:
      return {g, sum_cols(g)};
    case OpKind::Sum: {
      Shape s = t.node(n.in[0]).shape;
      return {broadcast_scalar(g, s.rows, s.cols), Var{}};
    }
    case OpKind::SumRows:
      return {broadcast_cols(g, t.node(n.in[0]).shape.cols), Var{}};
    case OpKind::SumCols:
      return {broadcast_rows(g, t.node(n.in[0]).shape.rows), Var{}};
    case OpKind::BroadcastScalar:
      return {sum(g), Var{}};
    case OpKind::BroadcastRows:
      return {sum_cols(g), Var{}};
    case OpKind::BroadcastCols:
      return {sum_rows(g), Var{}};
    case OpKind::Relu:
      return {mul(g, relu_mask(in(0))), Var{}};
    case OpKind::Sin:
      return {mul(g, cos(in(0))), Var{}};
    case OpKind::Cos:
      return {scale(mul(g, sin(in(0))), -1.0), Var{}};
    case OpKind::Square:
      return {scale(mul(g, in(0)), 2.0), Var{}};
    case OpKind::Sqrt:
      return {scale(mul(g, reciprocal(Var(&t, id))), 0.5), Var{}};
    case OpKind::Reciprocal: {
      Var y(&t, id);
      return {scale(mul(g, square(y)), -1.0), Var{}};
    }
    case OpKind::Clip:
      return {mul(g, clip_mask(in(0), n.p0, n.p1)), Var{}};
    case OpKind::ConcatCols: {
      std::size_t ca = t.node(n.in[0]).shape.cols;
      std::size_t cb = t.node(n.in[1]).shape.cols;
      return {slice_cols(g, 0, ca), slice_cols(g, ca, cb)};
    }
    case OpKind::SliceCols:
      return {embed_cols(g, n.i0, t.node(n.in[0]).shape.cols), Var{}};
    case OpKind::EmbedCols:
      return {slice_cols(g, n.i0, t.node(n.in[0]).shape.cols), Var{}};
    case OpKind::SliceRows:
      return {embed_rows(g, n.i0, t.node(n.in[0]).shape.rows), Var{}};
    case OpKind::EmbedRows:
      return {slice_rows(g, n.i0, t.node(n.in[0]).shape.rows), Var{}};
  }
  return {};
}

}  // namespace detail

/// d output / d wrt, recorded on the tape so that it can be differentiated again.
/// `output` must be 1x1. For a batch of independent rows, pass sum(per-row outputs)
/// to obtain every row's input gradient at once.
inline Var input_gradient(Var output, Var wrt) {
  Tape& t = detail::same_tape(output, wrt);
  if (output.shape().size() != 1) {
    throw ShapeError("input_gradient: output must be scalar, got " + to_string(output.shape()));
  }
  const std::uint32_t root = output.id();
  const std::uint32_t leaf = wrt.id();
  const Shape ws = wrt.shape();
  if (root < leaf) return t.constant(Tensor(ws.rows, ws.cols));

  std::vector<char> depends(root - leaf + 1, 0);
  depends[0] = 1;
  for (std::uint32_t id = leaf + 1; id <= root; ++id) {
    const auto& n = t.node(id);
    for (auto i : n.in) {
      if (i != Tape::kNone && i >= leaf && depends[i - leaf]) depends[id - leaf] = 1;
    }
  }
  if (!depends[root - leaf]) return t.constant(Tensor(ws.rows, ws.cols));

  std::vector<Var> adj(root - leaf + 1);
  adj[root - leaf] = t.constant(1.0);
  for (std::uint32_t id = root; id > leaf; --id) {
    Var g = adj[id - leaf];
    if (!g.valid() || !depends[id - leaf]) continue;
    auto parts = detail::recorded_vjp(t, id, g);
    const auto ins = t.node(id).in;
    for (std::size_t k = 0; k < 2; ++k) {
      auto i = ins[k];
      if (i == Tape::kNone || i < leaf || !depends[i - leaf] || !parts[k].valid()) continue;
      Var& slot = adj[i - leaf];
      slot = slot.valid() ? add(slot, parts[k]) : parts[k];
    }
  }
  Var out = adj[0];
  return out.valid() ? out : t.constant(Tensor(ws.rows, ws.cols));
}

/// Convenience: numeric backward from root, returning the gradient of each var.
inline std::vector<Tensor> gradients(Var root, std::span<const Var> wrt) {
  root.tape().backward(root);
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (Var v : wrt) out.push_back(root.tape().grad(v));
  return out;
}

}  // namespace fkeig
