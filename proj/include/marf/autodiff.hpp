#pragma once

// Reverse-mode differentiation over column-batched matrices.
//
// Every value on the tape is a dense matrix; by convention rows are features
// and columns are rays. Binary elementwise ops broadcast a 1-row or 1-column
// operand (or a 1x1 scalar) against the other operand. The reverse sweep
// reduces adjoints back to the operand shape.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace marf::ad {

using Mat = Eigen::MatrixXd;

class Tape;

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Max,
  Neg,
  Scale,
  AddScalar,
  Square,
  Sqrt,
  Abs,
  Exp,
  Log,
  Cos,
  Sin,
  ClampMin,
  LeakyRelu,
  MaskMul,
  Where,
  StopGradient,
  SumRows,
  SumCols,
  Sum,
  Rows,
  ConcatRows,
  MatMul,
  Cross,
  Norm,
  GatherRows,
  LayerNorm,
  Opaque,
};

const char* op_name(Op op);

/// Handle to a tape node. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  static constexpr double kLayerNormEps = 1e-5;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Mat value);
  Var constant(Mat value);
  Var constant(double value) { return constant(Mat::Constant(1, 1, value)); }

  std::size_t size() const { return nodes_.size(); }
  const Mat& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  Op op(int id) const { return nodes_[static_cast<std::size_t>(id)].op; }

  /// Adjoints of a scalar output with respect to each of `wrt`.
  /// Throws UnsupportedOpError if the sweep has to pass through an Opaque node.
  std::vector<Mat> gradient(Var output, std::span<const Var> wrt) const;

  /// Recomputes every non-leaf value from its inputs; returns true when every
  /// recomputed value equals the recorded one bit for bit.
  bool replay_matches() const;

  /// Values of every stop_gradient node, in recording order.
  std::vector<Mat> stop_gradient_values() const;
  /// The k-th stop_gradient recorded from now on outputs frozen[k] instead of
  /// its input, so a finite-difference oracle can hold sg(.) fixed.
  void freeze_stop_gradients(std::vector<Mat> frozen) { frozen_ = std::move(frozen); }

  /// Number of MatMul nodes recorded so far (used to count network evaluations).
  std::size_t matmul_count() const { return matmul_count_; }

  // Node construction; use the free functions below instead.
  struct Node {
    Op op = Op::Constant;
    std::vector<int> in;
    Mat value;
    bool grad = false;
    double a = 0.0;
    std::shared_ptr<const Mat> mat;
    std::vector<int> idx;
    std::function<double(double)> fn;
    std::string name;
  };
  Var record(Node node);
  Var record_stop_gradient(Node node);

 private:
  Mat evaluate(const Node& node) const;
  void backprop(const Node& node, const Mat& g, std::vector<Mat>& adj) const;

  std::vector<Node> nodes_;
  std::size_t matmul_count_ = 0;
  std::vector<Mat> frozen_;
  std::size_t stop_gradients_ = 0;
};

// Elementwise arithmetic with broadcasting.
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator*(const Var& a, double s);
Var operator*(double s, const Var& a);
Var operator/(const Var& a, double s);
Var operator+(const Var& a, double s);
Var operator+(double s, const Var& a);
Var operator-(const Var& a, double s);
Var operator-(double s, const Var& a);

Var maximum(const Var& a, const Var& b);
Var square(const Var& x);
Var sqrt(const Var& x);
/// Derivative +1 at zero.
Var abs(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var cos(const Var& x);
Var sin(const Var& x);
/// max(x, floor); derivative 0 at the floor.
Var clamp_min(const Var& x, double floor);
/// Positive-side slope at exactly zero.
Var leaky_relu(const Var& x, double slope);
/// Multiplies by a constant matrix (broadcast allowed); no gradient to the mask.
Var mask_mul(const Var& x, Mat mask);
/// mask ? a : b per element, mask constant (1-row masks broadcast over rows).
Var where(const Mat& mask, const Var& a, const Var& b);
Var stop_gradient(const Var& x);

/// Column sums -> 1 x N.
Var sum_rows(const Var& x);
/// Row sums -> F x 1.
Var sum_cols(const Var& x);
Var sum(const Var& x);
Var mean(const Var& x);
Var rows(const Var& x, Eigen::Index start, Eigen::Index count);
Var concat_rows(std::span<const Var> parts);
Var concat_rows(std::initializer_list<Var> parts);
Var matmul(const Var& w, const Var& x);
/// Columnwise 3-vector cross product.
Var cross(const Var& a, const Var& b);
/// Columnwise dot product -> 1 x N.
Var dot(const Var& a, const Var& b);
/// Columnwise Euclidean norm -> 1 x N; zero columns get a zero adjoint.
Var norm(const Var& x);
Var normalize(const Var& x);
/// out(j, c) = x(index[c * k + j], c) for k = index.size() / cols.
Var gather_rows(const Var& x, std::vector<int> index, Eigen::Index k);
/// Normalizes each column over its rows, then applies per-row gain and offset.
Var layer_norm(const Var& x, const Var& gain, const Var& offset);
/// Primal-only elementwise function; reverse mode through it throws.
Var opaque(const Var& x, std::function<double(double)> fn, std::string name);

}  // namespace marf::ad
