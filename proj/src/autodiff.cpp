#include "marf/autodiff.hpp"

#include <cmath>
#include <string>

#include "marf/error.hpp"

namespace marf::ad {

namespace {

using Eigen::Index;

std::string shape_str(const Mat& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

Index bdim(Index a, Index b, const Mat& x, const Mat& y) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw InvalidInputError("cannot broadcast " + shape_str(x) + " with " + shape_str(y));
}

Mat bcast(const Mat& m, Index r, Index c) {
  if (m.rows() == r && m.cols() == c) return m;
  if (m.rows() == 1 && m.cols() == 1) return Mat::Constant(r, c, m(0, 0));
  if (m.rows() == 1 && m.cols() == c) return m.replicate(r, 1);
  if (m.cols() == 1 && m.rows() == r) return m.replicate(1, c);
  throw InvalidInputError("cannot broadcast " + shape_str(m) + " to " + std::to_string(r) + "x" +
                          std::to_string(c));
}

Mat reduce_to(const Mat& g, Index r, Index c) {
  if (g.rows() == r && g.cols() == c) return g;
  if (r == 1 && c == 1) return Mat::Constant(1, 1, g.sum());
  if (r == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

template <class F>
Mat binary(const Mat& a, const Mat& b, F f) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return f(a.array(), b.array()).matrix();
  const Index r = bdim(a.rows(), b.rows(), a, b);
  const Index c = bdim(a.cols(), b.cols(), a, b);
  return f(bcast(a, r, c).array(), bcast(b, r, c).array()).matrix();
}

void accum(std::vector<Mat>& adj, int id, const Mat& g) {
  auto& slot = adj[static_cast<std::size_t>(id)];
  if (slot.size() == 0) {
    slot = g;
  } else {
    slot += g;
  }
}

Var make(Tape* tape, Op op, std::vector<int> in) {
  Tape::Node n;
  n.op = op;
  n.in = std::move(in);
  return tape->record(std::move(n));
}

Tape* same_tape(const Var& a, const Var& b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw InvalidInputError("operands live on different tapes");
  }
  return a.tape();
}

Var unary(const Var& x, Op op, double attr = 0.0) {
  Tape::Node n;
  n.op = op;
  n.in = {x.id()};
  n.a = attr;
  return x.tape()->record(std::move(n));
}

Var binop(const Var& a, const Var& b, Op op) {
  return make(same_tape(a, b), op, {a.id(), b.id()});
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Max: return "max";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::Square: return "square";
    case Op::Sqrt: return "sqrt";
    case Op::Abs: return "abs";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Cos: return "cos";
    case Op::Sin: return "sin";
    case Op::ClampMin: return "clamp_min";
    case Op::LeakyRelu: return "leaky_relu";
    case Op::MaskMul: return "mask_mul";
    case Op::Where: return "where";
    case Op::StopGradient: return "stop_gradient";
    case Op::SumRows: return "sum_rows";
    case Op::SumCols: return "sum_cols";
    case Op::Sum: return "sum";
    case Op::Rows: return "rows";
    case Op::ConcatRows: return "concat_rows";
    case Op::MatMul: return "matmul";
    case Op::Cross: return "cross";
    case Op::Norm: return "norm";
    case Op::GatherRows: return "gather_rows";
    case Op::LayerNorm: return "layer_norm";
    case Op::Opaque: return "opaque";
  }
  return "?";
}

const Mat& Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const Mat& v = value();
  if (v.size() != 1) throw InvalidInputError("scalar() on a " + shape_str(v) + " value");
  return v(0, 0);
}

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Mat value) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(value);
  n.grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::constant(Mat value) {
  Node n;
  n.op = Op::Constant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Node node) {
  node.value = evaluate(node);
  bool g = false;
  if (node.op != Op::StopGradient) {
    for (int i : node.in) g = g || nodes_[static_cast<std::size_t>(i)].grad;
  }
  node.grad = g;
  if (node.op == Op::MatMul) ++matmul_count_;
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Mat Tape::evaluate(const Node& n) const {
  auto in = [&](std::size_t k) -> const Mat& { return nodes_[static_cast<std::size_t>(n.in[k])].value; };
  switch (n.op) {
    case Op::Leaf:
    case Op::Constant:
      return n.value;
    case Op::Add:
      return binary(in(0), in(1), [](const auto& x, const auto& y) { return x + y; });
    case Op::Sub:
      return binary(in(0), in(1), [](const auto& x, const auto& y) { return x - y; });
    case Op::Mul:
      return binary(in(0), in(1), [](const auto& x, const auto& y) { return x * y; });
    case Op::Div:
      return binary(in(0), in(1), [](const auto& x, const auto& y) { return x / y; });
    case Op::Max:
      return binary(in(0), in(1), [](const auto& x, const auto& y) { return x.max(y); });
    case Op::Neg:
      return -in(0);
    case Op::Scale:
      return in(0) * n.a;
    case Op::AddScalar:
      return (in(0).array() + n.a).matrix();
    case Op::Square:
      return in(0).array().square().matrix();
    case Op::Sqrt:
      return in(0).array().sqrt().matrix();
    case Op::Abs:
      return in(0).array().abs().matrix();
    case Op::Exp:
      return in(0).array().exp().matrix();
    case Op::Log:
      return in(0).array().log().matrix();
    case Op::Cos:
      return in(0).array().cos().matrix();
    case Op::Sin:
      return in(0).array().sin().matrix();
    case Op::ClampMin:
      return in(0).array().max(n.a).matrix();
    case Op::LeakyRelu: {
      const double s = n.a;
      return in(0).unaryExpr([s](double v) { return v >= 0.0 ? v : s * v; });
    }
    case Op::MaskMul:
      return binary(in(0), *n.mat, [](const auto& x, const auto& y) { return x * y; });
    case Op::Where: {
      const Mat& a = in(0);
      const Mat m = bcast(*n.mat, a.rows(), a.cols());
      return (m.array() != 0.0).select(a, in(1));
    }
    case Op::StopGradient:
      return n.mat ? *n.mat : in(0);
    case Op::SumRows:
      return in(0).colwise().sum();
    case Op::SumCols:
      return in(0).rowwise().sum();
    case Op::Sum:
      return Mat::Constant(1, 1, in(0).sum());
    case Op::Rows:
      return in(0).middleRows(n.idx[0], n.idx[1]);
    case Op::ConcatRows: {
      Index r = 0;
      const Index c = in(0).cols();
      for (std::size_t k = 0; k < n.in.size(); ++k) {
        if (in(k).cols() != c) throw InvalidInputError("concat_rows column mismatch");
        r += in(k).rows();
      }
      Mat out(r, c);
      Index at = 0;
      for (std::size_t k = 0; k < n.in.size(); ++k) {
        out.middleRows(at, in(k).rows()) = in(k);
        at += in(k).rows();
      }
      return out;
    }
    case Op::MatMul: {
      if (in(0).cols() != in(1).rows()) {
        throw InvalidInputError("matmul shape mismatch " + shape_str(in(0)) + " * " + shape_str(in(1)));
      }
      Mat out = in(0) * in(1);
      return out;
    }
    case Op::Cross: {
      const Mat& a = in(0);
      const Mat& b = in(1);
      if (a.rows() != 3 || b.rows() != 3 || a.cols() != b.cols()) {
        throw InvalidInputError("cross needs two 3xN operands");
      }
      Mat out(3, a.cols());
      out.row(0) = a.row(1).cwiseProduct(b.row(2)) - a.row(2).cwiseProduct(b.row(1));
      out.row(1) = a.row(2).cwiseProduct(b.row(0)) - a.row(0).cwiseProduct(b.row(2));
      out.row(2) = a.row(0).cwiseProduct(b.row(1)) - a.row(1).cwiseProduct(b.row(0));
      return out;
    }
    case Op::Norm:
      return in(0).colwise().norm();
    case Op::GatherRows: {
      const Mat& x = in(0);
      const Index k = static_cast<Index>(n.a);
      Mat out(k, x.cols());
      for (Index c = 0; c < x.cols(); ++c) {
        for (Index j = 0; j < k; ++j) out(j, c) = x(n.idx[static_cast<std::size_t>(c * k + j)], c);
      }
      return out;
    }
    case Op::LayerNorm: {
      const Mat& x = in(0);
      const double f = static_cast<double>(x.rows());
      const Eigen::RowVectorXd mu = x.colwise().sum() / f;
      Mat xc = x.rowwise() - mu;
      const Eigen::RowVectorXd inv =
          ((xc.array().square().colwise().sum() / f) + kLayerNormEps).sqrt().inverse();
      xc.array().rowwise() *= inv.array();
      xc.array().colwise() *= in(1).col(0).array();
      xc.colwise() += in(2).col(0);
      return xc;
    }
    case Op::Opaque:
      return in(0).unaryExpr(n.fn);
  }
  throw UnsupportedOpError(std::string("no forward rule for ") + op_name(n.op));
}

void Tape::backprop(const Node& n, const Mat& g, std::vector<Mat>& adj) const {
  auto node = [&](std::size_t k) -> const Node& { return nodes_[static_cast<std::size_t>(n.in[k])]; };
  auto in = [&](std::size_t k) -> const Mat& { return node(k).value; };
  auto wants = [&](std::size_t k) { return node(k).grad; };
  auto push = [&](std::size_t k, const Mat& d) { accum(adj, n.in[k], d); };

  switch (n.op) {
    case Op::Leaf:
    case Op::Constant:
    case Op::StopGradient:
      return;
    case Op::Add:
      if (wants(0)) push(0, reduce_to(g, in(0).rows(), in(0).cols()));
      if (wants(1)) push(1, reduce_to(g, in(1).rows(), in(1).cols()));
      return;
    case Op::Sub:
      if (wants(0)) push(0, reduce_to(g, in(0).rows(), in(0).cols()));
      if (wants(1)) push(1, reduce_to(-g, in(1).rows(), in(1).cols()));
      return;
    case Op::Mul:
      if (wants(0)) push(0, reduce_to(binary(g, in(1), [](const auto& x, const auto& y) { return x * y; }),
                                      in(0).rows(), in(0).cols()));
      if (wants(1)) push(1, reduce_to(binary(g, in(0), [](const auto& x, const auto& y) { return x * y; }),
                                      in(1).rows(), in(1).cols()));
      return;
    case Op::Div: {
      const Mat gb = binary(g, in(1), [](const auto& x, const auto& y) { return x / y; });
      if (wants(0)) push(0, reduce_to(gb, in(0).rows(), in(0).cols()));
      if (wants(1)) {
        // d(a/b)/db = -(a/b)/b
        const Mat d = binary(gb, n.value, [](const auto& x, const auto& y) { return -x * y; });
        push(1, reduce_to(d, in(1).rows(), in(1).cols()));
      }
      return;
    }
    case Op::Max: {
      const Index r = n.value.rows();
      const Index c = n.value.cols();
      const Mat a = bcast(in(0), r, c);
      const Mat b = bcast(in(1), r, c);
      const Mat take_a = (a.array() >= b.array()).cast<double>().matrix();
      if (wants(0)) push(0, reduce_to(g.cwiseProduct(take_a), in(0).rows(), in(0).cols()));
      if (wants(1)) {
        push(1, reduce_to(g.cwiseProduct((1.0 - take_a.array()).matrix()), in(1).rows(), in(1).cols()));
      }
      return;
    }
    case Op::Neg:
      push(0, -g);
      return;
    case Op::Scale:
      push(0, g * n.a);
      return;
    case Op::AddScalar:
      push(0, g);
      return;
    case Op::Square:
      push(0, (2.0 * g.array() * in(0).array()).matrix());
      return;
    case Op::Sqrt:
      push(0, (0.5 * g.array() / n.value.array()).matrix());
      return;
    case Op::Abs:
      push(0, (in(0).array() >= 0.0).select(g.array(), -g.array()).matrix());
      return;
    case Op::Exp:
      push(0, g.cwiseProduct(n.value));
      return;
    case Op::Log:
      push(0, g.cwiseQuotient(in(0)));
      return;
    case Op::Cos:
      push(0, (-g.array() * in(0).array().sin()).matrix());
      return;
    case Op::Sin:
      push(0, (g.array() * in(0).array().cos()).matrix());
      return;
    case Op::ClampMin:
      push(0, (g.array() * (in(0).array() > n.a).cast<double>()).matrix());
      return;
    case Op::LeakyRelu: {
      const double s = n.a;
      push(0, (g.array() * in(0).array().unaryExpr([s](double v) { return v >= 0.0 ? 1.0 : s; })).matrix());
      return;
    }
    case Op::MaskMul:
      push(0, reduce_to(binary(g, *n.mat, [](const auto& x, const auto& y) { return x * y; }), in(0).rows(),
                        in(0).cols()));
      return;
    case Op::Where: {
      const Mat m = bcast(*n.mat, g.rows(), g.cols());
      const auto on = (m.array() != 0.0).cast<double>();
      if (wants(0)) push(0, (g.array() * on).matrix());
      if (wants(1)) push(1, (g.array() * (1.0 - on)).matrix());
      return;
    }
    case Op::SumRows:
      push(0, g.replicate(in(0).rows(), 1));
      return;
    case Op::SumCols:
      push(0, g.replicate(1, in(0).cols()));
      return;
    case Op::Sum:
      push(0, Mat::Constant(in(0).rows(), in(0).cols(), g(0, 0)));
      return;
    case Op::Rows: {
      Mat d = Mat::Zero(in(0).rows(), in(0).cols());
      d.middleRows(n.idx[0], n.idx[1]) = g;
      push(0, d);
      return;
    }
    case Op::ConcatRows: {
      Index at = 0;
      for (std::size_t k = 0; k < n.in.size(); ++k) {
        const Index r = in(k).rows();
        if (wants(k)) push(k, g.middleRows(at, r));
        at += r;
      }
      return;
    }
    case Op::MatMul:
      if (wants(0)) push(0, g * in(1).transpose());
      if (wants(1)) push(1, in(0).transpose() * g);
      return;
    case Op::Cross: {
      const Mat& a = in(0);
      const Mat& b = in(1);
      auto cr = [](const Mat& u, const Mat& v) {
        Mat out(3, u.cols());
        out.row(0) = u.row(1).cwiseProduct(v.row(2)) - u.row(2).cwiseProduct(v.row(1));
        out.row(1) = u.row(2).cwiseProduct(v.row(0)) - u.row(0).cwiseProduct(v.row(2));
        out.row(2) = u.row(0).cwiseProduct(v.row(1)) - u.row(1).cwiseProduct(v.row(0));
        return out;
      };
      if (wants(0)) push(0, cr(b, g));
      if (wants(1)) push(1, cr(g, a));
      return;
    }
    case Op::Norm: {
      const Eigen::RowVectorXd inv = n.value.row(0).unaryExpr([](double v) { return v > 0.0 ? 1.0 / v : 0.0; });
      Mat d = in(0);
      d.array().rowwise() *= (g.row(0).array() * inv.array());
      push(0, d);
      return;
    }
    case Op::GatherRows: {
      const Index k = static_cast<Index>(n.a);
      Mat d = Mat::Zero(in(0).rows(), in(0).cols());
      for (Index c = 0; c < d.cols(); ++c) {
        for (Index j = 0; j < k; ++j) d(n.idx[static_cast<std::size_t>(c * k + j)], c) += g(j, c);
      }
      push(0, d);
      return;
    }
    case Op::LayerNorm: {
      const Mat& x = in(0);
      const Mat& gain = in(1);
      const double f = static_cast<double>(x.rows());
      const Eigen::RowVectorXd mu = x.colwise().sum() / f;
      Mat xhat = x.rowwise() - mu;
      const Eigen::RowVectorXd inv =
          ((xhat.array().square().colwise().sum() / f) + kLayerNormEps).sqrt().inverse();
      xhat.array().rowwise() *= inv.array();
      if (wants(1)) push(1, g.cwiseProduct(xhat).rowwise().sum());
      if (wants(2)) push(2, g.rowwise().sum());
      if (wants(0)) {
        Mat dxh = g;
        dxh.array().colwise() *= gain.col(0).array();
        const Eigen::RowVectorXd m1 = dxh.colwise().sum() / f;
        const Eigen::RowVectorXd m2 = dxh.cwiseProduct(xhat).colwise().sum() / f;
        Mat dx = dxh.rowwise() - m1;
        dx -= (xhat.array().rowwise() * m2.array()).matrix();
        dx.array().rowwise() *= inv.array();
        push(0, dx);
      }
      return;
    }
    case Op::Opaque:
      throw UnsupportedOpError("no derivative rule for opaque op '" + n.name + "'");
  }
  throw UnsupportedOpError(std::string("no derivative rule for ") + op_name(n.op));
}

std::vector<Mat> Tape::gradient(Var output, std::span<const Var> wrt) const {
  if (output.tape() != this) throw InvalidInputError("output does not belong to this tape");
  if (output.value().size() != 1) {
    throw InvalidInputError("gradient needs a scalar output, got " + shape_str(output.value()));
  }
  std::vector<Mat> adj(nodes_.size());
  if (nodes_[static_cast<std::size_t>(output.id())].grad) {
    adj[static_cast<std::size_t>(output.id())] = Mat::Ones(1, 1);
    for (int id = output.id(); id >= 0; --id) {
      const Node& n = nodes_[static_cast<std::size_t>(id)];
      Mat& g = adj[static_cast<std::size_t>(id)];
      if (g.size() == 0 || !n.grad) continue;
      if (n.op != Op::Leaf) {
        backprop(n, g, adj);
        g.resize(0, 0);
      }
    }
  }
  std::vector<Mat> out;
  out.reserve(wrt.size());
  for (const Var& v : wrt) {
    const Mat& a = adj[static_cast<std::size_t>(v.id())];
    out.push_back(a.size() == 0 ? Mat::Zero(v.rows(), v.cols()) : a);
  }
  return out;
}

Var Tape::record_stop_gradient(Node node) {
  const std::size_t k = stop_gradients_++;
  if (k < frozen_.size()) {
    const Mat& in = nodes_[static_cast<std::size_t>(node.in[0])].value;
    if (frozen_[k].rows() != in.rows() || frozen_[k].cols() != in.cols()) {
      throw InvalidInputError("frozen stop-gradient value has the wrong shape");
    }
    node.mat = std::make_shared<const Mat>(frozen_[k]);
  }
  return record(std::move(node));
}

std::vector<Mat> Tape::stop_gradient_values() const {
  std::vector<Mat> out;
  for (const Node& n : nodes_) {
    if (n.op == Op::StopGradient) out.push_back(n.value);
  }
  return out;
}

bool Tape::replay_matches() const {
  for (const Node& n : nodes_) {
    if (n.op == Op::Leaf || n.op == Op::Constant) continue;
    const Mat v = evaluate(n);
    if (v.rows() != n.value.rows() || v.cols() != n.value.cols()) return false;
    for (Index i = 0; i < v.size(); ++i) {
      const double a = v.data()[i];
      const double b = n.value.data()[i];
      if (!(a == b) && !(std::isnan(a) && std::isnan(b))) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------

Var operator+(const Var& a, const Var& b) { return binop(a, b, Op::Add); }
Var operator-(const Var& a, const Var& b) { return binop(a, b, Op::Sub); }
Var operator*(const Var& a, const Var& b) { return binop(a, b, Op::Mul); }
Var operator/(const Var& a, const Var& b) { return binop(a, b, Op::Div); }
Var operator-(const Var& a) { return unary(a, Op::Neg); }
Var operator*(const Var& a, double s) { return unary(a, Op::Scale, s); }
Var operator*(double s, const Var& a) { return unary(a, Op::Scale, s); }
Var operator/(const Var& a, double s) { return unary(a, Op::Scale, 1.0 / s); }
Var operator+(const Var& a, double s) { return unary(a, Op::AddScalar, s); }
Var operator+(double s, const Var& a) { return unary(a, Op::AddScalar, s); }
Var operator-(const Var& a, double s) { return unary(a, Op::AddScalar, -s); }
Var operator-(double s, const Var& a) { return unary(-a, Op::AddScalar, s); }

Var maximum(const Var& a, const Var& b) { return binop(a, b, Op::Max); }
Var square(const Var& x) { return unary(x, Op::Square); }
Var sqrt(const Var& x) { return unary(x, Op::Sqrt); }
Var abs(const Var& x) { return unary(x, Op::Abs); }
Var exp(const Var& x) { return unary(x, Op::Exp); }
Var log(const Var& x) { return unary(x, Op::Log); }
Var cos(const Var& x) { return unary(x, Op::Cos); }
Var sin(const Var& x) { return unary(x, Op::Sin); }
Var clamp_min(const Var& x, double floor) { return unary(x, Op::ClampMin, floor); }
Var leaky_relu(const Var& x, double slope) { return unary(x, Op::LeakyRelu, slope); }

Var mask_mul(const Var& x, Mat mask) {
  Tape::Node n;
  n.op = Op::MaskMul;
  n.in = {x.id()};
  n.mat = std::make_shared<const Mat>(std::move(mask));
  return x.tape()->record(std::move(n));
}

Var where(const Mat& mask, const Var& a, const Var& b) {
  Tape* t = same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw InvalidInputError("where operands differ in shape");
  Tape::Node n;
  n.op = Op::Where;
  n.in = {a.id(), b.id()};
  n.mat = std::make_shared<const Mat>(mask);
  return t->record(std::move(n));
}

Var stop_gradient(const Var& x) {
  Tape::Node n;
  n.op = Op::StopGradient;
  n.in = {x.id()};
  return x.tape()->record_stop_gradient(std::move(n));
}
Var sum_rows(const Var& x) { return unary(x, Op::SumRows); }
Var sum_cols(const Var& x) { return unary(x, Op::SumCols); }
Var sum(const Var& x) { return unary(x, Op::Sum); }
Var mean(const Var& x) { return sum(x) / static_cast<double>(x.value().size()); }

Var rows(const Var& x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > x.rows()) throw InvalidInputError("rows() out of range");
  Tape::Node n;
  n.op = Op::Rows;
  n.in = {x.id()};
  n.idx = {static_cast<int>(start), static_cast<int>(count)};
  return x.tape()->record(std::move(n));
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidInputError("concat_rows of nothing");
  Tape::Node n;
  n.op = Op::ConcatRows;
  for (const Var& p : parts) {
    same_tape(parts[0], p);
    n.in.push_back(p.id());
  }
  return parts[0].tape()->record(std::move(n));
}

Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

Var matmul(const Var& w, const Var& x) { return binop(w, x, Op::MatMul); }
Var cross(const Var& a, const Var& b) { return binop(a, b, Op::Cross); }
Var dot(const Var& a, const Var& b) { return sum_rows(a * b); }
Var norm(const Var& x) { return unary(x, Op::Norm); }
Var normalize(const Var& x) { return x / norm(x); }

Var gather_rows(const Var& x, std::vector<int> index, Eigen::Index k) {
  if (static_cast<Eigen::Index>(index.size()) != k * x.cols()) throw InvalidInputError("gather_rows index size");
  for (int i : index) {
    if (i < 0 || i >= x.rows()) throw InvalidInputError("gather_rows index out of range");
  }
  Tape::Node n;
  n.op = Op::GatherRows;
  n.in = {x.id()};
  n.idx = std::move(index);
  n.a = static_cast<double>(k);
  return x.tape()->record(std::move(n));
}

Var layer_norm(const Var& x, const Var& gain, const Var& offset) {
  if (gain.rows() != x.rows() || offset.rows() != x.rows() || gain.cols() != 1 || offset.cols() != 1) {
    throw InvalidInputError("layer_norm gain/offset must be F x 1");
  }
  same_tape(x, gain);
  same_tape(x, offset);
  return make(x.tape(), Op::LayerNorm, {x.id(), gain.id(), offset.id()});
}

Var opaque(const Var& x, std::function<double(double)> fn, std::string name) {
  Tape::Node n;
  n.op = Op::Opaque;
  n.in = {x.id()};
  n.fn = std::move(fn);
  n.name = std::move(name);
  return x.tape()->record(std::move(n));
}

}  // namespace marf::ad
