#include "marf/dual.hpp"

#include "marf/error.hpp"

namespace marf::ad {

namespace {

template <class F>
Dual map_t(Var v, const Dual& x, F f) {
  Dual out{v, {}};
  out.t.reserve(x.t.size());
  for (const Var& t : x.t) out.t.push_back(f(t));
  return out;
}

void check_channels(const Dual& a, const Dual& b) {
  if (a.t.size() != b.t.size()) throw InvalidInputError("dual operands have different channel counts");
}

Mat sign_mask(const Mat& x) {
  return (x.array() >= 0.0).select(Mat::Ones(x.rows(), x.cols()), -Mat::Ones(x.rows(), x.cols()));
}

}  // namespace

Dual seed(const Var& x, const std::vector<Mat>& directions) {
  if (directions.size() > 3) throw InvalidInputError("at most 3 tangent channels");
  Dual out{x, {}};
  for (const Mat& d : directions) {
    if (d.rows() != x.rows() || d.cols() != x.cols()) throw InvalidInputError("direction shape mismatch");
    out.t.push_back(x.tape()->constant(d));
  }
  return out;
}

Dual lift(const Var& x, int channels) {
  Dual out{x, {}};
  for (int j = 0; j < channels; ++j) out.t.push_back(x.tape()->constant(Mat::Zero(x.rows(), x.cols())));
  return out;
}

Dual operator+(const Dual& a, const Dual& b) {
  check_channels(a, b);
  Dual out{a.v + b.v, {}};
  for (std::size_t j = 0; j < a.t.size(); ++j) out.t.push_back(a.t[j] + b.t[j]);
  return out;
}

Dual operator-(const Dual& a, const Dual& b) {
  check_channels(a, b);
  Dual out{a.v - b.v, {}};
  for (std::size_t j = 0; j < a.t.size(); ++j) out.t.push_back(a.t[j] - b.t[j]);
  return out;
}

Dual operator*(const Dual& a, const Dual& b) {
  check_channels(a, b);
  Dual out{a.v * b.v, {}};
  for (std::size_t j = 0; j < a.t.size(); ++j) out.t.push_back(a.t[j] * b.v + a.v * b.t[j]);
  return out;
}

Dual operator/(const Dual& a, const Dual& b) {
  check_channels(a, b);
  const Var q = a.v / b.v;
  Dual out{q, {}};
  for (std::size_t j = 0; j < a.t.size(); ++j) out.t.push_back((a.t[j] - q * b.t[j]) / b.v);
  return out;
}

Dual operator+(const Dual& a, const Var& b) { return Dual{a.v + b, a.t}; }
Dual operator+(const Var& a, const Dual& b) { return Dual{a + b.v, b.t}; }
Dual operator-(const Dual& a, const Var& b) { return Dual{a.v - b, a.t}; }
Dual operator-(const Var& a, const Dual& b) {
  return map_t(a - b.v, b, [](const Var& t) { return -t; });
}
Dual operator*(const Dual& a, const Var& b) {
  return map_t(a.v * b, a, [&](const Var& t) { return t * b; });
}
Dual operator*(const Var& a, const Dual& b) { return b * a; }
Dual operator/(const Dual& a, const Var& b) {
  return map_t(a.v / b, a, [&](const Var& t) { return t / b; });
}
Dual operator-(const Dual& a) {
  return map_t(-a.v, a, [](const Var& t) { return -t; });
}
Dual operator*(const Dual& a, double s) {
  return map_t(a.v * s, a, [s](const Var& t) { return t * s; });
}
Dual operator*(double s, const Dual& a) { return a * s; }
Dual operator/(const Dual& a, double s) { return a * (1.0 / s); }
Dual operator+(const Dual& a, double s) { return Dual{a.v + s, a.t}; }
Dual operator-(const Dual& a, double s) { return Dual{a.v - s, a.t}; }
Dual operator-(double s, const Dual& a) {
  return map_t(s - a.v, a, [](const Var& t) { return -t; });
}

Dual maximum(const Dual& a, const Dual& b) {
  check_channels(a, b);
  const Mat take_a = (a.value().array() >= b.value().array()).cast<double>().matrix();
  Dual out{maximum(a.v, b.v), {}};
  for (std::size_t j = 0; j < a.t.size(); ++j) out.t.push_back(where(take_a, a.t[j], b.t[j]));
  return out;
}

Dual square(const Dual& x) {
  const Var twice = x.v * 2.0;
  return map_t(square(x.v), x, [&](const Var& t) { return t * twice; });
}

Dual sqrt(const Dual& x) {
  const Var y = sqrt(x.v);
  return map_t(y, x, [&](const Var& t) { return (t * 0.5) / y; });
}

Dual abs(const Dual& x) {
  const Mat s = sign_mask(x.value());
  return map_t(abs(x.v), x, [&](const Var& t) { return mask_mul(t, s); });
}

Dual exp(const Dual& x) {
  const Var y = exp(x.v);
  return map_t(y, x, [&](const Var& t) { return t * y; });
}

Dual cos(const Dual& x) {
  const Var s = sin(x.v);
  return map_t(cos(x.v), x, [&](const Var& t) { return -(t * s); });
}

Dual sin(const Dual& x) {
  const Var c = cos(x.v);
  return map_t(sin(x.v), x, [&](const Var& t) { return t * c; });
}

Dual clamp_min(const Dual& x, double floor) {
  const Mat m = (x.value().array() > floor).cast<double>().matrix();
  return map_t(clamp_min(x.v, floor), x, [&](const Var& t) { return mask_mul(t, m); });
}

Dual leaky_relu(const Dual& x, double slope) {
  const Mat m = x.value().unaryExpr([slope](double v) { return v >= 0.0 ? 1.0 : slope; });
  return map_t(leaky_relu(x.v, slope), x, [&](const Var& t) { return mask_mul(t, m); });
}

Dual mask_mul(const Dual& x, const Mat& mask) {
  return map_t(mask_mul(x.v, mask), x, [&](const Var& t) { return mask_mul(t, mask); });
}

Dual where(const Mat& mask, const Dual& a, const Dual& b) {
  check_channels(a, b);
  Dual out{where(mask, a.v, b.v), {}};
  for (std::size_t j = 0; j < a.t.size(); ++j) out.t.push_back(where(mask, a.t[j], b.t[j]));
  return out;
}

Dual stop_gradient(const Dual& x) { return lift(stop_gradient(x.v), x.channels()); }

Dual sum_rows(const Dual& x) {
  return map_t(sum_rows(x.v), x, [](const Var& t) { return sum_rows(t); });
}

Dual sum_cols(const Dual& x) {
  return map_t(sum_cols(x.v), x, [](const Var& t) { return sum_cols(t); });
}

Dual sum(const Dual& x) {
  return map_t(sum(x.v), x, [](const Var& t) { return sum(t); });
}

Dual rows(const Dual& x, Eigen::Index start, Eigen::Index count) {
  return map_t(rows(x.v, start, count), x, [&](const Var& t) { return rows(t, start, count); });
}

Dual concat_rows(std::span<const Dual> parts) {
  if (parts.empty()) throw InvalidInputError("concat_rows of nothing");
  std::vector<Var> vs;
  for (const Dual& p : parts) {
    check_channels(parts[0], p);
    vs.push_back(p.v);
  }
  Dual out{concat_rows(vs), {}};
  for (std::size_t j = 0; j < parts[0].t.size(); ++j) {
    std::vector<Var> ts;
    for (const Dual& p : parts) ts.push_back(p.t[j]);
    out.t.push_back(concat_rows(ts));
  }
  return out;
}

Dual concat_rows(std::initializer_list<Dual> parts) {
  return concat_rows(std::span<const Dual>(parts.begin(), parts.size()));
}

Dual matmul(const Var& w, const Dual& x) {
  return map_t(matmul(w, x.v), x, [&](const Var& t) { return matmul(w, t); });
}

Dual cross(const Dual& a, const Dual& b) {
  check_channels(a, b);
  Dual out{cross(a.v, b.v), {}};
  for (std::size_t j = 0; j < a.t.size(); ++j) out.t.push_back(cross(a.t[j], b.v) + cross(a.v, b.t[j]));
  return out;
}

Dual dot(const Dual& a, const Dual& b) { return sum_rows(a * b); }

Dual norm(const Dual& x) {
  const Var n = norm(x.v);
  const Mat positive = (n.value().array() > 0.0).cast<double>().matrix();
  Tape* tape = x.v.tape();
  const Var safe = where(positive, n, tape->constant(Mat::Ones(1, n.cols())));
  const Var zero = tape->constant(Mat::Zero(1, n.cols()));
  return map_t(n, x, [&](const Var& t) { return where(positive, dot(x.v, t) / safe, zero); });
}

Dual normalize(const Dual& x) { return x / norm(x); }

Dual gather_rows(const Dual& x, const std::vector<int>& index, Eigen::Index k) {
  return map_t(gather_rows(x.v, index, k), x, [&](const Var& t) { return gather_rows(t, index, k); });
}

Dual layer_norm(const Dual& x, const Var& gain, const Var& offset) {
  const double f = static_cast<double>(x.rows());
  const Var y = layer_norm(x.v, gain, offset);
  // Tangent from the composite form so that it stays differentiable in the
  // parameters that produced x.
  const Var mu = sum_rows(x.v) / f;
  const Var xc = x.v - mu;
  const Var sigma = sqrt(sum_rows(square(xc)) / f + Tape::kLayerNormEps);
  const Var xhat = xc / sigma;
  return map_t(y, x, [&](const Var& t) {
    const Var centered = t - sum_rows(t) / f - xhat * (sum_rows(t * xhat) / f);
    return gain * (centered / sigma);
  });
}

}  // namespace marf::ad
