#pragma once

// Forward-mode differentiation with up to three tangent channels.
//
// A Dual keeps its primal and every tangent as nodes of the same reverse-mode
// tape, so a scalar built from tangents (e.g. a squared Jacobian norm) can be
// differentiated again with Tape::gradient.

#include <vector>

#include "marf/autodiff.hpp"

namespace marf::ad {

struct Dual {
  Var v;
  std::vector<Var> t;

  int channels() const { return static_cast<int>(t.size()); }
  const Mat& value() const { return v.value(); }
  Eigen::Index rows() const { return v.rows(); }
  Eigen::Index cols() const { return v.cols(); }
};

/// Dual with constant tangent directions (one per channel, same shape as x).
Dual seed(const Var& x, const std::vector<Mat>& directions);
/// Dual with all-zero tangents.
Dual lift(const Var& x, int channels);

Dual operator+(const Dual& a, const Dual& b);
Dual operator-(const Dual& a, const Dual& b);
Dual operator*(const Dual& a, const Dual& b);
Dual operator/(const Dual& a, const Dual& b);
Dual operator+(const Dual& a, const Var& b);
Dual operator+(const Var& a, const Dual& b);
Dual operator-(const Dual& a, const Var& b);
Dual operator-(const Var& a, const Dual& b);
Dual operator*(const Dual& a, const Var& b);
Dual operator*(const Var& a, const Dual& b);
Dual operator/(const Dual& a, const Var& b);
Dual operator-(const Dual& a);
Dual operator*(const Dual& a, double s);
Dual operator*(double s, const Dual& a);
Dual operator/(const Dual& a, double s);
Dual operator+(const Dual& a, double s);
Dual operator-(const Dual& a, double s);
Dual operator-(double s, const Dual& a);

Dual maximum(const Dual& a, const Dual& b);
Dual square(const Dual& x);
Dual sqrt(const Dual& x);
Dual abs(const Dual& x);
Dual exp(const Dual& x);
Dual cos(const Dual& x);
Dual sin(const Dual& x);
Dual clamp_min(const Dual& x, double floor);
Dual leaky_relu(const Dual& x, double slope);
Dual mask_mul(const Dual& x, const Mat& mask);
Dual where(const Mat& mask, const Dual& a, const Dual& b);
/// Zero tangents, matching the reverse-mode semantics.
Dual stop_gradient(const Dual& x);
Dual sum_rows(const Dual& x);
Dual sum_cols(const Dual& x);
Dual sum(const Dual& x);
Dual rows(const Dual& x, Eigen::Index start, Eigen::Index count);
Dual concat_rows(std::span<const Dual> parts);
Dual concat_rows(std::initializer_list<Dual> parts);
Dual matmul(const Var& w, const Dual& x);
Dual cross(const Dual& a, const Dual& b);
Dual dot(const Dual& a, const Dual& b);
Dual norm(const Dual& x);
Dual normalize(const Dual& x);
Dual gather_rows(const Dual& x, const std::vector<int>& index, Eigen::Index k);
Dual layer_norm(const Dual& x, const Var& gain, const Var& offset);

/// Uniform access for code templated over Var and Dual.
inline const Var& primal(const Var& x) { return x; }
inline const Var& primal(const Dual& x) { return x.v; }

template <class T>
T lift_as(const Var& x, const T& like);

template <>
inline Var lift_as<Var>(const Var& x, const Var&) {
  return x;
}

template <>
inline Dual lift_as<Dual>(const Var& x, const Dual& like) {
  return lift(x, like.channels());
}

/// Evaluates `program` on `x` seeded with `directions`; channel j of the result
/// is the directional derivative along directions[j].
template <class Program>
auto jvp(const Var& x, const std::vector<Mat>& directions, Program&& program) {
  return program(seed(x, directions));
}

}  // namespace marf::ad
