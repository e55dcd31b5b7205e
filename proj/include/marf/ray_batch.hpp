#pragma once

// Column-batched ray/atom geometry usable with both ad::Var and ad::Dual.
// Rays are 3 x N origin and unit-direction blocks; atoms are 3 x N centers and
// 1 x N radii.

#include "marf/dual.hpp"

namespace marf {

/// (q_hat, o x q_hat, q_hat x (o x q_hat)) stacked into a 9 x N input block.
template <class T>
T embed_rays(const T& origin, const T& q_hat) {
  const T moment = ad::cross(origin, q_hat);
  const T foot = ad::cross(q_hat, moment);
  return ad::concat_rows({q_hat, moment, foot});
}

template <class T>
struct BatchIntersection {
  T discriminant;        // 1 x N
  T point;               // 3 x N; near root on hits, projection of the center otherwise
  T signed_silhouette;   // 1 x N
  ad::Mat hit;           // 1 x N of 0/1, from the primal discriminant
};

/// Hit mask from primal values only (no tape).
inline ad::Mat hit_mask(const ad::Mat& origin, const ad::Mat& q_hat, const ad::Mat& center,
                        const ad::Mat& radius) {
  const ad::Mat oc = origin - center;
  const Eigen::RowVectorXd b = q_hat.cwiseProduct(oc).colwise().sum();
  const Eigen::RowVectorXd delta =
      b.array().square() - (oc.colwise().squaredNorm().array() - radius.row(0).array().square());
  return (delta.array() >= 0.0).cast<double>().matrix();
}

template <class T>
BatchIntersection<T> intersect_batch(const T& origin, const T& q_hat, const T& center, const T& radius) {
  const T oc = origin - center;
  const T b = ad::dot(q_hat, oc);
  const T delta = ad::square(b) - (ad::dot(oc, oc) - ad::square(radius));
  const ad::Mat hit = (delta.value().array() >= 0.0).template cast<double>().matrix();

  const T proj = origin - q_hat * b;
  const T s_raw = ad::norm(proj - center) - radius;

  // Misses take sqrt(1) so neither branch produces an infinite derivative.
  ad::Tape* tape = ad::primal(delta).tape();
  const T one = ad::lift_as<T>(tape->constant(ad::Mat::Ones(1, delta.cols())), delta);
  const T root = ad::sqrt(ad::where(hit, delta, one));
  const T near = origin - q_hat * (b + root);
  const T point = ad::where(hit, near, proj);
  return {delta, point, s_raw, hit};
}

}  // namespace marf
