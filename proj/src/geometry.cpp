#include "marf/geometry.hpp"

#include <cmath>

#include "marf/error.hpp"

namespace marf {

Eigen::Matrix<double, 9, 1> CanonicalRay::embedding() const {
  Eigen::Matrix<double, 9, 1> x;
  x << q_hat, moment, foot;
  return x;
}

Vec3 unit_direction(const Ray& ray) {
  const double len = ray.direction.norm();
  if (!(len > 0.0) || !std::isfinite(len)) {
    throw InvalidInputError("ray direction must be finite and nonzero");
  }
  return ray.direction / len;
}

CanonicalRay canonicalize(const Ray& ray) {
  CanonicalRay out;
  out.q_hat = unit_direction(ray);
  out.moment = ray.origin.cross(out.q_hat);
  out.foot = out.q_hat.cross(out.moment);
  return out;
}

Vec3 medial_normal(const Vec3& p, const MedialAtom& atom) {
  const Vec3 d = p - atom.center;
  const double len = d.norm();
  if (!(len > 0.0)) {
    throw DegenerateNormalError("medial normal undefined at the atom center");
  }
  return d / len;
}

IntersectionOutcome intersect_atom(const Ray& ray, const MedialAtom& atom) {
  const Vec3 q = unit_direction(ray);
  const Vec3 oc = ray.origin - atom.center;
  const double b = q.dot(oc);
  IntersectionOutcome out;
  out.discriminant = b * b - (oc.squaredNorm() - atom.radius * atom.radius);

  const Vec3 proj = ray.origin - q * b;
  out.signed_silhouette = (proj - atom.center).norm() - atom.radius;
  out.silhouette = std::max(0.0, out.signed_silhouette);
  out.hit = out.discriminant >= 0.0;

  if (out.hit) {
    out.t = -b - std::sqrt(out.discriminant);
    out.point = ray.origin + q * out.t;
    // A grazing hit may round s_raw slightly positive; keep the hit invariant.
    out.silhouette = 0.0;
    out.normal = medial_normal(out.point, atom);
    out.normal_valid = true;
  } else {
    out.t = -b;
    out.point = proj;
  }
  return out;
}

CandidateSelection select_candidate(const Ray& ray, std::span<const IntersectionOutcome> outcomes) {
  if (outcomes.empty()) {
    throw InvalidInputError("select_candidate needs at least one outcome");
  }
  const Vec3 q = unit_direction(ray);
  bool any_hit = false;
  for (const auto& o : outcomes) any_hit = any_hit || o.hit;

  CandidateSelection sel;
  sel.metric.resize(outcomes.size());
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto& o = outcomes[i];
    if (o.hit) {
      sel.metric[i] = q.dot(o.point - ray.origin);
    } else if (any_hit) {
      sel.metric[i] = std::numeric_limits<double>::infinity();
    } else {
      sel.metric[i] = o.silhouette;
    }
  }
  sel.winner = 0;
  for (std::size_t i = 1; i < sel.metric.size(); ++i) {
    if (sel.metric[i] < sel.metric[static_cast<std::size_t>(sel.winner)]) sel.winner = static_cast<int>(i);
  }
  return sel;
}

}  // namespace marf
