#pragma once

#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace marf {

using Vec3 = Eigen::Vector3d;

/// Oriented line o + t*q. The direction may have any nonzero length.
struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
};

/// 4-DoF ray embedding: unit direction, moment about the origin, and the
/// perpendicular foot of the origin on the line.
struct CanonicalRay {
  Vec3 q_hat;
  Vec3 moment;
  Vec3 foot;

  /// Network input layout (q_hat, moment, foot).
  Eigen::Matrix<double, 9, 1> embedding() const;
};

struct MedialAtom {
  Vec3 center = Vec3::Zero();
  double radius = 1.0;
};

struct IntersectionOutcome {
  bool hit = false;
  double discriminant = 0.0;
  /// Near root when hit, otherwise the projection of the center onto the line.
  Vec3 point = Vec3::Zero();
  /// |proj - c| - r; negative when the atom overlaps the line.
  double signed_silhouette = 0.0;
  /// max(0, signed_silhouette).
  double silhouette = 0.0;
  /// Ray parameter of `point` along the unit direction.
  double t = 0.0;
  /// Valid only when hit and point != center.
  Vec3 normal = Vec3::Zero();
  bool normal_valid = false;
};

struct CandidateSelection {
  int winner = 0;
  std::vector<double> metric;
};

/// Discriminants inside [-kGrazeBand, 0) are misses; nothing is snapped.
inline constexpr double kGrazeBand = 1e-12;

/// Throws InvalidInputError on a zero-length or non-finite direction.
CanonicalRay canonicalize(const Ray& ray);

Vec3 unit_direction(const Ray& ray);

/// Line/sphere test taking the root nearest to -infinity along the direction.
/// Throws DegenerateNormalError when a hit lands on the atom center (r == 0).
IntersectionOutcome intersect_atom(const Ray& ray, const MedialAtom& atom);

/// Candidate metric: ray parameter for hits, +inf for misses when anything
/// hits, silhouette distance when everything misses. Ties go to the lowest index.
CandidateSelection select_candidate(const Ray& ray, std::span<const IntersectionOutcome> outcomes);

/// (p - c)/|p - c|; throws DegenerateNormalError when p == c.
Vec3 medial_normal(const Vec3& p, const MedialAtom& atom);

}  // namespace marf
