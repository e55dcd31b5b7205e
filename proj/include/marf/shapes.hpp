#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "marf/geometry.hpp"

namespace marf {

enum class ShapeKind { TriangleMesh, Sphere, Torus, Box, Capsule, SphereUnion };

/// world = scale * local + translation.
struct Normalization {
  double scale = 1.0;
  Vec3 translation = Vec3::Zero();
};

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
};

/// Polygons are fan-triangulated; negative (relative) indices are accepted.
TriangleMesh load_obj(const std::string& path);
/// Binary little-endian PLY with float/double vertex coordinates.
TriangleMesh load_ply(const std::string& path);
/// Dispatches on the file extension. Throws FormatError on unreadable input.
TriangleMesh load_mesh(const std::string& path);
void save_obj(const TriangleMesh& mesh, const std::string& path);

/// Subdivided icosahedron with outward winding.
TriangleMesh make_icosphere(double radius, int subdivisions);

struct CastResult {
  bool hit = false;
  double t = 0.0;
  Vec3 point = Vec3::Zero();
  /// Geometric normal; outward for analytic shapes, winding-defined for meshes.
  Vec3 normal = Vec3::Zero();
  /// normal . direction < 0.
  bool front_facing = true;
};

/// A normalized ground-truth surface. Copies share mesh data.
class Shape {
 public:
  /// "sphere:r", "torus:R,r", "box:hx[,hy,hz]", "capsule:half_length,r",
  /// "spheres:x,y,z,r;x,y,z,r;..." or "mesh:path". Throws InvalidInputError.
  static Shape parse(const std::string& spec);

  static Shape sphere(double radius);
  static Shape torus(double major, double minor);
  static Shape box(const Vec3& half_extents);
  static Shape capsule(double half_length, double radius);
  static Shape sphere_union(std::vector<MedialAtom> atoms);
  /// Translates and scales the mesh so that its bounding box center sits at the
  /// origin and its farthest vertex at distance 1.
  static Shape mesh(TriangleMesh mesh);

  ShapeKind kind() const { return kind_; }
  const std::string& spec() const { return spec_; }
  const Normalization& normalization() const { return norm_; }
  /// Normalized mesh (empty for analytic kinds).
  const TriangleMesh& triangles() const;

  /// Nearest intersection of the whole line (smallest t along the direction).
  CastResult cast(const Ray& ray) const;

  /// Unsigned distance to the surface in normalized coordinates (analytic kinds
  /// only; throws InvalidInputError for meshes).
  double distance(const Vec3& x) const;

  /// Radius of a ball around the origin that contains the shape.
  double bounding_radius() const;

 private:
  struct MeshData;

  CastResult cast_local(const Vec3& o, const Vec3& d) const;
  double sdf_local(const Vec3& x) const;
  Vec3 normal_local(const Vec3& x) const;
  double local_bound() const;
  void fit_unit_ball();

  ShapeKind kind_ = ShapeKind::Sphere;
  std::string spec_;
  std::vector<double> params_;
  std::vector<MedialAtom> atoms_;
  std::shared_ptr<const MeshData> mesh_;
  Normalization norm_;
};

/// Oracle caster used for ground truth.
inline CastResult cast_oracle(const Shape& shape, const Ray& ray) { return shape.cast(ray); }

}  // namespace marf
