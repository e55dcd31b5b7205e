#pragma once

#include <cmath>
#include <utility>

#include "marf/error.hpp"
#include "marf/geometry.hpp"

namespace marf {

/// Orthographic camera looking along `view`. The canvas spans [-1,1]^2 on the
/// plane through the origin perpendicular to the view; row 0 is the top.
struct OrthoCamera {
  Vec3 view = Vec3::UnitZ();
  Vec3 right = Vec3::UnitX();
  Vec3 up = Vec3::UnitY();
  int width = 64;
  int height = 64;

  /// Throws InvalidInputError when the view is zero or parallel to the up hint.
  static OrthoCamera look(const Vec3& view, int width, int height, const Vec3& up_hint) {
    if (width <= 0 || height <= 0) throw InvalidInputError("camera resolution must be positive");
    const double len = view.norm();
    if (!(len > 0.0) || !std::isfinite(len)) throw InvalidInputError("camera view direction must be nonzero");
    OrthoCamera c;
    c.view = view / len;
    const Vec3 r = c.view.cross(up_hint);
    if (r.norm() < 1e-9) throw InvalidInputError("camera view and up hint are parallel");
    c.right = r.normalized();
    c.up = c.right.cross(c.view);
    c.width = width;
    c.height = height;
    return c;
  }

  /// Up hint +z, or +y when the view is nearly vertical.
  static OrthoCamera look(const Vec3& view, int width, int height) {
    const Vec3 v = view.normalized();
    const Vec3 hint = std::abs(v.z()) > 0.999 ? Vec3::UnitY() : Vec3::UnitZ();
    return look(view, width, height, hint);
  }

  Vec3 pixel_origin(int row, int col) const {
    const double u = -1.0 + (col + 0.5) * 2.0 / width;
    const double v = 1.0 - (row + 0.5) * 2.0 / height;
    return u * right + v * up;
  }

  Ray ray(int row, int col) const { return {pixel_origin(row, col), view}; }

  /// Canvas coordinates of a world point (column, row), possibly fractional.
  std::pair<double, double> project(const Vec3& x) const {
    const double u = x.dot(right), v = x.dot(up);
    return {(u + 1.0) * width / 2.0 - 0.5, (1.0 - v) * height / 2.0 - 0.5};
  }
};

}  // namespace marf
