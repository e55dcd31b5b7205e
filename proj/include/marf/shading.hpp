#pragma once

// Surface queries that need derivatives with respect to the ray origin:
// analytical normals from the three tangents dp/do_i and the shape operator of
// the medial normal field.

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "marf/dual.hpp"
#include "marf/geometry.hpp"
#include "marf/network.hpp"

namespace marf {

/// A field's answer for a batch of rays. Tangent channels follow the origin's.
struct FieldEval {
  ad::Dual point;   // 3 x N
  ad::Dual center;  // 3 x N; the medial normal is normalize(point - center)
  ad::Dual radius;  // 1 x N
  ad::Mat hit;      // 1 x N of 0/1
  std::vector<int> winner;
  bool has_medial = true;
};

/// Maps origins (3 x N, with 0 or 3 tangent channels) and unit directions to
/// surface points. Exactly one network forward per column for network fields.
using SurfaceField = std::function<FieldEval(const ad::Dual& origin, const ad::Var& q_hat)>;

/// MARF or PRIF network. PRIF fields report no medial quantities.
SurfaceField network_field(const NetworkParams& params, const std::optional<Eigen::VectorXd>& latent = std::nullopt);
/// The half-space on the -outward side of the plane through `point`; the
/// medial centers sit one unit behind the surface.
SurfaceField plane_field(const Vec3& outward, const Vec3& point = Vec3::Zero());

struct DifferentialFrame {
  std::array<Vec3, 3> tangents;    // dp/do_i
  Vec3 normal = Vec3::Zero();      // medial normal
  Eigen::Matrix3d shape_operator;  // (I - n n^T) grad_o n
  double k1 = 0.0, k2 = 0.0;       // k1 >= k2
  Vec3 v1 = Vec3::Zero(), v2 = Vec3::Zero();
  double mean_curvature = 0.0;
  double gaussian_curvature = 0.0;
};

/// Per-ray results for a batch. Flags are 1 when the value is usable.
struct SurfaceBatch {
  ad::Mat point, center, medial_normal;  // 3 x N
  Eigen::RowVectorXd radius;
  std::vector<int> winner;
  std::vector<std::uint8_t> hit;
  std::vector<std::uint8_t> medial_ok;
  ad::Mat analytical_normal;  // 3 x N; only when differential
  std::vector<std::uint8_t> analytical_ok;
  std::vector<DifferentialFrame> frame;
  std::vector<std::uint8_t> frame_ok;
};

/// One field evaluation over the batch; `differential` adds the three origin
/// tangent channels and fills the analytical normals and frames.
SurfaceBatch evaluate_surface(const SurfaceField& field, const ad::Mat& origins, const ad::Mat& directions,
                              bool differential);

/// n' = -(q_x t_y x t_z + q_y t_z x t_x + q_z t_x x t_y), normalized.
/// Throws InvalidInputError on a miss and DegenerateNormalError when |n'| < 1e-9.
Vec3 analytical_normal(const SurfaceField& field, const Ray& ray);

/// Symmetrized tangent-plane restriction of (I - n n^T) grad_o n; the eigenpair
/// most aligned with n is dropped. Positive curvature means the surface bends
/// toward the medial center. Throws like analytical_normal, or NumericalError
/// when the eigen-solver fails.
DifferentialFrame shape_operator(const SurfaceField& field, const Ray& ray);

/// Frame from the tangents, the medial normal and its origin Jacobian (columns
/// d n/d o_i). Returns nullopt when the decomposition fails.
std::optional<DifferentialFrame> make_frame(const std::array<Vec3, 3>& tangents, const Vec3& normal,
                                            const Eigen::Matrix3d& normal_jacobian);

struct TranslucencyParams {
  double epsilon = 0.05;
  double distortion = 0.08;
  double sharpness = 16.0;
  Vec3 light = Vec3::UnitZ();  // direction the light travels

  void validate() const;
};

/// (1/(r + eps)) * max(q.(s n - l), 0)^p with q the viewing ray direction.
double translucency_coeff(double radius, const Vec3& normal, const Vec3& q_hat, const TranslucencyParams& params);

struct WardParams {
  double a1 = 0.05;
  double a2 = 0.3;

  void validate() const;
};

/// Ward's n.l and n.q below this make the coefficient 0.
inline constexpr double kWardClamp = 1e-4;

/// Anisotropic Ward coefficient with the principal directions of `frame`.
/// `to_viewer` and `to_light` point away from the surface (the negated ray and
/// light directions).
double ward_coeff(const DifferentialFrame& frame, const Vec3& to_viewer, const Vec3& to_light, const WardParams& params);

}  // namespace marf
