#include "marf/shading.hpp"

#include <cmath>
#include <memory>
#include <numbers>

#include <Eigen/Eigenvalues>

#include "marf/error.hpp"
#include "marf/losses.hpp"
#include "marf/marf_pass.hpp"

namespace marf {

using ad::Dual;
using ad::Mat;
using ad::Var;

namespace {

std::vector<Mat> axis_seeds(Eigen::Index n) {
  std::vector<Mat> out;
  for (int j = 0; j < 3; ++j) {
    Mat e = Mat::Zero(3, n);
    e.row(j).setOnes();
    out.push_back(std::move(e));
  }
  return out;
}

Dual constant_dual(ad::Tape& tape, const Mat& value, int channels) {
  return ad::lift(tape.constant(value), channels);
}

}  // namespace

SurfaceField network_field(const NetworkParams& params, const std::optional<Eigen::VectorXd>& latent) {
  auto shared = std::make_shared<const NetworkParams>(params);
  return [shared, latent](const Dual& origin, const Var& q_hat) {
    const NetworkConfig& config = shared->config;
    ad::Tape& tape = *origin.v.tape();
    const Eigen::Index n = origin.cols();
    const BoundParams bound = bind_params(tape, *shared, false);
    std::optional<Var> z;
    if (config.latent_dim > 0) {
      if (!latent || latent->size() != config.latent_dim) throw InvalidInputError("latent dimension mismatch");
      z = latent_constant(tape, *latent, n);
    } else if (latent) {
      throw InvalidInputError("unconditioned network given a latent");
    }
    const Dual q = ad::lift(q_hat, origin.channels());
    FieldEval out;
    if (config.head == Head::Marf) {
      MarfPass<Dual> pass = run_marf(config, bound, origin, q, z, nullptr);
      out.point = pass.point;
      out.center = pass.center;
      out.radius = pass.radius;
      out.hit = pass.winners.hit;
      out.winner = pass.winners.index;
    } else {
      auto [point, logit] = prif_points(config, bound, origin, q, z, nullptr);
      out.point = point;
      out.center = point;
      out.radius = constant_dual(tape, Mat::Zero(1, n), origin.channels());
      out.hit = (logit.value().array() > 0.0).cast<double>().matrix();
      out.winner.assign(static_cast<std::size_t>(n), 0);
      out.has_medial = false;
    }
    return out;
  };
}

SurfaceField plane_field(const Vec3& outward, const Vec3& point) {
  if (!(outward.norm() > 0.0)) throw InvalidInputError("plane normal must be nonzero");
  const Vec3 m = outward.normalized();
  return [m, point](const Dual& origin, const Var& q_hat) {
    ad::Tape& tape = *origin.v.tape();
    const Eigen::Index n = origin.cols();
    const int ch = origin.channels();
    const Dual normal = constant_dual(tape, m.replicate(1, n), ch);
    const Dual anchor = constant_dual(tape, point.replicate(1, n), ch);
    const Dual q = ad::lift(q_hat, ch);
    const Dual den = ad::dot(q, normal);
    FieldEval out;
    out.hit = (den.value().array().abs() > 1e-12).cast<double>().matrix();
    const Dual safe = ad::where(out.hit, den, constant_dual(tape, Mat::Ones(1, n), ch));
    const Dual t = -(ad::dot(origin - anchor, normal) / safe);
    out.point = origin + q * t;
    out.center = out.point - normal;
    out.radius = constant_dual(tape, Mat::Ones(1, n), ch);
    out.winner.assign(static_cast<std::size_t>(n), 0);
    return out;
  };
}

std::optional<DifferentialFrame> make_frame(const std::array<Vec3, 3>& tangents, const Vec3& normal,
                                            const Eigen::Matrix3d& normal_jacobian) {
  DifferentialFrame f;
  f.tangents = tangents;
  f.normal = normal;
  const Eigen::Matrix3d proj = Eigen::Matrix3d::Identity() - normal * normal.transpose();
  f.shape_operator = proj * normal_jacobian;
  const Eigen::Matrix3d restricted = f.shape_operator * proj;
  const Eigen::Matrix3d sym = 0.5 * (restricted + restricted.transpose());
  if (!sym.allFinite()) return std::nullopt;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(sym);
  if (es.info() != Eigen::Success) return std::nullopt;

  int drop = 0;
  for (int i = 1; i < 3; ++i) {
    if (std::abs(es.eigenvectors().col(i).dot(normal)) > std::abs(es.eigenvectors().col(drop).dot(normal))) drop = i;
  }
  int a = drop == 0 ? 1 : 0;
  int b = drop == 2 ? 1 : 2;
  if (es.eigenvalues()(a) < es.eigenvalues()(b)) std::swap(a, b);
  f.k1 = es.eigenvalues()(a);
  f.k2 = es.eigenvalues()(b);
  // Degenerate eigenspaces may return vectors with a normal component.
  Vec3 v1 = proj * es.eigenvectors().col(a);
  if (v1.norm() < 1e-12) return std::nullopt;
  v1.normalize();
  Vec3 v2 = proj * es.eigenvectors().col(b);
  v2 -= v2.dot(v1) * v1;
  if (v2.norm() < 1e-12) return std::nullopt;
  f.v1 = v1;
  f.v2 = v2.normalized();

  f.mean_curvature = 0.5 * f.shape_operator.trace();
  Eigen::Matrix<double, 3, 2> basis;
  basis << f.v1, f.v2;
  f.gaussian_curvature = (basis.transpose() * f.shape_operator * basis).determinant();
  return f;
}

SurfaceBatch evaluate_surface(const SurfaceField& field, const Mat& origins, const Mat& directions,
                              bool differential) {
  if (origins.rows() != 3 || directions.rows() != 3 || origins.cols() != directions.cols()) {
    throw InvalidInputError("origins and directions must both be 3 x N");
  }
  const Eigen::Index n = origins.cols();
  ad::Tape tape;
  const Var o = tape.constant(origins);
  const Var q = tape.constant(directions);
  const Dual od = differential ? ad::seed(o, axis_seeds(n)) : ad::lift(o, 0);
  const FieldEval f = field(od, q);

  SurfaceBatch out;
  out.point = f.point.value();
  out.center = f.center.value();
  out.radius = f.radius.value().row(0);
  out.winner = f.winner;
  out.hit.resize(static_cast<std::size_t>(n));
  out.medial_ok.assign(static_cast<std::size_t>(n), 0);
  out.medial_normal = Mat::Zero(3, n);
  for (Eigen::Index c = 0; c < n; ++c) {
    const auto k = static_cast<std::size_t>(c);
    out.hit[k] = f.hit(0, c) > 0.5 ? 1 : 0;
    if (!f.has_medial) continue;
    const Vec3 d = out.point.col(c) - out.center.col(c);
    const double len = d.norm();
    if (len > 1e-12 && std::isfinite(len)) {
      out.medial_normal.col(c) = d / len;
      out.medial_ok[k] = 1;
    }
  }
  if (!differential) return out;

  out.analytical_normal = Mat::Zero(3, n);
  out.analytical_ok.assign(static_cast<std::size_t>(n), 0);
  out.frame.resize(static_cast<std::size_t>(n));
  out.frame_ok.assign(static_cast<std::size_t>(n), 0);
  for (Eigen::Index c = 0; c < n; ++c) {
    const auto k = static_cast<std::size_t>(c);
    std::array<Vec3, 3> t;
    for (int i = 0; i < 3; ++i) t[static_cast<std::size_t>(i)] = f.point.t[static_cast<std::size_t>(i)].value().col(c);
    const Vec3 qc = directions.col(c);
    const Vec3 raw = -(qc.x() * t[1].cross(t[2]) + qc.y() * t[2].cross(t[0]) + qc.z() * t[0].cross(t[1]));
    if (raw.norm() >= 1e-9 && raw.allFinite()) {
      out.analytical_normal.col(c) = raw.normalized();
      out.analytical_ok[k] = 1;
    }
    if (!out.medial_ok[k]) continue;
    const Vec3 nrm = out.medial_normal.col(c);
    const double len = (out.point.col(c) - out.center.col(c)).norm();
    const Eigen::Matrix3d proj = Eigen::Matrix3d::Identity() - nrm * nrm.transpose();
    Eigen::Matrix3d jac;
    for (int i = 0; i < 3; ++i) {
      const auto s = static_cast<std::size_t>(i);
      const Vec3 dd = f.point.t[s].value().col(c) - f.center.t[s].value().col(c);
      jac.col(i) = proj * dd / len;
    }
    if (auto fr = make_frame(t, nrm, jac)) {
      out.frame[k] = *fr;
      out.frame_ok[k] = 1;
    }
  }
  return out;
}

namespace {

SurfaceBatch single(const SurfaceField& field, const Ray& ray) {
  const Vec3 q = unit_direction(ray);
  SurfaceBatch b = evaluate_surface(field, ray.origin, q, true);
  if (!b.hit[0]) throw InvalidInputError("ray misses the surface");
  return b;
}

}  // namespace

Vec3 analytical_normal(const SurfaceField& field, const Ray& ray) {
  const SurfaceBatch b = single(field, ray);
  if (!b.analytical_ok[0]) throw DegenerateNormalError("analytical normal has vanishing length");
  return b.analytical_normal.col(0);
}

DifferentialFrame shape_operator(const SurfaceField& field, const Ray& ray) {
  const SurfaceBatch b = single(field, ray);
  if (!b.medial_ok[0]) throw DegenerateNormalError("medial normal undefined at this hit");
  if (!b.frame_ok[0]) throw NumericalError("shape operator decomposition failed");
  return b.frame[0];
}

void TranslucencyParams::validate() const {
  if (!(epsilon > 0.0)) throw InvalidInputError("translucency epsilon must be positive");
  if (!(sharpness >= 1.0)) throw InvalidInputError("translucency sharpness must be >= 1");
  if (!(light.norm() > 0.0)) throw InvalidInputError("light direction must be nonzero");
}

double translucency_coeff(double radius, const Vec3& normal, const Vec3& q_hat, const TranslucencyParams& p) {
  const double base = q_hat.dot(p.distortion * normal - p.light.normalized());
  return std::pow(std::max(base, 0.0), p.sharpness) / (radius + p.epsilon);
}

void WardParams::validate() const {
  if (!(a1 > 0.0) || !(a2 > 0.0)) throw InvalidInputError("Ward a1 and a2 must be positive");
}

double ward_coeff(const DifferentialFrame& frame, const Vec3& to_viewer, const Vec3& to_light, const WardParams& p) {
  const Vec3& n = frame.normal;
  const Vec3 v = to_viewer.normalized();
  const Vec3 l = to_light.normalized();
  const double nl = n.dot(l), nv = n.dot(v);
  if (nl <= kWardClamp || nv <= kWardClamp) return 0.0;
  const Vec3 h = (l + v).normalized();
  const double x = h.dot(frame.v1) / p.a1, y = h.dot(frame.v2) / p.a2;
  return std::exp(-2.0 * (x * x + y * y) / (1.0 + n.dot(h))) / (4.0 * std::numbers::pi * p.a1 * p.a2 * std::sqrt(nl * nv));
}

}  // namespace marf
