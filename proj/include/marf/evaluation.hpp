#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "marf/shading.hpp"
#include "marf/shapes.hpp"

namespace marf {

struct OrientedPointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
};

struct ProtocolConfig {
  int viewpoints = 200;
  int ray_budget = 10000;
  int samples = 3000;
  std::uint64_t seed = 0;

  static ProtocolConfig desk() { return {}; }
  static ProtocolConfig paper() { return {4000, 100000, 30000, 0}; }
  void validate() const;
};

/// Chords between viewpoints on the unit sphere.
struct ProtocolRays {
  ad::Mat origins;     // 3 x N, the start viewpoint
  ad::Mat directions;  // 3 x N, unit, toward the end viewpoint
  ad::Mat ends;        // 3 x N
  Eigen::Index size() const { return origins.cols(); }
};

/// Fibonacci viewpoints; unordered pairs drawn uniformly without replacement up
/// to `budget` (all pairs when fewer exist), each oriented by a fair coin.
ProtocolRays protocol_rays(int viewpoint_count, int budget, std::uint64_t seed);

struct Classification {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0.0, recall = 0.0, iou = 0.0;
};

/// Counts over paired flags. A ratio with an empty denominator is 1 when both
/// hit sets are empty and 0 otherwise.
Classification classification_metrics(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

/// Mean nearest distance U->V plus mean V->U. Throws InvalidInputError when
/// either cloud is empty.
double chamfer(std::span<const Vec3> u, std::span<const Vec3> v);

struct CosineResult {
  double value = 0.0;  // raw / 2, in [-1, 1]
  double raw = 0.0;    // the two-directional sum
};

CosineResult cosine_metric(const OrientedPointCloud& u, const OrientedPointCloud& v);

/// Per-ray answers of a predictor or of the ground truth.
struct Predictions {
  std::vector<std::uint8_t> hit;
  ad::Mat point;  // 3 x N
  std::optional<ad::Mat> medial_normal;
  std::vector<std::uint8_t> medial_ok;
  std::optional<ad::Mat> analytical_normal;
  std::vector<std::uint8_t> analytical_ok;
};

/// Field evaluation in chunks; `differential` adds the analytical normals.
Predictions predict_field(const SurfaceField& field, const ProtocolRays& rays, bool medial, bool differential,
                          int chunk = 2048);
/// Exact casts; the geometric normal fills the analytical slot.
Predictions predict_shape(const Shape& shape, const ProtocolRays& rays);

struct EvalReport {
  Classification cls;
  double cd = 0.0;
  std::optional<CosineResult> cos_medial;
  std::optional<CosineResult> cos_analytical;
  std::int64_t rays = 0;
  std::int64_t samples = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> notes;

  std::string to_json() const;
};

EvalReport evaluate(const Predictions& pred, const Predictions& gt, const ProtocolConfig& config);

/// Network against the exact shape. MARF heads report both COS variants.
EvalReport evaluate_network(const NetworkParams& params, const Shape& shape, const ProtocolConfig& config,
                            const std::optional<Eigen::VectorXd>& latent = std::nullopt);
EvalReport evaluate_shape(const Shape& predicted, const Shape& truth, const ProtocolConfig& config);

/// Appends one row keyed by (checkpoint, shape, seed); writes the header first
/// when the file is new.
void append_results_csv(const std::string& path, const std::string& checkpoint, const std::string& shape,
                        const EvalReport& report);

}  // namespace marf
