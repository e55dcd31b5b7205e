#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "marf/marf_pass.hpp"
#include "marf/schedule.hpp"

namespace marf {

/// One supervised ray. A hit carries p_gt and n_gt; a miss carries s_gt > 0;
/// a back-face "missing" pixel carries neither.
struct SupervisionSample {
  Ray ray;
  std::optional<Vec3> p_gt;
  std::optional<Vec3> n_gt;
  std::optional<double> s_gt;
};

struct Gates {
  int hit = 0;
  int miss = 0;
};

Gates gates(const SupervisionSample& sample);

/// Column-major ray batch for one sub-image. Gate rows are 0/1.
struct RayBatch {
  ad::Mat origin;     // 3 x N
  ad::Mat direction;  // 3 x N, unit
  ad::Mat p_gt;       // 3 x N, zero where hit_gt = 0
  ad::Mat n_gt;       // 3 x N
  ad::Mat s_gt;       // 1 x N
  ad::Mat hit_gt;     // 1 x N
  ad::Mat miss_gt;    // 1 x N
  int shape_id = 0;

  Eigen::Index size() const { return origin.cols(); }
  /// Columns `cols` as a new batch.
  RayBatch select(const std::vector<int>& cols) const;
};

RayBatch make_ray_batch(std::span<const SupervisionSample> samples, int shape_id = 0);

// Individual terms. Every term is a 1x1 Var; the masks are constants.

/// mean(h * h_gt * |p - p_gt|)
ad::Var intersection_loss(const ad::Var& point, const ad::Mat& h, const RayBatch& b);

/// mean(h * h_gt * (1 - cos(n, n_gt))) with n = (p - c)/|p - c|; rays with a
/// zero-length medial normal are excluded and counted in `degenerate`.
ad::Var normal_loss(const ad::Var& point, const ad::Var& center, const ad::Mat& h, const RayBatch& b,
                    int* degenerate = nullptr);

/// L_s = mean(m_gt * (s_raw - s_gt)^2), L_h = mean(h_gt * max(0, s_raw)^2).
std::pair<ad::Var, ad::Var> silhouette_losses(const ad::Var& s_raw, const RayBatch& b);

/// mean |sg(r) + 1 - r| over every candidate radius (value 1, gradient -1/(N n)).
ad::Var maximality_loss(const ad::Var& radii);

/// Every candidate predicted from ray a is tested against ray b = partner[a].
std::pair<ad::Var, ad::Var> inscription_losses(const AtomBlock<ad::Var>& atoms, const RayBatch& b,
                                               const std::vector<int>& partner);

/// Mean squared distance of each candidate's centers to its batch centroid.
ad::Var specialization_loss(const ad::Var& centers, int n_atoms);

/// Mean of ||z_i||^2 over the distinct ids.
ad::Var latent_loss(const ad::Var& table, const std::vector<int>& shape_ids);

enum class MultiviewMode { Analytic, FiniteDifference };

struct MultiviewOptions {
  MultiviewMode mode = MultiviewMode::Analytic;
  double fd_step = 1e-4;
};

/// Multi-view loss for a MARF head: rays with h * h_gt = 1 are re-pivoted to
/// o = p_gt and the winner's ||d c/d q||^2 + ||d r/d q||^2 is averaged over the
/// whole batch. `winner` indexes candidates per column of `b`; `masks` are the
/// item's dropout masks (columns of the contributing rays are reused).
ad::Var multiview_loss(const NetworkConfig& config, const BoundParams& params, const RayBatch& b,
                       const std::vector<int>& winner, const ad::Mat& h, const DropoutMasks* masks,
                       const MultiviewOptions& opts = {});

/// Randomness consumed by one batch item, drawn by the caller.
struct ItemRandom {
  DropoutMasks masks;           // empty: no dropout
  std::vector<int> partner;     // permutation of the item's rays
};

ItemRandom sample_item_random(const NetworkConfig& config, Eigen::Index n_rays, bool dropout, CounterRng& rng);

struct LossOptions {
  MultiviewOptions multiview;
  /// Skip L_mv while its weight is zero (reported as 0); it is the costly term.
  bool skip_zero_weight = true;
};

struct LossBreakdown {
  std::array<double, kTermCount> value{};
  LossWeights weight{};
  double total = 0.0;
  int degenerate_normals = 0;
  /// Fraction of rays whose winner hits, for logging.
  double hit_fraction = 0.0;
};

struct LossResult {
  std::array<std::optional<ad::Var>, kTermCount> terms;
  ad::Var total;
  LossBreakdown breakdown;
};

/// Total MARF loss for a batch of sub-images: every term except L_z is computed
/// per item and averaged over the items; L_z is taken over the distinct shapes.
LossResult marf_loss(ad::Tape& tape, const NetworkConfig& config, const BoundParams& params,
                     std::span<const RayBatch> items, std::span<const ItemRandom> random,
                     const LossWeights& weights, const LossOptions& opts = {});

// PRIF baseline.

struct PrifLossWeights {
  double bce = 1.0;
  double displacement = 2.0;
  /// Analytical-normal cosine loss (0 disables).
  double normal = 0.0;
  /// ||d p/d q||^2 at o = p_gt (0 disables).
  double multiview = 0.0;
};

struct PrifLossBreakdown {
  double bce = 0.0, displacement = 0.0, normal = 0.0, multiview = 0.0, total = 0.0;
};

struct PrifLossResult {
  ad::Var total;
  PrifLossBreakdown breakdown;
};

PrifLossResult prif_loss(ad::Tape& tape, const NetworkConfig& config, const BoundParams& params,
                         std::span<const RayBatch> items, std::span<const ItemRandom> random,
                         const PrifLossWeights& weights);

/// PRIF surface point foot + t q and hit logit for a batch (templated for normals).
template <class T>
std::pair<T, T> prif_points(const NetworkConfig& config, const BoundParams& params, const T& origin, const T& q_hat,
                            const std::optional<ad::Var>& latent, const DropoutMasks* masks) {
  const T x = embed_rays(origin, q_hat);
  const T raw = forward_raw(config, params, x, latent, masks);
  const T foot = ad::rows(x, 6, 3);
  return {foot + q_hat * ad::rows(raw, 0, 1), ad::rows(raw, 1, 1)};
}

/// Surface normal from the three tangents dp/do_i:
/// n' = -(q_x t_y x t_z + q_y t_z x t_x + q_z t_x x t_y), unnormalized.
ad::Var normal_from_tangents(const ad::Dual& point, const ad::Var& q_hat);

}  // namespace marf
