#pragma once

// Finite-difference verification of every loss term on a small network.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "marf/losses.hpp"

namespace marf {

/// Rays around an analytic sphere of radius `radius` at the origin with exact
/// hit/normal/silhouette supervision; every 7th ray is marked missing.
RayBatch sphere_supervision(int n_rays, double radius, std::uint64_t seed, int shape_id = 0);

struct GradcheckOptions {
  std::uint64_t seed = 0;
  int rays_per_item = 16;
  int items = 2;
  double step = 1e-5;
  /// Relative tolerance; the multi-view term uses `mv_tolerance`.
  double tolerance = 1e-4;
  double mv_tolerance = 5e-4;
  /// Scales the reverse-mode gradient by (1 + perturb) to prove the check can fail.
  double perturb = 0.0;
  MultiviewMode mv_mode = MultiviewMode::Analytic;
};

struct TermCheck {
  std::string term;
  double value = 0.0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t coordinates = 0;
  bool pass = false;
};

/// Worst per-coordinate error relative to |fd|, floored at 1e-3 of the largest |fd|.
double max_relative_error(const std::vector<ad::Mat>& analytic, const std::vector<ad::Mat>& numeric);

/// Checks one named term ("p", "n", ..., "z") or, with "total", the weighted sum
/// at the fully eased-in schedule.
TermCheck check_term(const std::string& term, const GradcheckOptions& opts = {});

std::vector<TermCheck> check_all_terms(const GradcheckOptions& opts = {});

}  // namespace marf
