#pragma once

// One batched MARF evaluation: network forward, per-candidate intersection,
// winner selection and gathering of the winner's quantities.

#include <limits>
#include <vector>

#include "marf/network.hpp"
#include "marf/ray_batch.hpp"

namespace marf {

struct Winners {
  std::vector<int> index;  // per column
  ad::Mat hit;             // 1 x N, 1 when the winner hits
};

/// Column-batched select_candidate on primal values (same metric and tie rule).
inline Winners select_winners(const ad::Mat& origin, const ad::Mat& q_hat, const std::vector<ad::Mat>& points,
                              const std::vector<ad::Mat>& hits, const std::vector<ad::Mat>& s_raw) {
  const Eigen::Index n_rays = origin.cols();
  const std::size_t n = points.size();
  Winners w;
  w.index.assign(static_cast<std::size_t>(n_rays), 0);
  w.hit = ad::Mat::Zero(1, n_rays);
  for (Eigen::Index c = 0; c < n_rays; ++c) {
    bool any_hit = false;
    for (std::size_t i = 0; i < n; ++i) any_hit = any_hit || hits[i](0, c) > 0.5;
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double m;
      if (hits[i](0, c) > 0.5) {
        m = q_hat.col(c).dot(points[i].col(c) - origin.col(c));
      } else if (any_hit) {
        m = std::numeric_limits<double>::infinity();
      } else {
        m = std::max(0.0, s_raw[i](0, c));
      }
      if (i == 0 || m < best) {
        best = m;
        arg = static_cast<int>(i);
      }
    }
    w.index[static_cast<std::size_t>(c)] = arg;
    w.hit(0, c) = any_hit ? 1.0 : 0.0;
  }
  return w;
}

/// Row indices for gather_rows picking `rows_per` consecutive rows of each winner.
inline std::vector<int> winner_rows(const std::vector<int>& winner, int rows_per) {
  std::vector<int> idx;
  idx.reserve(winner.size() * static_cast<std::size_t>(rows_per));
  for (int w : winner) {
    for (int j = 0; j < rows_per; ++j) idx.push_back(w * rows_per + j);
  }
  return idx;
}

template <class T>
struct MarfPass {
  T raw;
  AtomBlock<T> atoms;
  std::vector<BatchIntersection<T>> candidates;
  Winners winners;
  T point;     // 3 x N, winner's hit point (or projection when it misses)
  T center;    // 3 x N
  T radius;    // 1 x N
  T s_raw;     // 1 x N
};

/// Gathers a per-candidate quantity (rows_per rows each) for the given winners.
template <class T>
T gather_winner(const std::vector<T>& per_candidate, const std::vector<int>& winner, int rows_per) {
  return ad::gather_rows(ad::concat_rows(std::span<const T>(per_candidate)), winner_rows(winner, rows_per), rows_per);
}

template <class T>
MarfPass<T> run_marf(const NetworkConfig& config, const BoundParams& params, const T& origin, const T& q_hat,
                     const std::optional<ad::Var>& latent, const DropoutMasks* masks) {
  MarfPass<T> out;
  out.raw = forward_raw(config, params, embed_rays(origin, q_hat), latent, masks);
  out.atoms = split_atoms(out.raw, config.n_atoms);
  const int n = config.n_atoms;
  std::vector<ad::Mat> pts, hits, srs;
  std::vector<T> point_parts, s_parts;
  for (int i = 0; i < n; ++i) {
    auto hit = intersect_batch(origin, q_hat, out.atoms.center(i), out.atoms.radius(i));
    pts.push_back(hit.point.value());
    hits.push_back(hit.hit);
    srs.push_back(hit.signed_silhouette.value());
    point_parts.push_back(hit.point);
    s_parts.push_back(hit.signed_silhouette);
    out.candidates.push_back(std::move(hit));
  }
  out.winners = select_winners(ad::primal(origin).value(), ad::primal(q_hat).value(), pts, hits, srs);
  const auto& w = out.winners.index;
  out.point = gather_winner(point_parts, w, 3);
  out.s_raw = gather_winner(s_parts, w, 1);
  out.center = ad::gather_rows(out.atoms.centers, winner_rows(w, 3), 3);
  out.radius = ad::gather_rows(out.atoms.radii, winner_rows(w, 1), 1);
  return out;
}

}  // namespace marf
