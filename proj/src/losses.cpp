#include "marf/losses.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "marf/error.hpp"

namespace marf {

using ad::Dual;
using ad::Mat;
using ad::Var;

Gates gates(const SupervisionSample& sample) {
  Gates g;
  g.hit = sample.p_gt.has_value() ? 1 : 0;
  g.miss = (!g.hit && sample.s_gt && *sample.s_gt > 0.0) ? 1 : 0;
  return g;
}

RayBatch RayBatch::select(const std::vector<int>& cols) const {
  RayBatch out;
  out.shape_id = shape_id;
  const auto n = static_cast<Eigen::Index>(cols.size());
  out.origin.resize(3, n);
  out.direction.resize(3, n);
  out.p_gt.resize(3, n);
  out.n_gt.resize(3, n);
  out.s_gt.resize(1, n);
  out.hit_gt.resize(1, n);
  out.miss_gt.resize(1, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::Index c = cols[static_cast<std::size_t>(j)];
    out.origin.col(j) = origin.col(c);
    out.direction.col(j) = direction.col(c);
    out.p_gt.col(j) = p_gt.col(c);
    out.n_gt.col(j) = n_gt.col(c);
    out.s_gt(0, j) = s_gt(0, c);
    out.hit_gt(0, j) = hit_gt(0, c);
    out.miss_gt(0, j) = miss_gt(0, c);
  }
  return out;
}

RayBatch make_ray_batch(std::span<const SupervisionSample> samples, int shape_id) {
  const auto n = static_cast<Eigen::Index>(samples.size());
  RayBatch b;
  b.shape_id = shape_id;
  b.origin.resize(3, n);
  b.direction.resize(3, n);
  b.p_gt = Mat::Zero(3, n);
  b.n_gt = Mat::Zero(3, n);
  b.s_gt = Mat::Zero(1, n);
  b.hit_gt = Mat::Zero(1, n);
  b.miss_gt = Mat::Zero(1, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto& s = samples[static_cast<std::size_t>(j)];
    const Gates g = gates(s);
    if (g.hit && !s.n_gt) throw InvalidInputError("hit sample without a normal");
    b.origin.col(j) = s.ray.origin;
    b.direction.col(j) = unit_direction(s.ray);
    if (g.hit) {
      b.p_gt.col(j) = *s.p_gt;
      b.n_gt.col(j) = s.n_gt->normalized();
    }
    if (g.miss) b.s_gt(0, j) = *s.s_gt;
    b.hit_gt(0, j) = g.hit;
    b.miss_gt(0, j) = g.miss;
  }
  return b;
}


namespace {

ad::Tape& tape_of(const Var& v) { return *v.tape(); }

Mat product(const Mat& a, const Mat& b) { return a.cwiseProduct(b); }

/// 3 x n matrices whose row j is one: the coordinate axes as tangent seeds.
std::vector<Mat> axis_seeds(Eigen::Index n) {
  std::vector<Mat> out;
  for (int j = 0; j < 3; ++j) {
    Mat e = Mat::Zero(3, n);
    e.row(j).setOnes();
    out.push_back(std::move(e));
  }
  return out;
}

DropoutMasks select_mask_columns(const DropoutMasks& masks, const std::vector<int>& cols) {
  DropoutMasks out;
  for (const Mat& m : masks) {
    Mat s(m.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) s.col(static_cast<Eigen::Index>(j)) = m.col(cols[j]);
    out.push_back(std::move(s));
  }
  return out;
}

std::optional<Var> item_latent(const BoundParams& params, int shape_id, Eigen::Index n) {
  if (!params.latents) return std::nullopt;
  return latent_columns(params, std::vector<int>(static_cast<std::size_t>(n), shape_id));
}

std::vector<int> gated_columns(const Mat& gate) {
  std::vector<int> cols;
  for (Eigen::Index c = 0; c < gate.cols(); ++c) {
    if (gate(0, c) > 0.5) cols.push_back(static_cast<int>(c));
  }
  return cols;
}

Mat permute_columns(const Mat& m, const std::vector<int>& partner) {
  Mat out(m.rows(), m.cols());
  for (Eigen::Index a = 0; a < m.cols(); ++a) out.col(a) = m.col(partner[static_cast<std::size_t>(a)]);
  return out;
}

}  // namespace

Var intersection_loss(const Var& point, const Mat& h, const RayBatch& b) {
  ad::Tape& tape = tape_of(point);
  const Var dist = ad::norm(point - tape.constant(b.p_gt));
  return ad::mean(ad::mask_mul(dist, product(h, b.hit_gt)));
}

Var normal_loss(const Var& point, const Var& center, const Mat& h, const RayBatch& b, int* degenerate) {
  ad::Tape& tape = tape_of(point);
  const Var d = point - center;
  const Mat len = d.value().colwise().norm();
  Mat valid = product(h, b.hit_gt);
  int bad = 0;
  for (Eigen::Index c = 0; c < valid.cols(); ++c) {
    if (valid(0, c) > 0.5 && !(len(0, c) > 0.0)) {
      valid(0, c) = 0.0;
      ++bad;
    }
  }
  if (degenerate) *degenerate += bad;
  // Excluded columns see a fixed unit vector so no NaN reaches the tape.
  Mat fallback = Mat::Zero(3, d.cols());
  fallback.row(2).setOnes();
  const Var safe = ad::where(valid, d, tape.constant(fallback));
  const Var cos = ad::dot(ad::normalize(safe), tape.constant(b.n_gt));
  return ad::mean(ad::mask_mul(1.0 - cos, valid));
}

std::pair<Var, Var> silhouette_losses(const Var& s_raw, const RayBatch& b) {
  ad::Tape& tape = tape_of(s_raw);
  const Var ls = ad::mean(ad::mask_mul(ad::square(s_raw - tape.constant(b.s_gt)), b.miss_gt));
  const Var lh = ad::mean(ad::mask_mul(ad::square(ad::clamp_min(s_raw, 0.0)), b.hit_gt));
  return {ls, lh};
}

Var maximality_loss(const Var& radii) {
  return ad::mean(ad::abs(ad::stop_gradient(radii) + 1.0 - radii));
}

std::pair<Var, Var> inscription_losses(const AtomBlock<Var>& atoms, const RayBatch& b,
                                       const std::vector<int>& partner) {
  ad::Tape& tape = tape_of(atoms.centers);
  const Eigen::Index n_rays = b.size();
  if (static_cast<Eigen::Index>(partner.size()) != n_rays) throw InvalidInputError("partner size mismatch");
  const Mat o_b = permute_columns(b.origin, partner);
  const Mat q_b = permute_columns(b.direction, partner);
  const Mat p_b = permute_columns(b.p_gt, partner);
  const Mat s_b = permute_columns(b.s_gt, partner);
  const Mat hit_b = permute_columns(b.hit_gt, partner);
  const Mat miss_b = permute_columns(b.miss_gt, partner);
  const Var o = tape.constant(o_b);
  const Var q = tape.constant(q_b);
  const Var p_gt = tape.constant(p_b);
  const Var s_gt = tape.constant(s_b);

  const int n = static_cast<int>(atoms.radii.rows());
  Var ih = tape.constant(0.0);
  Var im = tape.constant(0.0);
  for (int i = 0; i < n; ++i) {
    const auto x = intersect_batch(o, q, atoms.center(i), atoms.radius(i));
    const Var depth = ad::clamp_min(ad::dot(q, p_gt - x.point), 0.0);
    ih = ih + ad::sum(ad::mask_mul(depth, product(hit_b, x.hit)));
    const Var gap = ad::clamp_min(s_gt - x.signed_silhouette, 0.0);
    im = im + ad::sum(ad::mask_mul(ad::square(gap), miss_b));
  }
  const double denom = static_cast<double>(n_rays) * n;
  return {ih / denom, im / denom};
}

Var specialization_loss(const Var& centers, int n_atoms) {
  const double n_rays = static_cast<double>(centers.cols());
  const Var centroid = ad::sum_cols(centers) / n_rays;
  return ad::sum(ad::square(centers - centroid)) / (n_rays * n_atoms);
}

Var latent_loss(const Var& table, const std::vector<int>& shape_ids) {
  const std::set<int> distinct(shape_ids.begin(), shape_ids.end());
  if (distinct.empty()) throw InvalidInputError("latent loss needs at least one shape id");
  Mat pick = Mat::Zero(table.cols(), static_cast<Eigen::Index>(distinct.size()));
  Eigen::Index j = 0;
  for (int id : distinct) {
    if (id < 0 || id >= table.cols()) throw InvalidInputError("shape id out of range");
    pick(id, j++) = 1.0;
  }
  const Var z = ad::matmul(table, tape_of(table).constant(std::move(pick)));
  return ad::sum(ad::square(z)) / static_cast<double>(distinct.size());
}

Var multiview_loss(const NetworkConfig& config, const BoundParams& params, const RayBatch& b,
                   const std::vector<int>& winner, const Mat& h, const DropoutMasks* masks,
                   const MultiviewOptions& opts) {
  ad::Tape& tape = tape_of(params.all.front());
  const std::vector<int> cols = gated_columns(product(h, b.hit_gt));
  if (cols.empty()) return tape.constant(0.0);
  const RayBatch sub = b.select(cols);
  const auto m = static_cast<Eigen::Index>(cols.size());
  std::vector<int> w;
  for (int c : cols) w.push_back(winner[static_cast<std::size_t>(c)]);
  const std::optional<Var> latent = item_latent(params, b.shape_id, m);
  DropoutMasks sub_masks;
  if (masks && !masks->empty()) sub_masks = select_mask_columns(*masks, cols);
  const DropoutMasks* mp = sub_masks.empty() ? nullptr : &sub_masks;
  const auto center_rows = winner_rows(w, 3);
  const auto radius_rows = winner_rows(w, 1);
  const double n_rays = static_cast<double>(b.size());

  const Var pivot = tape.constant(sub.p_gt);
  Var total = tape.constant(0.0);
  if (opts.mode == MultiviewMode::Analytic) {
    const Dual q = ad::seed(tape.constant(sub.direction), axis_seeds(m));
    const Dual o = ad::lift(pivot, 3);
    const Dual raw = forward_raw(config, params, embed_rays(o, q), latent, mp);
    const auto atoms = split_atoms(raw, config.n_atoms);
    const Dual c = ad::gather_rows(atoms.centers, center_rows, 3);
    const Dual r = ad::gather_rows(atoms.radii, radius_rows, 1);
    for (int j = 0; j < 3; ++j) {
      total = total + ad::sum(ad::square(c.t[static_cast<std::size_t>(j)])) +
              ad::sum(ad::square(r.t[static_cast<std::size_t>(j)]));
    }
  } else {
    const auto seeds = axis_seeds(m);
    const double step = opts.fd_step;
    for (int j = 0; j < 3; ++j) {
      auto eval = [&](double sign) {
        const Var q = tape.constant(sub.direction + sign * step * seeds[static_cast<std::size_t>(j)]);
        const Var raw = forward_raw(config, params, embed_rays(pivot, q), latent, mp);
        const auto atoms = split_atoms(raw, config.n_atoms);
        return std::pair{ad::gather_rows(atoms.centers, center_rows, 3), ad::gather_rows(atoms.radii, radius_rows, 1)};
      };
      const auto [c_up, r_up] = eval(1.0);
      const auto [c_dn, r_dn] = eval(-1.0);
      total = total + ad::sum(ad::square((c_up - c_dn) / (2.0 * step))) +
              ad::sum(ad::square((r_up - r_dn) / (2.0 * step)));
    }
  }
  return total / n_rays;
}

ItemRandom sample_item_random(const NetworkConfig& config, Eigen::Index n_rays, bool dropout, CounterRng& rng) {
  ItemRandom r;
  if (dropout && config.dropout_rate > 0.0) r.masks = sample_dropout(config, n_rays, rng);
  r.partner = rng.permutation(static_cast<int>(n_rays));
  return r;
}

LossResult marf_loss(ad::Tape& tape, const NetworkConfig& config, const BoundParams& params,
                     std::span<const RayBatch> items, std::span<const ItemRandom> random,
                     const LossWeights& weights, const LossOptions& opts) {
  if (config.head != Head::Marf) throw InvalidInputError("marf_loss needs a MARF head");
  if (items.empty() || items.size() != random.size()) throw InvalidInputError("items and randomness must match");

  LossResult res;
  std::array<std::optional<Var>, kTermCount> acc;
  auto add = [&](Term t, const Var& v) {
    auto& slot = acc[term_index(t)];
    slot = slot ? *slot + v : v;
  };
  const bool want_mv = !(opts.skip_zero_weight && weights[term_index(Term::Mv)] == 0.0);
  double hits = 0.0, rays = 0.0;
  std::vector<int> ids;

  for (std::size_t k = 0; k < items.size(); ++k) {
    const RayBatch& b = items[k];
    const ItemRandom& rnd = random[k];
    const DropoutMasks* masks = rnd.masks.empty() ? nullptr : &rnd.masks;
    ids.push_back(b.shape_id);
    const auto latent = item_latent(params, b.shape_id, b.size());
    const auto pass = run_marf(config, params, tape.constant(b.origin), tape.constant(b.direction), latent, masks);
    const Mat& h = pass.winners.hit;
    hits += h.sum();
    rays += static_cast<double>(b.size());

    add(Term::P, intersection_loss(pass.point, h, b));
    add(Term::N, normal_loss(pass.point, pass.center, h, b, &res.breakdown.degenerate_normals));
    const auto [ls, lh] = silhouette_losses(pass.s_raw, b);
    add(Term::S, ls);
    add(Term::H, lh);
    add(Term::R, maximality_loss(pass.atoms.radii));
    const auto [ih, im] = inscription_losses(pass.atoms, b, rnd.partner);
    add(Term::Ih, ih);
    add(Term::Im, im);
    add(Term::Sigma, specialization_loss(pass.atoms.centers, config.n_atoms));
    if (want_mv) add(Term::Mv, multiview_loss(config, params, b, pass.winners.index, h, masks, opts.multiview));
  }

  const double inv = 1.0 / static_cast<double>(items.size());
  for (std::size_t i = 0; i < kTermCount; ++i) {
    if (acc[i]) res.terms[i] = *acc[i] * inv;
  }
  if (params.latents) res.terms[term_index(Term::Z)] = latent_loss(*params.latents, ids);

  Var total = tape.constant(0.0);
  for (std::size_t i = 0; i < kTermCount; ++i) {
    res.breakdown.weight[i] = weights[i];
    if (!res.terms[i]) continue;
    res.breakdown.value[i] = res.terms[i]->scalar();
    if (weights[i] != 0.0) total = total + *res.terms[i] * weights[i];
  }
  res.total = total;
  res.breakdown.total = total.scalar();
  res.breakdown.hit_fraction = rays > 0.0 ? hits / rays : 0.0;
  return res;
}

Var normal_from_tangents(const Dual& point, const Var& q_hat) {
  if (point.channels() != 3) throw InvalidInputError("normal needs three tangent channels");
  const Var& tx = point.t[0];
  const Var& ty = point.t[1];
  const Var& tz = point.t[2];
  const Var n = ad::rows(q_hat, 0, 1) * ad::cross(ty, tz) + ad::rows(q_hat, 1, 1) * ad::cross(tz, tx) +
                ad::rows(q_hat, 2, 1) * ad::cross(tx, ty);
  return -n;
}

PrifLossResult prif_loss(ad::Tape& tape, const NetworkConfig& config, const BoundParams& params,
                         std::span<const RayBatch> items, std::span<const ItemRandom> random,
                         const PrifLossWeights& weights) {
  if (config.head != Head::Prif) throw InvalidInputError("prif_loss needs a PRIF head");
  if (items.empty() || items.size() != random.size()) throw InvalidInputError("items and randomness must match");

  Var bce = tape.constant(0.0), disp = tape.constant(0.0), nrm = tape.constant(0.0), mv = tape.constant(0.0);
  for (std::size_t k = 0; k < items.size(); ++k) {
    const RayBatch& b = items[k];
    const DropoutMasks* masks = random[k].masks.empty() ? nullptr : &random[k].masks;
    const auto latent = item_latent(params, b.shape_id, b.size());
    const Var o = tape.constant(b.origin);
    const Var q = tape.constant(b.direction);
    const auto [point, logit] = prif_points(config, params, o, q, latent, masks);

    // Binary cross-entropy with logits on labelled rays: softplus(x) - y x.
    const Mat labelled = b.hit_gt + b.miss_gt;
    const Var softplus = ad::clamp_min(logit, 0.0) + ad::log(1.0 + ad::exp(-ad::abs(logit)));
    const Var per_ray = softplus - ad::mask_mul(logit, b.hit_gt);
    bce = bce + ad::mean(ad::mask_mul(per_ray, labelled));
    disp = disp + ad::mean(ad::mask_mul(ad::norm(point - tape.constant(b.p_gt)), b.hit_gt));

    const Mat h = (logit.value().array() > 0.0).cast<double>().matrix();
    if (weights.normal != 0.0) {
      const Dual od = ad::seed(o, axis_seeds(b.size()));
      const Dual qd = ad::lift(q, 3);
      const auto [pd, ld] = prif_points(config, params, od, qd, latent, masks);
      const Var n = normal_from_tangents(pd, q);
      const Mat len = n.value().colwise().norm();
      Mat valid = product(h, b.hit_gt);
      for (Eigen::Index c = 0; c < valid.cols(); ++c) {
        if (!(len(0, c) > 1e-12)) valid(0, c) = 0.0;
      }
      Mat fallback = Mat::Zero(3, b.size());
      fallback.row(2).setOnes();
      const Var cos = ad::dot(ad::normalize(ad::where(valid, n, tape.constant(fallback))), tape.constant(b.n_gt));
      nrm = nrm + ad::mean(ad::mask_mul(1.0 - cos, valid));
    }
    if (weights.multiview != 0.0) {
      const std::vector<int> cols = gated_columns(product(h, b.hit_gt));
      if (!cols.empty()) {
        const RayBatch sub = b.select(cols);
        const auto m = static_cast<Eigen::Index>(cols.size());
        DropoutMasks sub_masks;
        if (masks) sub_masks = select_mask_columns(*masks, cols);
        const Dual qd = ad::seed(tape.constant(sub.direction), axis_seeds(m));
        const Dual od = ad::lift(tape.constant(sub.p_gt), 3);
        const auto [pd, ld] =
            prif_points(config, params, od, qd, item_latent(params, b.shape_id, m), masks ? &sub_masks : nullptr);
        Var s = tape.constant(0.0);
        for (const Var& t : pd.t) s = s + ad::sum(ad::square(t));
        mv = mv + s / static_cast<double>(b.size());
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(items.size());
  PrifLossResult res;
  res.total = (bce * weights.bce + disp * weights.displacement + nrm * weights.normal + mv * weights.multiview) * inv;
  res.breakdown.bce = bce.scalar() * inv;
  res.breakdown.displacement = disp.scalar() * inv;
  res.breakdown.normal = nrm.scalar() * inv;
  res.breakdown.multiview = mv.scalar() * inv;
  res.breakdown.total = res.total.scalar();
  return res;
}

}  // namespace marf
