#include "marf/gradcheck.hpp"

#include <cmath>

#include "marf/error.hpp"

namespace marf {

using ad::Mat;
using ad::Var;

RayBatch sphere_supervision(int n_rays, double radius, std::uint64_t seed, int shape_id) {
  CounterRng rng(seed, 77);
  std::vector<SupervisionSample> samples;
  for (int k = 0; k < n_rays; ++k) {
    Vec3 a(rng.normal(), rng.normal(), rng.normal());
    a = 2.0 * a.normalized();
    Vec3 target(rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8));
    SupervisionSample s;
    s.ray = {a, (target - a).normalized()};
    if (k % 7 == 6) {
      samples.push_back(s);
      continue;
    }
    const auto hit = intersect_atom(s.ray, {Vec3::Zero(), radius});
    if (hit.hit) {
      s.p_gt = hit.point;
      s.n_gt = hit.point.normalized();
    } else {
      s.s_gt = hit.silhouette;
    }
    samples.push_back(s);
  }
  return make_ray_batch(samples, shape_id);
}

double max_relative_error(const std::vector<Mat>& analytic, const std::vector<Mat>& numeric) {
  double scale = 1e-12;
  for (const auto& m : numeric) scale = std::max(scale, m.cwiseAbs().maxCoeff());
  double worst = 0.0;
  for (std::size_t k = 0; k < analytic.size(); ++k) {
    for (Eigen::Index i = 0; i < analytic[k].size(); ++i) {
      const double fd = numeric[k].data()[i];
      const double denom = std::max(std::abs(fd), 1e-3 * scale);
      worst = std::max(worst, std::abs(analytic[k].data()[i] - fd) / denom);
    }
  }
  return worst;
}

namespace {

struct Problem {
  NetworkConfig config;
  NetworkParams params;
  std::vector<RayBatch> items;
  std::vector<ItemRandom> random;
  LossWeights weights{};
  LossOptions opts;
};

Problem make_problem(const std::string& term, const GradcheckOptions& o) {
  Problem pr;
  pr.config.hidden_layers = 2;
  pr.config.width = 8;
  pr.config.n_atoms = 2;
  pr.config.dropout_rate = 0.1;
  pr.config.latent_dim = 2;
  pr.config.n_shapes = 2;
  pr.config.medial_init = false;
  pr.params = init_params(pr.config, o.seed);
  CounterRng rng(o.seed, 5);
  for (int k = 0; k < o.items; ++k) {
    pr.items.push_back(sphere_supervision(o.rays_per_item, 0.5, o.seed * 31 + static_cast<std::uint64_t>(k), k % 2));
    pr.random.push_back(sample_item_random(pr.config, o.rays_per_item, true, rng));
  }
  pr.opts.multiview.mode = o.mv_mode;
  if (term == "total") {
    pr.weights = LossSchedule().at(1000.0);
  } else {
    const std::size_t i = term_index(term);
    if (i >= kTermCount) throw InvalidInputError("unknown loss term '" + term + "'");
    pr.weights.fill(0.0);
    pr.weights[i] = 1.0;
  }
  return pr;
}

double evaluate(const Problem& pr, const NetworkParams& params, std::vector<Mat>* grad, std::vector<Mat>* frozen) {
  ad::Tape tape;
  if (!grad && frozen) tape.freeze_stop_gradients(*frozen);
  const BoundParams b = bind_params(tape, params, true);
  const auto res = marf_loss(tape, pr.config, b, pr.items, pr.random, pr.weights, pr.opts);
  if (grad) {
    *grad = tape.gradient(res.total, b.all);
    if (frozen) *frozen = tape.stop_gradient_values();
  }
  return res.total.scalar();
}

}  // namespace

TermCheck check_term(const std::string& term, const GradcheckOptions& o) {
  const Problem pr = make_problem(term, o);
  TermCheck out;
  out.term = term;
  out.tolerance = term == "mv" ? o.mv_tolerance : o.tolerance;

  std::vector<Mat> analytic, frozen;
  out.value = evaluate(pr, pr.params, &analytic, &frozen);
  for (auto& g : analytic) g *= 1.0 + o.perturb;

  NetworkParams work = pr.params;
  auto refs = work.tensors();
  std::vector<Mat> numeric;
  for (auto& ref : refs) {
    Mat& m = *ref.tensor;
    Mat g(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double x0 = m.data()[i];
      m.data()[i] = x0 + o.step;
      const double up = evaluate(pr, work, nullptr, &frozen);
      m.data()[i] = x0 - o.step;
      const double down = evaluate(pr, work, nullptr, &frozen);
      m.data()[i] = x0;
      g.data()[i] = (up - down) / (2.0 * o.step);
    }
    out.coordinates += static_cast<std::size_t>(m.size());
    numeric.push_back(std::move(g));
  }
  out.max_rel_error = max_relative_error(analytic, numeric);
  out.pass = std::isfinite(out.max_rel_error) && out.max_rel_error < out.tolerance;
  return out;
}

std::vector<TermCheck> check_all_terms(const GradcheckOptions& opts) {
  std::vector<TermCheck> out;
  for (auto name : kTermNames) out.push_back(check_term(std::string(name), opts));
  return out;
}

}  // namespace marf
