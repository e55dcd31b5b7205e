#include <cmath>

#include "doctest.h"
#include "fd.hpp"
#include "marf/error.hpp"
#include "marf/gradcheck.hpp"
#include "marf/losses.hpp"

using namespace marf;
using ad::Mat;
using ad::Var;

namespace {

RayBatch single_ray(const Vec3& o, const Vec3& q) {
  SupervisionSample s;
  s.ray = {o, q};
  return make_ray_batch(std::span<const SupervisionSample>(&s, 1));
}

Mat ones(Eigen::Index n) { return Mat::Ones(1, n); }

AtomBlock<Var> atoms_of(ad::Tape& tape, const std::vector<MedialAtom>& per_ray_atoms, int n_rays) {
  // The same n atoms predicted for every ray.
  const auto n = static_cast<Eigen::Index>(per_ray_atoms.size());
  Mat c(3 * n, n_rays), r(n, n_rays);
  for (int k = 0; k < n_rays; ++k) {
    for (Eigen::Index i = 0; i < n; ++i) {
      c.block(3 * i, k, 3, 1) = per_ray_atoms[static_cast<std::size_t>(i)].center;
      r(i, k) = per_ray_atoms[static_cast<std::size_t>(i)].radius;
    }
  }
  return {tape.leaf(c), tape.leaf(r)};
}

}  // namespace

TEST_SUITE("loss_suite") {
  TEST_CASE("gates") {
    SupervisionSample hit;
    hit.p_gt = Vec3::Zero();
    hit.n_gt = Vec3::UnitZ();
    CHECK(gates(hit).hit == 1);
    CHECK(gates(hit).miss == 0);
    SupervisionSample miss;
    miss.s_gt = 0.3;
    CHECK(gates(miss).hit == 0);
    CHECK(gates(miss).miss == 1);
    const SupervisionSample missing;
    CHECK(gates(missing).hit == 0);
    CHECK(gates(missing).miss == 0);
  }

  TEST_CASE("intersection loss") {
    ad::Tape tape;
    RayBatch b = single_ray({0, 0, -2}, {0, 0, 1});
    b.p_gt.col(0) = Vec3(0, 0, -0.5);
    b.hit_gt(0, 0) = 1;
    CHECK(intersection_loss(tape.constant(b.p_gt), ones(1), b).scalar() == 0.0);
    const Var p = tape.constant(Mat(Vec3(0, 0, -0.6)));
    CHECK(intersection_loss(p, ones(1), b).scalar() == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(intersection_loss(p, Mat::Zero(1, 1), b).scalar() == 0.0);
  }

  TEST_CASE("normal loss") {
    ad::Tape tape;
    RayBatch b = single_ray({0, 0, -2}, {0, 0, 1});
    b.hit_gt(0, 0) = 1;
    b.n_gt.col(0) = Vec3(0, 0, -1);
    const Var c = tape.constant(Mat(Vec3::Zero()));
    CHECK(normal_loss(tape.constant(Mat(Vec3(0, 0, -0.5))), c, ones(1), b).scalar() == doctest::Approx(0.0));
    CHECK(normal_loss(tape.constant(Mat(Vec3(0, 0, 0.5))), c, ones(1), b).scalar() == doctest::Approx(2.0));
    CHECK(normal_loss(tape.constant(Mat(Vec3(0.5, 0, 0))), c, ones(1), b).scalar() == doctest::Approx(1.0));
    int degenerate = 0;
    CHECK(normal_loss(c, c, ones(1), b, &degenerate).scalar() == 0.0);
    CHECK(degenerate == 1);
  }

  TEST_CASE("silhouette losses") {
    ad::Tape tape;
    RayBatch b = single_ray({0, 0, -2}, {0, 0, 1});
    b.miss_gt(0, 0) = 1;
    b.s_gt(0, 0) = 0.5;
    CHECK(silhouette_losses(tape.constant(0.5), b).first.scalar() == 0.0);
    CHECK(silhouette_losses(tape.constant(-0.1), b).first.scalar() == doctest::Approx(0.36));
    b.miss_gt(0, 0) = 0;
    b.hit_gt(0, 0) = 1;
    const auto [ls, lh] = silhouette_losses(tape.constant(0.2), b);
    CHECK(ls.scalar() == 0.0);
    CHECK(lh.scalar() == doctest::Approx(0.04));
    CHECK(silhouette_losses(tape.constant(-0.3), b).second.scalar() == 0.0);
  }

  TEST_CASE("maximality loss") {
    ad::Tape tape;
    Mat r(3, 4);
    r << 0.1, 0.5, 2.0, 0.3, 0.7, 0.01, 1.5, 0.9, 0.2, 0.4, 0.6, 0.8;
    const Var radii = tape.leaf(r);
    const Var l = maximality_loss(radii);
    CHECK(l.scalar() == 1.0);
    const Mat g = tape.gradient(l, std::vector<Var>{radii})[0];
    for (Eigen::Index i = 0; i < g.size(); ++i) CHECK(g.data()[i] == doctest::Approx(-1.0 / 12.0).epsilon(1e-15));
    // One descent step with rate eta grows every radius by eta * lambda_r / (N n).
    const double eta = 0.1, lambda = 5e-4;
    const Mat stepped = r - eta * lambda * g;
    CHECK(((stepped - r).array() - eta * lambda / 12.0).abs().maxCoeff() < 1e-14);
  }

  TEST_CASE("inscription losses") {
    ad::Tape tape;
    // Ray b looks down +z and hits the target surface at z = -0.5.
    SupervisionSample hit_sample;
    hit_sample.ray = {{0, 0, -2}, {0, 0, 1}};
    hit_sample.p_gt = Vec3(0, 0, -0.5);
    hit_sample.n_gt = Vec3(0, 0, -1);
    const RayBatch b = make_ray_batch(std::span<const SupervisionSample>(&hit_sample, 1));

    // Atom front at z = -0.6 protrudes 0.1 in front of the target hit.
    auto atoms = atoms_of(tape, {{{0, 0, -0.4}, 0.2}}, 1);
    auto [ih, im] = inscription_losses(atoms, b, {0});
    CHECK(ih.scalar() == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(im.scalar() == 0.0);

    // Inside the shape: no penalty.
    atoms = atoms_of(tape, {{{0, 0, 0}, 0.3}}, 1);
    std::tie(ih, im) = inscription_losses(atoms, b, {0});
    CHECK(ih.scalar() == 0.0);

    SupervisionSample miss_sample;
    miss_sample.ray = {{0, 0.55, -2}, {0, 0, 1}};
    miss_sample.s_gt = 0.4;
    const RayBatch m = make_ray_batch(std::span<const SupervisionSample>(&miss_sample, 1));
    // Atom clearance from the line: 0.55 - 0.4 = 0.15.
    atoms = atoms_of(tape, {{{0, 0, 0}, 0.4}, {{0, -5, 0}, 0.1}}, 1);
    std::tie(ih, im) = inscription_losses(atoms, m, {0});
    CHECK(im.scalar() == doctest::Approx(0.0625 / 2.0).epsilon(1e-12));
    CHECK(ih.scalar() == 0.0);
  }

  TEST_CASE("inscription uses the permuted partner") {
    ad::Tape tape;
    SupervisionSample a, b;
    a.ray = {{0, 0, -2}, {0, 0, 1}};
    a.s_gt = 0.1;
    b.ray = {{0, 0, -2}, {0, 0, 1}};
    b.p_gt = Vec3(0, 0, -0.5);
    b.n_gt = Vec3(0, 0, -1);
    const std::vector<SupervisionSample> samples{a, b};
    const RayBatch batch = make_ray_batch(samples);
    const auto atoms = atoms_of(tape, {{{0, 0, -0.4}, 0.2}}, 2);
    // Identity: only ray 1 (a hit) sees the protruding atom.
    CHECK(inscription_losses(atoms, batch, {0, 1}).first.scalar() == doctest::Approx(0.1 / 2.0));
    // Swapped: both rays test against the other one.
    CHECK(inscription_losses(atoms, batch, {1, 0}).first.scalar() == doctest::Approx(0.1 / 2.0));
    CHECK(inscription_losses(atoms, batch, {1, 1}).first.scalar() == doctest::Approx(0.1));
  }

  TEST_CASE("specialization loss") {
    ad::Tape tape;
    Mat c(6, 2);
    c << 0, 0, 0, 0, 0, 2, 1, 1, 1, 1, 1, 1;
    const double value = specialization_loss(tape.leaf(c), 2).scalar();
    CHECK(value == doctest::Approx(0.5));
    Mat same = Mat::Ones(6, 2);
    CHECK(specialization_loss(tape.leaf(same), 2).scalar() == 0.0);
    Mat shifted = c;
    shifted.topRows(3).colwise() += Eigen::Vector3d(3, -1, 2);
    CHECK(specialization_loss(tape.leaf(shifted), 2).scalar() == doctest::Approx(value).epsilon(1e-12));
  }

  TEST_CASE("latent loss") {
    ad::Tape tape;
    CHECK(latent_loss(tape.leaf(Mat::Zero(2, 3)), {0, 1}).scalar() == 0.0);
    Mat z = Mat::Zero(2, 3);
    z(0, 1) = 3;
    z(1, 1) = 4;
    CHECK(latent_loss(tape.leaf(z), {1, 1, 1}).scalar() == doctest::Approx(25.0));
    Mat r(2, 3);
    r << 0.1, -0.4, 0.3, 0.7, 0.2, -0.5;
    const double base = latent_loss(tape.leaf(r), {0, 1, 2}).scalar();
    CHECK(latent_loss(tape.leaf(2.0 * r), {0, 1, 2}).scalar() == doctest::Approx(4.0 * base).epsilon(1e-12));
  }

  TEST_CASE("schedules at the reference epochs") {
    const LossSchedule s;
    auto w = s.at(0);
    CHECK(w[term_index(Term::N)] == 0.0);
    CHECK(std::abs(w[term_index(Term::Sigma)] - 0.10) <= 1e-12);
    CHECK(w[term_index(Term::Mv)] == 0.0);
    CHECK(w[term_index(Term::Z)] == 0.0);
    CHECK(w[term_index(Term::P)] == 2.0);
    CHECK(w[term_index(Term::S)] == 10.0);
    CHECK(w[term_index(Term::H)] == 100.0);
    CHECK(w[term_index(Term::R)] == 5e-4);
    CHECK(w[term_index(Term::Ih)] == 20.0);
    CHECK(w[term_index(Term::Im)] == 300.0);
    w = s.at(20);
    CHECK(std::abs(w[term_index(Term::Sigma)] - 0.055) <= 1e-12);
    for (double e : {100.0, 150.0, 200.0}) {
      w = s.at(e);
      CHECK(std::abs(w[term_index(Term::N)] - 0.25) <= 1e-12);
      CHECK(std::abs(w[term_index(Term::Sigma)] - 0.01) <= 1e-12);
      CHECK(std::abs(w[term_index(Term::Mv)] - 0.1) <= 1e-12);
      CHECK(std::abs(w[term_index(Term::Z)] - 1e-4) <= 1e-12);
    }
    CHECK(ease_sine(57.5, 85, 15) == doctest::Approx(0.5));
    double prev = -1;
    for (int e = 0; e <= 120; ++e) {
      const double v = ease_sine(e, 85, 15);
      CHECK(v >= prev);
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      prev = v;
    }
  }

  TEST_CASE("total loss equals the weighted sum") {
    NetworkConfig c;
    c.hidden_layers = 2;
    c.width = 16;
    c.n_atoms = 3;
    c.latent_dim = 2;
    c.n_shapes = 2;
    const auto p = init_params(c, 4);
    const std::vector<RayBatch> items{sphere_supervision(20, 0.5, 1, 0), sphere_supervision(20, 0.5, 2, 1)};
    CounterRng rng(1, 0);
    std::vector<ItemRandom> rnd{sample_item_random(c, 20, true, rng), sample_item_random(c, 20, true, rng)};
    ad::Tape tape;
    const auto b = bind_params(tape, p, true);
    const auto w = LossSchedule().at(120);
    const auto res = marf_loss(tape, c, b, items, rnd, w, {});
    double sum = 0.0;
    for (std::size_t i = 0; i < kTermCount; ++i) {
      CHECK(res.breakdown.value[i] >= 0.0);
      sum += w[i] * res.breakdown.value[i];
    }
    CHECK(std::abs(sum - res.breakdown.total) <= 1e-12 * std::max(1.0, std::abs(sum)));
    CHECK(res.breakdown.value[term_index(Term::R)] == 1.0);
  }

  TEST_CASE("missing-data rays give no direct supervision") {
    NetworkConfig c;
    c.hidden_layers = 2;
    c.width = 16;
    c.n_atoms = 3;
    c.medial_init = false;
    const auto p = init_params(c, 5);
    RayBatch b = sphere_supervision(14, 0.5, 3);
    b.hit_gt.setZero();
    b.miss_gt.setZero();
    CounterRng rng(2, 0);
    std::vector<ItemRandom> rnd{sample_item_random(c, 14, false, rng)};
    ad::Tape tape;
    const auto bound = bind_params(tape, p, true);
    const auto res = marf_loss(tape, c, bound, std::span<const RayBatch>(&b, 1), rnd, LossSchedule().at(200));
    for (Term t : {Term::P, Term::N, Term::S, Term::H, Term::Ih, Term::Im, Term::Mv}) {
      CHECK(res.breakdown.value[term_index(t)] == 0.0);
    }
    CHECK(res.breakdown.value[term_index(Term::R)] == 1.0);
    CHECK(res.breakdown.value[term_index(Term::Sigma)] > 0.0);
  }

  TEST_CASE("multi-view loss vanishes for a constant predictor") {
    NetworkConfig c;
    c.hidden_layers = 2;
    c.width = 8;
    c.n_atoms = 2;
    c.dropout_rate = 0.0;
    auto p = init_params(c, 6);
    p.weights.back().setZero();
    // Big atoms so that rays hit.
    p.biases.back().bottomRows(2).setConstant(0.45);
    p.biases.back().topRows(6).setZero();
    const RayBatch b = sphere_supervision(32, 0.5, 4);
    ad::Tape tape;
    const auto bound = bind_params(tape, p, true);
    const auto pass = run_marf(c, bound, tape.constant(b.origin), tape.constant(b.direction), std::nullopt, nullptr);
    REQUIRE(pass.winners.hit.cwiseProduct(b.hit_gt).sum() > 0);
    const Var mv = multiview_loss(c, bound, b, pass.winners.index, pass.winners.hit, nullptr);
    CHECK(mv.scalar() == 0.0);
    for (const Mat& g : tape.gradient(mv, bound.all)) CHECK(g.cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("analytic and finite-difference multi-view agree") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      NetworkConfig c;
      c.hidden_layers = 2;
      c.width = 16;
      c.n_atoms = 3;
      c.medial_init = false;
      c.dropout_rate = 0.0;
      const auto p = init_params(c, seed);
      const RayBatch b = sphere_supervision(40, 0.5, seed + 10);
      ad::Tape tape;
      const auto bound = bind_params(tape, p, false);
      const auto pass = run_marf(c, bound, tape.constant(b.origin), tape.constant(b.direction), std::nullopt, nullptr);
      const double a = multiview_loss(c, bound, b, pass.winners.index, pass.winners.hit, nullptr).scalar();
      const double f = multiview_loss(c, bound, b, pass.winners.index, pass.winners.hit, nullptr,
                                      {MultiviewMode::FiniteDifference, 1e-4})
                           .scalar();
      REQUIRE(a > 0.0);
      CHECK(std::abs(a - f) / a < 1e-3);
    }
  }

  TEST_CASE("every term passes the finite-difference gradient check") {
    for (const auto& r : check_all_terms({})) {
      INFO(r.term, " error ", r.max_rel_error);
      CHECK(r.pass);
    }
    CHECK(check_term("total").pass);
    GradcheckOptions fd_mv;
    fd_mv.mv_mode = MultiviewMode::FiniteDifference;
    CHECK(check_term("mv", fd_mv).pass);
  }

  TEST_CASE("perturbed gradients fail the check") {
    GradcheckOptions o;
    o.perturb = 0.01;
    CHECK_FALSE(check_term("p", o).pass);
    CHECK_THROWS_AS(check_term("bogus"), InvalidInputError);
  }

  TEST_CASE("prif loss gradient matches finite differences") {
    NetworkConfig c;
    c.hidden_layers = 2;
    c.width = 8;
    c.head = Head::Prif;
    c.dropout_rate = 0.0;
    const auto p = init_params(c, 7);
    const std::vector<RayBatch> items{sphere_supervision(16, 0.5, 5)};
    const std::vector<ItemRandom> rnd{ItemRandom{{}, {}}};
    PrifLossWeights w;
    w.normal = 0.5;
    w.multiview = 0.1;
    std::vector<Mat> inputs;
    auto pc = p;
    for (auto& t : pc.tensors()) inputs.push_back(*t.tensor);
    const testing::Program f = [&](ad::Tape& tape, const std::vector<Var>& v) {
      BoundParams b;
      std::size_t at = 0;
      for (int i = 0; i < c.hidden_layers; ++i) {
        b.weights.push_back(v[at++]);
        b.biases.push_back(v[at++]);
        b.gains.push_back(v[at++]);
        b.offsets.push_back(v[at++]);
      }
      b.weights.push_back(v[at++]);
      b.biases.push_back(v[at++]);
      b.all = v;
      return prif_loss(tape, c, b, items, rnd, w).total;
    };
    const double err =
        testing::max_relative_error(testing::reverse_gradient(f, inputs), testing::fd_gradient(f, inputs));
    CHECK(err < 1e-4);
  }
}
