#include <cmath>

#include "doctest.h"
#include "fd.hpp"
#include "marf/error.hpp"
#include "marf/network.hpp"
#include "marf/ray_batch.hpp"

using namespace marf;
using ad::Mat;
using ad::Var;

namespace {

NetworkConfig small_config() {
  NetworkConfig c;
  c.hidden_layers = 2;
  c.width = 8;
  c.n_atoms = 2;
  c.dropout_rate = 0.0;
  return c;
}

Ray random_ray(CounterRng& rng) {
  Vec3 o(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
  Vec3 q;
  do {
    q = Vec3(rng.normal(), rng.normal(), rng.normal());
  } while (q.norm() < 1e-6);
  return {o, q.normalized()};
}

}  // namespace

TEST_SUITE("marf_network") {
  TEST_CASE("layer widths follow the skip layout") {
    NetworkConfig c;
    c.hidden_layers = 4;
    c.width = 16;
    c.latent_dim = 3;
    CHECK(c.layer_input_dim(0) == 12);
    CHECK(c.layer_input_dim(1) == 16);
    CHECK(c.layer_input_dim(2) == 16 + 9 + 3);
    CHECK(c.layer_input_dim(3) == 16 + 9 + 3);
    CHECK(c.final_input_dim() == 16 + 9);
    const auto p = init_params(c, 1);
    CHECK(p.weights[2].cols() == 28);
    CHECK(p.weights[4].cols() == 25);
    CHECK(p.weights[4].rows() == 4 * c.n_atoms);
  }

  TEST_CASE("config validation") {
    NetworkConfig c;
    c.hidden_layers = 3;
    CHECK_THROWS_AS(c.validate(), InvalidInputError);
    c.hidden_layers = 4;
    c.dropout_rate = 1.0;
    CHECK_THROWS_AS(c.validate(), InvalidInputError);
    CHECK_NOTHROW(NetworkConfig::paper().validate());
    CHECK_NOTHROW(NetworkConfig::desk().validate());
  }

  TEST_CASE("zeroed final weights give the bias atoms") {
    auto p = init_params(NetworkConfig::desk(), 3);
    p.weights.back().setZero();
    CounterRng rng(1, 0);
    const auto first = forward(p, canonicalize(random_ray(rng)));
    for (int k = 0; k < 20; ++k) {
      const auto atoms = forward(p, canonicalize(random_ray(rng)));
      REQUIRE(atoms.size() == 8);
      for (std::size_t i = 0; i < atoms.size(); ++i) {
        CHECK(std::abs(atoms[i].center.norm() - 0.6) <= 1e-9);
        CHECK(atoms[i].radius == doctest::Approx(0.1).epsilon(1e-12));
        CHECK(atoms[i].center == first[i].center);
      }
    }
  }

  TEST_CASE("init is deterministic per seed") {
    const auto a = init_params(NetworkConfig::desk(), 42);
    const auto b = init_params(NetworkConfig::desk(), 42);
    const auto c = init_params(NetworkConfig::desk(), 43);
    for (std::size_t i = 0; i < a.weights.size(); ++i) {
      CHECK(a.weights[i] == b.weights[i]);
      CHECK(a.biases[i] == b.biases[i]);
    }
    CHECK(a.weights[0] != c.weights[0]);
  }

  TEST_CASE("scaled final layer keeps centers concentrated") {
    const auto p = init_params(NetworkConfig::desk(), 5);
    CounterRng rng(2, 0);
    Mat o(3, 1000), q(3, 1000);
    for (int k = 0; k < 1000; ++k) {
      const Ray r = random_ray(rng);
      o.col(k) = r.origin;
      q.col(k) = r.direction;
    }
    const Mat raw = predict_raw(p, o, q);
    for (int row = 0; row < 3 * p.config.n_atoms; ++row) {
      const Eigen::RowVectorXd v = raw.row(row);
      const double mean = v.mean();
      const double sd = std::sqrt((v.array() - mean).square().mean());
      CHECK(sd < 0.1);
    }
  }

  TEST_CASE("radii positive and forward deterministic") {
    auto c = NetworkConfig::desk();
    c.medial_init = false;
    const auto p = init_params(c, 6);
    CounterRng rng(3, 0);
    for (int k = 0; k < 50; ++k) {
      const auto ray = canonicalize(random_ray(rng));
      const auto a = forward(p, ray);
      const auto b = forward(p, ray);
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].radius > 0.0);
        CHECK(a[i].center == b[i].center);
        CHECK(a[i].radius == b[i].radius);
      }
    }
  }

  TEST_CASE("ray embedding invariance end to end") {
    const auto p = init_params(NetworkConfig::desk(), 8);
    CounterRng rng(4, 0);
    for (int k = 0; k < 50; ++k) {
      const Ray r = random_ray(rng);
      const double t = rng.uniform(-3, 3);
      const double lambda = rng.uniform(0.1, 5);
      const auto a = forward(p, canonicalize(r));
      const auto b = forward(p, canonicalize({r.origin + t * r.direction, lambda * r.direction}));
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK((a[i].center - b[i].center).cwiseAbs().maxCoeff() <= 1e-9);
        CHECK(std::abs(a[i].radius - b[i].radius) <= 1e-9);
      }
    }
  }

  TEST_CASE("dimension mismatch is rejected") {
    const auto p = init_params(small_config(), 1);
    ad::Tape tape;
    const auto b = bind_params(tape, p, false);
    CHECK_THROWS_AS(forward_raw(p.config, b, tape.constant(Mat::Zero(8, 2)), std::nullopt, nullptr),
                    InvalidInputError);
    CHECK_THROWS_AS(forward(p, canonicalize({{0, 0, 0}, {0, 0, 1}}), Eigen::VectorXd::Zero(2)), InvalidInputError);
  }

  TEST_CASE("latent conditioning changes the prediction") {
    auto c = small_config();
    c.latent_dim = 4;
    c.n_shapes = 2;
    const auto p = init_params(c, 9);
    const auto ray = canonicalize({{0.1, 0.2, -2}, {0, 0, 1}});
    const auto a = forward(p, ray, Eigen::VectorXd(p.latents.col(0)));
    const auto b = forward(p, ray, Eigen::VectorXd(p.latents.col(1)));
    CHECK(a[0].center != b[0].center);
    CHECK_THROWS_AS(forward(p, ray), InvalidInputError);
    const double sd = std::sqrt(p.latents.squaredNorm() / static_cast<double>(p.latents.size()));
    CHECK(sd < 0.03);
  }

  TEST_CASE("parameter gradient matches finite differences") {
    auto c = small_config();
    c.latent_dim = 2;
    c.n_shapes = 2;
    auto p = init_params(c, 10);
    CounterRng rng(5, 0);
    Mat o(3, 6), q(3, 6);
    for (int k = 0; k < 6; ++k) {
      const Ray r = random_ray(rng);
      o.col(k) = r.origin;
      q.col(k) = r.direction;
    }
    const std::vector<int> ids{0, 1, 1, 0, 1, 0};
    CounterRng drop(6, 0);
    auto dc = c;
    dc.dropout_rate = 0.2;
    const DropoutMasks masks = sample_dropout(dc, 6, drop);

    std::vector<Mat> inputs;
    for (auto& t : p.tensors()) inputs.push_back(*t.tensor);
    const testing::Program f = [&](ad::Tape& tape, const std::vector<Var>& v) {
      NetworkParams local = p;
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
      b.latents = v[at++];
      const Var x = embed_rays(tape.constant(o), tape.constant(q));
      const Var raw = forward_raw(c, b, x, latent_columns(b, ids), &masks);
      const auto atoms = split_atoms(raw, c.n_atoms);
      return ad::mean(ad::square(atoms.centers)) + ad::mean(atoms.radii * 0.3);
    };
    const double err =
        testing::max_relative_error(testing::reverse_gradient(f, inputs), testing::fd_gradient(f, inputs));
    CHECK(err < 1e-4);
  }

  TEST_CASE("network jvp matches finite differences over the input") {
    const auto p = init_params(small_config(), 11);
    const Mat x0 = canonicalize({{0.3, -0.2, 1.0}, Vec3(0.2, 0.5, -1).normalized()}).embedding();
    CounterRng rng(7, 0);
    Mat dir(9, 1);
    for (int i = 0; i < 9; ++i) dir(i, 0) = rng.normal();

    auto eval = [&](const Mat& x) {
      ad::Tape tape;
      const auto b = bind_params(tape, p, false);
      return Mat(forward_raw(p.config, b, tape.constant(x), std::nullopt, nullptr).value());
    };
    ad::Tape tape;
    const auto b = bind_params(tape, p, false);
    const ad::Dual out = ad::jvp(tape.constant(x0), {dir}, [&](const ad::Dual& x) {
      return forward_raw(p.config, b, x, std::nullopt, nullptr);
    });
    const double h = 1e-5;
    const Mat fd = (eval(x0 + h * dir) - eval(x0 - h * dir)) / (2 * h);
    const double scale = fd.cwiseAbs().maxCoeff();
    CHECK(((out.t[0].value() - fd).cwiseAbs().maxCoeff() / scale) < 1e-4);
    CHECK((out.v.value() - eval(x0)).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("prif head reconstructs foot plus displacement") {
    auto c = small_config();
    c.head = Head::Prif;
    auto p = init_params(c, 12);
    p.weights.back().setZero();
    p.biases.back().setZero();
    const auto ray = canonicalize({{0, 2, -5}, {0, 0, 1}});
    const auto out = prif_forward(p, ray);
    CHECK(out.displacement == 0.0);
    CHECK(out.hit_logit == 0.0);
    CHECK_FALSE(out.hit());
    CHECK(out.point == ray.foot);
    p.biases.back()(0, 0) = 0.25;
    CHECK((prif_forward(p, ray).point - Vec3(0, 2, 0.25)).norm() < 1e-15);
    CHECK_THROWS_AS(forward(p, ray), InvalidInputError);
  }
}
