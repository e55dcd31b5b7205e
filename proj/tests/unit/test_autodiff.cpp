#include <cmath>

#include "doctest.h"
#include "fd.hpp"
#include "marf/dual.hpp"
#include "marf/error.hpp"
#include "marf/rng.hpp"

using namespace marf;
using ad::Mat;
using ad::Var;
using testing::Program;

namespace {

Mat random_mat(CounterRng& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

double check_program(const Program& f, const std::vector<Mat>& inputs) {
  return testing::max_relative_error(testing::reverse_gradient(f, inputs), testing::fd_gradient(f, inputs));
}

}  // namespace

TEST_SUITE("diff_core") {
  TEST_CASE("sum of squares") {
    ad::Tape tape;
    Mat theta(2, 1);
    theta << 1, -2;
    const Var x = tape.leaf(theta);
    const auto g = tape.gradient(ad::sum(ad::square(x)), std::vector<Var>{x});
    CHECK(g[0](0, 0) == 2.0);
    CHECK(g[0](1, 0) == -4.0);
  }

  TEST_CASE("stop-gradient maximality form") {
    ad::Tape tape;
    Mat r(1, 3);
    r << 0.2, 1.5, 0.7;
    const Var x = tape.leaf(r);
    const Var loss = ad::sum(ad::abs(ad::stop_gradient(x) + 1.0 - x));
    CHECK(loss.scalar() == 3.0);
    const auto g = tape.gradient(loss, std::vector<Var>{x});
    for (int i = 0; i < 3; ++i) CHECK(g[0](0, i) == -1.0);
  }

  TEST_CASE("stop-gradient equals a constant of the same value") {
    CounterRng rng(2, 0);
    const Mat a = random_mat(rng, 3, 4);
    ad::Tape t1, t2;
    const Var x1 = t1.leaf(a), x2 = t2.leaf(a);
    const Var y1 = ad::sum(x1 * ad::stop_gradient(ad::exp(x1)));
    const Var y2 = ad::sum(x2 * t2.constant(a.array().exp().matrix()));
    CHECK(y1.scalar() == y2.scalar());
    CHECK(t1.gradient(y1, std::vector<Var>{x1})[0] == t2.gradient(y2, std::vector<Var>{x2})[0]);
  }

  TEST_CASE("elementwise ops match finite differences") {
    CounterRng rng(4, 0);
    const std::vector<Mat> in{random_mat(rng, 3, 5, 0.3, 1.5), random_mat(rng, 3, 5, 0.3, 1.5),
                              random_mat(rng, 1, 5, 0.3, 1.5)};
    const Program f = [](ad::Tape&, const std::vector<Var>& v) {
      Var y = v[0] * v[1] + v[0] / v[1] - ad::sqrt(v[0]) * v[2];
      y = y + ad::exp(v[1] * 0.3) + ad::cos(v[0]) * ad::sin(v[1]);
      y = y + ad::maximum(v[0], v[1] * 0.9) + ad::abs(v[0] - 0.9) + ad::clamp_min(v[1] - 0.8, 0.0);
      y = y + ad::leaky_relu(v[0] - 0.7, 0.01) + (-v[2]) * 2.0 + ad::square(v[1] / 2.0);
      return ad::sum(y);
    };
    CHECK(check_program(f, in) < 1e-6);
  }

  TEST_CASE("structural ops match finite differences") {
    CounterRng rng(5, 0);
    const std::vector<Mat> in{random_mat(rng, 3, 4), random_mat(rng, 3, 4), random_mat(rng, 2, 3)};
    const Program f = [](ad::Tape& tape, const std::vector<Var>& v) {
      const Var c = ad::cross(v[0], v[1]);
      const Var n = ad::norm(c) + ad::dot(v[0], ad::normalize(v[1]));
      const Var cat = ad::concat_rows({v[0], ad::rows(v[1], 1, 2)});
      const Var w = ad::matmul(v[2], ad::rows(cat, 2, 3));
      const Var g = ad::gather_rows(cat, {0, 4, 1, 3, 2, 2, 4, 0}, 2);
      Mat mask = Mat::Ones(1, 4);
      mask(0, 2) = 0.0;
      const Var sel = ad::where(mask, n, ad::sum_rows(w));
      return ad::sum(ad::square(sel)) + ad::sum(ad::sum_cols(g)) + ad::mean(ad::mask_mul(c, mask * 2.0)) +
             tape.constant(0.5);
    };
    CHECK(check_program(f, in) < 1e-6);
  }

  TEST_CASE("layer norm matches finite differences") {
    CounterRng rng(6, 0);
    const std::vector<Mat> in{random_mat(rng, 5, 4), random_mat(rng, 5, 1, 0.5, 1.5), random_mat(rng, 5, 1)};
    const Program f = [](ad::Tape& tape, const std::vector<Var>& v) {
      Mat w(5, 4);
      for (int i = 0; i < 20; ++i) w.data()[i] = std::sin(1.0 + i);
      return ad::sum(ad::layer_norm(v[0], v[1], v[2]) * tape.constant(w));
    };
    CHECK(check_program(f, in) < 1e-6);
  }

  TEST_CASE("tiny MLP gradient matches finite differences") {
    CounterRng rng(8, 0);
    const std::vector<Mat> in{random_mat(rng, 4, 3), random_mat(rng, 4, 1), random_mat(rng, 4, 4),
                              random_mat(rng, 4, 1), random_mat(rng, 1, 4)};
    const Mat x = random_mat(rng, 3, 6);
    const Program f = [&](ad::Tape& tape, const std::vector<Var>& v) {
      const Var h1 = ad::leaky_relu(ad::matmul(v[0], tape.constant(x)) + v[1], 0.01);
      const Var h2 = ad::leaky_relu(ad::matmul(v[2], h1) + v[3], 0.01);
      return ad::mean(ad::square(ad::matmul(v[4], h2)));
    };
    CHECK(check_program(f, in) < 1e-4);
  }

  TEST_CASE("opaque op refuses reverse mode") {
    ad::Tape tape;
    const Var x = tape.leaf(Mat::Constant(1, 1, 0.4));
    const Var y = ad::opaque(x, [](double v) { return std::tanh(v); }, "tanh");
    CHECK(y.scalar() == doctest::Approx(std::tanh(0.4)));
    CHECK_THROWS_AS(tape.gradient(ad::sum(y), std::vector<Var>{x}), UnsupportedOpError);
  }

  TEST_CASE("replay reproduces primals") {
    CounterRng rng(9, 0);
    ad::Tape tape;
    const Var a = tape.leaf(random_mat(rng, 3, 7));
    const Var b = tape.leaf(random_mat(rng, 3, 7));
    (void)ad::sum(ad::layer_norm(ad::cross(a, b), tape.constant(Mat::Ones(3, 1)), tape.constant(Mat::Zero(3, 1))));
    CHECK(tape.replay_matches());
  }

  TEST_CASE("gradients are deterministic") {
    CounterRng rng(10, 0);
    const std::vector<Mat> in{random_mat(rng, 6, 5), random_mat(rng, 6, 5)};
    const Program f = [](ad::Tape&, const std::vector<Var>& v) {
      return ad::sum(ad::norm(ad::leaky_relu(v[0] * v[1], 0.01)));
    };
    const auto g1 = testing::reverse_gradient(f, in);
    const auto g2 = testing::reverse_gradient(f, in);
    CHECK(g1[0] == g2[0]);
    CHECK(g1[1] == g2[1]);
  }

  TEST_CASE("jvp identity and square") {
    ad::Tape tape;
    const Var o = tape.leaf(Mat(Eigen::Vector3d(0.1, 0.2, 0.3)));
    const std::vector<Mat> dirs{Eigen::Vector3d::UnitX(), Eigen::Vector3d::UnitY(), Eigen::Vector3d::UnitZ()};
    const ad::Dual d = ad::jvp(o, dirs, [](const ad::Dual& x) { return x; });
    for (int j = 0; j < 3; ++j) CHECK(d.t[static_cast<std::size_t>(j)].value() == dirs[static_cast<std::size_t>(j)]);

    const Var x = tape.leaf(Mat::Constant(1, 1, 3.0));
    const ad::Dual sq = ad::jvp(x, {Mat::Ones(1, 1)}, [](const ad::Dual& v) { return ad::square(v); });
    CHECK(sq.t[0].scalar() == 6.0);
  }

  TEST_CASE("jvp agrees with reverse mode and is linear") {
    CounterRng rng(12, 0);
    const Mat x0 = random_mat(rng, 3, 1);
    const Mat w = random_mat(rng, 4, 3);
    const Mat v1 = random_mat(rng, 3, 1), v2 = random_mat(rng, 3, 1);
    auto program = [&](const auto& x) {
      ad::Tape* tape = ad::primal(x).tape();
      const Var wv = tape->constant(w);
      const auto h = ad::leaky_relu(ad::matmul(wv, x), 0.01);
      const auto ln = ad::layer_norm(h, tape->constant(Mat::Ones(4, 1)), tape->constant(Mat::Zero(4, 1)));
      return ad::sum(ad::square(ln) + ad::norm(ad::cross(x, ad::sin(x))));
    };
    ad::Tape tape;
    const Var x = tape.leaf(x0);
    const ad::Dual d = ad::jvp(x, {v1, v2, v1 + v2}, program);
    const Mat grad = tape.gradient(d.v, std::vector<Var>{x})[0];
    CHECK(std::abs(d.t[0].scalar() - grad.col(0).dot(v1.col(0))) <= 1e-9);
    CHECK(std::abs(d.t[1].scalar() - grad.col(0).dot(v2.col(0))) <= 1e-9);
    CHECK(std::abs(d.t[2].scalar() - d.t[0].scalar() - d.t[1].scalar()) <= 1e-9);
  }

  TEST_CASE("jvp tangents can be differentiated in reverse mode") {
    // c(q) = A q: the squared tangent norm over three unit directions is ||A||_F^2,
    // whose gradient in A is 2A.
    CounterRng rng(13, 0);
    const Mat a0 = random_mat(rng, 3, 3);
    ad::Tape tape;
    const Var a = tape.leaf(a0);
    const Var q = tape.constant(random_mat(rng, 3, 1));
    const std::vector<Mat> dirs{Eigen::Vector3d::UnitX(), Eigen::Vector3d::UnitY(), Eigen::Vector3d::UnitZ()};
    const ad::Dual c = ad::jvp(q, dirs, [&](const ad::Dual& x) { return ad::matmul(a, x); });
    Var loss = ad::sum(ad::square(c.t[0]));
    for (std::size_t j = 1; j < 3; ++j) loss = loss + ad::sum(ad::square(c.t[j]));
    CHECK(loss.scalar() == doctest::Approx(a0.squaredNorm()).epsilon(1e-12));
    const Mat g = tape.gradient(loss, std::vector<Var>{a})[0];
    CHECK((g - 2.0 * a0).cwiseAbs().maxCoeff() <= 1e-12);
  }
}
