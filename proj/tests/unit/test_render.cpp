#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include "doctest.h"
#include "marf/error.hpp"
#include "marf/parallel.hpp"
#include "marf/render.hpp"
#include "marf/rng.hpp"
#include "marf/shapes.hpp"

using namespace marf;

namespace {

NetworkConfig small_config(int atoms) {
  NetworkConfig c;
  c.hidden_layers = 2;
  c.width = 8;
  c.n_atoms = atoms;
  return c;
}

SurfaceField atom_sphere(const Vec3& center, double r) {
  return network_field(constant_atom_params(small_config(1), {{center, r}}));
}

double angle(const Vec3& a, const Vec3& b) { return std::atan2(a.cross(b).norm(), a.dot(b)); }

Vec3 random_unit(CounterRng& rng) {
  return Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
}

// Ray along q whose line passes at distance `offset` from the origin.
Ray ray_at_offset(const Vec3& q, double offset, CounterRng& rng) {
  Vec3 side = q.cross(random_unit(rng)).normalized();
  return {side * offset - 2.0 * q, q};
}

// Normal from finite-difference tangents of the exact caster.
Vec3 fd_normal(const Shape& shape, const Ray& ray, double h) {
  std::array<Vec3, 3> t;
  for (int i = 0; i < 3; ++i) {
    Ray a = ray, b = ray;
    a.origin(i) += h;
    b.origin(i) -= h;
    t[static_cast<std::size_t>(i)] = (shape.cast(a).point - shape.cast(b).point) / (2.0 * h);
  }
  const Vec3& q = ray.direction;
  return (-(q.x() * t[1].cross(t[2]) + q.y() * t[2].cross(t[0]) + q.z() * t[0].cross(t[1]))).normalized();
}

}  // namespace

TEST_SUITE("shading_renderer") {
  TEST_CASE("plane field normal faces the viewer") {
    const SurfaceField plane = plane_field(Vec3(0, 0, -1));
    for (const Vec3& o : {Vec3(0, 0, -1), Vec3(0.3, -0.7, -2), Vec3(-5, 2, 1)}) {
      const Vec3 n = analytical_normal(plane, {o, Vec3::UnitZ()});
      CHECK((n - Vec3(0, 0, -1)).norm() < 1e-12);
    }
    // Oblique views see the same plane normal.
    const Vec3 n = analytical_normal(plane, {Vec3(0.2, 0.1, -1), Vec3(0.3, -0.2, 1).normalized()});
    CHECK((n - Vec3(0, 0, -1)).norm() < 1e-12);
  }

  TEST_CASE("sphere normal at the front pole") {
    const Vec3 n = analytical_normal(atom_sphere(Vec3::Zero(), 0.5), {Vec3(0, 0, -2), Vec3::UnitZ()});
    CHECK((n - Vec3(0, 0, -1)).norm() < 1e-6);
  }

  TEST_CASE("analytical normal matches finite differences of the exact caster") {
    const Shape sphere = Shape::sphere(0.5);
    const SurfaceField field = atom_sphere(Vec3::Zero(), 0.5);
    CounterRng rng(11, 0);
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
      const Ray ray = ray_at_offset(random_unit(rng), 0.45 * rng.uniform(), rng);
      const Vec3 n = analytical_normal(field, ray);
      worst = std::max(worst, angle(n, fd_normal(sphere, ray, 1e-6)));
      // The true outward normal of the sphere.
      worst = std::max(worst, angle(n, sphere.cast(ray).point.normalized()));
    }
    CHECK(worst < 1e-4);
  }

  TEST_CASE("misses are rejected") {
    CHECK_THROWS_AS(analytical_normal(atom_sphere(Vec3::Zero(), 0.5), {Vec3(0.9, 0, -2), Vec3::UnitZ()}),
                    InvalidInputError);
  }

  TEST_CASE("shape operator of the exact sphere") {
    const SurfaceField field = atom_sphere(Vec3::Zero(), 0.5);
    CounterRng rng(5, 0);
    for (int i = 0; i < 30; ++i) {
      const Ray ray = ray_at_offset(random_unit(rng), 0.4 * rng.uniform(), rng);
      const DifferentialFrame f = shape_operator(field, ray);
      CHECK(std::abs(f.k1 - 2.0) < 1e-6);
      CHECK(std::abs(f.k2 - 2.0) < 1e-6);
      CHECK(std::abs(f.mean_curvature - 2.0) < 1e-6);
      CHECK(std::abs(f.gaussian_curvature - 4.0) < 1e-5);
      CHECK(std::abs(f.mean_curvature - 0.5 * f.shape_operator.trace()) < 1e-9);
      CHECK((f.normal.transpose() * f.shape_operator).norm() < 1e-6);
      CHECK(std::abs(f.v1.dot(f.v2)) < 1e-6);
      CHECK(std::abs(f.v1.dot(f.normal)) < 1e-6);
    }
  }

  TEST_CASE("large-atom plane surrogate has small mean curvature") {
    const SurfaceField field = atom_sphere(Vec3(0, 0, 100), 100.0);
    const DifferentialFrame f = shape_operator(field, {Vec3(0.01, -0.02, -5), Vec3::UnitZ()});
    CHECK(std::abs(f.mean_curvature) <= 0.011);
    CHECK(std::abs(f.mean_curvature - 0.01) < 1e-6);
  }

  TEST_CASE("translucency coefficient") {
    TranslucencyParams p;
    p.light = Vec3(0, 0, -1);
    const Vec3 q = Vec3::UnitZ();
    CHECK(std::abs(translucency_coeff(0.2, Vec3::UnitX(), q, p) - 4.0) < 1e-12);
    p.light = Vec3::UnitZ();
    CHECK(translucency_coeff(0.2, Vec3::UnitX(), q, p) == 0.0);
    p.light = Vec3(0.3, 0, -1).normalized();
    double prev = std::numeric_limits<double>::infinity();
    for (double r : {0.0, 0.1, 0.2, 0.5, 1.0}) {
      const double k = translucency_coeff(r, Vec3(0.1, 0.2, -1).normalized(), q, p);
      CHECK(k > 0.0);
      CHECK(k < prev);
      prev = k;
    }
    TranslucencyParams bad;
    bad.epsilon = 0.0;
    CHECK_THROWS_AS(bad.validate(), InvalidInputError);
  }

  TEST_CASE("Ward coefficient") {
    DifferentialFrame f;
    f.normal = Vec3::UnitZ();
    f.v1 = Vec3::UnitX();
    f.v2 = Vec3::UnitY();
    WardParams p;
    p.a1 = p.a2 = 0.2;
    CHECK(std::abs(ward_coeff(f, f.normal, f.normal, p) - 1.0 / (4.0 * std::numbers::pi * 0.04)) < 1e-12);

    WardParams q{0.05, 0.3};
    WardParams swapped{0.3, 0.05};
    DifferentialFrame g = f;
    std::swap(g.v1, g.v2);
    const Vec3 view = Vec3(0.3, 0.1, 1).normalized(), light = Vec3(-0.2, 0.25, 1).normalized();
    CHECK(std::abs(ward_coeff(f, view, light, q) - ward_coeff(g, view, light, swapped)) < 1e-12);

    // Mirrored grazing directions keep h = n, so only the denominator changes.
    double prev = 0.0;
    for (double nl : {1e-1, 1e-2, 1e-3}) {
      const double s = std::sqrt(1 - nl * nl);
      const double k = ward_coeff(f, Vec3(-s, 0, nl), Vec3(s, 0, nl), p);
      CHECK(std::abs(k * nl - 1.0 / (4.0 * std::numbers::pi * 0.04)) < 1e-9);
      CHECK(k > prev);
      prev = k;
    }
    CHECK(ward_coeff(f, Vec3(-1, 0, 1e-5).normalized(), Vec3(1, 0, 1e-5).normalized(), p) == 0.0);
  }

  TEST_CASE("lambertian headlight is brightest at the canvas center") {
    const OrthoCamera cam = OrthoCamera::look(Vec3(0, 1, 0), 33, 33);
    const RenderResult r = render(atom_sphere(Vec3::Zero(), 0.5), cam, RenderMode::Lambertian);
    int best_r = -1, best_c = -1, best = -1;
    for (int i = 0; i < 33; ++i) {
      for (int j = 0; j < 33; ++j) {
        if (r.winner[static_cast<std::size_t>(i * 33 + j)] < 0) continue;
        if (r.image.at(i, j)[0] > best) {
          best = r.image.at(i, j)[0];
          best_r = i;
          best_c = j;
        }
      }
    }
    CHECK(best_r == 16);
    CHECK(best_c == 16);
    CHECK(r.stats.degenerate == 0);
    CHECK(r.stats.hit + r.stats.miss == 33 * 33);
  }

  TEST_CASE("medial radius is constant on the exact sphere") {
    const OrthoCamera cam = OrthoCamera::look(Vec3(1, 1, 0), 24, 24);
    const RenderResult r = render(atom_sphere(Vec3::Zero(), 0.5), cam, RenderMode::MedialRadius);
    std::set<Rgb> colors;
    for (int i = 0; i < 24; ++i) {
      for (int j = 0; j < 24; ++j) {
        if (r.winner[static_cast<std::size_t>(i * 24 + j)] >= 0) colors.insert(r.image.at(i, j));
      }
    }
    CHECK(colors.size() == 1);
    CHECK(r.stats.hit > 0);
  }

  TEST_CASE("single evaluation per pixel") {
    const OrthoCamera cam = OrthoCamera::look(Vec3(0, 0, 1), 20, 12);
    const SurfaceField field = atom_sphere(Vec3::Zero(), 0.5);
    for (RenderMode m : all_render_modes()) {
      const RenderResult r = render(field, cam, m);
      CHECK(r.stats.forward_rays == 20u * 12u);
    }
  }

  TEST_CASE("all modes render the sphere without degenerate pixels") {
    const OrthoCamera cam = OrthoCamera::look(Vec3(0.3, -1, 0.2), 16, 16);
    RenderParams p;
    p.light = Vec3(-0.3, 1, 0.1);
    for (RenderMode m : all_render_modes()) {
      const RenderResult r = render(atom_sphere(Vec3::Zero(), 0.5), cam, m, p);
      INFO(render_mode_name(m));
      CHECK(r.stats.degenerate == 0);
      CHECK(r.stats.hit > 0);
    }
  }

  TEST_CASE("medial axis overlay marks the atom center") {
    const OrthoCamera cam = OrthoCamera::look(Vec3(0, 0, 1), 17, 17);
    const RenderResult r = render(atom_sphere(Vec3::Zero(), 0.5), cam, RenderMode::MedialAxis);
    CHECK(r.image.at(8, 8) == kMedialDot);
    CHECK(r.image.at(8, 6) != kMedialDot);
  }

  TEST_CASE("two lobes get two candidate colors") {
    const NetworkParams p =
        constant_atom_params(small_config(2), {{Vec3(-0.5, 0, 0), 0.3}, {Vec3(0.5, 0, 0), 0.3}});
    const OrthoCamera cam = OrthoCamera::look(Vec3(0, 1, 0), 32, 32);
    const RenderResult r = render(network_field(p), cam, RenderMode::CandidateColor);
    std::set<int> left, right;
    for (int i = 0; i < 32; ++i) {
      for (int j = 0; j < 32; ++j) {
        const int w = r.winner[static_cast<std::size_t>(i * 32 + j)];
        if (w < 0) continue;
        (j < 16 ? left : right).insert(w);
      }
    }
    CHECK(left.size() == 1);
    CHECK(right.size() == 1);
    CHECK(*left.begin() != *right.begin());
  }

  TEST_CASE("degenerate pixels are magenta and counted") {
    NetworkConfig c = small_config(1);
    c.head = Head::Prif;
    NetworkParams p = init_params(c, 0);
    p.biases.back()(1, 0) = 100.0;  // every ray hits
    const OrthoCamera cam = OrthoCamera::look(Vec3(0, 0, 1), 8, 8);
    const RenderResult r = render(network_field(p), cam, RenderMode::Lambertian);
    CHECK(r.stats.degenerate == 64);
    CHECK(r.image.at(3, 3) == kDegenerate);
    const RenderResult a = render(network_field(p), cam, RenderMode::AnalyticalNormalRgb);
    CHECK(a.stats.degenerate < 64);
  }

  TEST_CASE("images are deterministic across thread counts") {
    const NetworkParams p = init_params(small_config(4), 3);
    const OrthoCamera cam = OrthoCamera::look(Vec3(1, 0.5, 0.2), 40, 30);
    const int saved = thread_count();
    set_thread_count(1);
    const RenderResult a = render(network_field(p), cam, RenderMode::MeanCurvature);
    set_thread_count(4);
    const RenderResult b = render(network_field(p), cam, RenderMode::MeanCurvature);
    const RenderResult c = render(network_field(p), cam, RenderMode::MeanCurvature);
    set_thread_count(saved);
    CHECK(a.image.rgb == b.image.rgb);
    CHECK(b.image.rgb == c.image.rgb);
  }

  TEST_CASE("PPM round trip") {
    Image img(5, 3);
    img.set(1, 2, {1, 2, 3});
    const std::string path = (std::filesystem::temp_directory_path() / "marf_render_test.ppm").string();
    write_ppm(img, path);
    const Image back = read_ppm(path);
    CHECK(back.width == 5);
    CHECK(back.height == 3);
    CHECK(back.rgb == img.rgb);
    std::filesystem::remove(path);
    CHECK_THROWS_AS(read_ppm(path), FormatError);
  }

  TEST_CASE("mode names and helpers") {
    for (RenderMode m : all_render_modes()) CHECK(parse_render_mode(render_mode_name(m)) == m);
    CHECK_THROWS_AS(parse_render_mode("phong"), InvalidInputError);
    const auto dirs = orbit_directions(8, 20.0);
    CHECK(dirs.size() == 8);
    for (const Vec3& d : dirs) CHECK(std::abs(d.norm() - 1.0) < 1e-12);
    const auto zs = interpolate_latents(Eigen::VectorXd::Zero(2), Eigen::VectorXd::Ones(2), 5);
    CHECK(zs.size() == 5);
    CHECK(std::abs(zs[2](0) - 0.5) < 1e-15);
    CHECK(diverging(0.0) == Rgb{255, 255, 255});
    CHECK(diverging(1.0) == Rgb{255, 0, 0});
    CHECK(diverging(-1.0) == Rgb{0, 0, 255});
  }
}
