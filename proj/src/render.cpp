#include "marf/render.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "marf/error.hpp"
#include "marf/parallel.hpp"

namespace marf {

namespace {

constexpr std::array<const char*, 9> kModeNames{"lambertian",         "candidate_color",       "medial_axis",
                                                "medial_radius",      "medial_normal_rgb",     "analytical_normal_rgb",
                                                "mean_curvature",     "translucency",          "ward"};

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

Rgb gray(double v) {
  const std::uint8_t b = to_byte(v);
  return {b, b, b};
}

Rgb tint(const Rgb& c, double s) {
  return {to_byte(c[0] / 255.0 * s), to_byte(c[1] / 255.0 * s), to_byte(c[2] / 255.0 * s)};
}

Rgb normal_rgb(const Vec3& n) { return {to_byte(0.5 * (n.x() + 1.0)), to_byte(0.5 * (n.y() + 1.0)), to_byte(0.5 * (n.z() + 1.0))}; }

}  // namespace

const char* render_mode_name(RenderMode mode) { return kModeNames[static_cast<std::size_t>(mode)]; }

RenderMode parse_render_mode(const std::string& name) {
  for (std::size_t i = 0; i < kModeNames.size(); ++i) {
    if (name == kModeNames[i]) return static_cast<RenderMode>(i);
  }
  throw InvalidInputError("unknown render mode '" + name + "'");
}

const std::vector<RenderMode>& all_render_modes() {
  static const std::vector<RenderMode> modes = [] {
    std::vector<RenderMode> m;
    for (std::size_t i = 0; i < kModeNames.size(); ++i) m.push_back(static_cast<RenderMode>(i));
    return m;
  }();
  return modes;
}

bool needs_derivatives(RenderMode mode) {
  return mode == RenderMode::AnalyticalNormalRgb || mode == RenderMode::MeanCurvature || mode == RenderMode::Ward;
}

const std::array<Rgb, 16>& candidate_palette() {
  static const std::array<Rgb, 16> p{{{230, 25, 75},   {60, 180, 75},   {255, 225, 25}, {0, 130, 200},
                                      {245, 130, 48},  {145, 30, 180},  {70, 240, 240}, {240, 50, 230},
                                      {210, 245, 60},  {250, 190, 212}, {0, 128, 128},  {220, 190, 255},
                                      {170, 110, 40},  {128, 0, 0},     {170, 255, 195}, {0, 0, 128}}};
  return p;
}

Rgb diverging(double v) {
  const double x = std::clamp(v, -1.0, 1.0);
  if (x >= 0.0) return {255, to_byte(1.0 - x), to_byte(1.0 - x)};
  return {to_byte(1.0 + x), to_byte(1.0 + x), 255};
}

Image::Image(int w, int h, Rgb fill) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3) {
  for (std::size_t i = 0; i < rgb.size(); i += 3) std::copy(fill.begin(), fill.end(), rgb.begin() + static_cast<long>(i));
}

Rgb Image::at(int row, int col) const {
  const std::size_t i = (static_cast<std::size_t>(row) * width + col) * 3;
  return {rgb[i], rgb[i + 1], rgb[i + 2]};
}

void Image::set(int row, int col, Rgb c) {
  const std::size_t i = (static_cast<std::size_t>(row) * width + col) * 3;
  rgb[i] = c[0];
  rgb[i + 1] = c[1];
  rgb[i + 2] = c[2];
}

void write_ppm(const Image& image, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write image '" + path + "'");
  f << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
  if (!f) throw FormatError("cannot write image '" + path + "'");
}

Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open image '" + path + "'");
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  f >> magic >> w >> h >> maxv;
  if (magic != "P6" || w <= 0 || h <= 0 || maxv != 255) throw FormatError("'" + path + "' is not an 8-bit P6 image");
  f.get();
  Image img(w, h);
  f.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.rgb.size())) throw FormatError("truncated image '" + path + "'");
  return img;
}

std::string RenderStats::to_json() const {
  nlohmann::json j{{"mode", mode},
                   {"width", width},
                   {"height", height},
                   {"pixels", {{"hit", hit}, {"miss", miss}, {"degenerate", degenerate}}},
                   {"forward_rays", forward_rays},
                   {"seconds", seconds}};
  return j.dump(2);
}

RenderResult render(const SurfaceField& field, const OrthoCamera& cam, RenderMode mode, const RenderParams& params) {
  params.translucency.validate();
  params.ward.validate();
  if (params.chunk <= 0) throw InvalidInputError("render chunk must be positive");
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t forward_before = forward_ray_count();

  const int w = cam.width, h = cam.height;
  const Vec3 light = params.light.norm() > 0.0 ? params.light.normalized() : cam.view;
  TranslucencyParams tp = params.translucency;
  tp.light = light;
  const bool diff = needs_derivatives(mode);

  RenderResult res;
  res.image = Image(w, h);
  res.winner.assign(static_cast<std::size_t>(w) * h, -1);
  std::vector<std::uint8_t> status(static_cast<std::size_t>(w) * h, 0);  // 0 miss, 1 hit, 2 degenerate
  Eigen::Matrix3Xd centers(3, static_cast<Eigen::Index>(w) * h);

  const int rows_per = std::max(1, params.chunk / std::max(1, w));
  const std::size_t blocks = static_cast<std::size_t>((h + rows_per - 1) / rows_per);
  parallel_for(blocks, [&](std::size_t blk) {
    const int r0 = static_cast<int>(blk) * rows_per;
    const int r1 = std::min(h, r0 + rows_per);
    const Eigen::Index n = static_cast<Eigen::Index>(r1 - r0) * w;
    ad::Mat o(3, n), q(3, n);
    for (int r = r0; r < r1; ++r) {
      for (int c = 0; c < w; ++c) {
        const Eigen::Index k = static_cast<Eigen::Index>(r - r0) * w + c;
        o.col(k) = cam.pixel_origin(r, c);
        q.col(k) = cam.view;
      }
    }
    const SurfaceBatch s = evaluate_surface(field, o, q, diff);
    for (Eigen::Index k = 0; k < n; ++k) {
      const int r = r0 + static_cast<int>(k / w), c = static_cast<int>(k % w);
      const std::size_t pix = static_cast<std::size_t>(r) * w + c;
      const auto kk = static_cast<std::size_t>(k);
      if (!s.hit[kk]) continue;
      res.winner[pix] = s.winner[kk];
      centers.col(static_cast<Eigen::Index>(pix)) = s.center.col(k);
      const Vec3 nm = s.medial_normal.col(k);
      const bool medial = s.medial_ok[kk] != 0;
      const double lambert = medial ? std::max(0.0, -nm.dot(light)) : 0.0;
      std::optional<Rgb> color;
      switch (mode) {
        case RenderMode::Lambertian:
        case RenderMode::MedialAxis:
          if (medial) color = gray(0.1 + 0.9 * lambert);
          break;
        case RenderMode::CandidateColor:
          if (medial) color = tint(candidate_palette()[static_cast<std::size_t>(s.winner[kk]) % 16], 0.35 + 0.65 * lambert);
          break;
        case RenderMode::MedialRadius:
          color = diverging(2.0 * s.radius(k) / params.radius_max - 1.0);
          break;
        case RenderMode::MedialNormalRgb:
          if (medial) color = normal_rgb(nm);
          break;
        case RenderMode::AnalyticalNormalRgb:
          if (s.analytical_ok[kk]) color = normal_rgb(s.analytical_normal.col(k));
          break;
        case RenderMode::MeanCurvature:
          if (s.frame_ok[kk]) color = diverging(s.frame[kk].mean_curvature / params.curvature_max);
          break;
        case RenderMode::Translucency:
          if (medial) {
            const double k_t = translucency_coeff(s.radius(k), nm, cam.view, tp);
            color = gray(0.1 + 0.6 * lambert + 0.3 * k_t);
          }
          break;
        case RenderMode::Ward:
          if (s.frame_ok[kk]) {
            const double spec = ward_coeff(s.frame[kk], -cam.view, -light, params.ward);
            const double nl = std::max(0.0, -nm.dot(light));
            color = gray(0.1 + 0.6 * lambert + 0.05 * spec * nl);
          }
          break;
      }
      if (color) {
        res.image.set(r, c, *color);
        status[pix] = 1;
      } else {
        res.image.set(r, c, kDegenerate);
        status[pix] = 2;
      }
    }
  });

  if (mode == RenderMode::MedialAxis) {
    for (std::size_t pix = 0; pix < status.size(); ++pix) {
      if (status[pix] == 0) continue;
      const auto [u, v] = cam.project(centers.col(static_cast<Eigen::Index>(pix)));
      const long c = std::lround(u), r = std::lround(v);
      if (r >= 0 && r < h && c >= 0 && c < w) res.image.set(static_cast<int>(r), static_cast<int>(c), kMedialDot);
    }
  }

  RenderStats& st = res.stats;
  st.mode = render_mode_name(mode);
  st.width = w;
  st.height = h;
  for (auto s : status) {
    if (s == 0) ++st.miss;
    if (s == 1) ++st.hit;
    if (s == 2) ++st.degenerate;
  }
  st.forward_rays = forward_ray_count() - forward_before;
  st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

std::vector<Vec3> orbit_directions(int frames, double elevation_deg) {
  if (frames <= 0) throw InvalidInputError("orbit needs at least one frame");
  const double el = elevation_deg * std::numbers::pi / 180.0;
  std::vector<Vec3> out;
  for (int i = 0; i < frames; ++i) {
    const double az = 2.0 * std::numbers::pi * i / frames;
    // The camera sits at -view, so the view points back toward the origin.
    const Vec3 eye(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
    out.push_back(-eye);
  }
  return out;
}

std::vector<Eigen::VectorXd> interpolate_latents(const Eigen::VectorXd& a, const Eigen::VectorXd& b, int frames) {
  if (frames < 2) throw InvalidInputError("latent interpolation needs at least two frames");
  if (a.size() != b.size()) throw InvalidInputError("latent endpoints differ in size");
  std::vector<Eigen::VectorXd> out;
  for (int i = 0; i < frames; ++i) {
    const double t = static_cast<double>(i) / (frames - 1);
    out.push_back((1.0 - t) * a + t * b);
  }
  return out;
}

}  // namespace marf
