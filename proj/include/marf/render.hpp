#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "marf/camera.hpp"
#include "marf/shading.hpp"

namespace marf {

enum class RenderMode {
  Lambertian,
  CandidateColor,
  MedialAxis,
  MedialRadius,
  MedialNormalRgb,
  AnalyticalNormalRgb,
  MeanCurvature,
  Translucency,
  Ward,
};

const char* render_mode_name(RenderMode mode);
/// Throws InvalidInputError for an unknown name.
RenderMode parse_render_mode(const std::string& name);
const std::vector<RenderMode>& all_render_modes();
/// Modes that run the forward-mode tangent passes.
bool needs_derivatives(RenderMode mode);

using Rgb = std::array<std::uint8_t, 3>;

inline constexpr Rgb kBackground{255, 255, 255};
inline constexpr Rgb kDegenerate{255, 0, 255};
inline constexpr Rgb kMedialDot{220, 20, 20};

/// Fixed candidate palette; candidate i uses entry i mod 16.
const std::array<Rgb, 16>& candidate_palette();

/// Two-ended map: -1 blue, 0 white, +1 red (clamped).
Rgb diverging(double v);

struct RenderParams {
  /// Direction the light travels; zero means along the view (a headlight).
  Vec3 light = Vec3::Zero();
  TranslucencyParams translucency;
  WardParams ward;
  /// medial_radius maps [0, radius_max] onto the blue..red scale.
  double radius_max = 1.0;
  /// mean_curvature maps [-curvature_max, curvature_max].
  double curvature_max = 5.0;
  /// Rays per field evaluation.
  int chunk = 1024;
};

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  Image() = default;
  Image(int w, int h, Rgb fill = kBackground);
  Rgb at(int row, int col) const;
  void set(int row, int col, Rgb c);
};

/// Binary P6, 8-bit. Throws FormatError on IO failure or a malformed file.
void write_ppm(const Image& image, const std::string& path);
Image read_ppm(const std::string& path);

struct RenderStats {
  std::string mode;
  int width = 0, height = 0;
  int hit = 0, miss = 0, degenerate = 0;
  std::uint64_t forward_rays = 0;
  double seconds = 0.0;

  std::string to_json() const;
};

struct RenderResult {
  Image image;
  RenderStats stats;
  /// Winning candidate per pixel (row-major), -1 for background.
  std::vector<int> winner;
};

/// One field evaluation per pixel; rows are split across threads.
RenderResult render(const SurfaceField& field, const OrthoCamera& camera, RenderMode mode,
                    const RenderParams& params = {});

/// `frames` view directions circling the z axis at `elevation_deg` above the
/// xy-plane, looking at the origin.
std::vector<Vec3> orbit_directions(int frames, double elevation_deg);

/// frames >= 2 evenly spaced points from a to b inclusive.
std::vector<Eigen::VectorXd> interpolate_latents(const Eigen::VectorXd& a, const Eigen::VectorXd& b, int frames);

}  // namespace marf
