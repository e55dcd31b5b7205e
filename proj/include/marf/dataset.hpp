#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "marf/camera.hpp"
#include "marf/kdtree.hpp"
#include "marf/losses.hpp"
#include "marf/shapes.hpp"

namespace marf {

enum class PixelStatus : std::uint8_t { Miss = 0, Hit = 1, Missing = 2 };

/// One pixel record; stored in single precision as on disk.
struct Pixel {
  PixelStatus status = PixelStatus::Miss;
  Eigen::Vector3f p = Eigen::Vector3f::Zero();
  Eigen::Vector3f n = Eigen::Vector3f::Zero();
  float s = 0.0f;
};

struct ViewMap {
  Vec3 direction = Vec3::UnitZ();
  int width = 0;
  int height = 0;
  std::vector<Pixel> pixels;  // row-major

  OrthoCamera camera() const { return OrthoCamera::look(direction, width, height); }
  const Pixel& at(int row, int col) const { return pixels[static_cast<std::size_t>(row * width + col)]; }
  std::size_t count(PixelStatus s) const;
};

/// Fibonacci spiral with both poles included (so two views are antipodal).
/// A nonzero seed applies a fixed random rotation to the whole set.
std::vector<Vec3> sample_views(int count, std::uint64_t seed = 0);

struct SilhouetteOptions {
  double step_fraction = 0.25;
  /// Marching covers the line segment within 1 + margin of the foot.
  double margin = 0.1;
  /// Lower bound on stored silhouette distances (keeps MISS strictly positive).
  double floor = 1e-7;
  int max_steps = 100000;
  /// Golden-section steps around the best march sample.
  int refine_steps = 16;
};

/// Casts every pixel; MISS pixels are left with s = 0.
ViewMap cast_view(const Shape& shape, const Vec3& direction, int width, int height);

/// Fills s on MISS pixels by marching each ray against the nearest point of `cloud`.
void approximate_silhouettes(ViewMap& view, const KdTree& cloud, const SilhouetteOptions& opts = {});
/// Same, using the view's own hit points.
void approximate_silhouettes(ViewMap& view, const SilhouetteOptions& opts = {});

/// cast_view followed by approximate_silhouettes on the view's own hits.
ViewMap render_view(const Shape& shape, const Vec3& direction, int width, int height,
                    const SilhouetteOptions& opts = {});

/// Hit points of all views as one nearest-neighbour index.
KdTree hit_cloud(std::span<const ViewMap> views);

struct DatasetOptions {
  int views = 20;
  int width = 64;
  int height = 64;
  std::uint64_t seed = 0;
  SilhouetteOptions silhouette;
};

struct ShapeRecord {
  std::string spec;
  Normalization normalization;
  std::vector<ViewMap> views;
};

struct Dataset {
  std::vector<ShapeRecord> shapes;
  DatasetOptions options;
};

/// Renders every shape from the same views. Silhouettes march against the hit
/// points of all views of the shape.
Dataset generate_dataset(std::span<const Shape> shapes, const DatasetOptions& opts);

/// Writes the binary file and a JSON sidecar at `path + ".json"`.
void write_dataset(const Dataset& ds, const std::string& path);
/// Throws FormatError on a bad magic, version, size or status value.
Dataset read_dataset(const std::string& path);

/// Pixel indices (row-major) of sub-image (a, b): rows a + i*stride, cols b + j*stride.
std::vector<int> stride_pixels(int width, int height, int stride, int a, int b);
/// All stride^2 sub-images, ordered by (a, b).
std::vector<std::vector<int>> stride_split(int width, int height, int stride);

/// Supervision for the listed pixels of a view.
RayBatch view_batch(const ViewMap& view, std::span<const int> pixels, int shape_id);

struct SubImageRef {
  int shape_id = 0;
  int view = 0;
  int a = 0;
  int b = 0;
};

struct TrainingItems {
  std::vector<RayBatch> items;
  std::vector<SubImageRef> refs;
};

TrainingItems split_dataset(const Dataset& ds, int stride);

/// Shuffled partition of [0, item_count) into batches of `batch_size` (the last
/// one may be shorter). The order depends only on (seed, epoch).
std::vector<std::vector<int>> make_batches(std::size_t item_count, int batch_size, std::uint64_t seed, int epoch);

}  // namespace marf
