#include "marf/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>

#include <Eigen/Geometry>

#include "json.hpp"

#include "marf/error.hpp"
#include "marf/parallel.hpp"
#include "marf/rng.hpp"

namespace marf {

namespace {

constexpr char kMagic[8] = {'M', 'A', 'R', 'F', 'D', 'S', '1', '\0'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kPixelBytes = 1 + 7 * 4;

template <class T>
void put(std::vector<char>& out, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.insert(out.end(), b, b + sizeof(T));
}

class Reader {
 public:
  Reader(std::vector<char> data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  template <class T>
  T get() {
    if (pos_ + sizeof(T) > data_.size()) throw FormatError("truncated dataset file '" + path_ + "'");
    char b[sizeof(T)];
    std::memcpy(b, data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::vector<char> data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

std::size_t ViewMap::count(PixelStatus s) const {
  std::size_t n = 0;
  for (const auto& p : pixels) n += p.status == s;
  return n;
}

std::vector<Vec3> sample_views(int count, std::uint64_t seed) {
  if (count <= 0) throw InvalidInputError("view count must be positive");
  std::vector<Vec3> out;
  if (count == 1) {
    out.push_back(Vec3::UnitZ());
  } else {
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < count; ++i) {
      const double z = 1.0 - 2.0 * i / (count - 1);
      const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
      const double phi = golden * i;
      out.emplace_back(rho * std::cos(phi), rho * std::sin(phi), z);
    }
  }
  if (seed != 0) {
    CounterRng rng(seed, 11);
    Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q.normalize();
    for (auto& v : out) v = (q * v).normalized();
  }
  return out;
}

ViewMap cast_view(const Shape& shape, const Vec3& direction, int width, int height) {
  const OrthoCamera cam = OrthoCamera::look(direction, width, height);
  ViewMap view;
  view.direction = cam.view;
  view.width = width;
  view.height = height;
  view.pixels.resize(static_cast<std::size_t>(width) * static_cast<std::size_t>(height));
  parallel_for(static_cast<std::size_t>(height), [&](std::size_t row) {
    for (int col = 0; col < width; ++col) {
      const CastResult c = shape.cast(cam.ray(static_cast<int>(row), col));
      Pixel& px = view.pixels[row * static_cast<std::size_t>(width) + static_cast<std::size_t>(col)];
      if (!c.hit) {
        px.status = PixelStatus::Miss;
      } else if (!c.front_facing) {
        px.status = PixelStatus::Missing;
      } else {
        px.status = PixelStatus::Hit;
        px.p = c.point.cast<float>();
        px.n = c.normal.cast<float>();
      }
    }
  });
  return view;
}

void approximate_silhouettes(ViewMap& view, const KdTree& cloud, const SilhouetteOptions& opts) {
  const OrthoCamera cam = view.camera();
  const double outer = 1.0 + opts.margin;
  parallel_for(view.pixels.size(), [&](std::size_t i) {
    Pixel& px = view.pixels[i];
    if (px.status != PixelStatus::Miss) return;
    const Ray ray = cam.ray(static_cast<int>(i) / view.width, static_cast<int>(i) % view.width);
    const Vec3& d = ray.direction;
    const double tf = -ray.origin.dot(d);
    const double rho = (ray.origin + tf * d).norm();
    double s = std::numeric_limits<double>::infinity();
    if (cloud.empty()) {
      s = std::abs(rho - 1.0);
    } else {
      // The closest approach of the line to any point of the unit ball lies
      // within distance 1 of the foot along the line.
      auto dist_at = [&](double t) { return cloud.nearest(ray.origin + t * d).distance; };
      double t = tf - outer, prev = t, lo = t, hi = t;
      bool last_was_best = false;
      for (int k = 0; k < opts.max_steps && t <= tf + outer; ++k) {
        const double dist = dist_at(t);
        if (last_was_best) hi = t;
        last_was_best = dist < s;
        if (last_was_best) {
          s = dist;
          lo = prev;
          hi = t;
        }
        prev = t;
        t += std::max(opts.step_fraction * dist, 1e-6);
      }
      if (last_was_best) hi = t;
      // Golden-section refinement between the neighbours of the best sample.
      constexpr double g = 0.6180339887498949;
      double a = hi - g * (hi - lo), b = lo + g * (hi - lo);
      double fa = dist_at(a), fb = dist_at(b);
      for (int k = 0; k < opts.refine_steps; ++k) {
        if (fa < fb) {
          hi = b;
          b = a;
          fb = fa;
          a = hi - g * (hi - lo);
          fa = dist_at(a);
        } else {
          lo = a;
          a = b;
          fa = fb;
          b = lo + g * (hi - lo);
          fb = dist_at(b);
        }
      }
      s = std::min({s, fa, fb});
    }
    px.s = static_cast<float>(std::max(s, opts.floor));
  });
}

KdTree hit_cloud(std::span<const ViewMap> views) {
  std::vector<Vec3> pts;
  for (const auto& v : views) {
    for (const auto& px : v.pixels) {
      if (px.status == PixelStatus::Hit) pts.push_back(px.p.cast<double>());
    }
  }
  return KdTree(std::move(pts));
}

void approximate_silhouettes(ViewMap& view, const SilhouetteOptions& opts) {
  approximate_silhouettes(view, hit_cloud(std::span<const ViewMap>(&view, 1)), opts);
}

ViewMap render_view(const Shape& shape, const Vec3& direction, int width, int height, const SilhouetteOptions& opts) {
  ViewMap v = cast_view(shape, direction, width, height);
  approximate_silhouettes(v, opts);
  return v;
}

Dataset generate_dataset(std::span<const Shape> shapes, const DatasetOptions& opts) {
  if (shapes.empty()) throw InvalidInputError("dataset needs at least one shape");
  if (opts.width <= 0 || opts.height <= 0) throw InvalidInputError("resolution must be positive");
  const auto dirs = sample_views(opts.views, opts.seed);
  Dataset ds;
  ds.options = opts;
  for (const auto& shape : shapes) {
    ShapeRecord rec;
    rec.spec = shape.spec();
    rec.normalization = shape.normalization();
    for (const auto& d : dirs) rec.views.push_back(cast_view(shape, d, opts.width, opts.height));
    const KdTree cloud = hit_cloud(rec.views);
    for (auto& v : rec.views) approximate_silhouettes(v, cloud, opts.silhouette);
    ds.shapes.push_back(std::move(rec));
  }
  return ds;
}

void write_dataset(const Dataset& ds, const std::string& path) {
  if (ds.shapes.empty()) throw InvalidInputError("cannot write an empty dataset");
  const auto& first = ds.shapes.front().views;
  if (first.empty()) throw InvalidInputError("cannot write a dataset without views");
  const int w = first.front().width, h = first.front().height;
  for (const auto& s : ds.shapes) {
    if (s.views.size() != first.size()) throw InvalidInputError("every shape needs the same number of views");
    for (const auto& v : s.views) {
      if (v.width != w || v.height != h) throw InvalidInputError("every view needs the same resolution");
    }
  }
  std::vector<char> out(kMagic, kMagic + 8);
  put(out, kVersion);
  put(out, static_cast<std::uint32_t>(ds.shapes.size()));
  put(out, static_cast<std::uint32_t>(first.size()));
  put(out, static_cast<std::uint32_t>(w));
  put(out, static_cast<std::uint32_t>(h));
  for (const auto& s : ds.shapes) {
    put(out, s.normalization.scale);
    for (int k = 0; k < 3; ++k) put(out, s.normalization.translation[k]);
    for (const auto& v : s.views) {
      for (int k = 0; k < 3; ++k) put(out, v.direction[k]);
      for (const auto& px : v.pixels) {
        put(out, static_cast<std::uint8_t>(px.status));
        for (int k = 0; k < 3; ++k) put(out, px.p[k]);
        for (int k = 0; k < 3; ++k) put(out, px.n[k]);
        put(out, px.s);
      }
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f || !f.write(out.data(), static_cast<std::streamsize>(out.size()))) {
    throw FormatError("cannot write dataset '" + path + "'");
  }

  nlohmann::json j;
  j["format"] = "MARFDS1";
  j["version"] = kVersion;
  j["seed"] = ds.options.seed;
  j["views"] = first.size();
  j["width"] = w;
  j["height"] = h;
  j["silhouette"] = {{"step_fraction", ds.options.silhouette.step_fraction},
                     {"margin", ds.options.silhouette.margin},
                     {"floor", ds.options.silhouette.floor}};
  j["shapes"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.shapes.size(); ++i) {
    const auto& s = ds.shapes[i];
    j["shapes"].push_back({{"id", i},
                           {"spec", s.spec},
                           {"scale", s.normalization.scale},
                           {"translation", {s.normalization.translation.x(), s.normalization.translation.y(),
                                            s.normalization.translation.z()}}});
  }
  std::ofstream side(path + ".json");
  side << j.dump(2) << '\n';
}

Dataset read_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open dataset '" + path + "'");
  std::vector<char> data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (data.size() < 8 || std::memcmp(data.data(), kMagic, 8) != 0) {
    throw FormatError("'" + path + "' is not a MARFDS1 dataset");
  }
  data.erase(data.begin(), data.begin() + 8);
  Reader in(std::move(data), path);
  const auto version = in.get<std::uint32_t>();
  if (version != kVersion) throw FormatError("unsupported dataset version " + std::to_string(version));
  const auto shapes = in.get<std::uint32_t>();
  const auto views = in.get<std::uint32_t>();
  const auto w = in.get<std::uint32_t>();
  const auto h = in.get<std::uint32_t>();
  if (w == 0 || h == 0 || w > 65536 || h > 65536) throw FormatError("bad dataset resolution");
  const std::size_t per_view = 24 + static_cast<std::size_t>(w) * h * kPixelBytes;
  const std::size_t expected = static_cast<std::size_t>(shapes) * (32 + static_cast<std::size_t>(views) * per_view);
  if (in.remaining() != expected) throw FormatError("dataset '" + path + "' has the wrong size");

  Dataset ds;
  ds.options.views = static_cast<int>(views);
  ds.options.width = static_cast<int>(w);
  ds.options.height = static_cast<int>(h);
  for (std::uint32_t s = 0; s < shapes; ++s) {
    ShapeRecord rec;
    rec.spec = "shape" + std::to_string(s);
    rec.normalization.scale = in.get<double>();
    for (int k = 0; k < 3; ++k) rec.normalization.translation[k] = in.get<double>();
    for (std::uint32_t v = 0; v < views; ++v) {
      ViewMap view;
      for (int k = 0; k < 3; ++k) view.direction[k] = in.get<double>();
      view.width = static_cast<int>(w);
      view.height = static_cast<int>(h);
      view.pixels.resize(static_cast<std::size_t>(w) * h);
      for (auto& px : view.pixels) {
        const auto st = in.get<std::uint8_t>();
        if (st > 2) throw FormatError("bad pixel status " + std::to_string(st));
        px.status = static_cast<PixelStatus>(st);
        for (int k = 0; k < 3; ++k) px.p[k] = in.get<float>();
        for (int k = 0; k < 3; ++k) px.n[k] = in.get<float>();
        px.s = in.get<float>();
      }
      rec.views.push_back(std::move(view));
    }
    ds.shapes.push_back(std::move(rec));
  }

  if (std::filesystem::exists(path + ".json")) {
    try {
      std::ifstream side(path + ".json");
      const auto j = nlohmann::json::parse(side);
      ds.options.seed = j.value("seed", std::uint64_t{0});
      if (j.contains("silhouette")) {
        const auto& sj = j["silhouette"];
        ds.options.silhouette.step_fraction = sj.value("step_fraction", ds.options.silhouette.step_fraction);
        ds.options.silhouette.margin = sj.value("margin", ds.options.silhouette.margin);
        ds.options.silhouette.floor = sj.value("floor", ds.options.silhouette.floor);
      }
      if (j.contains("shapes")) {
        for (const auto& sj : j["shapes"]) {
          const auto id = sj.at("id").get<std::size_t>();
          if (id < ds.shapes.size()) ds.shapes[id].spec = sj.at("spec").get<std::string>();
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("bad dataset sidecar '" + path + ".json': " + e.what());
    }
  }
  return ds;
}

std::vector<int> stride_pixels(int width, int height, int stride, int a, int b) {
  if (stride <= 0) throw InvalidInputError("stride must be positive");
  if (a < 0 || a >= stride || b < 0 || b >= stride) throw InvalidInputError("sub-image offset out of range");
  std::vector<int> out;
  for (int r = a; r < height; r += stride) {
    for (int c = b; c < width; c += stride) out.push_back(r * width + c);
  }
  return out;
}

std::vector<std::vector<int>> stride_split(int width, int height, int stride) {
  std::vector<std::vector<int>> out;
  for (int a = 0; a < stride; ++a) {
    for (int b = 0; b < stride; ++b) out.push_back(stride_pixels(width, height, stride, a, b));
  }
  return out;
}

RayBatch view_batch(const ViewMap& view, std::span<const int> pixels, int shape_id) {
  const OrthoCamera cam = view.camera();
  std::vector<SupervisionSample> samples;
  samples.reserve(pixels.size());
  for (int i : pixels) {
    const Pixel& px = view.pixels[static_cast<std::size_t>(i)];
    SupervisionSample s;
    s.ray = cam.ray(i / view.width, i % view.width);
    if (px.status == PixelStatus::Hit) {
      s.p_gt = px.p.cast<double>();
      s.n_gt = px.n.cast<double>().normalized();
    } else if (px.status == PixelStatus::Miss) {
      s.s_gt = static_cast<double>(px.s);
    }
    samples.push_back(s);
  }
  return make_ray_batch(samples, shape_id);
}

TrainingItems split_dataset(const Dataset& ds, int stride) {
  TrainingItems out;
  for (std::size_t s = 0; s < ds.shapes.size(); ++s) {
    const auto& views = ds.shapes[s].views;
    for (std::size_t v = 0; v < views.size(); ++v) {
      for (int a = 0; a < stride; ++a) {
        for (int b = 0; b < stride; ++b) {
          const auto px = stride_pixels(views[v].width, views[v].height, stride, a, b);
          out.items.push_back(view_batch(views[v], px, static_cast<int>(s)));
          out.refs.push_back({static_cast<int>(s), static_cast<int>(v), a, b});
        }
      }
    }
  }
  return out;
}

std::vector<std::vector<int>> make_batches(std::size_t item_count, int batch_size, std::uint64_t seed, int epoch) {
  if (batch_size <= 0) throw InvalidInputError("batch size must be positive");
  CounterRng rng(seed, 0x5EED00000000ULL + static_cast<std::uint64_t>(epoch));
  const auto order = rng.permutation(static_cast<int>(item_count));
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

}  // namespace marf
