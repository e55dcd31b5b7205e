#include "marf/evaluation.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "json.hpp"
#include "marf/dataset.hpp"
#include "marf/error.hpp"
#include "marf/kdtree.hpp"
#include "marf/parallel.hpp"
#include "marf/rng.hpp"

namespace marf {

using ad::Mat;

namespace {

constexpr std::uint64_t kPairStream = 0xE7A1000000ULL;
constexpr std::uint64_t kSampleStream = 0xE7A2000000ULL;

// Unordered pair k of n items, k in [0, n(n-1)/2), row by row.
std::pair<int, int> pair_of(std::int64_t k, int n) {
  int i = 0;
  std::int64_t row = n - 1;
  while (k >= row) {
    k -= row;
    ++i;
    --row;
  }
  return {i, i + 1 + static_cast<int>(k)};
}

std::vector<double> nearest_distances(std::span<const Vec3> from, const KdTree& to, std::vector<int>* index) {
  std::vector<double> d(from.size());
  if (index) index->resize(from.size());
  parallel_for(from.size(), [&](std::size_t i) {
    const KdTree::Hit h = to.nearest(from[i]);
    d[i] = h.distance;
    if (index) (*index)[i] = h.index;
  });
  return d;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

}  // namespace

void ProtocolConfig::validate() const {
  if (viewpoints < 2) throw InvalidInputError("protocol needs at least two viewpoints");
  if (ray_budget < 1) throw InvalidInputError("protocol ray budget must be positive");
  if (samples < 1) throw InvalidInputError("protocol sample budget must be positive");
}

ProtocolRays protocol_rays(int viewpoint_count, int budget, std::uint64_t seed) {
  ProtocolConfig{viewpoint_count, budget, 1, seed}.validate();
  const std::vector<Vec3> views = sample_views(viewpoint_count, seed);
  const std::int64_t total = static_cast<std::int64_t>(viewpoint_count) * (viewpoint_count - 1) / 2;
  CounterRng rng(seed, kPairStream);

  std::vector<std::int64_t> picks;
  if (budget >= total) {
    picks.resize(static_cast<std::size_t>(total));
    std::iota(picks.begin(), picks.end(), std::int64_t{0});
  } else {
    std::unordered_set<std::int64_t> seen;
    while (static_cast<int>(picks.size()) < budget) {
      const auto k = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(total)));
      if (seen.insert(k).second) picks.push_back(k);
    }
  }
  ProtocolRays rays;
  const auto n = static_cast<Eigen::Index>(picks.size());
  rays.origins.resize(3, n);
  rays.directions.resize(3, n);
  rays.ends.resize(3, n);
  for (Eigen::Index c = 0; c < n; ++c) {
    auto [i, j] = pair_of(picks[static_cast<std::size_t>(c)], viewpoint_count);
    if (rng.uniform() < 0.5) std::swap(i, j);
    const Vec3& a = views[static_cast<std::size_t>(i)];
    const Vec3& b = views[static_cast<std::size_t>(j)];
    rays.origins.col(c) = a;
    rays.ends.col(c) = b;
    rays.directions.col(c) = (b - a).normalized();
  }
  return rays;
}

Classification classification_metrics(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) throw InvalidInputError("prediction and ground truth differ in length");
  Classification c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    if (p && g) ++c.tp;
    if (p && !g) ++c.fp;
    if (!p && g) ++c.fn;
    if (!p && !g) ++c.tn;
  }
  const bool both_empty = c.tp + c.fp + c.fn == 0;
  auto ratio = [&](std::int64_t num, std::int64_t den) {
    if (den == 0) return both_empty ? 1.0 : 0.0;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  c.precision = ratio(c.tp, c.tp + c.fp);
  c.recall = ratio(c.tp, c.tp + c.fn);
  c.iou = ratio(c.tp, c.tp + c.fp + c.fn);
  return c;
}

double chamfer(std::span<const Vec3> u, std::span<const Vec3> v) {
  if (u.empty() || v.empty()) throw InvalidInputError("chamfer distance needs two non-empty clouds");
  const KdTree tu(std::vector<Vec3>(u.begin(), u.end()));
  const KdTree tv(std::vector<Vec3>(v.begin(), v.end()));
  return mean(nearest_distances(u, tv, nullptr)) + mean(nearest_distances(v, tu, nullptr));
}

CosineResult cosine_metric(const OrientedPointCloud& u, const OrientedPointCloud& v) {
  if (u.points.empty() || v.points.empty()) throw InvalidInputError("cosine metric needs two non-empty clouds");
  if (u.points.size() != u.normals.size() || v.points.size() != v.normals.size()) {
    throw InvalidInputError("every point needs a normal");
  }
  auto one_way = [](const OrientedPointCloud& a, const OrientedPointCloud& b) {
    const KdTree tb(b.points);
    std::vector<int> idx;
    nearest_distances(a.points, tb, &idx);
    double s = 0.0;
    for (std::size_t i = 0; i < idx.size(); ++i) s += a.normals[i].dot(b.normals[static_cast<std::size_t>(idx[i])]);
    return s / static_cast<double>(idx.size());
  };
  CosineResult r;
  r.raw = one_way(u, v) + one_way(v, u);
  r.value = 0.5 * r.raw;
  return r;
}

Predictions predict_field(const SurfaceField& field, const ProtocolRays& rays, bool medial, bool differential,
                          int chunk) {
  if (chunk <= 0) throw InvalidInputError("chunk must be positive");
  const Eigen::Index n = rays.size();
  Predictions p;
  p.hit.assign(static_cast<std::size_t>(n), 0);
  p.point = Mat::Zero(3, n);
  if (medial) {
    p.medial_normal = Mat::Zero(3, n);
    p.medial_ok.assign(static_cast<std::size_t>(n), 0);
  }
  if (differential) {
    p.analytical_normal = Mat::Zero(3, n);
    p.analytical_ok.assign(static_cast<std::size_t>(n), 0);
  }
  const auto blocks = static_cast<std::size_t>((n + chunk - 1) / chunk);
  parallel_for(blocks, [&](std::size_t b) {
    const Eigen::Index start = static_cast<Eigen::Index>(b) * chunk;
    const Eigen::Index m = std::min<Eigen::Index>(chunk, n - start);
    const SurfaceBatch s = evaluate_surface(field, rays.origins.middleCols(start, m), rays.directions.middleCols(start, m),
                                            differential);
    p.point.middleCols(start, m) = s.point;
    for (Eigen::Index k = 0; k < m; ++k) {
      const auto dst = static_cast<std::size_t>(start + k);
      const auto src = static_cast<std::size_t>(k);
      p.hit[dst] = s.hit[src];
      if (medial) p.medial_ok[dst] = s.medial_ok[src];
      if (differential) p.analytical_ok[dst] = s.analytical_ok[src];
    }
    if (medial) p.medial_normal->middleCols(start, m) = s.medial_normal;
    if (differential) p.analytical_normal->middleCols(start, m) = s.analytical_normal;
  });
  return p;
}

Predictions predict_shape(const Shape& shape, const ProtocolRays& rays) {
  const Eigen::Index n = rays.size();
  Predictions p;
  p.hit.assign(static_cast<std::size_t>(n), 0);
  p.point = Mat::Zero(3, n);
  p.analytical_normal = Mat::Zero(3, n);
  p.analytical_ok.assign(static_cast<std::size_t>(n), 0);
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
    const auto c = static_cast<Eigen::Index>(i);
    const CastResult r = shape.cast({rays.origins.col(c), rays.directions.col(c)});
    if (!r.hit) return;
    p.hit[i] = 1;
    p.point.col(c) = r.point;
    p.analytical_normal->col(c) = r.normal;
    p.analytical_ok[i] = 1;
  });
  return p;
}

EvalReport evaluate(const Predictions& pred, const Predictions& gt, const ProtocolConfig& config) {
  config.validate();
  if (pred.hit.size() != gt.hit.size()) throw InvalidInputError("prediction and ground truth cover different rays");
  EvalReport rep;
  rep.seed = config.seed;
  rep.rays = static_cast<std::int64_t>(gt.hit.size());
  rep.cls = classification_metrics(pred.hit, gt.hit);

  std::vector<int> tp;
  for (std::size_t i = 0; i < gt.hit.size(); ++i) {
    if (pred.hit[i] && gt.hit[i]) tp.push_back(static_cast<int>(i));
  }
  if (tp.empty()) {
    rep.notes.push_back("no true-positive rays; CD and COS not computed");
    rep.cd = std::numeric_limits<double>::infinity();
    return rep;
  }
  if (static_cast<int>(tp.size()) > config.samples) {
    CounterRng rng(config.seed, kSampleStream);
    const std::vector<int> perm = rng.permutation(static_cast<int>(tp.size()));
    std::vector<int> pick;
    for (int k = 0; k < config.samples; ++k) pick.push_back(tp[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])]);
    std::sort(pick.begin(), pick.end());
    tp = std::move(pick);
  } else if (static_cast<int>(tp.size()) < config.samples) {
    rep.notes.push_back("only " + std::to_string(tp.size()) + " true-positive rays for a sample budget of " +
                        std::to_string(config.samples) + "; using all");
  }
  rep.samples = static_cast<std::int64_t>(tp.size());

  std::vector<Vec3> u, v;
  for (int i : tp) {
    u.push_back(pred.point.col(i));
    v.push_back(gt.point.col(i));
  }
  rep.cd = chamfer(u, v);

  if (!gt.analytical_normal) return rep;
  auto cos_with = [&](const Mat& normals, const std::vector<std::uint8_t>& ok, const char* label)
      -> std::optional<CosineResult> {
    OrientedPointCloud a, b;
    int dropped = 0;
    for (int i : tp) {
      const auto k = static_cast<std::size_t>(i);
      if (!ok[k] || !gt.analytical_ok[k]) {
        ++dropped;
        continue;
      }
      a.points.push_back(pred.point.col(i));
      a.normals.push_back(normals.col(i));
      b.points.push_back(gt.point.col(i));
      b.normals.push_back(gt.analytical_normal->col(i));
    }
    if (dropped > 0) rep.notes.push_back(std::string(label) + ": " + std::to_string(dropped) + " samples without a normal");
    if (a.points.empty()) return std::nullopt;
    return cosine_metric(a, b);
  };
  if (pred.medial_normal) rep.cos_medial = cos_with(*pred.medial_normal, pred.medial_ok, "cos_medial");
  if (pred.analytical_normal) rep.cos_analytical = cos_with(*pred.analytical_normal, pred.analytical_ok, "cos_analytical");
  return rep;
}

EvalReport evaluate_network(const NetworkParams& params, const Shape& shape, const ProtocolConfig& config,
                            const std::optional<Eigen::VectorXd>& latent) {
  config.validate();
  const ProtocolRays rays = protocol_rays(config.viewpoints, config.ray_budget, config.seed);
  const Predictions pred =
      predict_field(network_field(params, latent), rays, params.config.head == Head::Marf, true);
  return evaluate(pred, predict_shape(shape, rays), config);
}

EvalReport evaluate_shape(const Shape& predicted, const Shape& truth, const ProtocolConfig& config) {
  config.validate();
  const ProtocolRays rays = protocol_rays(config.viewpoints, config.ray_budget, config.seed);
  return evaluate(predict_shape(predicted, rays), predict_shape(truth, rays), config);
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["tp"] = cls.tp;
  j["fp"] = cls.fp;
  j["fn"] = cls.fn;
  j["tn"] = cls.tn;
  j["precision"] = cls.precision;
  j["recall"] = cls.recall;
  j["iou"] = cls.iou;
  j["cd"] = std::isfinite(cd) ? nlohmann::json(cd) : nlohmann::json(nullptr);
  auto cos = [](const std::optional<CosineResult>& c) {
    return c ? nlohmann::json{{"value", c->value}, {"raw", c->raw}} : nlohmann::json(nullptr);
  };
  j["cos_medial"] = cos(cos_medial);
  j["cos_analytical"] = cos(cos_analytical);
  j["provenance"] = {{"rays", rays}, {"samples", samples}, {"seed", seed}, {"notes", notes}};
  return j.dump(2);
}

void append_results_csv(const std::string& path, const std::string& checkpoint, const std::string& shape,
                        const EvalReport& r) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream f(path, std::ios::app);
  if (!f) throw FormatError("cannot write results table '" + path + "'");
  if (fresh) f << "checkpoint,shape,seed,tp,fp,fn,tn,precision,recall,iou,cd,cos_medial,cos_analytical,rays,samples\n";
  auto quote = [](const std::string& s) {
    std::string out = "\"";
    for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return out + "\"";
  };
  std::ostringstream row;
  row << std::setprecision(17) << quote(checkpoint) << ',' << quote(shape) << ',' << r.seed << ',' << r.cls.tp << ','
      << r.cls.fp << ',' << r.cls.fn << ',' << r.cls.tn << ',' << r.cls.precision << ',' << r.cls.recall << ','
      << r.cls.iou << ',' << r.cd << ',';
  if (r.cos_medial) row << r.cos_medial->value;
  row << ',';
  if (r.cos_analytical) row << r.cos_analytical->value;
  row << ',' << r.rays << ',' << r.samples << '\n';
  f << row.str();
}

}  // namespace marf
