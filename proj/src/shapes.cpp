#include "marf/shapes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "marf/error.hpp"

namespace marf {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::vector<double> parse_numbers(const std::string& s, const std::string& spec) {
  std::vector<double> out;
  for (const auto& tok : split(s, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(tok, &used);
    } catch (const std::exception&) {
      throw InvalidInputError("bad number '" + tok + "' in shape spec '" + spec + "'");
    }
    if (used != tok.size() || !std::isfinite(v)) {
      throw InvalidInputError("bad number '" + tok + "' in shape spec '" + spec + "'");
    }
    out.push_back(v);
  }
  return out;
}

void require_positive(const std::vector<double>& v, const std::string& spec) {
  for (double x : v) {
    if (!(x > 0.0)) throw InvalidInputError("shape dimensions must be positive in '" + spec + "'");
  }
}

double sphere_near_root(const Vec3& o, const Vec3& d, const MedialAtom& a) {
  const Vec3 oc = o - a.center;
  const double b = d.dot(oc);
  const double disc = b * b - (oc.squaredNorm() - a.radius * a.radius);
  if (disc < 0.0) return kInf;
  return -b - std::sqrt(disc);
}

struct Aabb {
  Vec3 lo = Vec3::Constant(kInf);
  Vec3 hi = Vec3::Constant(-kInf);
  void grow(const Vec3& p) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
};

/// Parameter interval of the line inside the box; empty when lo > hi.
std::pair<double, double> slab(const Aabb& box, const Vec3& o, const Vec3& inv_d) {
  double t0 = -kInf, t1 = kInf;
  for (int a = 0; a < 3; ++a) {
    if (std::isinf(inv_d[a])) {
      if (o[a] < box.lo[a] || o[a] > box.hi[a]) return {kInf, -kInf};
      continue;
    }
    double ta = (box.lo[a] - o[a]) * inv_d[a];
    double tb = (box.hi[a] - o[a]) * inv_d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  return {t0, t1};
}

}  // namespace

struct Shape::MeshData {
  TriangleMesh mesh;
  struct Tri {
    Vec3 v0, e1, e2, normal;
  };
  std::vector<Tri> tris;
  struct Node {
    Aabb box;
    int left = -1, right = -1;
    int first = 0, count = 0;
  };
  std::vector<Node> nodes;
  std::vector<int> order;

  explicit MeshData(TriangleMesh m) : mesh(std::move(m)) {
    for (const auto& f : mesh.faces) {
      const Vec3& a = mesh.vertices[static_cast<std::size_t>(f[0])];
      const Vec3& b = mesh.vertices[static_cast<std::size_t>(f[1])];
      const Vec3& c = mesh.vertices[static_cast<std::size_t>(f[2])];
      const Vec3 n = (b - a).cross(c - a);
      // Degenerate triangles are skipped.
      if (!(n.norm() > 1e-14)) continue;
      tris.push_back({a, b - a, c - a, n.normalized()});
    }
    order.resize(tris.size());
    std::iota(order.begin(), order.end(), 0);
    if (!tris.empty()) build(0, static_cast<int>(tris.size()));
  }

  Vec3 centroid(int t) const {
    const Tri& r = tris[static_cast<std::size_t>(t)];
    return r.v0 + (r.e1 + r.e2) / 3.0;
  }

  int build(int first, int count) {
    const int id = static_cast<int>(nodes.size());
    nodes.emplace_back();
    Aabb box, cbox;
    for (int i = first; i < first + count; ++i) {
      const Tri& r = tris[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
      box.grow(r.v0);
      box.grow(r.v0 + r.e1);
      box.grow(r.v0 + r.e2);
      cbox.grow(centroid(order[static_cast<std::size_t>(i)]));
    }
    nodes[static_cast<std::size_t>(id)].box = box;
    if (count <= 4) {
      nodes[static_cast<std::size_t>(id)].first = first;
      nodes[static_cast<std::size_t>(id)].count = count;
      return id;
    }
    int axis = 0;
    (cbox.hi - cbox.lo).maxCoeff(&axis);
    const int mid = first + count / 2;
    std::nth_element(order.begin() + first, order.begin() + mid, order.begin() + first + count, [&](int a, int b) {
      const double ca = centroid(a)[axis], cb = centroid(b)[axis];
      return ca < cb || (ca == cb && a < b);
    });
    const int l = build(first, mid - first);
    const int r = build(mid, first + count - mid);
    nodes[static_cast<std::size_t>(id)].left = l;
    nodes[static_cast<std::size_t>(id)].right = r;
    return id;
  }

  CastResult cast(const Vec3& o, const Vec3& d) const {
    CastResult best;
    if (nodes.empty()) return best;
    double best_t = kInf;
    int best_tri = -1;
    const Vec3 inv_d(1.0 / d.x(), 1.0 / d.y(), 1.0 / d.z());
    std::vector<int> stack{0};
    while (!stack.empty()) {
      const Node& n = nodes[static_cast<std::size_t>(stack.back())];
      stack.pop_back();
      const auto [t0, t1] = slab(n.box, o, inv_d);
      if (t0 > t1 || t0 > best_t) continue;
      if (n.left < 0) {
        for (int i = n.first; i < n.first + n.count; ++i) {
          const int ti = order[static_cast<std::size_t>(i)];
          const Tri& tr = tris[static_cast<std::size_t>(ti)];
          // Moller-Trumbore without the t > 0 restriction.
          const Vec3 p = d.cross(tr.e2);
          const double det = tr.e1.dot(p);
          if (std::abs(det) < 1e-15) continue;
          const double inv = 1.0 / det;
          const Vec3 s = o - tr.v0;
          const double u = s.dot(p) * inv;
          if (u < -1e-12 || u > 1.0 + 1e-12) continue;
          const Vec3 q = s.cross(tr.e1);
          const double v = d.dot(q) * inv;
          if (v < -1e-12 || u + v > 1.0 + 1e-12) continue;
          const double t = tr.e2.dot(q) * inv;
          if (t < best_t || (t == best_t && ti < best_tri)) {
            best_t = t;
            best_tri = ti;
          }
        }
      } else {
        stack.push_back(n.left);
        stack.push_back(n.right);
      }
    }
    if (best_tri < 0) return best;
    const Tri& tr = tris[static_cast<std::size_t>(best_tri)];
    best.hit = true;
    best.t = best_t;
    best.point = o + best_t * d;
    best.normal = tr.normal;
    best.front_facing = tr.normal.dot(d) < 0.0;
    return best;
  }
};

TriangleMesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open mesh '" + path + "'");
  TriangleMesh m;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v") {
      Vec3 v;
      if (!(ls >> v.x() >> v.y() >> v.z())) throw FormatError(path + ":" + std::to_string(lineno) + ": bad vertex");
      m.vertices.push_back(v);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ls >> tok) {
        const auto slash = tok.find('/');
        int i = 0;
        try {
          i = std::stoi(tok.substr(0, slash));
        } catch (const std::exception&) {
          throw FormatError(path + ":" + std::to_string(lineno) + ": bad face index");
        }
        const int n = static_cast<int>(m.vertices.size());
        i = i < 0 ? n + i : i - 1;
        if (i < 0 || i >= n) throw FormatError(path + ":" + std::to_string(lineno) + ": face index out of range");
        idx.push_back(i);
      }
      if (idx.size() < 3) throw FormatError(path + ":" + std::to_string(lineno) + ": face with fewer than 3 vertices");
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) m.faces.push_back({idx[0], idx[k], idx[k + 1]});
    }
  }
  if (m.faces.empty()) throw FormatError("mesh '" + path + "' has no faces");
  return m;
}

namespace {

int ply_type_size(const std::string& t) {
  static const std::map<std::string, int> sizes{
      {"char", 1},  {"uchar", 1},  {"int8", 1},  {"uint8", 1},   {"short", 2},   {"ushort", 2},
      {"int16", 2}, {"uint16", 2}, {"int", 4},   {"uint", 4},    {"int32", 4},   {"uint32", 4},
      {"float", 4}, {"float32", 4}, {"double", 8}, {"float64", 8}};
  const auto it = sizes.find(t);
  if (it == sizes.end()) throw FormatError("unknown PLY type '" + t + "'");
  return it->second;
}

double ply_read(const char* p, const std::string& t) {
  auto get = [p]<class T>(T) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return static_cast<double>(v);
  };
  if (t == "char" || t == "int8") return get(std::int8_t{});
  if (t == "uchar" || t == "uint8") return get(std::uint8_t{});
  if (t == "short" || t == "int16") return get(std::int16_t{});
  if (t == "ushort" || t == "uint16") return get(std::uint16_t{});
  if (t == "int" || t == "int32") return get(std::int32_t{});
  if (t == "uint" || t == "uint32") return get(std::uint32_t{});
  if (t == "float" || t == "float32") return get(float{});
  return get(double{});
}

}  // namespace

TriangleMesh load_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open mesh '" + path + "'");
  struct Prop {
    std::string name, type, count_type;
    bool list = false;
  };
  struct Element {
    std::string name;
    std::size_t count = 0;
    std::vector<Prop> props;
  };
  std::vector<Element> elements;
  std::string line;
  if (!std::getline(in, line) || line.rfind("ply", 0) != 0) throw FormatError("'" + path + "' is not a PLY file");
  bool binary_le = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "format") {
      std::string f;
      ls >> f;
      binary_le = f == "binary_little_endian";
    } else if (tag == "element") {
      Element e;
      ls >> e.name >> e.count;
      elements.push_back(e);
    } else if (tag == "property") {
      if (elements.empty()) throw FormatError("PLY property before element");
      Prop p;
      ls >> p.type;
      if (p.type == "list") {
        p.list = true;
        ls >> p.count_type >> p.type;
      }
      ls >> p.name;
      elements.back().props.push_back(p);
    } else if (tag == "end_header") {
      break;
    }
  }
  if (!binary_le) throw FormatError("only binary little-endian PLY is supported");
  TriangleMesh m;
  std::vector<char> buf(8);
  auto read_value = [&](const std::string& type) {
    const int n = ply_type_size(type);
    if (!in.read(buf.data(), n)) throw FormatError("truncated PLY file '" + path + "'");
    return ply_read(buf.data(), type);
  };
  for (const auto& e : elements) {
    for (std::size_t k = 0; k < e.count; ++k) {
      Vec3 v = Vec3::Zero();
      std::vector<int> idx;
      for (const auto& p : e.props) {
        if (p.list) {
          const auto n = static_cast<std::size_t>(read_value(p.count_type));
          for (std::size_t j = 0; j < n; ++j) idx.push_back(static_cast<int>(read_value(p.type)));
        } else {
          const double x = read_value(p.type);
          if (p.name == "x") v.x() = x;
          if (p.name == "y") v.y() = x;
          if (p.name == "z") v.z() = x;
        }
      }
      if (e.name == "vertex") m.vertices.push_back(v);
      if (e.name == "face") {
        for (int i : idx) {
          if (i < 0 || static_cast<std::size_t>(i) >= m.vertices.size()) throw FormatError("PLY face index out of range");
        }
        for (std::size_t j = 1; j + 1 < idx.size(); ++j) m.faces.push_back({idx[0], idx[j], idx[j + 1]});
      }
    }
  }
  if (m.faces.empty()) throw FormatError("mesh '" + path + "' has no faces");
  return m;
}

TriangleMesh load_mesh(const std::string& path) {
  std::string ext = path.substr(path.find_last_of('.') == std::string::npos ? path.size() : path.find_last_of('.'));
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (ext == ".obj") return load_obj(path);
  if (ext == ".ply") return load_ply(path);
  throw FormatError("unsupported mesh format '" + path + "' (expected .obj or .ply)");
}

void save_obj(const TriangleMesh& mesh, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.precision(17);
  for (const auto& v : mesh.vertices) out << "v " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
  for (const auto& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

TriangleMesh make_icosphere(double radius, int subdivisions) {
  const double g = (1.0 + std::sqrt(5.0)) / 2.0;
  TriangleMesh m;
  m.vertices = {{-1, g, 0}, {1, g, 0}, {-1, -g, 0}, {1, -g, 0}, {0, -1, g}, {0, 1, g},
                {0, -1, -g}, {0, 1, -g}, {g, 0, -1}, {g, 0, 1}, {-g, 0, -1}, {-g, 0, 1}};
  m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
             {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
             {3, 8, 9},  {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (auto& v : m.vertices) v.normalize();
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> mid;
    auto midpoint = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      const auto it = mid.find(key);
      if (it != mid.end()) return it->second;
      m.vertices.push_back((m.vertices[static_cast<std::size_t>(a)] + m.vertices[static_cast<std::size_t>(b)]).normalized());
      const int id = static_cast<int>(m.vertices.size()) - 1;
      mid.emplace(key, id);
      return id;
    };
    std::vector<std::array<int, 3>> faces;
    for (const auto& f : m.faces) {
      const int ab = midpoint(f[0], f[1]), bc = midpoint(f[1], f[2]), ca = midpoint(f[2], f[0]);
      faces.push_back({f[0], ab, ca});
      faces.push_back({f[1], bc, ab});
      faces.push_back({f[2], ca, bc});
      faces.push_back({ab, bc, ca});
    }
    m.faces = std::move(faces);
  }
  for (auto& f : m.faces) {
    const Vec3& a = m.vertices[static_cast<std::size_t>(f[0])];
    const Vec3& b = m.vertices[static_cast<std::size_t>(f[1])];
    const Vec3& c = m.vertices[static_cast<std::size_t>(f[2])];
    if ((b - a).cross(c - a).dot(a + b + c) < 0.0) std::swap(f[1], f[2]);
  }
  for (auto& v : m.vertices) v *= radius;
  return m;
}

Shape Shape::parse(const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) throw InvalidInputError("shape spec '" + spec + "' lacks a ':'");
  const std::string kind = spec.substr(0, colon);
  const std::string rest = spec.substr(colon + 1);
  Shape s;
  if (kind == "sphere") {
    const auto v = parse_numbers(rest, spec);
    if (v.size() != 1) throw InvalidInputError("sphere takes one radius: '" + spec + "'");
    s = sphere(v[0]);
  } else if (kind == "torus") {
    const auto v = parse_numbers(rest, spec);
    if (v.size() != 2) throw InvalidInputError("torus takes major,minor: '" + spec + "'");
    s = torus(v[0], v[1]);
  } else if (kind == "box") {
    const auto v = parse_numbers(rest, spec);
    if (v.size() == 1) {
      s = box(Vec3::Constant(v[0]));
    } else if (v.size() == 3) {
      s = box(Vec3(v[0], v[1], v[2]));
    } else {
      throw InvalidInputError("box takes 1 or 3 half extents: '" + spec + "'");
    }
  } else if (kind == "capsule") {
    const auto v = parse_numbers(rest, spec);
    if (v.size() != 2) throw InvalidInputError("capsule takes half_length,radius: '" + spec + "'");
    s = capsule(v[0], v[1]);
  } else if (kind == "spheres") {
    std::vector<MedialAtom> atoms;
    for (const auto& part : split(rest, ';')) {
      const auto v = parse_numbers(part, spec);
      if (v.size() != 4) throw InvalidInputError("spheres takes x,y,z,r groups: '" + spec + "'");
      atoms.push_back({Vec3(v[0], v[1], v[2]), v[3]});
    }
    s = sphere_union(std::move(atoms));
  } else if (kind == "mesh") {
    if (rest.empty()) throw InvalidInputError("mesh spec needs a path");
    s = mesh(load_mesh(rest));
  } else {
    throw InvalidInputError("unknown shape kind '" + kind + "'");
  }
  s.spec_ = spec;
  return s;
}

Shape Shape::sphere(double radius) {
  require_positive({radius}, "sphere");
  Shape s;
  s.kind_ = ShapeKind::Sphere;
  s.params_ = {radius};
  s.spec_ = "sphere:" + std::to_string(radius);
  s.fit_unit_ball();
  return s;
}

Shape Shape::torus(double major, double minor) {
  require_positive({major, minor}, "torus");
  if (minor >= major) throw InvalidInputError("torus minor radius must be below the major radius");
  Shape s;
  s.kind_ = ShapeKind::Torus;
  s.params_ = {major, minor};
  s.spec_ = "torus:" + std::to_string(major) + "," + std::to_string(minor);
  s.fit_unit_ball();
  return s;
}

Shape Shape::box(const Vec3& half_extents) {
  require_positive({half_extents.x(), half_extents.y(), half_extents.z()}, "box");
  Shape s;
  s.kind_ = ShapeKind::Box;
  s.params_ = {half_extents.x(), half_extents.y(), half_extents.z()};
  s.spec_ = "box:" + std::to_string(half_extents.x()) + "," + std::to_string(half_extents.y()) + "," +
            std::to_string(half_extents.z());
  s.fit_unit_ball();
  return s;
}

Shape Shape::capsule(double half_length, double radius) {
  require_positive({half_length, radius}, "capsule");
  Shape s;
  s.kind_ = ShapeKind::Capsule;
  s.params_ = {half_length, radius};
  s.spec_ = "capsule:" + std::to_string(half_length) + "," + std::to_string(radius);
  s.fit_unit_ball();
  return s;
}

Shape Shape::sphere_union(std::vector<MedialAtom> atoms) {
  if (atoms.empty()) throw InvalidInputError("sphere union needs at least one sphere");
  Shape s;
  s.kind_ = ShapeKind::SphereUnion;
  s.spec_ = "spheres:";
  for (const auto& a : atoms) {
    require_positive({a.radius}, "spheres");
    if (s.spec_.size() > 8) s.spec_ += ";";
    s.spec_ += std::to_string(a.center.x()) + "," + std::to_string(a.center.y()) + "," +
               std::to_string(a.center.z()) + "," + std::to_string(a.radius);
  }
  s.atoms_ = std::move(atoms);
  s.fit_unit_ball();
  return s;
}

Shape Shape::mesh(TriangleMesh mesh) {
  if (mesh.vertices.empty() || mesh.faces.empty()) throw InvalidInputError("empty mesh");
  Aabb box;
  for (const auto& v : mesh.vertices) box.grow(v);
  const Vec3 center = (box.lo + box.hi) / 2.0;
  double r = 0.0;
  for (const auto& v : mesh.vertices) r = std::max(r, (v - center).norm());
  if (!(r > 0.0)) throw InvalidInputError("mesh has zero extent");
  for (auto& v : mesh.vertices) v = (v - center) / r;
  Shape s;
  s.kind_ = ShapeKind::TriangleMesh;
  s.spec_ = "mesh";
  s.norm_ = {1.0 / r, -center / r};
  s.mesh_ = std::make_shared<const MeshData>(std::move(mesh));
  return s;
}

const TriangleMesh& Shape::triangles() const {
  static const TriangleMesh empty;
  return mesh_ ? mesh_->mesh : empty;
}

double Shape::local_bound() const {
  switch (kind_) {
    case ShapeKind::Sphere:
      return params_[0];
    case ShapeKind::Torus:
      return params_[0] + params_[1];
    case ShapeKind::Box:
      return Vec3(params_[0], params_[1], params_[2]).norm();
    case ShapeKind::Capsule:
      return params_[0] + params_[1];
    case ShapeKind::SphereUnion: {
      double r = 0.0;
      for (const auto& a : atoms_) r = std::max(r, a.center.norm() + a.radius);
      return r;
    }
    case ShapeKind::TriangleMesh:
      break;
  }
  return 1.0;
}

void Shape::fit_unit_ball() {
  const double b = local_bound();
  norm_ = {b > 1.0 ? 1.0 / b : 1.0, Vec3::Zero()};
}

double Shape::bounding_radius() const {
  if (kind_ == ShapeKind::TriangleMesh) return 1.0;
  return local_bound() * norm_.scale;
}

double Shape::sdf_local(const Vec3& x) const {
  switch (kind_) {
    case ShapeKind::Sphere:
      return x.norm() - params_[0];
    case ShapeKind::Torus: {
      const double q = std::hypot(x.x(), x.y()) - params_[0];
      return std::hypot(q, x.z()) - params_[1];
    }
    case ShapeKind::Box: {
      const Vec3 q = x.cwiseAbs() - Vec3(params_[0], params_[1], params_[2]);
      return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
    }
    case ShapeKind::Capsule: {
      const double h = params_[0];
      const Vec3 c(0.0, 0.0, std::clamp(x.z(), -h, h));
      return (x - c).norm() - params_[1];
    }
    case ShapeKind::SphereUnion: {
      double d = kInf;
      for (const auto& a : atoms_) d = std::min(d, (x - a.center).norm() - a.radius);
      return d;
    }
    case ShapeKind::TriangleMesh:
      break;
  }
  throw InvalidInputError("distance is not available for triangle meshes");
}

Vec3 Shape::normal_local(const Vec3& x) const {
  switch (kind_) {
    case ShapeKind::Torus: {
      const double rho = std::hypot(x.x(), x.y());
      const Vec3 ring = rho > 0.0 ? Vec3(x.x(), x.y(), 0.0) * (params_[0] / rho) : Vec3(params_[0], 0.0, 0.0);
      return (x - ring).normalized();
    }
    case ShapeKind::Capsule: {
      const double h = params_[0];
      return (x - Vec3(0.0, 0.0, std::clamp(x.z(), -h, h))).normalized();
    }
    default:
      break;
  }
  return x.normalized();
}

CastResult Shape::cast_local(const Vec3& o, const Vec3& d) const {
  CastResult r;
  auto finish = [&](double t, const Vec3& n) {
    r.hit = true;
    r.t = t;
    r.point = o + t * d;
    r.normal = n;
    r.front_facing = n.dot(d) < 0.0;
    return r;
  };
  switch (kind_) {
    case ShapeKind::Sphere: {
      const double t = sphere_near_root(o, d, {Vec3::Zero(), params_[0]});
      if (std::isinf(t)) return r;
      return finish(t, (o + t * d) / params_[0]);
    }
    case ShapeKind::SphereUnion: {
      double best = kInf;
      std::size_t which = 0;
      for (std::size_t i = 0; i < atoms_.size(); ++i) {
        const double t = sphere_near_root(o, d, atoms_[i]);
        if (t < best) {
          best = t;
          which = i;
        }
      }
      if (std::isinf(best)) return r;
      return finish(best, (o + best * d - atoms_[which].center) / atoms_[which].radius);
    }
    case ShapeKind::Box: {
      const Vec3 h(params_[0], params_[1], params_[2]);
      double t0 = -kInf, t1 = kInf;
      int axis = -1;
      for (int a = 0; a < 3; ++a) {
        if (d[a] == 0.0) {
          if (std::abs(o[a]) > h[a]) return r;
          continue;
        }
        double ta = (-h[a] - o[a]) / d[a], tb = (h[a] - o[a]) / d[a];
        if (ta > tb) std::swap(ta, tb);
        if (ta > t0) {
          t0 = ta;
          axis = a;
        }
        t1 = std::min(t1, tb);
      }
      if (t0 > t1 || axis < 0) return r;
      Vec3 n = Vec3::Zero();
      n[axis] = d[axis] > 0.0 ? -1.0 : 1.0;
      return finish(t0, n);
    }
    case ShapeKind::Torus:
    case ShapeKind::Capsule: {
      // Sphere tracing with the exact distance, starting where the line enters
      // the bounding ball, then a few Newton steps on the distance.
      const double rb = local_bound() * (1.0 + 1e-9);
      const double tf = -o.dot(d);
      const double rho2 = (o + tf * d).squaredNorm();
      if (rho2 >= rb * rb) return r;
      const double half = std::sqrt(rb * rb - rho2);
      double t = tf - half;
      const double t_end = tf + half;
      double f = kInf;
      for (int it = 0; it < 20000 && t <= t_end; ++it) {
        f = sdf_local(o + t * d);
        if (f < 1e-12) break;
        t += f;
      }
      if (t > t_end || f > 1e-7) return r;
      for (int k = 0; k < 4; ++k) {
        const Vec3 x = o + t * d;
        const double g = normal_local(x).dot(d);
        if (g > -1e-3) break;
        const double dt = -sdf_local(x) / g;
        if (std::abs(dt) > 1e-6) break;
        t += dt;
      }
      return finish(t, normal_local(o + t * d));
    }
    case ShapeKind::TriangleMesh:
      break;
  }
  return r;
}

CastResult Shape::cast(const Ray& ray) const {
  const double len = ray.direction.norm();
  if (!(len > 0.0) || !std::isfinite(len)) throw InvalidInputError("ray direction must be nonzero and finite");
  const Vec3 d = ray.direction / len;
  if (kind_ == ShapeKind::TriangleMesh) return mesh_->cast(ray.origin, d);
  const Vec3 o = (ray.origin - norm_.translation) / norm_.scale;
  CastResult r = cast_local(o, d);
  if (r.hit) {
    r.t *= norm_.scale;
    r.point = ray.origin + r.t * d;
  }
  return r;
}

double Shape::distance(const Vec3& x) const {
  return std::abs(sdf_local((x - norm_.translation) / norm_.scale)) * norm_.scale;
}

}  // namespace marf
