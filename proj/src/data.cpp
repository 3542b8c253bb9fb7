#include "poem/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <numbers>
#include <sstream>

namespace poem {

namespace {

constexpr double kPi = std::numbers::pi;

void write_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("pcd: truncated stream");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void write_f32_le(std::ostream& os, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

float read_f32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("pcd: truncated stream");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

double uniform(std::mt19937_64& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

std::array<double, 3> unit_sphere_dir(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  double x = g(rng), y = g(rng), z = g(rng);
  double r = std::sqrt(x * x + y * y + z * z);
  if (r == 0.0) return {1.0, 0.0, 0.0};
  return {x / r, y / r, z / r};
}

// Uniform rotation from a random unit quaternion.
std::array<std::array<double, 3>, 3> random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  double q[4] = {g(rng), g(rng), g(rng), g(rng)};
  double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  for (auto& v : q) v /= n;
  double w = q[0], x = q[1], y = q[2], z = q[3];
  return {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
           {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
           {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
}

void set_point(Tensor<float>& pts, std::size_t i, double x, double y, double z) {
  pts.at(i, 0) = static_cast<float>(x);
  pts.at(i, 1) = static_cast<float>(y);
  pts.at(i, 2) = static_cast<float>(z);
}

void sample_sphere(Tensor<float>& pts, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < pts.dim(0); ++i) {
    auto d = unit_sphere_dir(rng);
    set_point(pts, i, d[0], d[1], d[2]);
  }
}

void sample_cube(Tensor<float>& pts, std::mt19937_64& rng) {
  // side 2, centered; faces have equal area so face choice is uniform
  for (std::size_t i = 0; i < pts.dim(0); ++i) {
    int face = static_cast<int>(std::uniform_int_distribution<int>(0, 5)(rng));
    double u = uniform(rng) * 2.0 - 1.0;
    double v = uniform(rng) * 2.0 - 1.0;
    double s = (face % 2 == 0) ? 1.0 : -1.0;
    switch (face / 2) {
      case 0: set_point(pts, i, s, u, v); break;
      case 1: set_point(pts, i, u, s, v); break;
      default: set_point(pts, i, u, v, s); break;
    }
  }
}

void sample_cylinder(Tensor<float>& pts, std::mt19937_64& rng) {
  const double r = 0.7, h = 2.0; // height along z, centered
  const double lateral = 2.0 * kPi * r * h;
  const double cap = kPi * r * r;
  const double total = lateral + 2.0 * cap;
  for (std::size_t i = 0; i < pts.dim(0); ++i) {
    double pick = uniform(rng) * total;
    double theta = uniform(rng) * 2.0 * kPi;
    if (pick < lateral) {
      double z = (uniform(rng) - 0.5) * h;
      set_point(pts, i, r * std::cos(theta), r * std::sin(theta), z);
    } else {
      double rho = r * std::sqrt(uniform(rng));
      double z = pick < lateral + cap ? h / 2.0 : -h / 2.0;
      set_point(pts, i, rho * std::cos(theta), rho * std::sin(theta), z);
    }
  }
}

void sample_cone(Tensor<float>& pts, std::mt19937_64& rng) {
  const double r = 0.9, h = 2.0; // apex at +h/2, base at -h/2
  const double slant = std::sqrt(r * r + h * h);
  const double lateral = kPi * r * slant;
  const double base = kPi * r * r;
  for (std::size_t i = 0; i < pts.dim(0); ++i) {
    double pick = uniform(rng) * (lateral + base);
    double theta = uniform(rng) * 2.0 * kPi;
    if (pick < lateral) {
      // area density grows linearly with distance from the apex
      double t = std::sqrt(uniform(rng));
      double rho = t * r;
      double z = h / 2.0 - t * h;
      set_point(pts, i, rho * std::cos(theta), rho * std::sin(theta), z);
    } else {
      double rho = r * std::sqrt(uniform(rng));
      set_point(pts, i, rho * std::cos(theta), rho * std::sin(theta), -h / 2.0);
    }
  }
}

void sample_torus(Tensor<float>& pts, std::mt19937_64& rng) {
  const double R = 0.8, r = 0.35;
  for (std::size_t i = 0; i < pts.dim(0); ++i) {
    // rejection on the tube angle keeps the sampling uniform by area
    double phi = uniform(rng) * 2.0 * kPi;
    double theta;
    for (;;) {
      theta = uniform(rng) * 2.0 * kPi;
      if (uniform(rng) <= (R + r * std::cos(theta)) / (R + r)) break;
    }
    double ring = R + r * std::cos(theta);
    set_point(pts, i, ring * std::cos(phi), ring * std::sin(phi), r * std::sin(theta));
  }
}

struct Split {
  std::size_t line = 1;
};

} // namespace

std::optional<Primitive> parse_primitive_name(const std::string& name) {
  if (name == "sphere") return Primitive::sphere;
  if (name == "cube") return Primitive::cube;
  if (name == "cylinder") return Primitive::cylinder;
  if (name == "cone") return Primitive::cone;
  if (name == "torus") return Primitive::torus;
  return std::nullopt;
}

std::string primitive_name(Primitive p) {
  switch (p) {
    case Primitive::sphere: return "sphere";
    case Primitive::cube: return "cube";
    case Primitive::cylinder: return "cylinder";
    case Primitive::cone: return "cone";
    case Primitive::torus: return "torus";
  }
  return "?";
}

Tensor<float> sample_primitive(Primitive shape, std::size_t n, std::mt19937_64& rng) {
  Tensor<float> pts({n, 3});
  switch (shape) {
    case Primitive::sphere: sample_sphere(pts, rng); break;
    case Primitive::cube: sample_cube(pts, rng); break;
    case Primitive::cylinder: sample_cylinder(pts, rng); break;
    case Primitive::cone: sample_cone(pts, rng); break;
    case Primitive::torus: sample_torus(pts, rng); break;
  }
  return pts;
}

Dataset generate_primitives(const std::vector<Primitive>& classes, std::size_t per_class,
                            std::size_t points, std::uint64_t seed) {
  if (classes.empty()) throw std::invalid_argument("generate_primitives: empty class set");
  std::mt19937_64 rng(seed);
  std::vector<PointCloud> all;
  all.reserve(classes.size() * per_class);
  for (std::size_t c = 0; c < classes.size(); ++c) {
    for (std::size_t k = 0; k < per_class; ++k) {
      PointCloud cloud;
      cloud.label = static_cast<int>(c);
      cloud.points = sample_primitive(classes[c], points, rng);
      auto rot = random_rotation(rng);
      double scale = 0.8 + 0.4 * uniform(rng);
      for (std::size_t i = 0; i < points; ++i) {
        double p[3] = {cloud.points.at(i, 0), cloud.points.at(i, 1), cloud.points.at(i, 2)};
        for (int a = 0; a < 3; ++a)
          cloud.points.at(i, a) = static_cast<float>(
              scale * (rot[a][0] * p[0] + rot[a][1] * p[1] + rot[a][2] * p[2]));
      }
      normalize_points(cloud.points);
      all.push_back(std::move(cloud));
    }
  }
  std::shuffle(all.begin(), all.end(), rng);
  Dataset ds;
  ds.num_classes = classes.size();
  ds.points_per_cloud = points;
  std::size_t test_count = all.size() / 5;
  for (std::size_t i = 0; i < all.size(); ++i)
    (i < test_count ? ds.test : ds.train).push_back(std::move(all[i]));
  return ds;
}

namespace {

// Tokenized OFF reader tracking line numbers; '#' starts a comment.
class OffTokens {
public:
  explicit OffTokens(std::istream& is) : is_(is) {}

  std::size_t line() const { return line_; }

  std::optional<std::string> next() {
    if (!pending_.empty()) {
      std::string t = std::move(pending_.front());
      pending_.erase(pending_.begin());
      return t;
    }
    std::string tok;
    for (;;) {
      int ch = is_.get();
      if (ch == EOF) {
        if (tok.empty()) return std::nullopt;
        return tok;
      }
      if (ch == '#') { // comment to end of line
        while (ch != EOF && ch != '\n') ch = is_.get();
        if (ch == '\n') ++line_;
        if (!tok.empty()) return tok;
        continue;
      }
      if (std::isspace(ch)) {
        if (ch == '\n') ++line_;
        if (!tok.empty()) return tok;
        continue;
      }
      tok.push_back(static_cast<char>(ch));
    }
  }

  void push_front(std::string t) { pending_.insert(pending_.begin(), std::move(t)); }

private:
  std::istream& is_;
  std::size_t line_ = 1;
  std::vector<std::string> pending_;
};

long long parse_int(const std::string& tok, std::size_t line, OffParseError::Kind kind,
                    const char* what) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(tok, &pos);
  } catch (const std::exception&) {
    throw OffParseError(kind, line, std::string("expected integer for ") + what + ", got '" +
                                        tok + "'");
  }
  if (pos != tok.size())
    throw OffParseError(kind, line, std::string("trailing characters in ") + what + " '" + tok +
                                        "'");
  return v;
}

float parse_float(const std::string& tok, std::size_t line) {
  std::size_t pos = 0;
  float v = 0;
  try {
    v = std::stof(tok, &pos);
  } catch (const std::exception&) {
    throw OffParseError(OffParseError::Kind::bad_vertex, line,
                        "expected coordinate, got '" + tok + "'");
  }
  if (pos != tok.size())
    throw OffParseError(OffParseError::Kind::bad_vertex, line,
                        "trailing characters in coordinate '" + tok + "'");
  return v;
}

} // namespace

TriMesh parse_off(std::istream& is) {
  OffTokens toks(is);
  auto first = toks.next();
  if (!first)
    throw OffParseError(OffParseError::Kind::truncated, toks.line(), "empty input");
  std::string header = *first;
  if (header.rfind("OFF", 0) != 0)
    throw OffParseError(OffParseError::Kind::bad_header, toks.line(),
                        "missing OFF keyword, got '" + header + "'");
  if (header.size() > 3) // glued variant: counts start right after "OFF"
    toks.push_front(header.substr(3));

  auto need = [&](OffParseError::Kind kind, const char* what) {
    auto t = toks.next();
    if (!t)
      throw OffParseError(OffParseError::Kind::truncated, toks.line(),
                          std::string("unexpected end of file reading ") + what);
    (void)kind;
    return *t;
  };

  std::size_t header_line = toks.line();
  long long nv = parse_int(need(OffParseError::Kind::bad_counts, "vertex count"), header_line,
                           OffParseError::Kind::bad_counts, "vertex count");
  long long nf = parse_int(need(OffParseError::Kind::bad_counts, "face count"), header_line,
                           OffParseError::Kind::bad_counts, "face count");
  long long ne = parse_int(need(OffParseError::Kind::bad_counts, "edge count"), header_line,
                           OffParseError::Kind::bad_counts, "edge count");
  (void)ne;
  if (nv < 0 || nf < 0)
    throw OffParseError(OffParseError::Kind::bad_counts, header_line, "negative element count");

  TriMesh mesh;
  mesh.vertices.reserve(static_cast<std::size_t>(nv));
  for (long long i = 0; i < nv; ++i) {
    std::array<float, 3> v;
    for (int a = 0; a < 3; ++a)
      v[a] = parse_float(need(OffParseError::Kind::bad_vertex, "vertex coordinate"), toks.line());
    mesh.vertices.push_back(v);
  }
  for (long long i = 0; i < nf; ++i) {
    std::size_t face_line = toks.line();
    long long cnt = parse_int(need(OffParseError::Kind::bad_face, "face vertex count"), face_line,
                              OffParseError::Kind::bad_face, "face vertex count");
    if (cnt < 3)
      throw OffParseError(OffParseError::Kind::bad_face, face_line,
                          "face with fewer than 3 vertices");
    std::vector<std::uint32_t> idx(static_cast<std::size_t>(cnt));
    for (auto& ix : idx) {
      long long v = parse_int(need(OffParseError::Kind::bad_face, "face index"), toks.line(),
                              OffParseError::Kind::bad_face, "face index");
      if (v < 0 || v >= nv)
        throw OffParseError(OffParseError::Kind::index_range, toks.line(),
                            "vertex index " + std::to_string(v) + " out of range");
      ix = static_cast<std::uint32_t>(v);
    }
    for (std::size_t t = 1; t + 1 < idx.size(); ++t) // fan triangulation
      mesh.faces.push_back({idx[0], idx[t], idx[t + 1]});
  }
  return mesh;
}

namespace {

double triangle_area(const TriMesh& m, const std::array<std::uint32_t, 3>& f) {
  const auto &a = m.vertices[f[0]], &b = m.vertices[f[1]], &c = m.vertices[f[2]];
  double u[3] = {b[0] - a[0], b[1] - a[1], b[2] - a[2]};
  double v[3] = {c[0] - a[0], c[1] - a[1], c[2] - a[2]};
  double cx = u[1] * v[2] - u[2] * v[1];
  double cy = u[2] * v[0] - u[0] * v[2];
  double cz = u[0] * v[1] - u[1] * v[0];
  return 0.5 * std::sqrt(cx * cx + cy * cy + cz * cz);
}

} // namespace

Tensor<float> sample_mesh(const TriMesh& mesh, std::size_t points, std::uint64_t seed) {
  if (mesh.faces.empty()) throw std::invalid_argument("sample_mesh: mesh has no faces");
  std::vector<double> cumulative;
  cumulative.reserve(mesh.faces.size());
  double total = 0.0;
  for (const auto& f : mesh.faces) {
    total += triangle_area(mesh, f); // zero-area faces add no selection mass
    cumulative.push_back(total);
  }
  if (total <= 0.0) throw std::invalid_argument("sample_mesh: total surface area is zero");

  std::mt19937_64 rng(seed);
  Tensor<float> pts({points, 3});
  for (std::size_t i = 0; i < points; ++i) {
    double pick = uniform(rng) * total;
    std::size_t fi = static_cast<std::size_t>(
        std::lower_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin());
    if (fi >= mesh.faces.size()) fi = mesh.faces.size() - 1;
    const auto& f = mesh.faces[fi];
    const auto &a = mesh.vertices[f[0]], &b = mesh.vertices[f[1]], &c = mesh.vertices[f[2]];
    double u = uniform(rng), v = uniform(rng);
    if (u + v > 1.0) {
      u = 1.0 - u;
      v = 1.0 - v;
    }
    for (int ax = 0; ax < 3; ++ax)
      pts.at(i, ax) =
          static_cast<float>(a[ax] + u * (b[ax] - a[ax]) + v * (c[ax] - a[ax]));
  }
  return pts;
}

void normalize_points(Tensor<float>& points) {
  const std::size_t n = points.dim(0);
  if (n == 0) return;
  double cx = 0, cy = 0, cz = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cx += points.at(i, 0);
    cy += points.at(i, 1);
    cz += points.at(i, 2);
  }
  cx /= n;
  cy /= n;
  cz /= n;
  double maxr = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double x = points.at(i, 0) - cx, y = points.at(i, 1) - cy, z = points.at(i, 2) - cz;
    maxr = std::max(maxr, std::sqrt(x * x + y * y + z * z));
  }
  double inv = maxr > 0.0 ? 1.0 / maxr : 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    points.at(i, 0) = static_cast<float>((points.at(i, 0) - cx) * inv);
    points.at(i, 1) = static_cast<float>((points.at(i, 1) - cy) * inv);
    points.at(i, 2) = static_cast<float>((points.at(i, 2) - cz) * inv);
  }
}

PointCloud normalize(PointCloud cloud) {
  normalize_points(cloud.points);
  return cloud;
}

PointCloud jitter(const PointCloud& cloud, float sigma, float clip, std::uint64_t seed) {
  PointCloud out = cloud;
  if (sigma <= 0.0f) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, sigma);
  for (auto& v : out.points.flat()) {
    double d = std::clamp(g(rng), -static_cast<double>(clip), static_cast<double>(clip));
    v += static_cast<float>(d);
  }
  return out;
}

void write_pcd(const std::string& path, const std::vector<PointCloud>& clouds,
               std::size_t num_classes) {
  if (clouds.empty()) throw std::invalid_argument("write_pcd: no clouds");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pcd: cannot open " + path);
  const std::size_t ppc = clouds.front().points.dim(0);
  os.write("PCD1", 4);
  write_u64_le(os, clouds.size());
  write_u64_le(os, ppc);
  write_u64_le(os, num_classes);
  for (const auto& c : clouds) {
    if (c.points.dim(0) != ppc) throw std::invalid_argument("write_pcd: ragged cloud sizes");
    write_u64_le(os, static_cast<std::uint64_t>(c.label));
    for (float v : c.points.flat()) write_f32_le(os, v);
  }
  if (!os) throw std::runtime_error("write_pcd: write failure on " + path);
}

std::pair<std::vector<PointCloud>, std::size_t> read_pcd(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_pcd: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PCD1", 4) != 0)
    throw std::runtime_error("read_pcd: bad magic in " + path);
  std::uint64_t count = read_u64_le(is);
  std::uint64_t ppc = read_u64_le(is);
  std::uint64_t classes = read_u64_le(is);
  std::vector<PointCloud> clouds;
  clouds.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    PointCloud c;
    c.label = static_cast<int>(read_u64_le(is));
    c.points = Tensor<float>({ppc, 3});
    for (auto& v : c.points.flat()) v = read_f32_le(is);
    clouds.push_back(std::move(c));
  }
  return {std::move(clouds), static_cast<std::size_t>(classes)};
}

Dataset load_off_dataset(const std::string& root, std::size_t points, std::uint64_t seed) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw std::runtime_error("load_off_dataset: no such dir " + root);
  std::vector<std::string> class_names;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_names.push_back(e.path().filename().string());
  std::sort(class_names.begin(), class_names.end());
  if (class_names.empty()) throw std::runtime_error("load_off_dataset: no class directories");

  Dataset ds;
  ds.num_classes = class_names.size();
  ds.points_per_cloud = points;
  std::mt19937_64 seeder(seed);
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    for (const char* split : {"train", "test"}) {
      fs::path dir = fs::path(root) / class_names[c] / split;
      if (!fs::is_directory(dir)) continue;
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".off") files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) {
        std::ifstream is(f);
        TriMesh mesh = parse_off(is);
        PointCloud cloud;
        cloud.label = static_cast<int>(c);
        cloud.points = sample_mesh(mesh, points, seeder());
        normalize_points(cloud.points);
        (std::strcmp(split, "train") == 0 ? ds.train : ds.test).push_back(std::move(cloud));
      }
    }
  }
  return ds;
}

} // namespace poem
