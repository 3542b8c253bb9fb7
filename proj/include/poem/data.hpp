#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "poem/tensor.hpp"

namespace poem {

struct PointCloud {
  Tensor<float> points; // [P, 3]
  int label = 0;
};

struct Dataset {
  std::vector<PointCloud> train;
  std::vector<PointCloud> test;
  std::size_t num_classes = 0;
  std::size_t points_per_cloud = 0;
};

enum class Primitive { sphere, cube, cylinder, cone, torus };

std::optional<Primitive> parse_primitive_name(const std::string& name);
std::string primitive_name(Primitive p);

// Uniform-by-area surface samples in the shape's canonical pose.
Tensor<float> sample_primitive(Primitive shape, std::size_t n, std::mt19937_64& rng);

// Full synthetic corpus: per-shape surface samples, random rotation, random
// scale in [0.8, 1.2], normalization, and a seed-deterministic 80/20 split.
Dataset generate_primitives(const std::vector<Primitive>& classes, std::size_t per_class,
                            std::size_t points, std::uint64_t seed);

struct TriMesh {
  std::vector<std::array<float, 3>> vertices;
  std::vector<std::array<std::uint32_t, 3>> faces;
};

struct OffParseError : std::runtime_error {
  enum class Kind { bad_header, bad_counts, bad_vertex, bad_face, index_range, truncated };
  Kind kind;
  std::size_t line;

  OffParseError(Kind k, std::size_t ln, const std::string& msg)
      : std::runtime_error("off parse error (line " + std::to_string(ln) + "): " + msg), kind(k),
        line(ln) {}
};

// OFF text reader. Accepts the header-glued variant ("OFF490 518 0") and
// fan-triangulates polygons with more than three vertices.
TriMesh parse_off(std::istream& is);

// Area-weighted triangle choice + uniform barycentric placement.
Tensor<float> sample_mesh(const TriMesh& mesh, std::size_t points, std::uint64_t seed);

// Centroid to origin, max radius to 1.
void normalize_points(Tensor<float>& points);
PointCloud normalize(PointCloud cloud);

// Clipped per-coordinate Gaussian noise.
PointCloud jitter(const PointCloud& cloud, float sigma, float clip, std::uint64_t seed);

// PCD1 container: magic "PCD1", then count, points-per-cloud, class count as
// little-endian u64; per cloud a u64 label followed by 32-bit LE floats.
void write_pcd(const std::string& path, const std::vector<PointCloud>& clouds,
               std::size_t num_classes);
std::pair<std::vector<PointCloud>, std::size_t> read_pcd(const std::string& path);

// Loads <root>/<class>/<train|test>/*.off, sampling each mesh to a cloud.
Dataset load_off_dataset(const std::string& root, std::size_t points, std::uint64_t seed);

} // namespace poem
