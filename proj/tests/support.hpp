#pragma once

// Shared helpers for the test binaries: seeded generators for property tests,
// scratch directories and small mesh/geometry fixtures.

#include <Eigen/Core>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "meshdensity/geometry.hpp"
#include "meshdensity/qmesh.hpp"
#include "meshdensity/tensor.hpp"

namespace testing {

namespace fs = std::filesystem;
using namespace meshdensity;

// Hand-rolled generator: every draw comes from one seeded engine, so a failing
// case is reproduced by its seed alone.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  bool coin(double p = 0.5) { return std::bernoulli_distribution(p)(rng_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(rng_); }

  geometry::Point point(double lo, double hi) { return {uniform(lo, hi), uniform(lo, hi)}; }

  template <class S>
  Tensor<S> tensor(Shape s, double lo = -1.0, double hi = 1.0) {
    Tensor<S> t(s);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.values()[i] = static_cast<S>(uniform(lo, hi));
    return t;
  }

  // Random binary mask with roughly `density` ones.
  qmesh::Channel mask(int rows, int cols, double density) {
    qmesh::Channel m(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) m(r, c) = coin(density) ? 1.0 : 0.0;
    return m;
  }

  geometry::GeometryConfig geometry_config() {
    geometry::GeometryConfig cfg;
    cfg.seed = rng_();
    cfg.base_shape = coin() ? geometry::BaseShape::Triangle : geometry::BaseShape::Rectangle;
    return cfg;
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

// Fresh directory under the build tree's temp area, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("meshdensity-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

// Axis-aligned square outline, CCW.
inline geometry::Outline square(geometry::Point center, double half) {
  return geometry::make_outline({center + geometry::Point(-half, -half), center + geometry::Point(half, -half),
                                 center + geometry::Point(half, half), center + geometry::Point(-half, half)});
}

// Polygon approximation of a circle with n points.
inline geometry::Outline circle(geometry::Point center, double radius, int n = 256) {
  std::vector<geometry::Point> pts;
  for (int k = 0; k < n; ++k) {
    const double a = 2.0 * M_PI * k / n;
    pts.push_back(center + radius * geometry::Point(std::cos(a), std::sin(a)));
  }
  return geometry::make_outline(std::move(pts));
}

inline qmesh::QuadtreeMesh uniform_mesh(int level, const std::optional<geometry::Outline>& outline = std::nullopt,
                                        int max_level = 9) {
  return qmesh::build_mesh(qmesh::MeshSetup::uniform(level, max_level), outline);
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

}  // namespace testing
