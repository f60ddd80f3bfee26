#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <vector>

namespace meshdensity::geometry {

using Point = Eigen::Vector2d;

enum class BaseShape { Triangle, Rectangle };

struct Range {
  double min = 0.0;
  double max = 0.0;
};

struct GeometryConfig {
  BaseShape base_shape = BaseShape::Triangle;
  // Displacement magnitude drawn per vertex, along the outward vertex normal.
  Range lambda_range{0.0, 0.06};
  // Per-axis translation of the displaced polygon.
  Range translation_range{-0.05, 0.05};
  int smoothing_samples = 120;
  std::uint64_t seed = 0;

  // Placement of the undisplaced base polygon (circumradius for the triangle,
  // half edge length for the square).
  double base_size = 0.09;
  Point base_center{0.35, 0.5};
  double domain_length = 1.0;

  int n_vertices() const { return base_shape == BaseShape::Triangle ? 3 : 4; }
};

struct BoundingBox {
  double xmin = 0.0, ymin = 0.0, xmax = 0.0, ymax = 0.0;
};

// Closed counter-clockwise polyline. The last point connects back to the first.
struct Outline {
  std::vector<Point> points;
  BoundingBox bounding_box;
  Point centroid = Point::Zero();
};

// Validates the invariants of a configuration; throws GeometryError.
void validate(const GeometryConfig& cfg);

// Base polygon (CCW) before any displacement.
std::vector<Point> base_polygon(const GeometryConfig& cfg);

// Unit outward vertex normals: bisector of the two adjacent edge normals.
std::vector<Point> vertex_normals(const std::vector<Point>& polygon);

// Moves vertex i by lambdas[i] along its outward vertex normal.
std::vector<Point> displace_vertices(const std::vector<Point>& polygon,
                                     const std::vector<double>& lambdas);

// Periodic uniform Catmull-Rom through `vertices`, sampled at `samples`
// equally spaced parameter values starting at vertex 0.
std::vector<Point> catmull_rom_closed(const std::vector<Point>& vertices, int samples);

// Builds an Outline (orientation fixed to CCW, bbox and centroid filled in).
Outline make_outline(std::vector<Point> points);

Outline generate_obstacle(const GeometryConfig& cfg);

bool is_simple(const Outline& outline);
double signed_area(const std::vector<Point>& points);

// Even-odd ray casting on the sampled polyline.
bool contains(const Outline& outline, const Point& p);

// Distance to the polyline, negative inside.
double signed_distance(const Outline& outline, const Point& p);

double perimeter(const Outline& outline);

}  // namespace meshdensity::geometry
