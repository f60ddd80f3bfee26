#include "meshdensity/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "meshdensity/errors.hpp"
#include "meshdensity/rng.hpp"

namespace meshdensity::geometry {

namespace {

constexpr int kMaxAttempts = 100;

double cross(const Point& a, const Point& b) { return a.x() * b.y() - a.y() * b.x(); }

int orientation(const Point& a, const Point& b, const Point& c) {
  const double v = cross(b - a, c - a);
  if (v > 0.0) return 1;
  if (v < 0.0) return -1;
  return 0;
}

bool on_segment(const Point& a, const Point& b, const Point& p) {
  return std::min(a.x(), b.x()) <= p.x() && p.x() <= std::max(a.x(), b.x()) &&
         std::min(a.y(), b.y()) <= p.y() && p.y() <= std::max(a.y(), b.y());
}

bool segments_intersect(const Point& p1, const Point& p2, const Point& q1, const Point& q2) {
  const int o1 = orientation(p1, p2, q1);
  const int o2 = orientation(p1, p2, q2);
  const int o3 = orientation(q1, q2, p1);
  const int o4 = orientation(q1, q2, p2);
  if (o1 != o2 && o3 != o4) return true;
  if (o1 == 0 && on_segment(p1, p2, q1)) return true;
  if (o2 == 0 && on_segment(p1, p2, q2)) return true;
  if (o3 == 0 && on_segment(q1, q2, p1)) return true;
  if (o4 == 0 && on_segment(q1, q2, p2)) return true;
  return false;
}

double segment_distance(const Point& a, const Point& b, const Point& p) {
  const Point ab = b - a;
  const double len2 = ab.squaredNorm();
  double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return (a + t * ab - p).norm();
}

bool within_margin(const Outline& o, double domain_length) {
  const double m = 0.1 * domain_length;
  const auto& bb = o.bounding_box;
  return bb.xmin >= m && bb.ymin >= m && bb.xmax <= domain_length - m &&
         bb.ymax <= domain_length - m;
}

}  // namespace

void validate(const GeometryConfig& cfg) {
  if (cfg.lambda_range.min < 0.0 || cfg.lambda_range.max < cfg.lambda_range.min)
    throw GeometryError("lambda_range must satisfy 0 <= min <= max");
  if (cfg.translation_range.max < cfg.translation_range.min)
    throw GeometryError("translation_range must satisfy min <= max");
  if (cfg.smoothing_samples < 16) throw GeometryError("smoothing_samples must be >= 16");
  if (cfg.base_size <= 0.0 || cfg.domain_length <= 0.0)
    throw GeometryError("base_size and domain_length must be positive");
}

std::vector<Point> base_polygon(const GeometryConfig& cfg) {
  std::vector<Point> poly;
  const Point c = cfg.base_center;
  const double s = cfg.base_size;
  if (cfg.base_shape == BaseShape::Triangle) {
    // Equilateral, one vertex pointing downstream (+x).
    for (int k = 0; k < 3; ++k) {
      const double a = 2.0 * std::numbers::pi * k / 3.0;
      poly.emplace_back(c.x() + s * std::cos(a), c.y() + s * std::sin(a));
    }
  } else {
    poly = {{c.x() - s, c.y() - s}, {c.x() + s, c.y() - s}, {c.x() + s, c.y() + s},
            {c.x() - s, c.y() + s}};
  }
  return poly;
}

std::vector<Point> vertex_normals(const std::vector<Point>& polygon) {
  const std::size_t n = polygon.size();
  std::vector<Point> edge_normals(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Point e = polygon[(i + 1) % n] - polygon[i];
    edge_normals[i] = Point(e.y(), -e.x()).normalized();
  }
  std::vector<Point> normals(n);
  for (std::size_t i = 0; i < n; ++i) {
    normals[i] = (edge_normals[(i + n - 1) % n] + edge_normals[i]).normalized();
  }
  return normals;
}

std::vector<Point> displace_vertices(const std::vector<Point>& polygon,
                                     const std::vector<double>& lambdas) {
  if (lambdas.size() != polygon.size())
    throw GeometryError("one displacement per vertex required");
  const auto normals = vertex_normals(polygon);
  std::vector<Point> out(polygon.size());
  for (std::size_t i = 0; i < polygon.size(); ++i) out[i] = polygon[i] + lambdas[i] * normals[i];
  return out;
}

std::vector<Point> catmull_rom_closed(const std::vector<Point>& v, int samples) {
  const int n = static_cast<int>(v.size());
  std::vector<Point> out;
  out.reserve(samples);
  for (int k = 0; k < samples; ++k) {
    // Integer-rational parameter so that vertices are hit exactly when n divides samples.
    const long num = static_cast<long>(k) * n;
    const int seg = static_cast<int>(num / samples);
    const double t = static_cast<double>(num % samples) / samples;
    const Point& p0 = v[(seg + n - 1) % n];
    const Point& p1 = v[seg % n];
    const Point& p2 = v[(seg + 1) % n];
    const Point& p3 = v[(seg + 2) % n];
    if (num % samples == 0) {
      out.push_back(p1);
      continue;
    }
    const double t2 = t * t, t3 = t2 * t;
    out.push_back(0.5 * ((2.0 * p1) + (-p0 + p2) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2 +
                         (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t3));
  }
  return out;
}

double signed_area(const std::vector<Point>& pts) {
  double a = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) a += cross(pts[i], pts[(i + 1) % pts.size()]);
  return 0.5 * a;
}

Outline make_outline(std::vector<Point> points) {
  if (points.size() < 3) throw GeometryError("outline needs at least 3 points");
  if (signed_area(points) < 0.0) std::reverse(points.begin() + 1, points.end());

  Outline o;
  o.points = std::move(points);
  auto& bb = o.bounding_box;
  bb.xmin = bb.ymin = std::numeric_limits<double>::infinity();
  bb.xmax = bb.ymax = -std::numeric_limits<double>::infinity();
  for (const auto& p : o.points) {
    bb.xmin = std::min(bb.xmin, p.x());
    bb.ymin = std::min(bb.ymin, p.y());
    bb.xmax = std::max(bb.xmax, p.x());
    bb.ymax = std::max(bb.ymax, p.y());
  }
  // Area centroid of the polygon.
  const double area = signed_area(o.points);
  Point c = Point::Zero();
  const std::size_t n = o.points.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Point& a = o.points[i];
    const Point& b = o.points[(i + 1) % n];
    c += (a + b) * cross(a, b);
  }
  o.centroid = c / (6.0 * area);
  return o;
}

Outline generate_obstacle(const GeometryConfig& cfg) {
  validate(cfg);
  const auto base = base_polygon(cfg);
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    std::mt19937_64 rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(attempt)));
    std::uniform_real_distribution<double> lam(cfg.lambda_range.min, cfg.lambda_range.max);
    std::uniform_real_distribution<double> tr(cfg.translation_range.min, cfg.translation_range.max);

    std::vector<double> lambdas(base.size());
    for (auto& l : lambdas) l = cfg.lambda_range.max > cfg.lambda_range.min ? lam(rng) : cfg.lambda_range.min;
    const auto draw_t = [&] {
      return cfg.translation_range.max > cfg.translation_range.min ? tr(rng) : cfg.translation_range.min;
    };
    const double tx = draw_t();
    const double ty = draw_t();

    auto verts = displace_vertices(base, lambdas);
    for (auto& v : verts) v += Point(tx, ty);

    Outline o = make_outline(catmull_rom_closed(verts, cfg.smoothing_samples));
    if (within_margin(o, cfg.domain_length) && is_simple(o)) return o;
  }
  throw GeometryError("no valid obstacle after 100 attempts for seed " + std::to_string(cfg.seed));
}

bool is_simple(const Outline& o) {
  const std::size_t n = o.points.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Point& a1 = o.points[i];
    const Point& a2 = o.points[(i + 1) % n];
    for (std::size_t j = i + 2; j < n; ++j) {
      if (i == 0 && j == n - 1) continue;  // adjacent through the closing edge
      if (segments_intersect(a1, a2, o.points[j], o.points[(j + 1) % n])) return false;
    }
  }
  return true;
}

bool contains(const Outline& o, const Point& p) {
  const auto& bb = o.bounding_box;
  if (p.x() < bb.xmin || p.x() > bb.xmax || p.y() < bb.ymin || p.y() > bb.ymax) return false;
  bool inside = false;
  const std::size_t n = o.points.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Point& a = o.points[i];
    const Point& b = o.points[j];
    if (orientation(a, b, p) == 0 && on_segment(a, b, p)) return true;
    if ((a.y() > p.y()) != (b.y() > p.y())) {
      const double x = (b.x() - a.x()) * (p.y() - a.y()) / (b.y() - a.y()) + a.x();
      if (p.x() < x) inside = !inside;
    }
  }
  return inside;
}

double signed_distance(const Outline& o, const Point& p) {
  double d = std::numeric_limits<double>::infinity();
  const std::size_t n = o.points.size();
  for (std::size_t i = 0; i < n; ++i)
    d = std::min(d, segment_distance(o.points[i], o.points[(i + 1) % n], p));
  return contains(o, p) ? -d : d;
}

double perimeter(const Outline& o) {
  double len = 0.0;
  for (std::size_t i = 0; i < o.points.size(); ++i)
    len += (o.points[(i + 1) % o.points.size()] - o.points[i]).norm();
  return len;
}

}  // namespace meshdensity::geometry
