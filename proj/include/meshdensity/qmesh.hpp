#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "meshdensity/geometry.hpp"

namespace meshdensity::qmesh {

using geometry::Outline;
using geometry::Point;

enum class CellKind : std::uint8_t { Fluid, Solid };
enum class Side : std::uint8_t { West, East, South, North };

// Dyadic address of a quadtree node: cell (i, j) of the 2^level x 2^level grid.
struct CellKey {
  int level = 0;
  std::int64_t i = 0;
  std::int64_t j = 0;

  friend bool operator==(const CellKey&, const CellKey&) = default;
  friend auto operator<=>(const CellKey&, const CellKey&) = default;
};

std::uint64_t pack(const CellKey& k);

struct Cell {
  CellKey key;
  CellKind kind = CellKind::Fluid;
  Point center = Point::Zero();
  double size = 0.0;
};

// Integer lattice point at the finest resolution 2^max_level.
struct Vertex {
  std::int64_t x = 0;
  std::int64_t y = 0;
  friend bool operator==(const Vertex&, const Vertex&) = default;
};

// One face between cell `a` and either cell `b` or the domain boundary (b < 0).
// Hanging faces are listed once, from the finer cell. `ends` are ordered
// counter-clockwise with respect to `a`; `distance` is the two-point normal
// distance between the centers (or center to boundary).
struct Face {
  int a = -1;
  int b = -1;
  Side side = Side::West;  // side of `a`
  double length = 0.0;
  double distance = 0.0;
  std::array<Vertex, 2> ends{};
};

struct WakeZone {
  double half_width = 0.12;
  double downstream_extent = 0.35;
  int level_increment = 1;
};

struct MeshSetup {
  int base_level = 4;
  int prism_band_layers = 2;
  double prism_band_stretch = 2.0;
  std::vector<WakeZone> wake_zones{WakeZone{}};
  int max_level = 9;
  double domain_length = 1.0;

  // Plain uniform mesh at `level` with no bands or zones.
  static MeshSetup uniform(int level, int max_level = 12);
};

void validate(const MeshSetup& setup);

class QuadtreeMesh {
 public:
  QuadtreeMesh(double domain_length, int base_level, int max_level,
               std::optional<Outline> obstacle, std::vector<CellKey> leaves);

  double domain_length() const { return domain_length_; }
  int base_level() const { return base_level_; }
  int max_level() const { return max_level_; }
  const std::optional<Outline>& obstacle() const { return obstacle_; }

  const std::vector<Cell>& cells() const { return cells_; }
  const Cell& cell(std::size_t idx) const { return cells_[idx]; }
  std::size_t size() const { return cells_.size(); }
  const std::vector<Face>& faces() const { return faces_; }

  std::optional<std::size_t> find(const CellKey& key) const;
  // Leaf containing the point; points on shared edges go to the upper/right cell.
  std::size_t locate(const Point& p) const;
  // Leaf containing the finest-lattice unit square with lower-left corner (x, y).
  std::optional<std::size_t> locate_lattice(std::int64_t x, std::int64_t y) const;

  // Face-adjacent leaves across one side (empty at the domain boundary).
  std::vector<std::size_t> neighbors(std::size_t idx, Side side) const;

  std::vector<CellKey> keys() const;
  std::size_t fluid_count() const;
  int finest_level() const;

  // Lattice units per cell edge at `level`, and the lattice-to-length scale.
  std::int64_t span(int level) const { return std::int64_t{1} << (max_level_ - level); }
  double lattice_unit() const { return domain_length_ / static_cast<double>(std::int64_t{1} << max_level_); }
  Point vertex_position(const Vertex& v) const {
    return Point(static_cast<double>(v.x) * lattice_unit(), static_cast<double>(v.y) * lattice_unit());
  }

 private:
  void build_faces();

  double domain_length_;
  int base_level_;
  int max_level_;
  std::optional<Outline> obstacle_;
  std::vector<Cell> cells_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
  std::vector<Face> faces_;
};

QuadtreeMesh build_mesh(const MeshSetup& setup, const std::optional<Outline>& outline);

// Splits the listed cells and restores 2:1 balance. Indices refer to mesh.cells().
QuadtreeMesh refine_cells(const QuadtreeMesh& mesh, const std::set<std::size_t>& cell_ids);

// Every leaf split once.
QuadtreeMesh refine_uniformly(const QuadtreeMesh& mesh);

// Same tree with every leaf deeper than `level` merged up to `level`.
QuadtreeMesh coarsen_to_level(const QuadtreeMesh& mesh, int level);

// Brute-force check over all pairs of face-adjacent leaves.
bool is_balanced(const QuadtreeMesh& mesh);

// Sum of cell areas in units of the finest lattice cell; equals 4^max_level
// when the leaves tile the domain.
std::uint64_t lattice_area(const QuadtreeMesh& mesh);

// ---------------------------------------------------------------------------
// Raster fields. Row r covers y in [origin.y + r*px, origin.y + (r+1)*px), so
// row 0 is the bottom of the domain.

using Channel = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Field {
  int width = 0;
  int height = 0;
  double pixel_size = 0.0;
  Point origin = Point::Zero();
  std::vector<std::string> names;
  std::vector<Channel> data;

  bool has(const std::string& name) const;
  const Channel& channel(const std::string& name) const;
  Channel& channel(const std::string& name);
  void add(const std::string& name, Channel values);
  Point pixel_center(int row, int col) const {
    return origin + Point((col + 0.5) * pixel_size, (row + 0.5) * pixel_size);
  }
};

struct RasterOptions {
  // Prism band and dilution widths at 64 pixels; scaled with resolution.
  int band_px_at_64 = 3;
  int dillute_px_at_64 = 3;
  // Optional per-cell values rasterized as channel "eta".
  const std::vector<double>* cell_values = nullptr;
};

// Supported channel names: geo, sdf, mask_prism, mask_dillute, density, eta.
Field rasterize(const QuadtreeMesh& mesh, const Outline* outline, int resolution,
                const std::set<std::string>& channels, const RasterOptions& opts = {});

struct PrismMasks {
  Channel prism;
  Channel dillute;
};

// 3x3 binary dilation applied band_px times, then dillute_px more times.
PrismMasks prism_mask(const Channel& geo, int band_px, int dillute_px);
Channel dilate(const Channel& mask, int iterations);

// Density encoding of a cell level: 0 = finest (max_level), 1 = base_level.
double encode_level(int level, int base_level, int max_level);
double decode_level(double value, int base_level, int max_level);

}  // namespace meshdensity::qmesh
