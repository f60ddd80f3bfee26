#include "meshdensity/qmesh.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "meshdensity/errors.hpp"

namespace meshdensity::qmesh {

namespace {

constexpr int kMaxSupportedLevel = 28;

CellKey unpack(std::uint64_t k) {
  const std::uint64_t mask = (std::uint64_t{1} << 29) - 1;
  return CellKey{static_cast<int>(k >> 58), static_cast<std::int64_t>((k >> 29) & mask),
                 static_cast<std::int64_t>(k & mask)};
}

constexpr std::array<std::array<int, 2>, 4> kSideOffsets{{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};

// Mutable leaf set used while constructing or refining a tree.
class LeafTree {
 public:
  LeafTree(int max_level) : max_level_(max_level) {}

  void insert(const CellKey& k) { leaves_.insert(pack(k)); }
  bool is_leaf(const CellKey& k) const { return leaves_.count(pack(k)) != 0; }

  std::optional<CellKey> containing_leaf(int level, std::int64_t i, std::int64_t j) const {
    for (int k = level; k >= 0; --k) {
      const CellKey key{k, i >> (level - k), j >> (level - k)};
      if (is_leaf(key)) return key;
    }
    return std::nullopt;
  }

  std::array<CellKey, 4> refine(const CellKey& k) {
    if (k.level >= max_level_)
      throw MeshError("refinement of cell at level " + std::to_string(k.level) +
                      " would exceed max_level " + std::to_string(max_level_));
    leaves_.erase(pack(k));
    std::array<CellKey, 4> kids{};
    int n = 0;
    for (int dj = 0; dj < 2; ++dj)
      for (int di = 0; di < 2; ++di) {
        kids[n] = CellKey{k.level + 1, 2 * k.i + di, 2 * k.j + dj};
        insert(kids[n++]);
      }
    return kids;
  }

  // Cascading refinement until face-adjacent leaves differ by at most one level.
  void balance(std::vector<CellKey> work) {
    while (!work.empty()) {
      const CellKey c = work.back();
      work.pop_back();
      if (!is_leaf(c)) continue;
      const std::int64_t n = std::int64_t{1} << c.level;
      for (const auto& off : kSideOffsets) {
        const std::int64_t ni = c.i + off[0];
        const std::int64_t nj = c.j + off[1];
        if (ni < 0 || nj < 0 || ni >= n || nj >= n) continue;
        for (;;) {
          const auto leaf = containing_leaf(c.level, ni, nj);
          if (!leaf || leaf->level >= c.level - 1) break;
          for (const auto& kid : refine(*leaf)) work.push_back(kid);
        }
      }
    }
  }

  std::vector<CellKey> keys() const {
    std::vector<CellKey> out;
    out.reserve(leaves_.size());
    for (auto k : leaves_) out.push_back(unpack(k));
    return out;
  }

 private:
  int max_level_;
  std::unordered_set<std::uint64_t> leaves_;
};

LeafTree tree_of(const QuadtreeMesh& mesh) {
  LeafTree t(mesh.max_level());
  for (const auto& c : mesh.cells()) t.insert(c.key);
  return t;
}

// Distance from the cell center beyond which no point of the cell can be.
double half_diagonal(double h) { return 0.5 * std::sqrt(2.0) * h; }

}  // namespace

std::uint64_t pack(const CellKey& k) {
  return (static_cast<std::uint64_t>(k.level) << 58) | (static_cast<std::uint64_t>(k.i) << 29) |
         static_cast<std::uint64_t>(k.j);
}

MeshSetup MeshSetup::uniform(int level, int max_level) {
  MeshSetup s;
  s.base_level = level;
  s.prism_band_layers = 0;
  s.wake_zones.clear();
  s.max_level = std::max(level, max_level);
  return s;
}

void validate(const MeshSetup& s) {
  if (s.base_level < 0 || s.max_level < s.base_level)
    throw MeshError("max_level must be >= base_level >= 0");
  if (s.max_level > kMaxSupportedLevel) throw MeshError("max_level above supported limit of 28");
  if (s.prism_band_layers < 0) throw MeshError("prism_band_layers must be >= 0");
  if (s.prism_band_stretch < 1.0) throw MeshError("prism_band_stretch must be >= 1");
  if (s.domain_length <= 0.0) throw MeshError("domain_length must be positive");
}

// ---------------------------------------------------------------------------

QuadtreeMesh::QuadtreeMesh(double domain_length, int base_level, int max_level,
                           std::optional<Outline> obstacle, std::vector<CellKey> leaves)
    : domain_length_(domain_length),
      base_level_(base_level),
      max_level_(max_level),
      obstacle_(std::move(obstacle)) {
  const auto lower_left = [this](const CellKey& k) {
    return std::pair{k.j * span(k.level), k.i * span(k.level)};
  };
  std::sort(leaves.begin(), leaves.end(),
            [&](const CellKey& a, const CellKey& b) { return lower_left(a) < lower_left(b); });

  cells_.reserve(leaves.size());
  index_.reserve(leaves.size());
  for (const auto& k : leaves) {
    if (k.level > max_level_) throw MeshError("leaf deeper than max_level");
    Cell c;
    c.key = k;
    c.size = domain_length_ / static_cast<double>(std::int64_t{1} << k.level);
    c.center = Point((static_cast<double>(k.i) + 0.5) * c.size, (static_cast<double>(k.j) + 0.5) * c.size);
    c.kind = (obstacle_ && geometry::contains(*obstacle_, c.center)) ? CellKind::Solid : CellKind::Fluid;
    index_.emplace(pack(k), cells_.size());
    cells_.push_back(c);
  }
  build_faces();
}

std::optional<std::size_t> QuadtreeMesh::find(const CellKey& key) const {
  const auto it = index_.find(pack(key));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::size_t> QuadtreeMesh::locate_lattice(std::int64_t x, std::int64_t y) const {
  for (int level = max_level_; level >= 0; --level) {
    const int shift = max_level_ - level;
    if (auto idx = find(CellKey{level, x >> shift, y >> shift})) return idx;
  }
  return std::nullopt;
}

std::size_t QuadtreeMesh::locate(const Point& p) const {
  const std::int64_t n = std::int64_t{1} << max_level_;
  const auto to_lattice = [&](double v) {
    return std::clamp(static_cast<std::int64_t>(std::floor(v / lattice_unit())), std::int64_t{0}, n - 1);
  };
  const auto idx = locate_lattice(to_lattice(p.x()), to_lattice(p.y()));
  if (!idx) throw MeshError("point not covered by any leaf");
  return *idx;
}

std::vector<std::size_t> QuadtreeMesh::neighbors(std::size_t idx, Side side) const {
  const CellKey& k = cells_[idx].key;
  const auto& off = kSideOffsets[static_cast<int>(side)];
  const std::int64_t n = std::int64_t{1} << k.level;
  const std::int64_t ni = k.i + off[0];
  const std::int64_t nj = k.j + off[1];
  std::vector<std::size_t> out;
  if (ni < 0 || nj < 0 || ni >= n || nj >= n) return out;

  // Descend into the neighbor region, keeping only children that touch `side`.
  std::vector<CellKey> stack{{k.level, ni, nj}};
  while (!stack.empty()) {
    const CellKey r = stack.back();
    stack.pop_back();
    bool found = false;
    for (int lvl = r.level; lvl >= 0; --lvl) {
      const int d = r.level - lvl;
      if (auto hit = find(CellKey{lvl, r.i >> d, r.j >> d})) {
        if (std::find(out.begin(), out.end(), *hit) == out.end()) out.push_back(*hit);
        found = true;
        break;
      }
    }
    if (found || r.level >= max_level_) continue;
    for (int t = 0; t < 2; ++t) {
      switch (side) {
        case Side::East: stack.push_back({r.level + 1, 2 * r.i, 2 * r.j + t}); break;
        case Side::West: stack.push_back({r.level + 1, 2 * r.i + 1, 2 * r.j + t}); break;
        case Side::North: stack.push_back({r.level + 1, 2 * r.i + t, 2 * r.j}); break;
        case Side::South: stack.push_back({r.level + 1, 2 * r.i + t, 2 * r.j + 1}); break;
      }
    }
  }
  return out;
}

void QuadtreeMesh::build_faces() {
  faces_.clear();
  for (std::size_t a = 0; a < cells_.size(); ++a) {
    const Cell& c = cells_[a];
    const CellKey& k = c.key;
    const std::int64_t s = span(k.level);
    const std::int64_t x0 = k.i * s, y0 = k.j * s, x1 = x0 + s, y1 = y0 + s;
    const std::int64_t n = std::int64_t{1} << k.level;

    for (int sd = 0; sd < 4; ++sd) {
      const Side side = static_cast<Side>(sd);
      Face f;
      f.a = static_cast<int>(a);
      f.side = side;
      f.length = c.size;
      switch (side) {
        case Side::East: f.ends = {Vertex{x1, y0}, Vertex{x1, y1}}; break;
        case Side::North: f.ends = {Vertex{x1, y1}, Vertex{x0, y1}}; break;
        case Side::West: f.ends = {Vertex{x0, y1}, Vertex{x0, y0}}; break;
        case Side::South: f.ends = {Vertex{x0, y0}, Vertex{x1, y0}}; break;
      }
      const auto& off = kSideOffsets[sd];
      const std::int64_t ni = k.i + off[0];
      const std::int64_t nj = k.j + off[1];
      if (ni < 0 || nj < 0 || ni >= n || nj >= n) {
        f.b = -1;
        f.distance = 0.5 * c.size;
        faces_.push_back(f);
        continue;
      }
      std::optional<std::size_t> nb;
      int nb_level = -1;
      for (int lvl = k.level; lvl >= 0; --lvl) {
        const int d = k.level - lvl;
        if (auto hit = find(CellKey{lvl, ni >> d, nj >> d})) {
          nb = hit;
          nb_level = lvl;
          break;
        }
      }
      if (!nb) continue;  // finer neighbors own this face
      if (nb_level == k.level && (side == Side::West || side == Side::South)) continue;
      f.b = static_cast<int>(*nb);
      f.distance = 0.5 * (c.size + cells_[*nb].size);
      faces_.push_back(f);
    }
  }
}

std::vector<CellKey> QuadtreeMesh::keys() const {
  std::vector<CellKey> out;
  out.reserve(cells_.size());
  for (const auto& c : cells_) out.push_back(c.key);
  return out;
}

std::size_t QuadtreeMesh::fluid_count() const {
  return static_cast<std::size_t>(std::count_if(
      cells_.begin(), cells_.end(), [](const Cell& c) { return c.kind == CellKind::Fluid; }));
}

int QuadtreeMesh::finest_level() const {
  int l = 0;
  for (const auto& c : cells_) l = std::max(l, c.key.level);
  return l;
}

// ---------------------------------------------------------------------------

QuadtreeMesh build_mesh(const MeshSetup& setup, const std::optional<Outline>& outline) {
  validate(setup);
  LeafTree tree(setup.max_level);
  const std::int64_t n = std::int64_t{1} << setup.base_level;
  for (std::int64_t j = 0; j < n; ++j)
    for (std::int64_t i = 0; i < n; ++i) tree.insert({setup.base_level, i, j});

  const double L = setup.domain_length;
  const auto cell_size = [L](int level) { return L / static_cast<double>(std::int64_t{1} << level); };
  const auto center = [&](const CellKey& k) {
    const double h = cell_size(k.level);
    return Point((static_cast<double>(k.i) + 0.5) * h, (static_cast<double>(k.j) + 0.5) * h);
  };

  if (outline) {
    // Near-wall band: cells within k*h of the outline, k shrinking by the stretch ratio per level.
    double layers = setup.prism_band_layers;
    for (int level = setup.base_level; layers >= 1.0; ++level) {
      if (level >= setup.max_level)
        throw MeshError("prism band refinement would exceed max_level");
      const double h = cell_size(level);
      for (const auto& k : tree.keys()) {
        if (k.level != level) continue;
        const double d = std::abs(geometry::signed_distance(*outline, center(k)));
        if (d - half_diagonal(h) < layers * h) tree.refine(k);
      }
      layers /= setup.prism_band_stretch;
    }

    for (const auto& zone : setup.wake_zones) {
      const int target = setup.base_level + zone.level_increment;
      if (target > setup.max_level) throw MeshError("wake zone level exceeds max_level");
      const double zx0 = outline->centroid.x();
      const double zx1 = outline->bounding_box.xmax + zone.downstream_extent;
      const double zy0 = outline->centroid.y() - zone.half_width;
      const double zy1 = outline->centroid.y() + zone.half_width;
      bool changed = true;
      while (changed) {
        changed = false;
        for (const auto& k : tree.keys()) {
          if (k.level >= target) continue;
          const double h = cell_size(k.level);
          const double x0 = static_cast<double>(k.i) * h, y0 = static_cast<double>(k.j) * h;
          if (x0 < zx1 && x0 + h > zx0 && y0 < zy1 && y0 + h > zy0) {
            tree.refine(k);
            changed = true;
          }
        }
      }
    }
  }
  tree.balance(tree.keys());
  return QuadtreeMesh(L, setup.base_level, setup.max_level, outline, tree.keys());
}

QuadtreeMesh refine_cells(const QuadtreeMesh& mesh, const std::set<std::size_t>& cell_ids) {
  LeafTree tree = tree_of(mesh);
  std::vector<CellKey> work;
  for (auto id : cell_ids) {
    if (id >= mesh.size()) throw MeshError("cell id " + std::to_string(id) + " out of range");
    for (const auto& kid : tree.refine(mesh.cell(id).key)) work.push_back(kid);
  }
  tree.balance(std::move(work));
  return QuadtreeMesh(mesh.domain_length(), mesh.base_level(), mesh.max_level(), mesh.obstacle(),
                      tree.keys());
}

QuadtreeMesh refine_uniformly(const QuadtreeMesh& mesh) {
  std::set<std::size_t> all;
  for (std::size_t i = 0; i < mesh.size(); ++i) all.insert(i);
  return refine_cells(mesh, all);
}

QuadtreeMesh coarsen_to_level(const QuadtreeMesh& mesh, int level) {
  std::set<std::uint64_t> seen;
  std::vector<CellKey> leaves;
  for (const auto& c : mesh.cells()) {
    CellKey k = c.key;
    if (k.level > level) {
      const int d = k.level - level;
      k = CellKey{level, k.i >> d, k.j >> d};
    }
    if (seen.insert(pack(k)).second) leaves.push_back(k);
  }
  return QuadtreeMesh(mesh.domain_length(), std::min(mesh.base_level(), level), mesh.max_level(),
                      mesh.obstacle(), std::move(leaves));
}

bool is_balanced(const QuadtreeMesh& mesh) {
  const auto& cells = mesh.cells();
  for (std::size_t a = 0; a < cells.size(); ++a) {
    const auto& ka = cells[a].key;
    const std::int64_t sa = mesh.span(ka.level);
    const std::int64_t ax0 = ka.i * sa, ay0 = ka.j * sa;
    for (std::size_t b = a + 1; b < cells.size(); ++b) {
      const auto& kb = cells[b].key;
      const std::int64_t sb = mesh.span(kb.level);
      const std::int64_t bx0 = kb.i * sb, by0 = kb.j * sb;
      const bool touch_x = (ax0 + sa == bx0 || bx0 + sb == ax0) && ay0 < by0 + sb && by0 < ay0 + sa;
      const bool touch_y = (ay0 + sa == by0 || by0 + sb == ay0) && ax0 < bx0 + sb && bx0 < ax0 + sa;
      if ((touch_x || touch_y) && std::abs(ka.level - kb.level) > 1) return false;
    }
  }
  return true;
}

std::uint64_t lattice_area(const QuadtreeMesh& mesh) {
  std::uint64_t area = 0;
  for (const auto& c : mesh.cells()) {
    const auto s = static_cast<std::uint64_t>(mesh.span(c.key.level));
    area += s * s;
  }
  return area;
}

// ---------------------------------------------------------------------------

bool Field::has(const std::string& name) const {
  return std::find(names.begin(), names.end(), name) != names.end();
}

const Channel& Field::channel(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw Error("field has no channel '" + name + "'");
  return data[static_cast<std::size_t>(it - names.begin())];
}

Channel& Field::channel(const std::string& name) {
  return const_cast<Channel&>(static_cast<const Field&>(*this).channel(name));
}

void Field::add(const std::string& name, Channel values) {
  if (has(name)) throw Error("duplicate channel '" + name + "'");
  if (values.rows() != height || values.cols() != width) throw ShapeError("channel shape mismatch");
  names.push_back(name);
  data.push_back(std::move(values));
}

double encode_level(int level, int base_level, int max_level) {
  if (max_level == base_level) return 0.0;
  return std::clamp(static_cast<double>(max_level - level) / (max_level - base_level), 0.0, 1.0);
}

double decode_level(double value, int base_level, int max_level) {
  return max_level - value * (max_level - base_level);
}

Channel dilate(const Channel& mask, int iterations) {
  Channel cur = mask;
  for (int it = 0; it < iterations; ++it) {
    Channel next = cur;
    for (Eigen::Index r = 0; r < cur.rows(); ++r)
      for (Eigen::Index c = 0; c < cur.cols(); ++c) {
        if (cur(r, c) != 0.0) continue;
        bool hit = false;
        for (Eigen::Index dr = -1; dr <= 1 && !hit; ++dr)
          for (Eigen::Index dc = -1; dc <= 1 && !hit; ++dc) {
            const Eigen::Index rr = r + dr, cc = c + dc;
            if (rr >= 0 && cc >= 0 && rr < cur.rows() && cc < cur.cols() && cur(rr, cc) != 0.0)
              hit = true;
          }
        if (hit) next(r, c) = 1.0;
      }
    cur = std::move(next);
  }
  return cur;
}

PrismMasks prism_mask(const Channel& geo, int band_px, int dillute_px) {
  if (band_px < 0 || dillute_px < 0) throw Error("mask widths must be >= 0");
  PrismMasks m;
  m.prism = dilate(geo, band_px);
  m.dillute = dilate(m.prism, dillute_px);
  return m;
}

Field rasterize(const QuadtreeMesh& mesh, const Outline* outline, int resolution,
                const std::set<std::string>& channels, const RasterOptions& opts) {
  if (resolution < 16) throw Error("rasterize resolution must be >= 16");
  static const std::set<std::string> known{"geo", "sdf", "mask_prism", "mask_dillute", "density", "eta"};
  for (const auto& c : channels)
    if (!known.count(c)) throw Error("unknown raster channel '" + c + "'");

  Field f;
  f.width = f.height = resolution;
  f.pixel_size = mesh.domain_length() / resolution;
  const double L = mesh.domain_length();

  const bool need_geo = channels.count("geo") || channels.count("mask_prism") || channels.count("mask_dillute");
  Channel geo = Channel::Zero(resolution, resolution);
  Channel sdf = Channel::Zero(resolution, resolution);
  Channel density = Channel::Zero(resolution, resolution);
  Channel eta = Channel::Zero(resolution, resolution);
  if (channels.count("eta") && (!opts.cell_values || opts.cell_values->size() != mesh.size()))
    throw Error("eta channel requires one value per mesh cell");

  for (int r = 0; r < resolution; ++r)
    for (int c = 0; c < resolution; ++c) {
      const Point p = f.pixel_center(r, c);
      if (outline) {
        if (need_geo) geo(r, c) = geometry::contains(*outline, p) ? 1.0 : 0.0;
        if (channels.count("sdf")) {
          const double d = std::clamp(geometry::signed_distance(*outline, p), -0.25 * L, 0.25 * L);
          sdf(r, c) = (d + 0.25 * L) / (0.5 * L);
        }
      } else if (channels.count("sdf")) {
        sdf(r, c) = 1.0;
      }
      if (channels.count("density") || channels.count("eta")) {
        const std::size_t idx = mesh.locate(p);
        const Cell& cell = mesh.cell(idx);
        density(r, c) = cell.kind == CellKind::Solid
                            ? 0.0
                            : encode_level(cell.key.level, mesh.base_level(), mesh.max_level());
        if (opts.cell_values) eta(r, c) = (*opts.cell_values)[idx];
      }
    }

  if (channels.count("geo")) f.add("geo", geo);
  if (channels.count("sdf")) f.add("sdf", sdf);
  if (channels.count("mask_prism") || channels.count("mask_dillute")) {
    const auto scaled = [resolution](int px64) {
      return static_cast<int>(std::lround(static_cast<double>(px64) * resolution / 64.0));
    };
    auto masks = prism_mask(geo, scaled(opts.band_px_at_64), scaled(opts.dillute_px_at_64));
    if (channels.count("mask_prism")) f.add("mask_prism", std::move(masks.prism));
    if (channels.count("mask_dillute")) f.add("mask_dillute", std::move(masks.dillute));
  }
  if (channels.count("density")) f.add("density", density);
  if (channels.count("eta")) f.add("eta", eta);
  return f;
}

}  // namespace meshdensity::qmesh
