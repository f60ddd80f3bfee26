#include "meshdensity/amr.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

#include "meshdensity/errors.hpp"

namespace meshdensity::amr {

using qmesh::CellKind;
using qmesh::CellKey;

void validate(const AmrConfig& cfg) {
  if (!(cfg.fraction > 0.0 && cfg.fraction <= 1.0)) throw MeshError("refinement fraction must be in (0, 1]");
  if (cfg.max_iters < 0) throw MeshError("max_iters must be non-negative");
  if (!(cfg.eta_target >= 0.0)) throw MeshError("eta_target must be non-negative");
}

std::set<std::size_t> select_cells(const QuadtreeMesh& mesh, const Eigen::VectorXd& eta, double fraction) {
  if (eta.size() != static_cast<Eigen::Index>(mesh.size())) throw MeshError("indicator size does not match mesh");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < mesh.size(); ++i) {
    const auto& c = mesh.cell(i);
    if (c.kind == CellKind::Fluid && c.key.level < mesh.max_level()) eligible.push_back(i);
  }
  const auto wanted = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(mesh.fluid_count()) - 1e-9));
  const std::size_t k = std::min(wanted, eligible.size());
  std::partial_sort(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(k), eligible.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double ea = eta(static_cast<Eigen::Index>(a));
                      const double eb = eta(static_cast<Eigen::Index>(b));
                      return ea != eb ? ea > eb : a < b;
                    });
  return {eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(k)};
}

RefinementResult refinement_loop(const MeshSetup& setup, const Outline& outline,
                                 const flow::FlowConfig& flow_cfg, const AmrConfig& amr_cfg,
                                 const RecordSink& sink) {
  validate(amr_cfg);
  flow::validate(flow_cfg);
  QuadtreeMesh mesh = qmesh::build_mesh(setup, outline);
  RefinementResult result{{}, mesh, {}, std::nullopt};

  for (int it = 0;; ++it) {
    adjoint::Evaluation ev;
    try {
      ev = adjoint::evaluate(mesh, flow_cfg);
    } catch (const SolverError& e) {
      result.failure = "iteration " + std::to_string(it) + ": " + e.what();
      return result;
    }
    RefinementRecord rec{it, mesh.size(), ev.drag, ev.indicators.eta_sum, ev.indicators.eta_signed,
                         "mesh-" + std::to_string(it)};
    result.records.push_back(rec);
    result.mesh = mesh;
    result.evaluation = std::move(ev);
    if (sink) sink(rec, mesh);

    if (it >= amr_cfg.max_iters) break;
    if (amr_cfg.eta_target > 0.0 && rec.eta_sum < amr_cfg.eta_target) break;
    const auto picked = select_cells(mesh, result.evaluation.indicators.eta, amr_cfg.fraction);
    if (picked.empty()) break;  // everything already at max_level
    mesh = qmesh::refine_cells(mesh, picked);
  }
  return result;
}

Field target_density(const QuadtreeMesh& mesh, int resolution) {
  const Outline* outline = mesh.obstacle() ? &*mesh.obstacle() : nullptr;
  return qmesh::rasterize(mesh, outline, resolution, {"density"});
}

std::vector<double> all_thresholds(int base_level, int max_level) {
  std::vector<double> t;
  for (int l = max_level - 1; l >= base_level; --l)
    t.push_back((static_cast<double>(max_level - l) - 0.5) / static_cast<double>(max_level - base_level));
  return t;
}

std::vector<double> default_thresholds(int base_level, int max_level, int count) {
  auto t = all_thresholds(base_level, max_level);
  t.resize(std::min<std::size_t>(t.size(), static_cast<std::size_t>(std::max(count, 0))));
  return t;
}

// ---------------------------------------------------------------------------
// Marching squares

namespace {

void check_thresholds(const std::vector<double>& thresholds) {
  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    if (!(thresholds[k] > 0.0 && thresholds[k] < 1.0)) throw MeshError("thresholds must lie in (0, 1)");
    if (k > 0 && !(thresholds[k] > thresholds[k - 1])) throw MeshError("thresholds must be strictly increasing");
  }
}

ContourSet march(const Channel& d, double t, double pixel, const Point& origin) {
  const Eigen::Index H = d.rows() + 2, W = d.cols() + 2;
  const double border = std::max(d.maxCoeff(), t) + 1.0;
  const auto value = [&](Eigen::Index r, Eigen::Index c) {
    if (r == 0 || c == 0 || r == H - 1 || c == W - 1) return border;
    return d(r - 1, c - 1);
  };
  const auto pos = [&](Eigen::Index r, Eigen::Index c) {
    return Point(origin.x() + (static_cast<double>(c) - 0.5) * pixel,
                 origin.y() + (static_cast<double>(r) - 0.5) * pixel);
  };
  // Edge ids: horizontal (r,c)-(r,c+1) even, vertical (r,c)-(r+1,c) odd.
  const auto hid = [&](Eigen::Index r, Eigen::Index c) { return 2 * (r * W + c); };
  const auto vid = [&](Eigen::Index r, Eigen::Index c) { return 2 * (r * W + c) + 1; };
  const auto crossing = [&](std::int64_t id) {
    const Eigen::Index cell = id / 2, r = cell / W, c = cell % W;
    const Eigen::Index r2 = (id % 2) ? r + 1 : r, c2 = (id % 2) ? c : c + 1;
    const double va = value(r, c), vb = value(r2, c2);
    const double f = (t - va) / (vb - va);
    return Point(pos(r, c) + f * (pos(r2, c2) - pos(r, c)));
  };

  std::unordered_map<std::int64_t, std::vector<std::int64_t>> link;
  const auto connect = [&](std::int64_t a, std::int64_t b) {
    link[a].push_back(b);
    link[b].push_back(a);
  };
  for (Eigen::Index r = 0; r + 1 < H; ++r) {
    for (Eigen::Index c = 0; c + 1 < W; ++c) {
      const double bl = value(r, c), br = value(r, c + 1), tr = value(r + 1, c + 1), tl = value(r + 1, c);
      const bool ibl = bl <= t, ibr = br <= t, itr = tr <= t, itl = tl <= t;
      const int n_in = ibl + ibr + itr + itl;
      if (n_in == 0 || n_in == 4) continue;
      const std::int64_t bottom = hid(r, c), top = hid(r + 1, c), left = vid(r, c), right = vid(r, c + 1);
      // Each corner that differs from the cell's majority (or, for saddles, from
      // the center) is cut off by the segment joining its two edges.
      bool ref;
      if (n_in == 2 && ibl == itr) {
        ref = 0.25 * (bl + br + tr + tl) <= t;
      } else if (n_in == 2) {
        // Adjacent pair: one straight segment.
        if (ibl == ibr) connect(left, right);
        else connect(bottom, top);
        continue;
      } else {
        ref = n_in == 3;
      }
      if (ibl != ref) connect(bottom, left);
      if (ibr != ref) connect(bottom, right);
      if (itr != ref) connect(right, top);
      if (itl != ref) connect(left, top);
    }
  }

  ContourSet loops;
  std::unordered_map<std::int64_t, bool> used;
  std::vector<std::int64_t> starts;
  starts.reserve(link.size());
  for (const auto& [id, _] : link) starts.push_back(id);
  std::sort(starts.begin(), starts.end());
  for (const auto start : starts) {
    if (used[start]) continue;
    Contour loop;
    std::int64_t prev = -1, cur = start;
    while (!used[cur]) {
      used[cur] = true;
      loop.push_back(crossing(cur));
      const auto& nb = link[cur];
      std::int64_t next = -1;
      for (const auto n : nb)
        if (n != prev && !used[n]) {
          next = n;
          break;
        }
      if (next < 0) break;
      prev = cur;
      cur = next;
    }
    if (loop.size() >= 3) loops.push_back(std::move(loop));
  }
  return loops;
}

}  // namespace

std::vector<ContourSet> extract_isosurfaces(const Field& density, const std::vector<double>& thresholds,
                                            const std::string& channel) {
  check_thresholds(thresholds);
  const Channel& d = density.channel(channel);
  std::vector<ContourSet> out(thresholds.size());
  if (d.size() == 0) return out;
  const double lo = d.minCoeff(), hi = d.maxCoeff();
  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    const double t = thresholds[k];
    if (t < lo || t > hi || lo == hi) continue;
    out[k] = march(d, t, density.pixel_size, density.origin);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthesis

Eigen::MatrixXi required_levels(const Channel& density, const std::vector<double>& thresholds,
                                int base_level, int max_level) {
  check_thresholds(thresholds);
  std::vector<int> zone_level(thresholds.size());
  for (std::size_t k = 0; k < thresholds.size(); ++k)
    zone_level[k] = static_cast<int>(std::ceil(qmesh::decode_level(thresholds[k], base_level, max_level) - 1e-9));
  Eigen::MatrixXi req = Eigen::MatrixXi::Constant(density.rows(), density.cols(), base_level);
  for (Eigen::Index r = 0; r < density.rows(); ++r)
    for (Eigen::Index c = 0; c < density.cols(); ++c)
      for (std::size_t k = 0; k < thresholds.size(); ++k)
        if (density(r, c) <= thresholds[k]) req(r, c) = std::max(req(r, c), zone_level[k]);
  return req;
}

QuadtreeMesh synth_mesh(const Field& density, const MeshSetup& setup, const Outline* outline,
                        const std::vector<double>& thresholds) {
  qmesh::validate(setup);
  const Channel& d = density.channel("density");
  Eigen::MatrixXi req = required_levels(d, thresholds, setup.base_level, setup.max_level);
  if (outline) {
    for (Eigen::Index r = 0; r < req.rows(); ++r)
      for (Eigen::Index c = 0; c < req.cols(); ++c)
        if (geometry::contains(*outline, density.pixel_center(static_cast<int>(r), static_cast<int>(c))))
          req(r, c) = setup.base_level;
  }
  if (req.size() > 0 && req.maxCoeff() > setup.max_level)
    throw MeshError("control zone requires a level beyond max_level");

  // The near-wall band and wake zones of the setup are the mesher's own; the
  // control zones only add refinement on top of them.
  QuadtreeMesh mesh = qmesh::build_mesh(setup, outline ? std::optional<Outline>(*outline) : std::nullopt);

  const double px = density.pixel_size;
  const auto pixel_range = [&](double lo, double hi, Eigen::Index count) {
    const auto a = static_cast<Eigen::Index>(std::floor(lo / px));
    const auto b = static_cast<Eigen::Index>(std::ceil(hi / px)) - 1;
    return std::pair{std::max<Eigen::Index>(a, 0), std::min<Eigen::Index>(b, count - 1)};
  };
  for (;;) {
    std::set<std::size_t> split;
    for (std::size_t idx = 0; idx < mesh.size(); ++idx) {
      const auto& cell = mesh.cell(idx);
      const Point lo = cell.center - Point::Constant(0.5 * cell.size) - density.origin;
      const auto [c0, c1] = pixel_range(lo.x(), lo.x() + cell.size, req.cols());
      const auto [r0, r1] = pixel_range(lo.y(), lo.y() + cell.size, req.rows());
      if (c0 > c1 || r0 > r1) continue;
      if (req.block(r0, c0, r1 - r0 + 1, c1 - c0 + 1).maxCoeff() > cell.key.level) split.insert(idx);
    }
    if (split.empty()) break;
    mesh = qmesh::refine_cells(mesh, split);
  }
  return mesh;
}

int level_at(const QuadtreeMesh& mesh, const Point& p) { return mesh.cell(mesh.locate(p)).key.level; }

}  // namespace meshdensity::amr
