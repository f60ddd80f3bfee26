#include "meshdensity/flow.hpp"

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseLU>
#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <unordered_map>

#include "meshdensity/errors.hpp"

namespace meshdensity::flow {

using qmesh::CellKind;
using qmesh::Face;
using qmesh::Side;
using Triplets = std::vector<Eigen::Triplet<double>>;

namespace {

Side opposite(Side s) {
  switch (s) {
    case Side::West: return Side::East;
    case Side::East: return Side::West;
    case Side::South: return Side::North;
    case Side::North: return Side::South;
  }
  return s;
}

bool is_fluid(const QuadtreeMesh& mesh, int idx) {
  return mesh.cell(static_cast<std::size_t>(idx)).kind == CellKind::Fluid;
}

// Dirichlet w = u_inf everywhere on the outer boundary except the outflow (east).
bool is_outflow(const Face& f) { return f.side == Side::East; }

Eigen::SparseMatrix<double> from_triplets(std::size_t n, const Triplets& t) {
  Eigen::SparseMatrix<double> m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  m.setFromTriplets(t.begin(), t.end());
  m.makeCompressed();
  return m;
}

std::uint64_t vertex_key(const qmesh::Vertex& v) {
  return (static_cast<std::uint64_t>(v.x) << 32) | static_cast<std::uint64_t>(v.y);
}

using StopRule = std::function<std::optional<StopReason>(double residual)>;

struct MarchResult {
  Eigen::VectorXd w_rows;
  std::vector<double> residuals;
  std::vector<double> drags;
  StopReason reason = StopReason::MaxIterations;
};

// Implicit pseudo-time iteration (M + A) dw = b - A w with local time steps.
MarchResult march(const QuadtreeMesh& mesh, const FluidIndex& index, const PotentialSolution& pot,
                  const FlowConfig& cfg, Eigen::VectorXd w, const StopRule& stop) {
  const TransportSystem sys = assemble_transport(mesh, index, pot.face_flux, cfg.nu, cfg.u_inf);
  const std::size_t n = index.rows();

  Eigen::SparseMatrix<double> P = sys.A;
  for (std::size_t r = 0; r < n; ++r) {
    const auto& c = mesh.cell(index.cell_of_row[r]);
    const double speed = pot.velocity.row(static_cast<Eigen::Index>(index.cell_of_row[r])).norm();
    P.coeffRef(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(r)) +=
        (c.size * speed + 2.0 * cfg.nu) / cfg.sequencing.pseudo_cfl;
  }
  P.makeCompressed();
  Eigen::SparseLU<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>> lu;
  lu.compute(P);
  if (lu.info() != Eigen::Success) throw SolverError("pseudo-time operator factorization failed");

  const double bnorm = sys.b.norm();
  MarchResult out;
  for (;;) {
    const Eigen::VectorXd defect = transport_defect(mesh, index, pot.face_flux, cfg.nu, cfg.u_inf, w);
    const double res = bnorm > 0.0 ? defect.norm() / bnorm : defect.norm();
    if (!std::isfinite(res)) throw SolverError("transport solve diverged (non-finite residual)");
    out.residuals.push_back(res);
    out.drags.push_back(sys.g.dot(w));
    if (auto reason = stop(res)) {
      out.reason = *reason;
      break;
    }
    w -= lu.solve(defect);
  }
  out.w_rows = std::move(w);
  return out;
}

}  // namespace

void validate(const FlowConfig& cfg) {
  if (!(cfg.u_inf > 0.0) || !(cfg.nu > 0.0)) throw SolverError("u_inf and nu must be positive");
  const auto& s = cfg.stopping;
  if (s.window < 1 || s.asymptotic_tol < 0.0 || !(s.min_residual > 0.0) || s.max_iterations < 1)
    throw SolverError("invalid stopping configuration");
  const auto& q = cfg.sequencing;
  if (q.max_levels < 1 || q.iters_per_level < 1 || !(q.level_tol > 0.0) || !(q.pseudo_cfl > 0.0))
    throw SolverError("invalid sequencing configuration");
}

std::string to_string(StopReason r) {
  switch (r) {
    case StopReason::SteadyState: return "SteadyState";
    case StopReason::SufficientAccuracy: return "SufficientAccuracy";
    case StopReason::MaxIterations: return "MaxIterations";
  }
  return "?";
}

// ---------------------------------------------------------------------------

StoppingMonitor::StoppingMonitor(StoppingConfig cfg) : cfg_(cfg) {}

std::optional<StopReason> StoppingMonitor::push(double residual) {
  if (!std::isfinite(residual)) throw SolverError("non-finite residual");
  ++iterations_;
  const auto window = static_cast<std::size_t>(cfg_.window);
  recent_.push_back(residual);
  if (recent_.size() > window) recent_.pop_front();
  if (recent_.size() == window) {
    double sum = 0.0;
    for (double r : recent_) sum += r;
    averages_.push_back(sum / static_cast<double>(window));
    if (averages_.size() > window + 1) averages_.pop_front();
  }

  if (residual < cfg_.min_residual) return StopReason::SufficientAccuracy;
  if (averages_.size() == window + 1) {
    const auto [lo, hi] = std::minmax_element(averages_.begin(), averages_.end());
    if (*hi - *lo < cfg_.asymptotic_tol * averages_.back()) return StopReason::SteadyState;
  }
  if (iterations_ >= cfg_.max_iterations) return StopReason::MaxIterations;
  return std::nullopt;
}

// ---------------------------------------------------------------------------

FluidIndex::FluidIndex(const QuadtreeMesh& mesh) : row_of_cell(mesh.size(), -1) {
  for (std::size_t i = 0; i < mesh.size(); ++i)
    if (mesh.cell(i).kind == CellKind::Fluid) {
      row_of_cell[i] = static_cast<int>(cell_of_row.size());
      cell_of_row.push_back(i);
    }
}

Eigen::VectorXd FluidIndex::scatter(const Eigen::VectorXd& rows_values) const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(row_of_cell.size()));
  for (std::size_t r = 0; r < cell_of_row.size(); ++r)
    out(static_cast<Eigen::Index>(cell_of_row[r])) = rows_values(static_cast<Eigen::Index>(r));
  return out;
}

Eigen::VectorXd FluidIndex::gather(const Eigen::VectorXd& cell_values) const {
  Eigen::VectorXd out(static_cast<Eigen::Index>(cell_of_row.size()));
  for (std::size_t r = 0; r < cell_of_row.size(); ++r)
    out(static_cast<Eigen::Index>(r)) = cell_values(static_cast<Eigen::Index>(cell_of_row[r]));
  return out;
}

// ---------------------------------------------------------------------------

PotentialSolution solve_potential(const QuadtreeMesh& mesh, const Outline* outline, double u_inf) {
  const FluidIndex index(mesh);
  const std::size_t n = index.rows();
  if (n == 0) throw SolverError("mesh has no Fluid cells");

  PotentialSolution sol;
  sol.psi_body = outline ? u_inf * outline->centroid.y() : 0.0;
  const auto boundary_psi = [&](const qmesh::Point& p) { return u_inf * p.y(); };

  Triplets trip;
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  const auto add_dirichlet = [&](int cell, double coef, double value) {
    const int r = index.row_of_cell[static_cast<std::size_t>(cell)];
    trip.emplace_back(r, r, coef);
    rhs(r) += coef * value;
  };

  for (const Face& f : mesh.faces()) {
    const auto& ca = mesh.cell(static_cast<std::size_t>(f.a));
    if (f.b < 0) {
      if (ca.kind != CellKind::Fluid) continue;
      const qmesh::Point mid = 0.5 * (mesh.vertex_position(f.ends[0]) + mesh.vertex_position(f.ends[1]));
      add_dirichlet(f.a, f.length / f.distance, boundary_psi(mid));
      continue;
    }
    const bool fa = is_fluid(mesh, f.a), fb = is_fluid(mesh, f.b);
    if (fa && fb) {
      const double coef = f.length / f.distance;
      const int ra = index.row_of_cell[static_cast<std::size_t>(f.a)];
      const int rb = index.row_of_cell[static_cast<std::size_t>(f.b)];
      trip.emplace_back(ra, ra, coef);
      trip.emplace_back(rb, rb, coef);
      trip.emplace_back(ra, rb, -coef);
      trip.emplace_back(rb, ra, -coef);
    } else if (fa || fb) {
      const int fluid = fa ? f.a : f.b;
      const double h = mesh.cell(static_cast<std::size_t>(fluid)).size;
      add_dirichlet(fluid, f.length / (0.5 * h), sol.psi_body);
    }
  }
  const auto K = from_triplets(n, trip);

  Eigen::VectorXd guess(static_cast<Eigen::Index>(n));
  for (std::size_t r = 0; r < n; ++r)
    guess(static_cast<Eigen::Index>(r)) = boundary_psi(mesh.cell(index.cell_of_row[r]).center);

  Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper,
                           Eigen::IncompleteCholesky<double>>
      cg;
  cg.setTolerance(1e-10);
  cg.setMaxIterations(static_cast<Eigen::Index>(10 * n));
  cg.compute(K);
  if (cg.info() != Eigen::Success) throw SolverError("potential preconditioner setup failed");
  const Eigen::VectorXd psi_rows = cg.solveWithGuess(rhs, guess);
  if (cg.info() != Eigen::Success)
    throw SolverError("potential solve stagnated after " + std::to_string(cg.iterations()) + " iterations");
  sol.cg_iterations = static_cast<int>(cg.iterations());

  sol.psi = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(mesh.size()), sol.psi_body);
  for (std::size_t r = 0; r < n; ++r) sol.psi(static_cast<Eigen::Index>(index.cell_of_row[r])) = psi_rows(static_cast<Eigen::Index>(r));

  // Stream function at lattice vertices.
  const std::int64_t R = std::int64_t{1} << mesh.max_level();
  std::unordered_map<std::uint64_t, double> vertex_psi;
  const auto psi_at = [&](const qmesh::Vertex& v) {
    const auto key = vertex_key(v);
    if (auto it = vertex_psi.find(key); it != vertex_psi.end()) return it->second;
    double value;
    if (v.x == 0 || v.y == 0 || v.x == R || v.y == R) {
      value = boundary_psi(mesh.vertex_position(v));
    } else {
      std::array<std::size_t, 4> around{};
      int count = 0;
      bool solid = false;
      for (int dy = -1; dy <= 0; ++dy)
        for (int dx = -1; dx <= 0; ++dx) {
          const auto idx = mesh.locate_lattice(v.x + dx, v.y + dy);
          if (!idx) throw MeshError("lattice square not covered");
          if (mesh.cell(*idx).kind == CellKind::Solid) solid = true;
          if (std::find(around.begin(), around.begin() + count, *idx) == around.begin() + count)
            around[static_cast<std::size_t>(count++)] = *idx;
        }
      if (solid) {
        value = sol.psi_body;
      } else {
        double sum = 0.0;
        for (int k = 0; k < count; ++k) sum += sol.psi(static_cast<Eigen::Index>(around[static_cast<std::size_t>(k)]));
        value = sum / count;
      }
    }
    vertex_psi.emplace(key, value);
    return value;
  };

  const auto& faces = mesh.faces();
  sol.face_flux.resize(static_cast<Eigen::Index>(faces.size()));
  // Outward flux through a CCW-ordered edge is psi(end) - psi(start).
  for (std::size_t k = 0; k < faces.size(); ++k)
    sol.face_flux(static_cast<Eigen::Index>(k)) = psi_at(faces[k].ends[1]) - psi_at(faces[k].ends[0]);

  // Cell velocity: average of the side-integrated fluxes on opposite sides.
  Eigen::MatrixXd side_flux = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(mesh.size()), 4);
  for (std::size_t k = 0; k < faces.size(); ++k) {
    const Face& f = faces[k];
    const double F = sol.face_flux(static_cast<Eigen::Index>(k));
    side_flux(f.a, static_cast<int>(f.side)) += F;
    if (f.b >= 0) side_flux(f.b, static_cast<int>(opposite(f.side))) -= F;
  }
  sol.velocity = Eigen::MatrixX2d::Zero(static_cast<Eigen::Index>(mesh.size()), 2);
  for (std::size_t i = 0; i < mesh.size(); ++i) {
    const auto& c = mesh.cell(i);
    if (c.kind != CellKind::Fluid) continue;
    const auto row = static_cast<Eigen::Index>(i);
    sol.velocity(row, 0) = (side_flux(row, static_cast<int>(Side::East)) - side_flux(row, static_cast<int>(Side::West))) / (2.0 * c.size);
    sol.velocity(row, 1) = (side_flux(row, static_cast<int>(Side::North)) - side_flux(row, static_cast<int>(Side::South))) / (2.0 * c.size);
  }
  return sol;
}

Eigen::VectorXd flux_divergence(const QuadtreeMesh& mesh, const Eigen::VectorXd& face_flux) {
  Eigen::VectorXd div = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(mesh.size()));
  const auto& faces = mesh.faces();
  for (std::size_t k = 0; k < faces.size(); ++k) {
    div(faces[k].a) += face_flux(static_cast<Eigen::Index>(k));
    if (faces[k].b >= 0) div(faces[k].b) -= face_flux(static_cast<Eigen::Index>(k));
  }
  return div;
}

// ---------------------------------------------------------------------------

TransportSystem assemble_transport(const QuadtreeMesh& mesh, const FluidIndex& index,
                                   const Eigen::VectorXd& face_flux, double nu, double u_inf,
                                   Convection scheme) {
  const std::size_t n = index.rows();
  const auto N = static_cast<Eigen::Index>(n);
  TransportSystem sys;
  sys.b_conv = Eigen::VectorXd::Zero(N);
  sys.b_diff = Eigen::VectorXd::Zero(N);
  sys.g = Eigen::VectorXd::Zero(N);
  Triplets conv, diff;
  const auto row = [&](int cell) { return index.row_of_cell[static_cast<std::size_t>(cell)]; };

  const auto& faces = mesh.faces();
  for (std::size_t k = 0; k < faces.size(); ++k) {
    const Face& f = faces[k];
    const double F = face_flux(static_cast<Eigen::Index>(k));
    const bool fa = is_fluid(mesh, f.a);

    if (f.b < 0) {
      if (!fa) continue;
      const int ra = row(f.a);
      if (is_outflow(f)) {
        conv.emplace_back(ra, ra, F);
        continue;
      }
      if (scheme == Convection::Upwind && F > 0.0) {
        conv.emplace_back(ra, ra, F);
      } else {
        sys.b_conv(ra) -= F * u_inf;
      }
      const double D = nu * f.length / f.distance;
      diff.emplace_back(ra, ra, D);
      sys.b_diff(ra) += D * u_inf;
      continue;
    }

    const bool fb = is_fluid(mesh, f.b);
    if (fa && fb) {
      const int ra = row(f.a), rb = row(f.b);
      if (scheme == Convection::Upwind) {
        conv.emplace_back(ra, ra, std::max(F, 0.0));
        conv.emplace_back(ra, rb, std::min(F, 0.0));
        conv.emplace_back(rb, rb, std::max(-F, 0.0));
        conv.emplace_back(rb, ra, std::min(-F, 0.0));
      } else {
        conv.emplace_back(ra, ra, 0.5 * F);
        conv.emplace_back(ra, rb, 0.5 * F);
        conv.emplace_back(rb, rb, -0.5 * F);
        conv.emplace_back(rb, ra, -0.5 * F);
      }
      const double D = nu * f.length / f.distance;
      diff.emplace_back(ra, ra, D);
      diff.emplace_back(rb, rb, D);
      diff.emplace_back(ra, rb, -D);
      diff.emplace_back(rb, ra, -D);
    } else if (fa || fb) {
      // Wall face: w = 0 on the Solid side, no through-flux.
      const int fluid = fa ? f.a : f.b;
      const double h = mesh.cell(static_cast<std::size_t>(fluid)).size;
      const double D = nu * f.length / (0.5 * h);
      diff.emplace_back(row(fluid), row(fluid), D);
      sys.g(row(fluid)) += D;
    }
  }
  sys.A_conv = from_triplets(n, conv);
  sys.A_diff = from_triplets(n, diff);
  sys.A = sys.A_conv + sys.A_diff;
  sys.A.makeCompressed();
  sys.b = sys.b_conv + sys.b_diff;
  return sys;
}

Eigen::VectorXd transport_defect(const QuadtreeMesh& mesh, const FluidIndex& index,
                                 const Eigen::VectorXd& face_flux, double nu, double u_inf,
                                 const Eigen::VectorXd& w, Convection scheme) {
  Eigen::VectorXd defect = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(index.rows()));
  const auto row = [&](int cell) { return index.row_of_cell[static_cast<std::size_t>(cell)]; };
  const auto& faces = mesh.faces();
  for (std::size_t k = 0; k < faces.size(); ++k) {
    const Face& f = faces[k];
    const double F = face_flux(static_cast<Eigen::Index>(k));
    const int ra = row(f.a);

    if (f.b < 0) {
      if (ra < 0) continue;
      const double wa = w(ra);
      double flux;
      if (is_outflow(f)) {
        flux = F * wa;
      } else {
        const double face_w = (scheme == Convection::Upwind && F > 0.0) ? wa : u_inf;
        flux = F * face_w - nu * f.length / f.distance * (u_inf - wa);
      }
      defect(ra) += flux;
      continue;
    }

    const int rb = row(f.b);
    if (ra >= 0 && rb >= 0) {
      const double wa = w(ra), wb = w(rb);
      const double face_w = scheme == Convection::Upwind ? (F > 0.0 ? wa : wb) : 0.5 * (wa + wb);
      const double flux = F * face_w - nu * f.length / f.distance * (wb - wa);
      defect(ra) += flux;
      defect(rb) -= flux;
    } else if (ra >= 0 || rb >= 0) {
      const int r = ra >= 0 ? ra : rb;
      const int fluid = ra >= 0 ? f.a : f.b;
      const double h = mesh.cell(static_cast<std::size_t>(fluid)).size;
      defect(r) += nu * f.length / (0.5 * h) * w(r);
    }
  }
  return defect;
}

// ---------------------------------------------------------------------------

PrimalSolution solve_transport(const QuadtreeMesh& mesh, const PotentialSolution& potential,
                               const FlowConfig& cfg, const std::optional<Eigen::VectorXd>& initial) {
  validate(cfg);
  const FluidIndex index(mesh);
  Eigen::VectorXd w0 = initial ? index.gather(*initial)
                               : Eigen::VectorXd::Constant(static_cast<Eigen::Index>(index.rows()), cfg.u_inf);
  StoppingMonitor monitor(cfg.stopping);
  auto m = march(mesh, index, potential, cfg, std::move(w0),
                 [&](double r) { return monitor.push(r); });

  PrimalSolution sol;
  sol.psi = potential.psi;
  sol.velocity = potential.velocity;
  sol.face_flux = potential.face_flux;
  sol.w = index.scatter(m.w_rows);
  sol.residual_history = std::move(m.residuals);
  sol.drag_history = std::move(m.drags);
  sol.stop_reason = m.reason;
  sol.iterations = monitor.iterations();
  return sol;
}

Eigen::VectorXd inject(const QuadtreeMesh& source, const Eigen::VectorXd& values,
                       const QuadtreeMesh& target) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(target.size()));
  for (std::size_t i = 0; i < target.size(); ++i)
    out(static_cast<Eigen::Index>(i)) = values(static_cast<Eigen::Index>(source.locate(target.cell(i).center)));
  return out;
}

PrimalSolution grid_sequenced_solve(const QuadtreeMesh& mesh, const FlowConfig& cfg) {
  validate(cfg);
  const Outline* outline = mesh.obstacle() ? &*mesh.obstacle() : nullptr;
  const int finest = mesh.finest_level();
  const int first = std::max(2, finest - (cfg.sequencing.max_levels - 1));

  std::optional<Eigen::VectorXd> guess;
  std::optional<QuadtreeMesh> previous;
  std::vector<int> level_iterations;
  for (int level = first; level < finest; ++level) {
    QuadtreeMesh coarse = qmesh::coarsen_to_level(mesh, level);
    const FluidIndex index(coarse);
    if (index.rows() == 0) continue;
    const auto pot = solve_potential(coarse, outline, cfg.u_inf);
    Eigen::VectorXd w0 = guess && previous ? index.gather(inject(*previous, *guess, coarse))
                                           : Eigen::VectorXd::Constant(static_cast<Eigen::Index>(index.rows()), cfg.u_inf);
    int it = 0;
    double first_res = 0.0;
    auto m = march(coarse, index, pot, cfg, std::move(w0), [&](double r) -> std::optional<StopReason> {
      if (it++ == 0) first_res = r;
      if (r < cfg.stopping.min_residual || (first_res > 0.0 && r < cfg.sequencing.level_tol * first_res))
        return StopReason::SufficientAccuracy;
      if (it >= cfg.sequencing.iters_per_level) return StopReason::MaxIterations;
      return std::nullopt;
    });
    level_iterations.push_back(it);
    guess = index.scatter(m.w_rows);
    previous.emplace(std::move(coarse));
  }

  const auto pot = solve_potential(mesh, outline, cfg.u_inf);
  std::optional<Eigen::VectorXd> initial;
  if (guess && previous) initial = inject(*previous, *guess, mesh);
  PrimalSolution sol = solve_transport(mesh, pot, cfg, initial);
  sol.sequencing_iterations = std::move(level_iterations);
  return sol;
}

PrimalSolution grid_sequenced_solve(const qmesh::MeshSetup& setup, const Outline& outline,
                                    const FlowConfig& cfg) {
  if (setup.base_level < 2) throw MeshError("grid sequencing requires base_level >= 2");
  return grid_sequenced_solve(qmesh::build_mesh(setup, outline), cfg);
}

double compute_drag(const Eigen::VectorXd& w, const QuadtreeMesh& mesh, double nu) {
  double J = 0.0;
  bool any = false;
  for (const Face& f : mesh.faces()) {
    if (f.b < 0) continue;
    const bool fa = is_fluid(mesh, f.a), fb = is_fluid(mesh, f.b);
    if (fa == fb) continue;
    const int fluid = fa ? f.a : f.b;
    const double h = mesh.cell(static_cast<std::size_t>(fluid)).size;
    J += nu * w(fluid) / (0.5 * h) * f.length;
    any = true;
  }
  if (!any) throw SolverError("no obstacle-adjacent faces: drag undefined");
  return J;
}

std::string residual_csv(const PrimalSolution& sol) {
  std::ostringstream os;
  os.precision(17);
  os << "iteration,residual,drag\n";
  for (std::size_t k = 0; k < sol.residual_history.size(); ++k)
    os << (k + 1) << ',' << sol.residual_history[k] << ','
       << (k < sol.drag_history.size() ? sol.drag_history[k] : 0.0) << '\n';
  return os.str();
}

}  // namespace meshdensity::flow
