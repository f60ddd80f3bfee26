#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCore>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "meshdensity/qmesh.hpp"

namespace meshdensity::flow {

using qmesh::QuadtreeMesh;
using geometry::Outline;

struct StoppingConfig {
  int window = 100;
  double asymptotic_tol = 1e-3;
  double min_residual = 1e-7;
  int max_iterations = 5000;
};

struct SequencingConfig {
  int max_levels = 10;
  int iters_per_level = 50;
  double level_tol = 0.01;
  double pseudo_cfl = 50.0;
};

struct FlowConfig {
  double u_inf = 1.0;
  double nu = 0.01;
  StoppingConfig stopping;
  SequencingConfig sequencing;
};

void validate(const FlowConfig& cfg);

enum class StopReason { SteadyState, SufficientAccuracy, MaxIterations };
std::string to_string(StopReason r);

// Applies the three termination rules to a residual stream, one value per
// iteration:
//  - SufficientAccuracy: residual < min_residual.
//  - SteadyState: the moving average of the latest `window` residuals stayed
//    within asymptotic_tol (relative) over the last `window` iterations, i.e.
//    (max - min) of the last window+1 averages < tol * current average.
//  - MaxIterations: max_iterations residuals seen.
// Rules are checked in that order at every iteration; the first hit wins.
class StoppingMonitor {
 public:
  explicit StoppingMonitor(StoppingConfig cfg);

  // Throws SolverError on a non-finite residual.
  std::optional<StopReason> push(double residual);
  int iterations() const { return iterations_; }

 private:
  StoppingConfig cfg_;
  int iterations_ = 0;
  std::deque<double> recent_;
  double running_sum_ = 0.0;
  std::deque<double> averages_;
};

// Fluid cells are the unknowns of every linear system; this maps between mesh
// cell indices and system rows.
struct FluidIndex {
  std::vector<int> row_of_cell;  // -1 for Solid cells
  std::vector<std::size_t> cell_of_row;

  explicit FluidIndex(const QuadtreeMesh& mesh);
  std::size_t rows() const { return cell_of_row.size(); }
  Eigen::VectorXd scatter(const Eigen::VectorXd& rows_values) const;  // Solid cells -> 0
  Eigen::VectorXd gather(const Eigen::VectorXd& cell_values) const;
};

struct PotentialSolution {
  Eigen::VectorXd psi;       // per cell; Solid cells hold the body value
  Eigen::MatrixX2d velocity; // per cell (u, v); zero on Solid cells
  Eigen::VectorXd face_flux; // per mesh face, outward from face.a
  double psi_body = 0.0;
  int cg_iterations = 0;
};

// Stream function by two-point Laplace on Fluid cells (CG, relative residual
// 1e-10); face fluxes from stream-function differences at face end points.
PotentialSolution solve_potential(const QuadtreeMesh& mesh, const Outline* outline, double u_inf);

// Per-cell divergence of the face fluxes (outflow minus inflow).
Eigen::VectorXd flux_divergence(const QuadtreeMesh& mesh, const Eigen::VectorXd& face_flux);

enum class Convection { Upwind, Central };

// Steady transport operator A w = b on Fluid cells, split into parts that are
// linear in u_inf (convection) and in nu (diffusion).
struct TransportSystem {
  Eigen::SparseMatrix<double> A;
  Eigen::VectorXd b;
  Eigen::SparseMatrix<double> A_conv, A_diff;
  Eigen::VectorXd b_conv, b_diff;
  Eigen::VectorXd g;  // dJ/dw per row
};

TransportSystem assemble_transport(const QuadtreeMesh& mesh, const FluidIndex& index,
                                   const Eigen::VectorXd& face_flux, double nu, double u_inf,
                                   Convection scheme = Convection::Upwind);

// Matrix-free face loop evaluating A w - b for per-row values w.
Eigen::VectorXd transport_defect(const QuadtreeMesh& mesh, const FluidIndex& index,
                                 const Eigen::VectorXd& face_flux, double nu, double u_inf,
                                 const Eigen::VectorXd& w_rows,
                                 Convection scheme = Convection::Upwind);

struct PrimalSolution {
  Eigen::VectorXd psi;
  Eigen::MatrixX2d velocity;
  Eigen::VectorXd face_flux;
  Eigen::VectorXd w;  // per cell; Solid cells 0
  std::vector<double> residual_history;
  std::vector<double> drag_history;
  StopReason stop_reason = StopReason::MaxIterations;
  int iterations = 0;
  // Iterations spent on each coarse level before the final one.
  std::vector<int> sequencing_iterations;
};

// Implicit pseudo-time marching, started from `initial` (per cell) or the
// free stream. Residual = ||b - A w|| / ||b||.
PrimalSolution solve_transport(const QuadtreeMesh& mesh, const PotentialSolution& potential,
                               const FlowConfig& cfg,
                               const std::optional<Eigen::VectorXd>& initial = std::nullopt);

PrimalSolution grid_sequenced_solve(const QuadtreeMesh& mesh, const FlowConfig& cfg);
PrimalSolution grid_sequenced_solve(const qmesh::MeshSetup& setup, const Outline& outline,
                                    const FlowConfig& cfg);

// Values carried to `target` by piecewise-constant injection at cell centers.
Eigen::VectorXd inject(const QuadtreeMesh& source, const Eigen::VectorXd& values,
                       const QuadtreeMesh& target);

// Wall flux of w over all Fluid faces touching Solid cells. Throws when the
// mesh has no such face.
double compute_drag(const Eigen::VectorXd& w, const QuadtreeMesh& mesh, double nu);

// Residual history as CSV lines: iteration,residual,drag.
std::string residual_csv(const PrimalSolution& sol);

}  // namespace meshdensity::flow
