#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "meshdensity/flow.hpp"

namespace meshdensity::adjoint {

using flow::FluidIndex;
using flow::QuadtreeMesh;

// Residual R(w; nu, u_inf) = A w - b of the converged transport problem and
// the objective J = g^T w, with everything needed to differentiate both.
struct LinearizedSystem {
  FluidIndex index;
  flow::TransportSystem transport;
  Eigen::VectorXd face_flux;
  double nu = 0.0;
  double u_inf = 0.0;

  const Eigen::SparseMatrix<double>& A() const { return transport.A; }
  const Eigen::VectorXd& b() const { return transport.b; }
  const Eigen::VectorXd& g() const { return transport.g; }
};

// Assembles the upwind operator on the mesh and checks it against the
// converged primal: ||A w - b|| / ||b|| must not exceed 10 * min_residual.
LinearizedSystem assemble_linearized(const QuadtreeMesh& mesh, const flow::PrimalSolution& primal,
                                     const flow::FlowConfig& cfg);

// Same assembly without the defect check.
LinearizedSystem assemble_linearized(const QuadtreeMesh& mesh, const Eigen::VectorXd& face_flux,
                                     double nu, double u_inf);

// Solves A^T x = rhs to ||A^T x - rhs|| <= 1e-10 ||rhs||.
Eigen::VectorXd solve_transposed(const Eigen::SparseMatrix<double>& A, const Eigen::VectorXd& rhs);

// Direct solve of A x = rhs (used for reference solutions).
Eigen::VectorXd solve_direct(const Eigen::SparseMatrix<double>& A, const Eigen::VectorXd& rhs);

// Adjoint weights: A^T phi = dJ/dw.
Eigen::VectorXd solve_adjoint(const LinearizedSystem& sys);

enum class Parameter { Nu, UInf };

struct Sensitivity {
  double total = 0.0;          // dJ/dF
  double explicit_term = 0.0;  // dI/dF at fixed w
  double operator_term = 0.0;  // -phi^T (dA/dF) w
  double rhs_term = 0.0;       // +phi^T (db/dF)
};

// dJ/dF = dI/dF - phi^T dR/dF with R = A w - b. Both A and b are affine in nu;
// the face fluxes scale with u_inf, so A_conv is linear and b_conv quadratic in it.
Sensitivity sensitivity(const LinearizedSystem& sys, const Eigen::VectorXd& w_rows,
                        const Eigen::VectorXd& phi, Parameter parameter);

struct Indicators {
  Eigen::VectorXd eta;               // per mesh cell, Solid cells 0
  Eigen::VectorXd eta_signed_cells;  // phi_i r_i per mesh cell
  double eta_sum = 0.0;
  double eta_signed = 0.0;
};

// eta_i = |phi_i r_i| with r the defect of w under central convection.
Indicators dwr_indicators(const QuadtreeMesh& mesh, const LinearizedSystem& sys,
                          const Eigen::VectorXd& w_rows, const Eigen::VectorXd& phi);

// Complete goal-oriented evaluation of one mesh: primal, adjoint, indicators.
struct Evaluation {
  flow::PrimalSolution primal;
  Eigen::VectorXd phi;  // per row
  Indicators indicators;
  double drag = 0.0;
};

Evaluation evaluate(const QuadtreeMesh& mesh, const flow::FlowConfig& cfg);

}  // namespace meshdensity::adjoint
