#pragma once

// Reference computations shared by the unit tests and the acceptance suite.

#include <Eigen/Core>
#include <cmath>
#include <vector>

#include "meshdensity/adjoint.hpp"
#include "meshdensity/amr.hpp"
#include "meshdensity/cnn.hpp"
#include "support.hpp"

namespace testing {

// Drag with the transport problem solved exactly (direct LU), after a fresh
// potential solve at this u_inf.
inline double exact_drag(const qmesh::QuadtreeMesh& mesh, const geometry::Outline& outline, double nu, double u_inf) {
  const auto pot = flow::solve_potential(mesh, &outline, u_inf);
  const auto sys = adjoint::assemble_linearized(mesh, pot.face_flux, nu, u_inf);
  return sys.g().dot(adjoint::solve_direct(sys.A(), sys.b()));
}

struct SensitivityCheck {
  double adjoint_nu = 0.0, fd_nu = 0.0;
  double adjoint_u = 0.0, fd_u = 0.0;
  double duality_gw = 0.0, duality_phib = 0.0;
};

// Adjoint sensitivities against central differences with step 1e-4 * value.
inline SensitivityCheck check_sensitivities(const qmesh::QuadtreeMesh& mesh, const geometry::Outline& outline,
                                            double nu, double u_inf) {
  SensitivityCheck out;
  const auto pot = flow::solve_potential(mesh, &outline, u_inf);
  const auto sys = adjoint::assemble_linearized(mesh, pot.face_flux, nu, u_inf);
  const Eigen::VectorXd w = adjoint::solve_direct(sys.A(), sys.b());
  const Eigen::VectorXd phi = adjoint::solve_adjoint(sys);
  out.duality_gw = sys.g().dot(w);
  out.duality_phib = phi.dot(sys.b());
  out.adjoint_nu = adjoint::sensitivity(sys, w, phi, adjoint::Parameter::Nu).total;
  out.adjoint_u = adjoint::sensitivity(sys, w, phi, adjoint::Parameter::UInf).total;
  const double dn = 1e-4 * nu, du = 1e-4 * u_inf;
  out.fd_nu = (exact_drag(mesh, outline, nu + dn, u_inf) - exact_drag(mesh, outline, nu - dn, u_inf)) / (2.0 * dn);
  out.fd_u = (exact_drag(mesh, outline, nu, u_inf + du) - exact_drag(mesh, outline, nu, u_inf - du)) / (2.0 * du);
  return out;
}

// |J_fine - J| / eta_sum with J_fine on the uniformly refined mesh.
struct Effectivity {
  double j_coarse = 0.0, j_fine = 0.0, eta_sum = 0.0;
  double ratio() const { return std::abs(j_fine - j_coarse) / eta_sum; }
};

inline Effectivity dwr_effectivity(const qmesh::QuadtreeMesh& mesh, const flow::FlowConfig& cfg) {
  const auto coarse = adjoint::evaluate(mesh, cfg);
  const auto fine = adjoint::evaluate(qmesh::refine_uniformly(mesh), cfg);
  return {coarse.drag, fine.drag, coarse.indicators.eta_sum};
}

// Largest |analytic - numeric| / max(|analytic|, |numeric|) over the whole
// vector, measured norm-wise.
inline double normwise_rel(const Eigen::ArrayXd& analytic, const Eigen::ArrayXd& numeric) {
  const double scale = std::max({analytic.matrix().norm(), numeric.matrix().norm(), 1e-300});
  return (analytic - numeric).matrix().norm() / scale;
}

}  // namespace testing
