#include "meshdensity/adjoint.hpp"

#include <Eigen/SparseLU>
#include <cmath>

#include "meshdensity/errors.hpp"

namespace meshdensity::adjoint {

namespace {

using SparseLU = Eigen::SparseLU<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>>;

Eigen::VectorXd solve_refined(const Eigen::SparseMatrix<double>& M, const Eigen::VectorXd& rhs,
                              const char* what) {
  const double rnorm = rhs.norm();
  if (rnorm == 0.0) return Eigen::VectorXd::Zero(rhs.size());
  SparseLU lu;
  lu.compute(M);
  if (lu.info() != Eigen::Success) throw SolverError(std::string(what) + ": factorization failed");
  Eigen::VectorXd x = lu.solve(rhs);
  // A few rounds of iterative refinement against the 1e-10 relative target.
  for (int k = 0; k < 4; ++k) {
    const Eigen::VectorXd r = rhs - M * x;
    if (r.norm() <= 1e-10 * rnorm) return x;
    x += lu.solve(r);
  }
  if ((rhs - M * x).norm() > 1e-10 * rnorm)
    throw SolverError(std::string(what) + ": solve stagnated above 1e-10 relative residual");
  return x;
}

}  // namespace

LinearizedSystem assemble_linearized(const QuadtreeMesh& mesh, const Eigen::VectorXd& face_flux,
                                     double nu, double u_inf) {
  LinearizedSystem sys{FluidIndex(mesh), {}, face_flux, nu, u_inf};
  sys.transport = flow::assemble_transport(mesh, sys.index, face_flux, nu, u_inf);
  return sys;
}

LinearizedSystem assemble_linearized(const QuadtreeMesh& mesh, const flow::PrimalSolution& primal,
                                     const flow::FlowConfig& cfg) {
  LinearizedSystem sys = assemble_linearized(mesh, primal.face_flux, cfg.nu, cfg.u_inf);
  const Eigen::VectorXd w = sys.index.gather(primal.w);
  const double defect = (sys.A() * w - sys.b()).norm() / sys.b().norm();
  if (!(defect <= 10.0 * cfg.stopping.min_residual))
    throw SolverError("assembled operator does not reproduce the converged primal (relative defect " +
                      std::to_string(defect) + ")");
  return sys;
}

Eigen::VectorXd solve_transposed(const Eigen::SparseMatrix<double>& A, const Eigen::VectorXd& rhs) {
  const Eigen::SparseMatrix<double> At = A.transpose();
  return solve_refined(At, rhs, "adjoint solve");
}

Eigen::VectorXd solve_direct(const Eigen::SparseMatrix<double>& A, const Eigen::VectorXd& rhs) {
  return solve_refined(A, rhs, "direct solve");
}

Eigen::VectorXd solve_adjoint(const LinearizedSystem& sys) { return solve_transposed(sys.A(), sys.g()); }

Sensitivity sensitivity(const LinearizedSystem& sys, const Eigen::VectorXd& w,
                        const Eigen::VectorXd& phi, Parameter parameter) {
  const auto& t = sys.transport;
  Sensitivity s;
  if (parameter == Parameter::Nu) {
    // g is proportional to nu.
    s.explicit_term = t.g.dot(w) / sys.nu;
    s.operator_term = -phi.dot(t.A_diff * w) / sys.nu;
    s.rhs_term = phi.dot(t.b_diff) / sys.nu;
  } else {
    s.explicit_term = 0.0;
    s.operator_term = -phi.dot(t.A_conv * w) / sys.u_inf;
    s.rhs_term = phi.dot(2.0 * t.b_conv + t.b_diff) / sys.u_inf;
  }
  s.total = s.explicit_term + s.operator_term + s.rhs_term;
  return s;
}

Indicators dwr_indicators(const QuadtreeMesh& mesh, const LinearizedSystem& sys,
                          const Eigen::VectorXd& w, const Eigen::VectorXd& phi) {
  const Eigen::VectorXd r = -flow::transport_defect(mesh, sys.index, sys.face_flux, sys.nu, sys.u_inf, w,
                                                    flow::Convection::Central);
  const Eigen::VectorXd weighted = phi.cwiseProduct(r);
  Indicators ind;
  ind.eta = sys.index.scatter(weighted.cwiseAbs());
  ind.eta_signed_cells = sys.index.scatter(weighted);
  ind.eta_sum = weighted.cwiseAbs().sum();
  ind.eta_signed = weighted.sum();
  return ind;
}

Evaluation evaluate(const QuadtreeMesh& mesh, const flow::FlowConfig& cfg) {
  Evaluation ev;
  ev.primal = flow::grid_sequenced_solve(mesh, cfg);
  const auto sys = assemble_linearized(mesh, ev.primal, cfg);
  ev.phi = solve_adjoint(sys);
  const Eigen::VectorXd w = sys.index.gather(ev.primal.w);
  ev.indicators = dwr_indicators(mesh, sys, w, ev.phi);
  ev.drag = flow::compute_drag(ev.primal.w, mesh, cfg.nu);
  return ev;
}

}  // namespace meshdensity::adjoint
