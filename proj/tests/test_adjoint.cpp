#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "meshdensity/adjoint.hpp"
#include "meshdensity/errors.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace meshdensity;
using namespace meshdensity::adjoint;
using testing::Gen;

namespace {

struct Fixture {
  geometry::Outline outline;
  qmesh::QuadtreeMesh mesh;
  flow::FlowConfig cfg;
  flow::PotentialSolution pot;
};

Fixture make_fixture(std::uint64_t seed, int level = 4) {
  geometry::GeometryConfig g;
  g.seed = seed;
  auto o = geometry::generate_obstacle(g);
  auto m = testing::uniform_mesh(level, o);
  flow::FlowConfig cfg;
  auto pot = flow::solve_potential(m, &o, cfg.u_inf);
  return {o, m, cfg, pot};
}

Eigen::VectorXd random_vector(Gen& g, Eigen::Index n) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = g.uniform(-1.0, 1.0);
  return v;
}

}  // namespace

TEST_CASE("pure diffusion gives a symmetric operator") {
  const auto f = make_fixture(1);
  const Eigen::VectorXd no_flux = Eigen::VectorXd::Zero(f.pot.face_flux.size());
  const auto sys = assemble_linearized(f.mesh, no_flux, f.cfg.nu, f.cfg.u_inf);
  const Eigen::SparseMatrix<double> At = sys.A().transpose();
  CHECK((sys.A() - At).norm() == 0.0);
}

TEST_CASE("assembled operator matches the matrix-free defect") {
  Gen g(2);
  for (const bool adaptive : {false, true}) {
    const auto f = make_fixture(2);
    const auto mesh = adaptive ? qmesh::build_mesh(qmesh::MeshSetup{}, f.outline) : f.mesh;
    const auto pot = flow::solve_potential(mesh, &f.outline, f.cfg.u_inf);
    const auto sys = assemble_linearized(mesh, pot.face_flux, f.cfg.nu, f.cfg.u_inf);
    for (int k = 0; k < 10; ++k) {
      const Eigen::VectorXd w = random_vector(g, static_cast<Eigen::Index>(sys.index.rows()));
      const Eigen::VectorXd assembled = sys.A() * w - sys.b();
      const Eigen::VectorXd free = flow::transport_defect(mesh, sys.index, pot.face_flux, f.cfg.nu, f.cfg.u_inf, w);
      REQUIRE((assembled - free).norm() <= 1e-12 * assembled.norm());
    }
  }
}

TEST_CASE("convection rows of interior cells sum to zero") {
  const auto f = make_fixture(3, 5);
  const auto sys = assemble_linearized(f.mesh, f.pot.face_flux, f.cfg.nu, f.cfg.u_inf);
  const Eigen::VectorXd sums = sys.transport.A_conv * Eigen::VectorXd::Ones(static_cast<Eigen::Index>(sys.index.rows()));
  int checked = 0;
  for (std::size_t r = 0; r < sys.index.rows(); ++r) {
    const auto cell = sys.index.cell_of_row[r];
    bool interior = true;
    for (auto side : {qmesh::Side::West, qmesh::Side::East, qmesh::Side::South, qmesh::Side::North}) {
      const auto nb = f.mesh.neighbors(cell, side);
      if (nb.empty()) interior = false;
      for (auto n : nb)
        if (f.mesh.cell(n).kind == qmesh::CellKind::Solid) interior = false;
    }
    if (!interior) continue;
    REQUIRE(std::abs(sums(static_cast<Eigen::Index>(r))) < 1e-10);
    ++checked;
  }
  CHECK(checked > 500);
}

TEST_CASE("transpose identity on random vector pairs") {
  Gen g(4);
  const auto f = make_fixture(4);
  const auto sys = assemble_linearized(f.mesh, f.pot.face_flux, f.cfg.nu, f.cfg.u_inf);
  const Eigen::SparseMatrix<double> At = sys.A().transpose();
  for (int k = 0; k < 20; ++k) {
    const Eigen::VectorXd x = random_vector(g, sys.A().cols()), y = random_vector(g, sys.A().rows());
    const double lhs = x.dot(At * y), rhs = (sys.A() * x).dot(y);
    REQUIRE(std::abs(lhs - rhs) <= 1e-12 * std::max(std::abs(lhs), 1e-300) + 1e-14);
  }
}

TEST_CASE("symmetric operator: adjoint equals the primal-type solve") {
  const auto f = make_fixture(5);
  const Eigen::VectorXd no_flux = Eigen::VectorXd::Zero(f.pot.face_flux.size());
  const auto sys = assemble_linearized(f.mesh, no_flux, f.cfg.nu, f.cfg.u_inf);
  const Eigen::VectorXd phi = solve_adjoint(sys);
  const Eigen::VectorXd x = solve_direct(sys.A(), sys.g());
  CHECK((phi - x).norm() <= 1e-9 * x.norm());
}

TEST_CASE("transposed solve against a dense oracle") {
  Gen g(6);
  for (int k = 0; k < 10; ++k) {
    Eigen::MatrixXd dense(5, 5);
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) dense(i, j) = g.uniform(-1.0, 1.0);
    dense.diagonal().array() += 5.0;  // well conditioned
    const Eigen::VectorXd rhs = random_vector(g, 5);
    const Eigen::SparseMatrix<double> A = dense.sparseView();
    const Eigen::VectorXd x = solve_transposed(A, rhs);
    const Eigen::VectorXd oracle = dense.transpose().fullPivLu().solve(rhs);
    REQUIRE((x - oracle).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("duality and sensitivities against finite differences") {
  Gen g(7);
  for (int k = 0; k < 2; ++k) {
    const auto f = make_fixture(g.engine()());
    const auto c = testing::check_sensitivities(f.mesh, f.outline, f.cfg.nu, f.cfg.u_inf);
    CHECK(testing::rel_err(c.duality_gw, c.duality_phib) < 1e-8);
    CHECK(testing::rel_err(c.adjoint_nu, c.fd_nu) < 1e-5);
    CHECK(testing::rel_err(c.adjoint_u, c.fd_u) < 1e-5);
  }
}

TEST_CASE("sensitivity terms add up to the total") {
  const auto f = make_fixture(8);
  const auto sys = assemble_linearized(f.mesh, f.pot.face_flux, f.cfg.nu, f.cfg.u_inf);
  const Eigen::VectorXd w = solve_direct(sys.A(), sys.b());
  const Eigen::VectorXd phi = solve_adjoint(sys);
  for (auto p : {Parameter::Nu, Parameter::UInf}) {
    const auto s = sensitivity(sys, w, phi, p);
    CHECK(s.total == doctest::Approx(s.explicit_term + s.operator_term + s.rhs_term).epsilon(1e-14));
  }
}

TEST_CASE("zeroed boundary data removes the u_inf sensitivity") {
  const auto f = make_fixture(9);
  auto sys = assemble_linearized(f.mesh, f.pot.face_flux, f.cfg.nu, f.cfg.u_inf);
  sys.transport.b.setZero();
  sys.transport.b_conv.setZero();
  sys.transport.b_diff.setZero();
  const Eigen::VectorXd w = solve_direct(sys.A(), sys.b());
  const Eigen::VectorXd phi = solve_adjoint(sys);
  CHECK(sensitivity(sys, w, phi, Parameter::UInf).total == 0.0);
}

TEST_CASE("indicators vanish for the solution of the enriched operator") {
  const auto f = make_fixture(10);
  const auto sys = assemble_linearized(f.mesh, f.pot.face_flux, f.cfg.nu, f.cfg.u_inf);
  const auto central = flow::assemble_transport(f.mesh, sys.index, f.pot.face_flux, f.cfg.nu, f.cfg.u_inf,
                                                flow::Convection::Central);
  const Eigen::VectorXd w = solve_direct(central.A, central.b);
  const Eigen::VectorXd phi = solve_adjoint(sys);
  const auto ind = dwr_indicators(f.mesh, sys, w, phi);
  CHECK(ind.eta.maxCoeff() < 1e-12);
}

TEST_CASE("indicators are nonnegative and vanish on solid cells") {
  Gen g(11);
  for (int k = 0; k < 3; ++k) {
    const auto o = geometry::generate_obstacle(g.geometry_config());
    const auto m = qmesh::build_mesh(qmesh::MeshSetup{}, o);
    const auto ev = evaluate(m, flow::FlowConfig{});
    REQUIRE(ev.indicators.eta.minCoeff() >= 0.0);
    CHECK(ev.indicators.eta_sum == doctest::Approx(ev.indicators.eta.sum()));
    CHECK(ev.indicators.eta_signed == doctest::Approx(ev.indicators.eta_signed_cells.sum()));
    CHECK(std::abs(ev.indicators.eta_signed) <= ev.indicators.eta_sum);
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m.cell(i).kind == qmesh::CellKind::Solid) REQUIRE(ev.indicators.eta(static_cast<Eigen::Index>(i)) == 0.0);
  }
}

TEST_CASE("effectivity bracket on small geometries") {
  Gen g(12);
  for (int k = 0; k < 5; ++k) {
    const auto o = geometry::generate_obstacle(g.geometry_config());
    const auto e = testing::dwr_effectivity(testing::uniform_mesh(4, o), flow::FlowConfig{});
    CAPTURE(k);
    CHECK(e.ratio() >= 0.1);
    CHECK(e.ratio() <= 3.0);
  }
}

TEST_CASE("largest indicators sit near the obstacle or downstream of it") {
  Gen g(13);
  for (int k = 0; k < 5; ++k) {
    const auto o = geometry::generate_obstacle(g.geometry_config());
    const auto m = qmesh::build_mesh(qmesh::MeshSetup{}, o);
    const auto ev = evaluate(m, flow::FlowConfig{});
    std::vector<std::size_t> order(m.size());
    std::iota(order.begin(), order.end(), 0);
    const auto& eta = ev.indicators.eta;
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return eta(Eigen::Index(a)) > eta(Eigen::Index(b)); });
    const std::size_t top = m.fluid_count() / 10;
    const double band = 2.0 * 3.0 / 64.0 * m.domain_length();  // two prism bands at 64 px
    for (std::size_t t = 0; t < top; ++t) {
      const auto& c = m.cell(order[t]).center;
      const bool near = geometry::signed_distance(o, c) <= band;
      const bool downstream = c.x() >= o.bounding_box.xmin;
      REQUIRE((near || downstream));
    }
  }
}

TEST_CASE("linearization rejects an unconverged primal") {
  const auto f = make_fixture(14);
  flow::FlowConfig cfg;
  cfg.stopping.max_iterations = 1;
  const auto primal = flow::solve_transport(f.mesh, f.pot, cfg);
  CHECK_THROWS_AS(assemble_linearized(f.mesh, primal, flow::FlowConfig{}), SolverError);
}
