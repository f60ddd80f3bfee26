#pragma once

#include <Eigen/Core>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "meshdensity/adjoint.hpp"
#include "meshdensity/qmesh.hpp"

namespace meshdensity::amr {

using geometry::Outline;
using geometry::Point;
using qmesh::Channel;
using qmesh::Field;
using qmesh::MeshSetup;
using qmesh::QuadtreeMesh;

struct AmrConfig {
  double fraction = 0.1;
  int max_iters = 8;
  // Stop once eta_sum falls below this; 0 disables the check.
  double eta_target = 0.0;
};

void validate(const AmrConfig& cfg);

struct RefinementRecord {
  int iteration = 0;
  std::size_t cell_count = 0;
  double drag = 0.0;
  double eta_sum = 0.0;
  double eta_signed = 0.0;
  std::string mesh_snapshot_ref;
};

struct RefinementResult {
  std::vector<RefinementRecord> records;
  QuadtreeMesh mesh;                   // last mesh that was solved
  adjoint::Evaluation evaluation;      // solution on `mesh`
  std::optional<std::string> failure;  // set when a solve aborted the loop
};

// Called after every solved iteration; lets callers persist partial progress.
using RecordSink = std::function<void(const RefinementRecord&, const QuadtreeMesh&)>;

// Fluid cells below max_level ranked by eta (ties by index), first
// ceil(fraction * N_fluid) of them.
std::set<std::size_t> select_cells(const QuadtreeMesh& mesh, const Eigen::VectorXd& eta, double fraction);

// Solve, estimate, refine; repeated until max_iters refinements or eta_target.
// A SolverError ends the loop early with the records gathered so far.
RefinementResult refinement_loop(const MeshSetup& setup, const Outline& outline,
                                 const flow::FlowConfig& flow_cfg, const AmrConfig& amr_cfg,
                                 const RecordSink& sink = {});

// Per-pixel level encoding of the mesh over the whole domain; Solid pixels 0.
Field target_density(const QuadtreeMesh& mesh, int resolution);

// Level midpoints between consecutive levels, finest first, as density values
// in increasing order. count is clamped to the number of level boundaries.
std::vector<double> default_thresholds(int base_level, int max_level, int count = 4);

// Every boundary between base_level and max_level.
std::vector<double> all_thresholds(int base_level, int max_level);

using Contour = std::vector<Point>;  // closed; last point connects to the first
using ContourSet = std::vector<Contour>;

// Marching squares over the pixel-center grid. Inside = {density <= t}; the
// field is padded with an outside border so every loop closes. Thresholds
// outside [min, max] of the data give empty sets.
std::vector<ContourSet> extract_isosurfaces(const Field& density, const std::vector<double>& thresholds,
                                            const std::string& channel = "density");

// Required level per pixel: the deepest zone {density <= t_k} the pixel
// belongs to, each zone decoded to the smallest level whose encoding is <= t_k.
Eigen::MatrixXi required_levels(const Channel& density, const std::vector<double>& thresholds,
                                int base_level, int max_level);

// The setup's initial mesh refined until every cell is at least as deep as the
// required level of every fluid pixel it overlaps; 2:1 balance restored after
// each pass. Pixels whose
// centers fall inside the obstacle are ignored. Throws MeshError when a zone
// asks for more than max_level.
QuadtreeMesh synth_mesh(const Field& density, const MeshSetup& setup, const Outline* outline,
                        const std::vector<double>& thresholds);

// Level of the leaf containing p.
int level_at(const QuadtreeMesh& mesh, const Point& p);

}  // namespace meshdensity::amr
