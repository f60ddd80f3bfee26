#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <json.hpp>
#include <string>
#include <vector>

#include "meshdensity/adjoint.hpp"
#include "meshdensity/amr.hpp"
#include "meshdensity/cnn.hpp"
#include "meshdensity/dataset.hpp"

namespace meshdensity::pipeline {

namespace fs = std::filesystem;
using Json = nlohmann::json;

inline constexpr const char* kPipelineVersion = "1";

struct GenConfig {
  geometry::GeometryConfig geometry;  // seed and base shape are set per run
  qmesh::MeshSetup mesh;
  flow::FlowConfig flow;
  amr::AmrConfig amr;
  int resolution = 64;
  int min_iters = 5;
  int band_px_at_64 = 3;
  int dillute_px_at_64 = 3;
};

Json to_json(const GenConfig& c);
GenConfig gen_config_from_json(const Json& j);

// Geometry of run k in a batch seeded with `seed`; also used for held-out
// geometries (the base shape follows the low bit of the geometry seed).
geometry::GeometryConfig geometry_for_seed(const GenConfig& cfg, std::uint64_t geometry_seed);
std::uint64_t run_geometry_seed(std::uint64_t batch_seed, std::size_t k);
std::string run_id(std::uint64_t batch_seed, std::size_t k);

// Network inputs and masks of a geometry: geo, sdf, mask_prism, mask_dillute.
qmesh::Field input_field(const GenConfig& cfg, const geometry::Outline& outline);

// Inputs plus the density of the final mesh, as a float32 sample.
dataset::Sample make_sample(const GenConfig& cfg, const std::string& id, std::uint64_t geometry_seed,
                            const geometry::Outline& outline, const amr::RefinementResult& run);

enum class RunStatus { Ok, Filtered, Failed };
std::string to_string(RunStatus s);

struct RunOutcome {
  std::string id;
  RunStatus status = RunStatus::Failed;
  int iterations = 0;
  bool skipped = false;  // manifest already present
  std::string error;
};

// One end-to-end generation. Writes samples/<id>.mshd (status Ok only) and
// manifests/<id>.json under out. Existing manifests are left alone.
RunOutcome generate_run(const GenConfig& cfg, std::uint64_t batch_seed, std::size_t k, const fs::path& out);

struct GenSummary {
  dataset::Catalog catalog;
  std::vector<RunOutcome> runs;  // in run order
};

// Runs n generations on up to `workers` threads, then rebuilds the catalog
// index from the files on disk. Throws when every run failed.
GenSummary gen_data(const GenConfig& cfg, std::size_t n, std::uint64_t seed, const fs::path& out, int workers,
                    std::ostream* log = nullptr);

// 8-bit binary PGM, values mapped linearly from [lo, hi]; the bottom row of
// the channel is written last so the image is upright.
void write_pgm(const fs::path& path, const qmesh::Channel& values, double lo, double hi);

// ---------------------------------------------------------------------------
// Iterative vs network mesh comparison

struct MeshReport {
  double drag = 0.0;
  double eta_signed_viewport = 0.0;
  double eta_signed_domain = 0.0;
  double max_abs_eta_viewport = 0.0;
  std::size_t cell_count = 0;
};

// The viewport is the rasterized window, i.e. [0, L]^2 at the origin.
MeshReport report(const qmesh::QuadtreeMesh& mesh, const adjoint::Evaluation& ev, double viewport_size);

struct EvalResult {
  MeshReport iterative;
  MeshReport network;
  double accuracy = 0.0;  // prediction vs target density, masked
  std::vector<double> thresholds;
  Json to_json() const;
  std::string table() const;
};

// Refinement loop on the geometry, density prediction, synthesis from the
// predicted density and evaluation of both meshes. PGM dumps of target,
// prediction and |error| go to out_dir when it is not empty.
EvalResult evaluate_geometry(const GenConfig& cfg, std::uint64_t geometry_seed, cnn::UNet<float>& net,
                             dataset::InputChannel input, dataset::MaskChannel mask,
                             const std::vector<double>& thresholds, const fs::path& out_dir);

}  // namespace meshdensity::pipeline
