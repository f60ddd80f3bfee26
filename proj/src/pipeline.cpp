#include "meshdensity/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "meshdensity/errors.hpp"
#include "meshdensity/rng.hpp"
#include "meshdensity/serialize.hpp"

namespace meshdensity::pipeline {

namespace {

template <class T>
void read(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_json(const fs::path& path, const Json& j) {
  const std::string text = j.dump(1);
  dataset::write_bytes_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

dataset::FloatChannel to_float(const qmesh::Channel& c) { return c.cast<float>(); }

}  // namespace

Json to_json(const GenConfig& c) {
  return {{"geometry", io::to_json(c.geometry)},
          {"mesh", io::to_json(c.mesh)},
          {"flow", io::to_json(c.flow)},
          {"amr", io::to_json(c.amr)},
          {"resolution", c.resolution},
          {"min_iters", c.min_iters},
          {"band_px_at_64", c.band_px_at_64},
          {"dillute_px_at_64", c.dillute_px_at_64}};
}

GenConfig gen_config_from_json(const Json& j) {
  GenConfig c;
  if (j.contains("geometry")) c.geometry = io::geometry_config_from_json(j.at("geometry"));
  if (j.contains("mesh")) c.mesh = io::mesh_setup_from_json(j.at("mesh"));
  if (j.contains("flow")) c.flow = io::flow_config_from_json(j.at("flow"));
  if (j.contains("amr")) c.amr = io::amr_config_from_json(j.at("amr"));
  read(j, "resolution", c.resolution);
  read(j, "min_iters", c.min_iters);
  read(j, "band_px_at_64", c.band_px_at_64);
  read(j, "dillute_px_at_64", c.dillute_px_at_64);
  if (c.resolution < 16) throw Error("resolution must be at least 16");
  return c;
}

geometry::GeometryConfig geometry_for_seed(const GenConfig& cfg, std::uint64_t geometry_seed) {
  geometry::GeometryConfig g = cfg.geometry;
  g.seed = geometry_seed;
  g.base_shape = (geometry_seed & 1u) ? geometry::BaseShape::Rectangle : geometry::BaseShape::Triangle;
  return g;
}

std::uint64_t run_geometry_seed(std::uint64_t batch_seed, std::size_t k) { return derive_seed(batch_seed, k); }

std::string run_id(std::uint64_t batch_seed, std::size_t k) {
  std::ostringstream os;
  os << "s" << batch_seed << "-" << std::setw(5) << std::setfill('0') << k;
  return os.str();
}

qmesh::Field input_field(const GenConfig& cfg, const geometry::Outline& outline) {
  qmesh::MeshSetup base = qmesh::MeshSetup::uniform(cfg.mesh.base_level, cfg.mesh.max_level);
  base.domain_length = cfg.mesh.domain_length;
  const auto mesh = qmesh::build_mesh(base, outline);
  qmesh::RasterOptions opts;
  opts.band_px_at_64 = cfg.band_px_at_64;
  opts.dillute_px_at_64 = cfg.dillute_px_at_64;
  return qmesh::rasterize(mesh, &outline, cfg.resolution, {"geo", "sdf", "mask_prism", "mask_dillute"}, opts);
}

dataset::Sample make_sample(const GenConfig& cfg, const std::string& id, std::uint64_t geometry_seed,
                            const geometry::Outline& outline, const amr::RefinementResult& run) {
  const qmesh::Field in = input_field(cfg, outline);
  const qmesh::Field density = amr::target_density(run.mesh, cfg.resolution);
  dataset::Sample s;
  s.width = s.height = cfg.resolution;
  for (const char* name : {"geo", "sdf", "mask_prism", "mask_dillute"}) {
    s.names.emplace_back(name);
    s.channels.push_back(to_float(in.channel(name)));
  }
  s.names.emplace_back("density");
  s.channels.push_back(to_float(density.channel("density")));
  const int iterations = run.records.empty() ? 0 : static_cast<int>(run.records.size()) - 1;
  s.metadata = {{"id", id},
                {"seed", geometry_seed},
                {"iterations", iterations},
                {"resolution", cfg.resolution},
                {"base_level", cfg.mesh.base_level},
                {"max_level", cfg.mesh.max_level},
                {"drag", run.records.empty() ? 0.0 : run.records.back().drag},
                {"geometry", io::to_json(geometry_for_seed(cfg, geometry_seed))},
                {"mesh_setup", io::to_json(cfg.mesh)},
                {"flow", io::to_json(cfg.flow)},
                {"amr", io::to_json(cfg.amr)},
                {"pipeline_version", kPipelineVersion}};
  return s;
}

std::string to_string(RunStatus s) {
  switch (s) {
    case RunStatus::Ok: return "ok";
    case RunStatus::Filtered: return "filtered";
    case RunStatus::Failed: return "failed";
  }
  return "?";
}

RunOutcome generate_run(const GenConfig& cfg, std::uint64_t batch_seed, std::size_t k, const fs::path& out) {
  RunOutcome o;
  o.id = run_id(batch_seed, k);
  const fs::path manifest_path = out / "manifests" / (o.id + ".json");
  const std::string sample_rel = "samples/" + o.id + ".mshd";

  if (fs::exists(manifest_path)) {
    try {
      const auto bytes = dataset::read_bytes(manifest_path);
      const Json m = Json::parse(bytes.begin(), bytes.end());
      const std::string status = m.at("status").get<std::string>();
      o.status = status == "ok" ? RunStatus::Ok : status == "filtered" ? RunStatus::Filtered : RunStatus::Failed;
      o.iterations = m.value("refinement_iterations", 0);
      o.error = m.value("error", std::string());
      if (o.status != RunStatus::Ok || fs::exists(out / sample_rel)) {
        o.skipped = true;
        return o;
      }
    } catch (const std::exception&) {
      // Unreadable manifest: run again.
    }
  }

  const std::uint64_t gseed = run_geometry_seed(batch_seed, k);
  const auto gcfg = geometry_for_seed(cfg, gseed);
  Json man = {{"run_id", o.id},
              {"batch_seed", batch_seed},
              {"index", k},
              {"seed", gseed},
              {"geometry", io::to_json(gcfg)},
              {"mesh_setup", io::to_json(cfg.mesh)},
              {"flow", io::to_json(cfg.flow)},
              {"amr", io::to_json(cfg.amr)},
              {"resolution", cfg.resolution},
              {"min_iters", cfg.min_iters},
              {"pipeline_version", kPipelineVersion},
              {"artifacts", Json::object()},
              {"records", Json::array()}};
  Json times = {{"started", utc_now()}};
  try {
    const auto outline = geometry::generate_obstacle(gcfg);
    const auto run = amr::refinement_loop(cfg.mesh, outline, cfg.flow, cfg.amr);
    for (const auto& r : run.records) man["records"].push_back(io::to_json(r));
    o.iterations = run.records.empty() ? 0 : static_cast<int>(run.records.size()) - 1;
    if (run.failure) {
      o.status = RunStatus::Failed;
      o.error = *run.failure;
    } else if (o.iterations < cfg.min_iters) {
      o.status = RunStatus::Filtered;
    } else {
      dataset::write_sample(out / sample_rel, make_sample(cfg, o.id, gseed, outline, run));
      man["artifacts"]["sample"] = sample_rel;
      man["drag"] = run.records.back().drag;
      o.status = RunStatus::Ok;
    }
  } catch (const std::exception& e) {
    o.status = RunStatus::Failed;
    o.error = e.what();
  }
  times["finished"] = utc_now();
  man["timestamps"] = times;
  man["status"] = to_string(o.status);
  man["refinement_iterations"] = o.iterations;
  if (!o.error.empty()) man["error"] = o.error;
  man["artifacts"]["manifest"] = "manifests/" + o.id + ".json";
  write_json(manifest_path, man);
  return o;
}

GenSummary gen_data(const GenConfig& cfg, std::size_t n, std::uint64_t seed, const fs::path& out, int workers,
                    std::ostream* log) {
  fs::create_directories(out / "samples");
  fs::create_directories(out / "manifests");
  GenSummary summary;
  summary.runs.resize(n);
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  const auto work = [&] {
    for (std::size_t k = next++; k < n; k = next++) {
      summary.runs[k] = generate_run(cfg, seed, k, out);
      if (log) {
        const auto& r = summary.runs[k];
        std::lock_guard lock(log_mutex);
        *log << r.id << ' ' << to_string(r.status) << " iterations=" << r.iterations << (r.skipped ? " (existing)" : "")
             << (r.error.empty() ? "" : " error: " + r.error) << '\n';
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), 1, std::max<std::size_t>(n, 1));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  summary.catalog = dataset::reindex(out, cfg.min_iters);
  summary.catalog.save();
  if (n > 0 && std::all_of(summary.runs.begin(), summary.runs.end(),
                           [](const RunOutcome& r) { return r.status == RunStatus::Failed; }))
    throw Error("all " + std::to_string(n) + " generation runs failed");
  return summary;
}

void write_pgm(const fs::path& path, const qmesh::Channel& values, double lo, double hi) {
  std::ostringstream os;
  os << "P5\n" << values.cols() << ' ' << values.rows() << "\n255\n";
  std::string text = os.str();
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  const double span = hi > lo ? hi - lo : 1.0;
  for (Eigen::Index r = values.rows() - 1; r >= 0; --r)
    for (Eigen::Index c = 0; c < values.cols(); ++c) {
      const double t = std::clamp((values(r, c) - lo) / span, 0.0, 1.0);
      bytes.push_back(static_cast<std::uint8_t>(std::lround(255.0 * t)));
    }
  dataset::write_bytes_atomic(path, bytes);
}

// ---------------------------------------------------------------------------

MeshReport report(const qmesh::QuadtreeMesh& mesh, const adjoint::Evaluation& ev, double viewport_size) {
  MeshReport r;
  r.drag = ev.drag;
  r.cell_count = mesh.size();
  const auto& s = ev.indicators.eta_signed_cells;
  for (std::size_t i = 0; i < mesh.size(); ++i) {
    const double v = s(static_cast<Eigen::Index>(i));
    r.eta_signed_domain += v;
    const auto& c = mesh.cell(i).center;
    if (c.x() >= 0.0 && c.x() <= viewport_size && c.y() >= 0.0 && c.y() <= viewport_size) {
      r.eta_signed_viewport += v;
      r.max_abs_eta_viewport = std::max(r.max_abs_eta_viewport, std::abs(v));
    }
  }
  return r;
}

namespace {

Json report_json(const MeshReport& r) {
  return {{"drag", r.drag},
          {"eta_signed_viewport", r.eta_signed_viewport},
          {"eta_signed_domain", r.eta_signed_domain},
          {"max_abs_eta_viewport", r.max_abs_eta_viewport},
          {"cell_count", r.cell_count}};
}

}  // namespace

Json EvalResult::to_json() const {
  return {{"iterative", report_json(iterative)},
          {"network", report_json(network)},
          {"accuracy", accuracy},
          {"thresholds", thresholds}};
}

std::string EvalResult::table() const {
  std::ostringstream os;
  const auto row = [&](const std::string& name, double a, double b) {
    os << std::left << std::setw(34) << name << std::right << std::setw(16) << std::setprecision(6) << a
       << std::setw(16) << b << '\n';
  };
  os << std::left << std::setw(34) << "" << std::right << std::setw(16) << "iterative" << std::setw(16) << "network"
     << '\n';
  row("Drag force", iterative.drag, network.drag);
  row("Sum estimated error in viewport", iterative.eta_signed_viewport, network.eta_signed_viewport);
  row("Sum estimated error in domain", iterative.eta_signed_domain, network.eta_signed_domain);
  row("Max absolute error in viewport", iterative.max_abs_eta_viewport, network.max_abs_eta_viewport);
  row("Cell count", static_cast<double>(iterative.cell_count), static_cast<double>(network.cell_count));
  return os.str();
}

EvalResult evaluate_geometry(const GenConfig& cfg, std::uint64_t geometry_seed, cnn::UNet<float>& net,
                             dataset::InputChannel input, dataset::MaskChannel mask,
                             const std::vector<double>& thresholds, const fs::path& out_dir) {
  const auto outline = geometry::generate_obstacle(geometry_for_seed(cfg, geometry_seed));
  const auto run = amr::refinement_loop(cfg.mesh, outline, cfg.flow, cfg.amr);
  if (run.failure) throw SolverError("refinement loop failed: " + *run.failure);
  const auto sample = make_sample(cfg, "eval", geometry_seed, outline, run);
  const dataset::FloatChannel pred = cnn::predict(net, sample, input);

  EvalResult res;
  res.thresholds = thresholds;
  {
    const auto& target = sample.channel("density");
    const auto& m = sample.channel(dataset::channel_name(mask));
    Tensor<float> p(1, 1, sample.height, sample.width), t(p.shape()), k(p.shape());
    p.image(0).row(0) = pred.reshaped<Eigen::RowMajor>().transpose();
    t.image(0).row(0) = target.reshaped<Eigen::RowMajor>().transpose();
    k.image(0).row(0) = m.reshaped<Eigen::RowMajor>().transpose();
    res.accuracy = cnn::accuracy(p, t, k);
  }

  qmesh::Field density;
  density.width = density.height = cfg.resolution;
  density.pixel_size = cfg.mesh.domain_length / cfg.resolution;
  density.add("density", pred.cast<double>().cwiseMax(0.0).cwiseMin(1.0));
  const auto synth = amr::synth_mesh(density, cfg.mesh, &outline, thresholds);
  const auto ev = adjoint::evaluate(synth, cfg.flow);

  res.iterative = report(run.mesh, run.evaluation, cfg.mesh.domain_length);
  res.network = report(synth, ev, cfg.mesh.domain_length);

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    const qmesh::Channel target = sample.channel("density").cast<double>();
    const qmesh::Channel prediction = pred.cast<double>();
    write_pgm(out_dir / "target.pgm", target, 0.0, 1.0);
    write_pgm(out_dir / "prediction.pgm", prediction, 0.0, 1.0);
    write_pgm(out_dir / "error.pgm", (prediction - target).cwiseAbs(), 0.0, 1.0);
  }
  return res;
}

}  // namespace meshdensity::pipeline
