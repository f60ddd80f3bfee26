// meshdensity: data generation, training, prediction, mesh synthesis and
// evaluation from the command line.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "meshdensity/amr.hpp"
#include "meshdensity/cnn.hpp"
#include "meshdensity/dataset.hpp"
#include "meshdensity/errors.hpp"
#include "meshdensity/pipeline.hpp"
#include "meshdensity/serialize.hpp"

namespace fs = std::filesystem;
using Json = nlohmann::json;
using namespace meshdensity;

namespace {

fs::path data_root() {
  const char* env = std::getenv("MESHDENSITY_ROOT");
  return env && *env ? fs::path(env) : fs::current_path();
}

Json read_json(const fs::path& path) {
  const auto bytes = dataset::read_bytes(path);
  return Json::parse(bytes.begin(), bytes.end());
}

void write_json(const fs::path& path, const Json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const std::string s = j.dump(2) + "\n";
  dataset::write_bytes_atomic(path, {s.begin(), s.end()});
}

dataset::InputChannel parse_input(const std::string& s) {
  if (s == "geo") return dataset::InputChannel::Geo;
  if (s == "sdf") return dataset::InputChannel::Sdf;
  throw Error("unknown input channel '" + s + "' (geo or sdf)");
}

dataset::MaskChannel parse_mask(const std::string& s) {
  if (s == "mask_prism" || s == "prism") return dataset::MaskChannel::Prism;
  if (s == "mask_dillute" || s == "dillute") return dataset::MaskChannel::DillutePrism;
  throw Error("unknown mask channel '" + s + "' (mask_prism or mask_dillute)");
}

std::vector<double> parse_levels(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    std::size_t used = 0;
    const double v = std::stod(tok, &used);
    if (used != tok.size()) throw Error("bad level '" + tok + "'");
    out.push_back(v);
  }
  if (out.empty()) throw Error("--levels is empty");
  return out;
}

// Generation settings the checkpoint was trained on, else the defaults.
pipeline::GenConfig generation_of(const Json& checkpoint_meta, const std::string& config_path) {
  if (!config_path.empty()) return pipeline::gen_config_from_json(read_json(config_path));
  const Json& extra = checkpoint_meta.at("extra");
  if (extra.contains("generation")) return pipeline::gen_config_from_json(extra.at("generation"));
  return {};
}

struct CheckpointInfo {
  cnn::UNet<float> net;
  dataset::InputChannel input = dataset::InputChannel::Geo;
  dataset::MaskChannel mask = dataset::MaskChannel::DillutePrism;
  Json metadata;
};

CheckpointInfo open_checkpoint(const fs::path& path) {
  Json meta;
  auto net = cnn::load_checkpoint(path, &meta);
  CheckpointInfo info{std::move(net), dataset::InputChannel::Geo, dataset::MaskChannel::DillutePrism, meta};
  const Json& extra = meta.at("extra");
  if (extra.contains("input")) info.input = parse_input(extra.at("input").get<std::string>());
  if (extra.contains("mask")) info.mask = parse_mask(extra.at("mask").get<std::string>());
  return info;
}

// Input-only sample of a generated geometry (no refinement run).
dataset::Sample geometry_sample(const pipeline::GenConfig& cfg, std::uint64_t gseed) {
  const auto gcfg = pipeline::geometry_for_seed(cfg, gseed);
  const auto outline = geometry::generate_obstacle(gcfg);
  const auto field = pipeline::input_field(cfg, outline);
  dataset::Sample s;
  s.width = field.width;
  s.height = field.height;
  for (std::size_t c = 0; c < field.names.size(); ++c) {
    s.names.push_back(field.names[c]);
    s.channels.push_back(field.data[c].cast<float>());
  }
  s.metadata = {{"id", "geometry-" + std::to_string(gseed)},
                {"seed", gseed},
                {"resolution", cfg.resolution},
                {"geometry", io::to_json(gcfg)},
                {"mesh_setup", io::to_json(cfg.mesh)},
                {"pipeline_version", pipeline::kPipelineVersion}};
  return s;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::size_t n = 16;
  std::uint64_t seed = 0;
  std::string out;
  std::optional<int> resolution, min_iters, max_iters;
  int workers = 1;
  std::string config;
};

int cmd_gen_data(const GenArgs& a) {
  pipeline::GenConfig cfg;
  if (!a.config.empty()) cfg = pipeline::gen_config_from_json(read_json(a.config));
  if (a.resolution) cfg.resolution = *a.resolution;
  if (a.min_iters) cfg.min_iters = *a.min_iters;
  if (a.max_iters) cfg.amr.max_iters = *a.max_iters;
  cfg = pipeline::gen_config_from_json(pipeline::to_json(cfg));  // validates overrides

  const fs::path out = a.out.empty() ? data_root() / "data" : fs::path(a.out);
  fs::create_directories(out);
  write_json(out / "gen_config.json", pipeline::to_json(cfg));
  const auto summary = pipeline::gen_data(cfg, a.n, a.seed, out, a.workers, &std::cerr);

  std::map<std::string, int> counts;
  for (const auto& r : summary.runs) ++counts[pipeline::to_string(r.status)];
  std::cout << "catalog " << (out / dataset::Catalog::index_name).string() << ": " << summary.catalog.samples.size()
            << " samples";
  for (const auto& [status, count] : counts) std::cout << ", " << status << " " << count;
  std::cout << '\n';
  return 0;
}

struct TrainArgs {
  std::string catalog, config, out;
  std::optional<int> epochs, batch_size;
  std::optional<long> max_steps;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  cnn::NetworkConfig net_cfg;
  cnn::OptimizerConfig opt_cfg;
  cnn::TrainConfig cfg;
  int min_iters = 5;
  double val_fraction = 0.1;
  if (!a.config.empty()) {
    const Json j = read_json(a.config);
    if (j.contains("network")) net_cfg = cnn::network_config_from_json(j.at("network"));
    if (j.contains("optimizer")) opt_cfg = cnn::optimizer_config_from_json(j.at("optimizer"));
    if (j.contains("train")) {
      const Json& t = j.at("train");
      cfg.epochs = t.value("epochs", cfg.epochs);
      cfg.max_steps = t.value("max_steps", cfg.max_steps);
      cfg.batch_size = t.value("batch_size", cfg.batch_size);
      cfg.seed = t.value("seed", cfg.seed);
      if (t.contains("input")) cfg.input = parse_input(t.at("input").get<std::string>());
      if (t.contains("mask")) cfg.mask = parse_mask(t.at("mask").get<std::string>());
      min_iters = t.value("min_iters", min_iters);
      val_fraction = t.value("val_fraction", val_fraction);
    }
  }
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (a.max_steps) cfg.max_steps = *a.max_steps;
  if (a.seed) cfg.seed = *a.seed;
  if (cfg.epochs < 1 || cfg.batch_size < 1 || cfg.max_steps < 0) throw Error("invalid training settings");

  const fs::path root = a.catalog.empty() ? data_root() / "data" : fs::path(a.catalog);
  const fs::path catalog_root = fs::is_regular_file(root) ? root.parent_path() : root;
  auto catalog = dataset::Catalog::load(catalog_root);
  const auto split = dataset::filter_and_split(catalog, min_iters, val_fraction, cfg.seed);
  if (split.val.empty()) throw Error("validation split is empty; need more samples");
  cfg.out_dir = a.out.empty() ? data_root() / "runs" / "train" : fs::path(a.out);
  if (fs::exists(catalog_root / "gen_config.json"))
    cfg.checkpoint_extra["generation"] = read_json(catalog_root / "gen_config.json");

  dataset::SampleStore store(std::move(catalog));
  std::cerr << "training on " << split.train.size() << " samples, validating on " << split.val.size() << '\n';
  const auto res = cnn::train(store, split, net_cfg, opt_cfg, cfg);

  std::cout << "initial val loss " << res.initial.loss << ", accuracy " << res.initial.accuracy << '\n';
  for (const auto& h : res.history)
    std::cout << "epoch " << h.epoch << " step " << h.step << " loss " << h.loss_train << " val " << h.loss_val
              << " acc " << h.acc_val << " lr " << h.lr << '\n';
  std::cout << "best epoch " << res.best_epoch << ", checkpoint " << (cfg.out_dir / "best.mshd").string() << '\n';
  if (res.diverged) {
    std::cerr << "training diverged; last finite state in " << (cfg.out_dir / "last_finite.mshd").string() << '\n';
    return 2;
  }
  return 0;
}

struct PredictArgs {
  std::string checkpoint, sample, out, config;
  std::optional<std::uint64_t> geometry_seed;
};

int cmd_predict(const PredictArgs& a) {
  auto ck = open_checkpoint(a.checkpoint);
  dataset::Sample s;
  if (!a.sample.empty()) {
    s = dataset::read_sample(a.sample);
  } else {
    s = geometry_sample(generation_of(ck.metadata, a.config), *a.geometry_seed);
  }
  const dataset::FloatChannel pred = cnn::predict(ck.net, s, ck.input);

  if (s.has("density")) {
    const auto& m = s.channel(dataset::channel_name(ck.mask));
    Tensor<float> p(1, 1, s.height, s.width), t(p.shape()), k(p.shape());
    p.image(0).row(0) = pred.reshaped<Eigen::RowMajor>().transpose();
    t.image(0).row(0) = s.channel("density").reshaped<Eigen::RowMajor>().transpose();
    k.image(0).row(0) = m.reshaped<Eigen::RowMajor>().transpose();
    std::cout << "accuracy " << cnn::accuracy(p, t, k) << '\n';
  }

  dataset::Sample out = s;
  out.names.push_back("prediction");
  out.channels.push_back(pred);
  out.metadata["source_checkpoint"] = fs::absolute(a.checkpoint).string();
  const fs::path dir = a.out.empty() ? data_root() / "runs" / "predict" : fs::path(a.out);
  fs::create_directories(dir);
  dataset::write_sample(dir / "prediction.mshd", out);
  pipeline::write_pgm(dir / "prediction.pgm", pred.cast<double>(), 0.0, 1.0);
  std::cout << "wrote " << (dir / "prediction.mshd").string() << '\n';
  return 0;
}

struct SynthArgs {
  std::string prediction, levels, out;
};

int cmd_synth(const SynthArgs& a) {
  const auto s = dataset::read_sample(a.prediction);
  const char* channel = s.has("prediction") ? "prediction" : "density";
  if (!s.has(channel)) throw Error("sample has neither a prediction nor a density channel");
  if (s.width != s.height) throw Error("density must be square");

  qmesh::MeshSetup setup;
  if (s.metadata.contains("mesh_setup")) setup = io::mesh_setup_from_json(s.metadata.at("mesh_setup"));
  std::optional<geometry::Outline> outline;
  if (s.metadata.contains("geometry"))
    outline = geometry::generate_obstacle(io::geometry_config_from_json(s.metadata.at("geometry")));
  const auto levels =
      a.levels.empty() ? amr::all_thresholds(setup.base_level, setup.max_level) : parse_levels(a.levels);

  qmesh::Field density;
  density.width = s.width;
  density.height = s.height;
  density.pixel_size = setup.domain_length / s.width;
  density.add("density", s.channel(channel).cast<double>().cwiseMax(0.0).cwiseMin(1.0));
  const auto mesh = amr::synth_mesh(density, setup, outline ? &*outline : nullptr, levels);

  std::map<int, std::size_t> histogram;
  for (const auto& c : mesh.cells()) ++histogram[c.key.level];
  Json hist = Json::object();
  for (const auto& [level, count] : histogram) hist[std::to_string(level)] = count;
  const bool uniform = histogram.size() == 1 && histogram.begin()->first == setup.base_level;
  const Json report = {{"source", fs::absolute(a.prediction).string()},
                       {"levels", levels},
                       {"cell_count", mesh.cells().size()},
                       {"uniform", uniform},
                       {"level_histogram", hist},
                       {"mesh", io::to_json(mesh)}};
  const fs::path out = a.out.empty() ? data_root() / "runs" / "synth.json" : fs::path(a.out);
  write_json(out, report);
  std::cout << "cells " << mesh.cells().size() << (uniform ? " (uniform)" : "") << ", wrote " << out.string()
            << '\n';
  return 0;
}

struct EvalArgs {
  std::uint64_t geometry_seed = 0;
  std::string checkpoint, out, config, levels;
};

int cmd_eval(const EvalArgs& a) {
  auto ck = open_checkpoint(a.checkpoint);
  const auto cfg = generation_of(ck.metadata, a.config);
  const auto levels = a.levels.empty() ? amr::all_thresholds(cfg.mesh.base_level, cfg.mesh.max_level)
                                       : parse_levels(a.levels);
  const fs::path dir = a.out.empty() ? data_root() / "runs" / ("eval-" + std::to_string(a.geometry_seed))
                                     : fs::path(a.out);
  const auto res = pipeline::evaluate_geometry(cfg, a.geometry_seed, ck.net, ck.input, ck.mask, levels, dir);
  Json j = res.to_json();
  j["geometry_seed"] = a.geometry_seed;
  j["checkpoint"] = fs::absolute(a.checkpoint).string();
  write_json(dir / "eval.json", j);
  const std::string table = res.table();
  {
    std::ofstream f(dir / "table.txt");
    f << table;
  }
  std::cout << table << "accuracy " << res.accuracy << '\n';
  return 0;
}

int cmd_reindex(const std::string& root_arg, int min_iters) {
  const fs::path root = root_arg.empty() ? data_root() / "data" : fs::path(root_arg);
  std::vector<std::string> rejected;
  const auto catalog = dataset::reindex(root, min_iters, &rejected);
  catalog.save();
  for (const auto& r : rejected) std::cerr << "rejected " << r << '\n';
  std::cout << catalog.samples.size() << " samples indexed in " << (root / dataset::Catalog::index_name).string()
            << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mesh density prediction: data generation, training and evaluation"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Run seeded refinement loops and write a sample catalog");
  g->add_option("--n", gen.n, "Number of runs")->capture_default_str();
  g->add_option("--seed", gen.seed, "Batch seed")->capture_default_str();
  g->add_option("--out", gen.out, "Output directory (default $MESHDENSITY_ROOT/data)");
  g->add_option("--resolution", gen.resolution, "Raster size in pixels")->check(CLI::Range(16, 4096));
  g->add_option("--workers", gen.workers, "Concurrent runs")->check(CLI::PositiveNumber)->capture_default_str();
  g->add_option("--min-iters", gen.min_iters, "Minimum refinement iterations to keep a sample");
  g->add_option("--max-iters", gen.max_iters, "Refinement iterations per run");
  g->add_option("--config", gen.config, "Generation config JSON")->check(CLI::ExistingFile);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the density network on a catalog");
  t->add_option("--catalog", tr.catalog, "Catalog directory (default $MESHDENSITY_ROOT/data)");
  t->add_option("--config", tr.config, "JSON with network, optimizer and train sections")->check(CLI::ExistingFile);
  t->add_option("--epochs", tr.epochs);
  t->add_option("--max-steps", tr.max_steps);
  t->add_option("--batch-size", tr.batch_size);
  t->add_option("--seed", tr.seed);
  t->add_option("--out", tr.out, "Run directory (default $MESHDENSITY_ROOT/runs/train)");

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "Predict the density of a sample or a generated geometry");
  p->add_option("--checkpoint", pr.checkpoint)->required()->check(CLI::ExistingFile);
  auto* src_sample = p->add_option("--sample", pr.sample, "Sample container")->check(CLI::ExistingFile);
  auto* src_seed = p->add_option("--geometry-seed", pr.geometry_seed, "Geometry seed");
  src_sample->excludes(src_seed);
  p->add_option("--config", pr.config, "Generation config JSON for --geometry-seed")->check(CLI::ExistingFile);
  p->add_option("--out", pr.out, "Output directory");
  p->callback([&] {
    if (pr.sample.empty() && !pr.geometry_seed) throw CLI::RequiredError("--sample or --geometry-seed");
  });

  SynthArgs sy;
  auto* s = app.add_subcommand("synth", "Build a mesh from a predicted density");
  s->add_option("--prediction", sy.prediction, "Prediction container")->required()->check(CLI::ExistingFile);
  s->add_option("--levels", sy.levels, "Comma separated density thresholds");
  s->add_option("--out", sy.out, "Output JSON");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Compare the iterative mesh with the network mesh");
  e->add_option("--geometry-seed", ev.geometry_seed)->required();
  e->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingFile);
  e->add_option("--config", ev.config, "Generation config JSON")->check(CLI::ExistingFile);
  e->add_option("--levels", ev.levels, "Comma separated density thresholds");
  e->add_option("--out", ev.out, "Output directory");

  std::string reindex_root;
  int reindex_min = 0;
  auto* r = app.add_subcommand("reindex", "Rebuild a catalog index from the sample files");
  r->add_option("--root", reindex_root, "Catalog directory (default $MESHDENSITY_ROOT/data)");
  r->add_option("--min-iters", reindex_min)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? 0 : 1;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(tr);
    if (*p) return cmd_predict(pr);
    if (*s) return cmd_synth(sy);
    if (*e) return cmd_eval(ev);
    if (*r) return cmd_reindex(reindex_root, reindex_min);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  }
  return 1;
}
