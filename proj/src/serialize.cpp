#include "meshdensity/serialize.hpp"

#include "meshdensity/errors.hpp"

namespace meshdensity::io {

namespace {

template <class T>
void read(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

Json range(const geometry::Range& r) { return Json::array({r.min, r.max}); }

void read_range(const Json& j, const char* key, geometry::Range& r) {
  if (!j.contains(key)) return;
  const auto v = j.at(key).get<std::vector<double>>();
  if (v.size() != 2) throw Error(std::string(key) + " must be a [min, max] pair");
  r = {v[0], v[1]};
}

}  // namespace

Json to_json(const geometry::GeometryConfig& c) {
  return {{"base_shape", c.base_shape == geometry::BaseShape::Triangle ? "triangle" : "rectangle"},
          {"lambda_range", range(c.lambda_range)},
          {"translation_range", range(c.translation_range)},
          {"smoothing_samples", c.smoothing_samples},
          {"seed", c.seed},
          {"base_size", c.base_size},
          {"base_center", {c.base_center.x(), c.base_center.y()}},
          {"domain_length", c.domain_length}};
}

geometry::GeometryConfig geometry_config_from_json(const Json& j) {
  geometry::GeometryConfig c;
  if (j.contains("base_shape")) {
    const auto s = j.at("base_shape").get<std::string>();
    if (s == "triangle") c.base_shape = geometry::BaseShape::Triangle;
    else if (s == "rectangle") c.base_shape = geometry::BaseShape::Rectangle;
    else throw Error("unknown base_shape '" + s + "'");
  }
  read_range(j, "lambda_range", c.lambda_range);
  read_range(j, "translation_range", c.translation_range);
  read(j, "smoothing_samples", c.smoothing_samples);
  read(j, "seed", c.seed);
  read(j, "base_size", c.base_size);
  if (j.contains("base_center")) {
    const auto v = j.at("base_center").get<std::vector<double>>();
    if (v.size() != 2) throw Error("base_center must be [x, y]");
    c.base_center = {v[0], v[1]};
  }
  read(j, "domain_length", c.domain_length);
  return c;
}

Json to_json(const qmesh::MeshSetup& s) {
  Json zones = Json::array();
  for (const auto& z : s.wake_zones)
    zones.push_back({{"half_width", z.half_width},
                     {"downstream_extent", z.downstream_extent},
                     {"level_increment", z.level_increment}});
  return {{"base_level", s.base_level},
          {"prism_band_layers", s.prism_band_layers},
          {"prism_band_stretch", s.prism_band_stretch},
          {"wake_zones", zones},
          {"max_level", s.max_level},
          {"domain_length", s.domain_length}};
}

qmesh::MeshSetup mesh_setup_from_json(const Json& j) {
  qmesh::MeshSetup s;
  read(j, "base_level", s.base_level);
  read(j, "prism_band_layers", s.prism_band_layers);
  read(j, "prism_band_stretch", s.prism_band_stretch);
  read(j, "max_level", s.max_level);
  read(j, "domain_length", s.domain_length);
  if (j.contains("wake_zones")) {
    s.wake_zones.clear();
    for (const auto& z : j.at("wake_zones")) {
      qmesh::WakeZone w;
      read(z, "half_width", w.half_width);
      read(z, "downstream_extent", w.downstream_extent);
      read(z, "level_increment", w.level_increment);
      s.wake_zones.push_back(w);
    }
  }
  qmesh::validate(s);
  return s;
}

Json to_json(const flow::FlowConfig& c) {
  return {{"u_inf", c.u_inf},
          {"nu", c.nu},
          {"stopping",
           {{"window", c.stopping.window},
            {"asymptotic_tol", c.stopping.asymptotic_tol},
            {"min_residual", c.stopping.min_residual},
            {"max_iterations", c.stopping.max_iterations}}},
          {"sequencing",
           {{"max_levels", c.sequencing.max_levels},
            {"iters_per_level", c.sequencing.iters_per_level},
            {"level_tol", c.sequencing.level_tol},
            {"pseudo_cfl", c.sequencing.pseudo_cfl}}}};
}

flow::FlowConfig flow_config_from_json(const Json& j) {
  flow::FlowConfig c;
  read(j, "u_inf", c.u_inf);
  read(j, "nu", c.nu);
  if (j.contains("stopping")) {
    const auto& s = j.at("stopping");
    read(s, "window", c.stopping.window);
    read(s, "asymptotic_tol", c.stopping.asymptotic_tol);
    read(s, "min_residual", c.stopping.min_residual);
    read(s, "max_iterations", c.stopping.max_iterations);
  }
  if (j.contains("sequencing")) {
    const auto& s = j.at("sequencing");
    read(s, "max_levels", c.sequencing.max_levels);
    read(s, "iters_per_level", c.sequencing.iters_per_level);
    read(s, "level_tol", c.sequencing.level_tol);
    read(s, "pseudo_cfl", c.sequencing.pseudo_cfl);
  }
  flow::validate(c);
  return c;
}

Json to_json(const amr::AmrConfig& c) {
  return {{"fraction", c.fraction}, {"max_iters", c.max_iters}, {"eta_target", c.eta_target}};
}

amr::AmrConfig amr_config_from_json(const Json& j) {
  amr::AmrConfig c;
  read(j, "fraction", c.fraction);
  read(j, "max_iters", c.max_iters);
  read(j, "eta_target", c.eta_target);
  amr::validate(c);
  return c;
}

Json to_json(const amr::RefinementRecord& r) {
  return {{"iteration", r.iteration},  {"cell_count", r.cell_count},          {"drag", r.drag},
          {"eta_sum", r.eta_sum},      {"eta_signed", r.eta_signed},          {"mesh_snapshot_ref", r.mesh_snapshot_ref}};
}

Json to_json(const geometry::Outline& o) {
  Json pts = Json::array();
  for (const auto& p : o.points) pts.push_back({p.x(), p.y()});
  return {{"points", pts}};
}

geometry::Outline outline_from_json(const Json& j) {
  std::vector<geometry::Point> pts;
  for (const auto& p : j.at("points")) {
    const auto v = p.get<std::vector<double>>();
    if (v.size() != 2) throw GeometryError("outline points must be [x, y]");
    pts.emplace_back(v[0], v[1]);
  }
  return geometry::make_outline(std::move(pts));
}

Json to_json(const qmesh::QuadtreeMesh& m) {
  Json cells = Json::array();
  for (const auto& c : m.cells())
    cells.push_back({{"level", c.key.level},
                     {"i", c.key.i},
                     {"j", c.key.j},
                     {"kind", c.kind == qmesh::CellKind::Solid ? "solid" : "fluid"}});
  return {{"domain_length", m.domain_length()},
          {"base_level", m.base_level()},
          {"max_level", m.max_level()},
          {"cells", cells}};
}

qmesh::QuadtreeMesh mesh_from_json(const Json& j, const std::optional<geometry::Outline>& outline) {
  std::vector<qmesh::CellKey> leaves;
  for (const auto& c : j.at("cells"))
    leaves.push_back({c.at("level").get<int>(), c.at("i").get<std::int64_t>(), c.at("j").get<std::int64_t>()});
  qmesh::QuadtreeMesh m(j.at("domain_length").get<double>(), j.at("base_level").get<int>(),
                        j.at("max_level").get<int>(), outline, std::move(leaves));
  if (qmesh::lattice_area(m) != std::uint64_t{1} << (2 * m.max_level()))
    throw MeshError("mesh cells do not tile the domain");
  return m;
}

}  // namespace meshdensity::io
