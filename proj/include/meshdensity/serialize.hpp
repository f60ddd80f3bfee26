#pragma once

#include <json.hpp>

#include "meshdensity/amr.hpp"
#include "meshdensity/flow.hpp"
#include "meshdensity/geometry.hpp"
#include "meshdensity/qmesh.hpp"

// JSON forms of the configuration structs, outlines and meshes. Readers start
// from the defaults and override only the keys present.
namespace meshdensity::io {

using Json = nlohmann::json;

Json to_json(const geometry::GeometryConfig& c);
geometry::GeometryConfig geometry_config_from_json(const Json& j);

Json to_json(const qmesh::MeshSetup& s);
qmesh::MeshSetup mesh_setup_from_json(const Json& j);

Json to_json(const flow::FlowConfig& c);
flow::FlowConfig flow_config_from_json(const Json& j);

Json to_json(const amr::AmrConfig& c);
amr::AmrConfig amr_config_from_json(const Json& j);

Json to_json(const amr::RefinementRecord& r);

Json to_json(const geometry::Outline& o);
geometry::Outline outline_from_json(const Json& j);

// {"domain_length", "base_level", "max_level", "cells": [{level, i, j, kind}]}
Json to_json(const qmesh::QuadtreeMesh& m);
qmesh::QuadtreeMesh mesh_from_json(const Json& j, const std::optional<geometry::Outline>& outline);

}  // namespace meshdensity::io
