#pragma once

#include "bimag/magsim.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace bimag {

using Json = nlohmann::json;

Json to_json(const Vec2& v);
Json to_json(const Vec4& v);
Vec2 vec2_from_json(const Json& j);
Vec4 vec4_from_json(const Json& j);

Json to_json(const SimConfig& cfg);
SimConfig sim_config_from_json(const Json& j);

Json to_json(const WorkspaceSpec& ws);
WorkspaceSpec workspace_from_json(const Json& j);

Json to_json(const SimState& s);
SimState sim_state_from_json(const Json& j);

// File helpers; both throw std::runtime_error with the path on failure.
Json read_json_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

// Geometry export for the browser panel: {"format_version":1,"workspaces":[...]}
Json export_workspaces();

}  // namespace bimag
