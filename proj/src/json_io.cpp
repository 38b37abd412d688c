#include "bimag/json_io.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace bimag {

Json to_json(const Vec2& v) { return Json::array({v.x(), v.y()}); }

Json to_json(const Vec4& v) { return Json::array({v[0], v[1], v[2], v[3]}); }

Vec2 vec2_from_json(const Json& j) {
  if (!j.is_array() || j.size() != 2) throw std::invalid_argument("expected a 2-vector");
  return {j[0].get<double>(), j[1].get<double>()};
}

Vec4 vec4_from_json(const Json& j) {
  if (!j.is_array() || j.size() != 4) throw std::invalid_argument("expected a 4-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

Json to_json(const SimConfig& c) {
  return Json{{"dt", c.dt},
              {"coupling", c.coupling},
              {"force_exponent", c.force_exponent},
              {"mobility", c.mobility},
              {"max_arm_delta", c.max_arm_delta},
              {"attach_radius", c.attach_radius},
              {"attach_offset", c.attach_offset},
              {"slip_threshold", c.slip_threshold},
              {"min_distance", c.min_distance},
              {"brownian_std", c.brownian_std},
              {"rng_seed", c.rng_seed}};
}

SimConfig sim_config_from_json(const Json& j) {
  SimConfig c;
  c.dt = j.value("dt", c.dt);
  c.coupling = j.value("coupling", c.coupling);
  c.force_exponent = j.value("force_exponent", c.force_exponent);
  c.mobility = j.value("mobility", c.mobility);
  c.max_arm_delta = j.value("max_arm_delta", c.max_arm_delta);
  c.attach_radius = j.value("attach_radius", c.attach_radius);
  c.attach_offset = j.value("attach_offset", c.attach_offset);
  c.slip_threshold = j.value("slip_threshold", c.slip_threshold);
  c.min_distance = j.value("min_distance", c.min_distance);
  c.brownian_std = j.value("brownian_std", c.brownian_std);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  c.validate();
  return c;
}

Json to_json(const WorkspaceSpec& ws) {
  Json line = Json::array();
  for (const auto& p : ws.centerline) line.push_back(to_json(p));
  return Json{{"task_id", task_name(ws.task)},
              {"bounds", {{"width", ws.width}, {"height", ws.height}}},
              {"corridor", {{"centerline", line}, {"half_width", ws.half_width}}},
              {"bead_start", to_json(ws.bead_start)},
              {"cargo_start", to_json(ws.cargo_start)},
              {"cargo_start_arc", ws.cargo_start_arc},
              {"goal_region", {{"center", to_json(ws.goal_center)}, {"radius", ws.goal_radius}}},
              {"cumulative_turn_deg", ws.cumulative_turn_deg},
              {"arc_length", ws.arc_length()}};
}

WorkspaceSpec workspace_from_json(const Json& j) {
  WorkspaceSpec ws;
  ws.task = parse_task(j.at("task_id").get<std::string>());
  ws.width = j.at("bounds").at("width").get<double>();
  ws.height = j.at("bounds").at("height").get<double>();
  for (const auto& p : j.at("corridor").at("centerline")) ws.centerline.push_back(vec2_from_json(p));
  ws.half_width = j.at("corridor").at("half_width").get<double>();
  ws.bead_start = vec2_from_json(j.at("bead_start"));
  ws.cargo_start = vec2_from_json(j.at("cargo_start"));
  ws.cargo_start_arc = j.at("cargo_start_arc").get<double>();
  ws.goal_center = vec2_from_json(j.at("goal_region").at("center"));
  ws.goal_radius = j.at("goal_region").at("radius").get<double>();
  ws.cumulative_turn_deg = j.at("cumulative_turn_deg").get<double>();
  return ws;
}

Json to_json(const SimState& s) {
  return Json{{"t", s.t},
              {"arms", to_json(s.arms)},
              {"bead", to_json(s.bead)},
              {"cargo", to_json(s.cargo)},
              {"attached", s.attached},
              {"ever_attached", s.ever_attached},
              {"cargo_offset", to_json(s.cargo_offset)},
              {"slips", s.slips}};
}

SimState sim_state_from_json(const Json& j) {
  SimState s;
  s.t = j.at("t").get<long>();
  s.arms = vec4_from_json(j.at("arms"));
  s.bead = vec2_from_json(j.at("bead"));
  s.cargo = vec2_from_json(j.at("cargo"));
  s.attached = j.at("attached").get<bool>();
  s.ever_attached = j.value("ever_attached", s.attached);
  if (j.contains("cargo_offset")) s.cargo_offset = vec2_from_json(j.at("cargo_offset"));
  s.slips = j.value("slips", 0);
  return s;
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw std::runtime_error("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Json export_workspaces() {
  Json list = Json::array();
  for (TaskId t : kAllTasks) list.push_back(to_json(build_workspace(t)));
  return Json{{"format_version", 1}, {"units", "ticks"}, {"workspaces", list}};
}

}  // namespace bimag
