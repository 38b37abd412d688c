#include "bimag/magsim.hpp"

#include "bimag/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace bimag {

std::string task_name(TaskId task) {
  switch (task) {
    case TaskId::A: return "A";
    case TaskId::B: return "B";
    case TaskId::C: return "C";
  }
  throw std::invalid_argument("unknown task id");
}

TaskId parse_task(std::string_view name) {
  if (name == "A" || name == "a") return TaskId::A;
  if (name == "B" || name == "b") return TaskId::B;
  if (name == "C" || name == "c") return TaskId::C;
  throw std::invalid_argument("unknown task '" + std::string(name) + "'");
}

std::string phase_name(Phase phase) {
  return phase == Phase::Approach ? "approach" : "transport";
}

Phase parse_phase(std::string_view name) {
  if (name == "approach") return Phase::Approach;
  if (name == "transport") return Phase::Transport;
  throw std::invalid_argument("unknown phase '" + std::string(name) + "'");
}

Phase phase_from_index(int index) {
  if (index == 0) return Phase::Approach;
  if (index == 1) return Phase::Transport;
  throw std::invalid_argument("phase label must be 0 or 1, got " + std::to_string(index));
}

// ---------------------------------------------------------------------------
// Workspace geometry

double WorkspaceSpec::arc_length() const {
  double total = 0.0;
  for (std::size_t i = 1; i < centerline.size(); ++i) {
    total += (centerline[i] - centerline[i - 1]).norm();
  }
  return total;
}

Vec2 WorkspaceSpec::point_at(double arc) const {
  arc = std::max(arc, 0.0);
  for (std::size_t i = 1; i < centerline.size(); ++i) {
    const Vec2 seg = centerline[i] - centerline[i - 1];
    const double len = seg.norm();
    if (arc <= len) return centerline[i - 1] + seg * (arc / len);
    arc -= len;
  }
  return centerline.back();
}

Vec2 WorkspaceSpec::tangent_at(double arc) const {
  arc = std::max(arc, 0.0);
  for (std::size_t i = 1; i < centerline.size(); ++i) {
    const Vec2 seg = centerline[i] - centerline[i - 1];
    const double len = seg.norm();
    if (arc <= len || i + 1 == centerline.size()) return seg / len;
    arc -= len;
  }
  return Vec2::UnitX();
}

CenterlinePoint WorkspaceSpec::project(const Vec2& p) const {
  CenterlinePoint best;
  best.distance = std::numeric_limits<double>::infinity();
  double arc_before = 0.0;
  for (std::size_t i = 1; i < centerline.size(); ++i) {
    const Vec2 a = centerline[i - 1];
    const Vec2 seg = centerline[i] - a;
    const double len = seg.norm();
    const Vec2 dir = seg / len;
    const double s = std::clamp((p - a).dot(dir), 0.0, len);
    const Vec2 c = a + dir * s;
    const double d = (p - c).norm();
    if (d < best.distance) {
      best.distance = d;
      best.closest = c;
      best.tangent = dir;
      best.arc = arc_before + s;
      const Vec2 rel = p - c;
      const double side = dir.x() * rel.y() - dir.y() * rel.x();
      best.lateral = side < 0.0 ? -d : d;
    }
    arc_before += len;
  }
  return best;
}

bool WorkspaceSpec::inside_corridor(const Vec2& p, double tol) const {
  return project(p).distance <= half_width + tol;
}

bool WorkspaceSpec::inside_bounds(const Vec2& p) const {
  return p.x() >= 0.0 && p.x() <= width && p.y() >= 0.0 && p.y() <= height;
}

Vec2 WorkspaceSpec::clamp_to_corridor(const Vec2& p) const {
  const CenterlinePoint c = project(p);
  if (c.distance <= half_width) return p;
  return c.closest + (p - c.closest) * (half_width / c.distance);
}

namespace {

struct CorridorRecipe {
  Vec2 start;
  std::vector<double> segments;
  std::vector<double> turns_deg;  // turn applied after each segment but the last
};

CorridorRecipe recipe_for(TaskId task) {
  switch (task) {
    case TaskId::A: return {{200.0, 300.0}, {450.0, 450.0}, {30.0}};
    case TaskId::B: return {{200.0, 250.0}, {400.0, 250.0, 300.0}, {45.0, 45.0}};
    case TaskId::C: return {{200.0, 230.0}, {380.0, 220.0, 220.0, 200.0}, {50.0, 50.0, 50.0}};
  }
  throw std::invalid_argument("unknown task id");
}

}  // namespace

WorkspaceSpec build_workspace(TaskId task) {
  const CorridorRecipe recipe = recipe_for(task);
  std::vector<Vec2> corners{recipe.start};
  double heading = 0.0;
  double turned = 0.0;
  for (std::size_t i = 0; i < recipe.segments.size(); ++i) {
    const Vec2 dir(std::cos(heading), std::sin(heading));
    corners.push_back(corners.back() + dir * recipe.segments[i]);
    if (i < recipe.turns_deg.size()) {
      heading += recipe.turns_deg[i] * std::numbers::pi / 180.0;
      turned += std::abs(recipe.turns_deg[i]);
    }
  }

  // round every corner with a finely sampled circular arc so that projection
  // onto the centerline is continuous everywhere inside the corridor
  WorkspaceSpec ws;
  ws.task = task;
  ws.centerline.push_back(corners.front());
  for (std::size_t i = 1; i + 1 < corners.size(); ++i) {
    const Vec2 in = (corners[i] - corners[i - 1]).normalized();
    const Vec2 out = (corners[i + 1] - corners[i]).normalized();
    const double turn = std::atan2(in.x() * out.y() - in.y() * out.x(), in.dot(out));
    const double reach = kFilletRadius * std::tan(std::abs(turn) / 2.0);
    const Vec2 from = corners[i] - in * reach;
    const Vec2 normal = turn > 0.0 ? Vec2(-in.y(), in.x()) : Vec2(in.y(), -in.x());
    const Vec2 center = from + normal * kFilletRadius;
    const int pieces = std::max(1, static_cast<int>(std::ceil(std::abs(turn) / (kFilletStepDeg * std::numbers::pi / 180.0))));
    for (int k = 0; k <= pieces; ++k) {
      const double a = turn * k / pieces;
      const Vec2 r = from - center;
      const Vec2 rotated(r.x() * std::cos(a) - r.y() * std::sin(a), r.x() * std::sin(a) + r.y() * std::cos(a));
      ws.centerline.push_back(center + rotated);
    }
  }
  ws.centerline.push_back(corners.back());
  ws.cumulative_turn_deg = turned;
  ws.bead_start = ws.centerline.front();
  ws.cargo_start_arc = 160.0;
  ws.cargo_start = ws.point_at(ws.cargo_start_arc);
  ws.goal_center = ws.centerline.back();
  return ws;
}

// ---------------------------------------------------------------------------
// Dynamics

void SimConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument(std::string("SimConfig.") + name + " must be positive");
    }
  };
  positive(dt, "dt");
  positive(coupling, "coupling");
  positive(mobility, "mobility");
  positive(max_arm_delta, "max_arm_delta");
  positive(attach_radius, "attach_radius");
  positive(attach_offset, "attach_offset");
  positive(slip_threshold, "slip_threshold");
  positive(min_distance, "min_distance");
  if (!(force_exponent >= 1.0)) throw std::invalid_argument("SimConfig.force_exponent must be >= 1");
  if (!(brownian_std >= 0.0)) throw std::invalid_argument("SimConfig.brownian_std must be >= 0");
}

ForceResult magnetic_force(const Vec4& arms, const Vec2& bead, const SimConfig& cfg) {
  ForceResult out;
  for (int k = 0; k < 2; ++k) {
    const Vec2 magnet(arms[2 * k], arms[2 * k + 1]);
    const Vec2 d = magnet - bead;
    const double dist = d.norm();
    if (dist < cfg.min_distance) {
      out.saturated = true;
      if (dist == 0.0) continue;  // direction undefined
    }
    const double r = std::max(dist, cfg.min_distance);
    out.force += (cfg.coupling / std::pow(r, cfg.force_exponent)) * (d / dist);
  }
  return out;
}

Vec4 clip_action(const Vec4& action, const SimConfig& cfg) {
  return action.cwiseMax(-cfg.max_arm_delta).cwiseMin(cfg.max_arm_delta);
}

namespace {

// Moves a point by `disp` inside the corridor. Motion into a wall keeps only
// its tangential part; sub-stepping keeps each projection local.
Vec2 move_with_walls(const WorkspaceSpec& ws, const Vec2& from, const Vec2& disp) {
  const double len = disp.norm();
  if (len == 0.0) return from;
  const int n = static_cast<int>(std::min(4096.0, std::ceil(len / (0.5 * ws.half_width))));
  const Vec2 step = disp / n;
  Vec2 p = from;
  for (int i = 0; i < n; ++i) {
    const Vec2 cand = p + step;
    const CenterlinePoint c = ws.project(cand);
    if (c.distance <= ws.half_width) {
      p = cand;
      continue;
    }
    const Vec2 normal = (cand - c.closest) / c.distance;
    const Vec2 slide = step - std::max(0.0, step.dot(normal)) * normal;
    p = ws.clamp_to_corridor(p + slide);
  }
  return p;
}

}  // namespace

SimState step_sim(const SimState& state, const Vec4& action, const WorkspaceSpec& ws,
                  const SimConfig& cfg) {
  if (!action.allFinite()) throw InvalidAction("action contains non-finite components");

  SimState next = state;
  next.arms = state.arms + clip_action(action, cfg);
  for (int k = 0; k < 2; ++k) {
    next.arms[2 * k] = std::clamp(next.arms[2 * k], 0.0, ws.width);
    next.arms[2 * k + 1] = std::clamp(next.arms[2 * k + 1], 0.0, ws.height);
  }

  const ForceResult f = magnetic_force(next.arms, state.bead, cfg);
  Vec2 disp = cfg.mobility * cfg.dt * f.force;
  if (cfg.brownian_std > 0.0) {
    Rng rng = make_rng(cfg.rng_seed, static_cast<std::uint64_t>(state.t));
    disp.x() += cfg.brownian_std * standard_normal(rng);
    disp.y() += cfg.brownian_std * standard_normal(rng);
  }
  next.bead = move_with_walls(ws, state.bead, disp);
  const double moved = (next.bead - state.bead).norm();

  bool slipped = false;
  if (state.attached) {
    if (moved > cfg.slip_threshold) {
      slipped = true;
    } else {
      const Vec2 target = next.bead + state.cargo_offset;
      if (ws.inside_corridor(target, 0.0)) {
        next.cargo = target;
      } else {
        // cargo pinned against the wall loses its hold
        next.cargo = ws.clamp_to_corridor(target);
        slipped = true;
      }
    }
    if (slipped) {
      next.attached = false;
      next.cargo_offset = Vec2::Zero();
      ++next.slips;
    }
  } else if ((next.bead - state.cargo).norm() <= cfg.attach_radius) {
    Vec2 dir = state.cargo - next.bead;
    dir = dir.norm() > 0.0 ? Vec2(dir.normalized()) : ws.project(next.bead).tangent;
    const Vec2 held = next.bead + dir * cfg.attach_offset;
    if (ws.inside_corridor(held, 0.0)) {
      next.cargo = held;
      next.cargo_offset = dir * cfg.attach_offset;
      next.attached = true;
      next.ever_attached = true;
    }
  }
  next.t = state.t + 1;
  return next;
}

// ---------------------------------------------------------------------------
// Scripted expert

ExpertDecision expert_action(const SimState& state, const WorkspaceSpec& ws, const SimConfig& cfg,
                             const ExpertParams& params) {
  ExpertDecision out;
  out.phase = state.attached ? Phase::Transport : Phase::Approach;
  const CenterlinePoint here = ws.project(state.bead);

  // pure pursuit of a centerline point ahead of the bead; a loose cargo lying
  // behind the bead sends the pursuit point backwards instead
  double sign = 1.0;
  if (!state.attached && ws.project(state.cargo).arc < here.arc - params.behind_margin) sign = -1.0;
  const double aim = std::clamp(here.arc + sign * params.lookahead, 0.0, ws.arc_length());
  Vec2 u = ws.point_at(aim) - state.bead;
  u = u.norm() > 1e-6 ? Vec2(u.normalized()) : Vec2(sign * here.tangent);
  const Vec2 n(-u.y(), u.x());

  const Vec2 mid = state.bead + params.pair_forward * u;
  const Vec2 left = mid + params.pair_half_span * n;
  const Vec2 right = mid - params.pair_half_span * n;
  const Vec4 desired(left.x(), left.y(), right.x(), right.y());
  out.action = clip_action(desired - state.arms, cfg);
  return out;
}

// ---------------------------------------------------------------------------
// Observation

int grid_index(GridChannel channel, int row, int col) {
  return (static_cast<int>(channel) * kGridSize + row) * kGridSize + col;
}

std::pair<int, int> grid_cell(const Vec2& p, const WorkspaceSpec& ws) {
  const double cw = ws.width / kGridSize;
  const double ch = ws.height / kGridSize;
  const int col = std::clamp(static_cast<int>(std::floor(p.x() / cw)), 0, kGridSize - 1);
  const int row = std::clamp(static_cast<int>(std::floor(p.y() / ch)), 0, kGridSize - 1);
  return {row, col};
}

std::vector<double> rasterize(const SimState& state, const WorkspaceSpec& ws) {
  std::vector<double> grid(kGridCells, 0.0);
  const double cw = ws.width / kGridSize;
  const double ch = ws.height / kGridSize;
  for (int row = 0; row < kGridSize; ++row) {
    for (int col = 0; col < kGridSize; ++col) {
      const Vec2 center((col + 0.5) * cw, (row + 0.5) * ch);
      grid[grid_index(GridChannel::Walls, row, col)] = ws.inside_corridor(center, 0.0) ? 0.0 : 1.0;
    }
  }
  auto mark = [&](GridChannel c, const Vec2& p) {
    const auto [row, col] = grid_cell(p, ws);
    grid[grid_index(c, row, col)] = 1.0;
  };
  mark(GridChannel::Bead, state.bead);
  mark(GridChannel::Cargo, state.cargo);
  mark(GridChannel::Arms, Vec2(state.arms[0], state.arms[1]));
  mark(GridChannel::Arms, Vec2(state.arms[2], state.arms[3]));
  return grid;
}

Vec4 normalize_state(const Vec4& arms) {
  const Vec4 center(640.0, 480.0, 640.0, 480.0);
  return (arms - center) / kWorkspaceScale;
}

Observation observe(const SimState& state, const WorkspaceSpec& ws, bool with_grid) {
  const Vec2 center(ws.width / 2.0, ws.height / 2.0);
  const CenterlinePoint here = ws.project(state.bead);
  const Vec2 left(state.arms[0], state.arms[1]);
  const Vec2 right(state.arms[2], state.arms[3]);

  Observation obs;
  auto& f = obs.features;
  f.reserve(kFeatureDim);
  auto push2 = [&f](const Vec2& v) {
    f.push_back(v.x());
    f.push_back(v.y());
  };
  push2((state.bead - center) / kWorkspaceScale);
  push2((state.cargo - center) / kWorkspaceScale);
  push2((left - center) / kWorkspaceScale);
  push2((right - center) / kWorkspaceScale);
  f.push_back(state.attached ? 1.0 : 0.0);
  f.push_back((ws.half_width - here.lateral) / ws.half_width);
  f.push_back((ws.half_width + here.lateral) / ws.half_width);
  push2((state.cargo - state.bead) / kRelativeScale);
  push2((left - state.bead) / kRelativeScale);
  push2((right - state.bead) / kRelativeScale);
  push2(here.tangent);
  if (with_grid) obs.grid = rasterize(state, ws);
  return obs;
}

SuccessFlags check_success(const SimState& state, const WorkspaceSpec& ws) {
  SuccessFlags s;
  s.approach_done = state.ever_attached || state.attached;
  s.transport_done = (state.cargo - ws.goal_center).norm() <= ws.goal_radius;
  return s;
}

SimState initial_state_from_unit(const WorkspaceSpec& ws, const std::array<double, 6>& u) {
  auto span = [](double unit, double half) { return (2.0 * unit - 1.0) * half; };
  const Vec2 t0 = ws.tangent_at(0.0);
  const Vec2 n0(-t0.y(), t0.x());

  SimState s;
  s.bead = ws.bead_start + n0 * span(u[0], 10.0);
  const double cargo_arc = ws.cargo_start_arc + span(u[1], 40.0);
  const Vec2 tc = ws.tangent_at(cargo_arc);
  s.cargo = ws.point_at(cargo_arc) + Vec2(-tc.y(), tc.x()) * span(u[2], 10.0);
  const Vec2 park = ws.bead_start - 40.0 * t0;
  const Vec2 left = park + n0 * (200.0 + span(u[3], 10.0)) + t0 * span(u[5], 10.0);
  const Vec2 right = park - n0 * (200.0 + span(u[4], 10.0)) + t0 * span(u[5], 10.0);
  s.arms = Vec4(left.x(), left.y(), right.x(), right.y());
  return s;
}

SimState recovery_state_from_draws(const WorkspaceSpec& ws, const SimConfig& cfg, double arm_std,
                                   const std::array<double, 4>& u, const Vec4& normals) {
  if (!(arm_std >= 0.0)) throw std::invalid_argument("recovery state: arm_std must be >= 0");
  auto span = [](double unit, double half) { return (2.0 * unit - 1.0) * half; };
  const double arc = u[0] * std::max(ws.arc_length() - kRecoveryTailArc, 0.0);
  const Vec2 t = ws.tangent_at(arc);
  const Vec2 n(-t.y(), t.x());

  SimState s;
  s.bead = ws.point_at(arc) + n * span(u[1], 15.0);
  if (arc < ws.cargo_start_arc - 70.0) {
    const double cargo_arc = ws.cargo_start_arc + span(u[2], 40.0);
    const Vec2 tc = ws.tangent_at(cargo_arc);
    s.cargo = ws.point_at(cargo_arc) + Vec2(-tc.y(), tc.x()) * span(u[3], 10.0);
  } else {
    s.cargo_offset = t * cfg.attach_offset;
    s.cargo = s.bead + s.cargo_offset;
    s.attached = true;
    s.ever_attached = true;
  }

  // formation the expert steers towards, read off an unclipped expert step
  SimConfig free = cfg;
  free.max_arm_delta = 1e9;
  s.arms = expert_action(s, ws, free).action;
  for (int k = 0; k < 4; ++k) s.arms[k] += arm_std * normals[k];
  for (int k = 0; k < 2; ++k) {
    s.arms[2 * k] = std::clamp(s.arms[2 * k], 0.0, ws.width);
    s.arms[2 * k + 1] = std::clamp(s.arms[2 * k + 1], 0.0, ws.height);
  }
  return s;
}

}  // namespace bimag
