#pragma once

// Planar overdamped simulator for two magnet-bearing arms steering a
// magnetic bead (and the cargo it picks up) through a corridor phantom.
// All lengths are in ticks; one tick is one pixel of the 1280x960 camera frame.

#include "bimag/rng.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bimag {

using Vec2 = Eigen::Vector2d;
using Vec4 = Eigen::Vector4d;

enum class TaskId : int { A = 0, B = 1, C = 2 };
inline constexpr std::array<TaskId, 3> kAllTasks{TaskId::A, TaskId::B, TaskId::C};

std::string task_name(TaskId task);
TaskId parse_task(std::string_view name);

enum class Phase : int { Approach = 0, Transport = 1 };

std::string phase_name(Phase phase);
Phase parse_phase(std::string_view name);
Phase phase_from_index(int index);

class InvalidAction : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct CenterlinePoint {
  double arc = 0.0;      // arc length of the closest centerline point
  double lateral = 0.0;  // signed offset, positive on the left of the tangent
  Vec2 closest = Vec2::Zero();
  Vec2 tangent = Vec2::UnitX();
  double distance = 0.0;  // |p - closest|
};

struct WorkspaceSpec {
  TaskId task = TaskId::A;
  double width = 1280.0;
  double height = 960.0;
  std::vector<Vec2> centerline;
  double half_width = 45.0;
  Vec2 bead_start = Vec2::Zero();
  Vec2 cargo_start = Vec2::Zero();
  double cargo_start_arc = 0.0;
  Vec2 goal_center = Vec2::Zero();
  double goal_radius = 40.0;
  double cumulative_turn_deg = 0.0;

  double arc_length() const;
  Vec2 point_at(double arc) const;
  Vec2 tangent_at(double arc) const;
  CenterlinePoint project(const Vec2& p) const;
  bool inside_corridor(const Vec2& p, double tol = 1e-9) const;
  bool inside_bounds(const Vec2& p) const;
  Vec2 clamp_to_corridor(const Vec2& p) const;
};

WorkspaceSpec build_workspace(TaskId task);

struct SimConfig {
  double dt = 0.1;                 // seconds per step (10 Hz)
  double coupling = 2.0e6;         // c, force scale per magnet
  double force_exponent = 2.0;     // q
  double mobility = 1.0;           // ticks per force-second
  double max_arm_delta = 50.0;     // ticks per step, per component
  double attach_radius = 20.0;     // bead-cargo capture distance
  double attach_offset = 12.0;     // held bead-cargo distance while attached
  double slip_threshold = 11.0;    // bead displacement per step that breaks the hold
  double min_distance = 1.0;       // epsilon_d
  double brownian_std = 0.3;       // ticks per step, per axis
  std::uint64_t rng_seed = 0;

  void validate() const;
};

struct SimState {
  Vec4 arms = Vec4::Zero();  // [x_L, y_L, x_R, y_R]
  Vec2 bead = Vec2::Zero();
  Vec2 cargo = Vec2::Zero();
  bool attached = false;
  bool ever_attached = false;       // latched approach success
  Vec2 cargo_offset = Vec2::Zero(); // cargo - bead while attached
  long t = 0;
  int slips = 0;
};

struct ForceResult {
  Vec2 force = Vec2::Zero();
  bool saturated = false;
};

ForceResult magnetic_force(const Vec4& arms, const Vec2& bead, const SimConfig& cfg);

SimState step_sim(const SimState& state, const Vec4& action, const WorkspaceSpec& ws,
                  const SimConfig& cfg);

// Applies the per-component delta clip the simulator uses.
Vec4 clip_action(const Vec4& action, const SimConfig& cfg);

struct ExpertParams {
  double lookahead = 60.0;     // pure-pursuit distance along the centerline
  double pair_forward = 160.0; // distance of the arm-pair midpoint ahead of the bead
  double pair_half_span = 120.0;
  double behind_margin = 5.0;  // a loose cargo this far behind the bead turns the pursuit around
};

struct ExpertDecision {
  Vec4 action = Vec4::Zero();
  Phase phase = Phase::Approach;
};

ExpertDecision expert_action(const SimState& state, const WorkspaceSpec& ws, const SimConfig& cfg,
                             const ExpertParams& params = {});

// Observation layout. Positions are mapped to roughly [-1, 1] by the workspace
// scale; relative vectors and clearances use kRelativeScale.
inline constexpr int kFeatureDim = 19;
inline constexpr int kGridSize = 32;
inline constexpr int kGridChannels = 4;
inline constexpr int kGridCells = kGridSize * kGridSize * kGridChannels;
inline constexpr double kWorkspaceScale = 640.0;
inline constexpr double kFilletRadius = 100.0;  // corridor corners are rounded with this radius
inline constexpr double kFilletStepDeg = 5.0;
inline constexpr double kRecoveryTailArc = 60.0;  // recovery starts leave at least this much corridor
inline constexpr double kRelativeScale = 200.0;

enum class GridChannel : int { Walls = 0, Bead = 1, Cargo = 2, Arms = 3 };

struct Observation {
  std::vector<double> features;       // kFeatureDim entries
  std::optional<std::vector<double>> grid;  // channel-major, kGridCells entries in [0, 1]
};

Observation observe(const SimState& state, const WorkspaceSpec& ws, bool with_grid = false);
std::vector<double> rasterize(const SimState& state, const WorkspaceSpec& ws);
int grid_index(GridChannel channel, int row, int col);
std::pair<int, int> grid_cell(const Vec2& p, const WorkspaceSpec& ws);

// Arm state normalized into the policy's input range.
Vec4 normalize_state(const Vec4& arms);

struct SuccessFlags {
  bool approach_done = false;
  bool transport_done = false;
};

SuccessFlags check_success(const SimState& state, const WorkspaceSpec& ws);

// Randomized episode start: bead near the corridor entrance, cargo perturbed
// around its nominal position, arms parked on both sides of the entrance.
template <typename Rng>
SimState sample_initial_state(const WorkspaceSpec& ws, Rng& rng);

SimState initial_state_from_unit(const WorkspaceSpec& ws, const std::array<double, 6>& u);

// Mid-course start used for recovery demonstrations: bead somewhere along the
// corridor (cargo already attached once the bead is past the cargo's nominal
// position), arms at the expert's formation plus independent N(0, arm_std)
// offsets per coordinate.
template <typename Rng>
SimState sample_recovery_state(const WorkspaceSpec& ws, const SimConfig& cfg, double arm_std, Rng& rng);

SimState recovery_state_from_draws(const WorkspaceSpec& ws, const SimConfig& cfg, double arm_std,
                                   const std::array<double, 4>& u, const Vec4& normals);

template <typename Rng>
SimState sample_initial_state(const WorkspaceSpec& ws, Rng& rng) {
  std::array<double, 6> u{};
  for (auto& v : u) {
    v = static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
  }
  return initial_state_from_unit(ws, u);
}

template <typename Rng>
SimState sample_recovery_state(const WorkspaceSpec& ws, const SimConfig& cfg, double arm_std, Rng& rng) {
  std::array<double, 4> u{};
  for (auto& v : u) {
    v = static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
  }
  Vec4 normals;
  for (int k = 0; k < 4; ++k) normals[k] = standard_normal(rng);
  return recovery_state_from_draws(ws, cfg, arm_std, u, normals);
}

}  // namespace bimag
