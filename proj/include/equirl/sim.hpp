#pragma once

// Top-down manipulation simulator with rotationally invariant dynamics.
// Everything geometric is computed from relative vectors and distances, the
// workspace is a disk, and bounds are enforced radially, so rotating a state
// about the workspace center commutes with stepping. Rewards are sparse {0,1}
// and task predicates use distances only.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"
#include "group.hpp"

namespace equirl {

enum class Task { pull, pick, stack };

inline const char* task_name(Task t) {
  switch (t) {
    case Task::pull: return "pull";
    case Task::pick: return "pick";
    default: return "stack";
  }
}

inline Task task_from_name(const std::string& s) {
  if (s == "pull") return Task::pull;
  if (s == "pick") return Task::pick;
  require(s == "stack", "unknown task '", s, "'");
  return Task::stack;
}

enum class ShapeKind { disk, rectangle };

// size is the disk radius or the rectangle's long half-extent (short side is
// 0.6 * size). level 0 rests on the table, level 1 on top of another object.
struct ObjectState {
  ShapeKind shape = ShapeKind::disk;
  double x = 0, y = 0, theta = 0;
  double size = 0.02;
  int level = 0;
};

struct GripperState {
  double x = 0, y = 0;
  double z = 0.12;
  double theta = 0;
  double aperture = 1.0;  // 0 closed .. 1 open
  int holding = -1;       // object index or -1
};

struct WorldState {
  Task task = Task::pick;
  GripperState gripper;
  std::vector<ObjectState> objects;
  int step_count = 0;
};

// Deltas are absolute meters/radians; lambda is an absolute aperture command.
struct Action {
  double lambda = 1.0;
  double dx = 0, dy = 0;
  double dz = 0;
  double dtheta = 0;
};

// Geometry and dynamics constants.
namespace simc {
inline constexpr double kWorkspaceR = 0.20;   // gripper stays in this disk
inline constexpr double kObjectR = 0.18;      // object centers stay inside
inline constexpr double kZMin = 0.0, kZMax = 0.24;
inline constexpr double kObjectH = 0.03;      // height of one stack level
inline constexpr double kFingerR = 0.006;
inline constexpr double kLiftZ = 0.095;       // pick success height
inline constexpr double kGraspSlack = 0.005;  // vertical slack for grasping
inline constexpr double kPullContact = 0.005; // pull success gap
inline constexpr int kStepLimit = 50;
inline constexpr double kFov = 0.6;
// half-opening between the fingers as a function of aperture
inline double half_opening(double ap) { return 0.01 + 0.035 * ap; }
}  // namespace simc

// Pinned action sets. Discrete actions snap to the nearest choice; the xy
// choice grid is closed under quarter turns. Continuous bounds clamp.
struct ActionSpaceSpec {
  bool discrete = true;
  std::vector<double> lambda_choices, xy_choices, z_choices, theta_choices;
  double lambda_lo = 0, lambda_hi = 1;
  double xy_bound = 0, z_bound = 0, theta_bound = 0;

  static ActionSpaceSpec discrete_spec() {
    ActionSpaceSpec s;
    s.discrete = true;
    s.lambda_choices = {1.0, 0.0};  // open, close
    s.xy_choices = {-0.02, 0.0, 0.02};
    s.z_choices = {-0.02, 0.0, 0.02};
    s.theta_choices = {-kPi / 16, 0.0, kPi / 16};
    return s;
  }
  static ActionSpaceSpec continuous_spec() {
    ActionSpaceSpec s;
    s.discrete = false;
    s.lambda_lo = 0.0;
    s.lambda_hi = 1.0;
    s.xy_bound = 0.05;
    s.z_bound = 0.05;
    s.theta_bound = kPi / 8;
    return s;
  }

  Action clamp(const Action& a) const {
    auto nearest = [](const std::vector<double>& c, double v) {
      double best = c[0];
      for (double x : c)
        if (std::abs(x - v) < std::abs(best - v)) best = x;
      return best;
    };
    Action out = a;
    if (discrete) {
      out.lambda = nearest(lambda_choices, a.lambda);
      out.dx = nearest(xy_choices, a.dx);
      out.dy = nearest(xy_choices, a.dy);
      out.dz = nearest(z_choices, a.dz);
      out.dtheta = nearest(theta_choices, a.dtheta);
    } else {
      out.lambda = std::clamp(a.lambda, lambda_lo, lambda_hi);
      out.dx = std::clamp(a.dx, -xy_bound, xy_bound);
      out.dy = std::clamp(a.dy, -xy_bound, xy_bound);
      out.dz = std::clamp(a.dz, -z_bound, z_bound);
      out.dtheta = std::clamp(a.dtheta, -theta_bound, theta_bound);
    }
    return out;
  }
};

inline double wrap_angle(double t) {
  while (t > kPi) t -= 2 * kPi;
  while (t <= -kPi) t += 2 * kPi;
  return t;
}

namespace detail {

inline void radial_clamp(double& x, double& y, double r) {
  double d = std::sqrt(x * x + y * y);
  if (d > r) {
    double f = r / d;
    x *= f;
    y *= f;
  }
}

inline double object_top(const ObjectState& o) { return simc::kObjectH * (o.level + 1); }

}  // namespace detail

// Rotates every pose about the workspace center; gripper-relative scalars
// (z, aperture, holding) are untouched. Quarter turns are exact sign/swap
// arithmetic via rotate_xy.
inline WorldState rotate_state(double theta, const WorldState& s) {
  WorldState out = s;
  rotate_xy(theta, out.gripper.x, out.gripper.y);
  out.gripper.theta = wrap_angle(out.gripper.theta + theta);
  for (auto& o : out.objects) {
    rotate_xy(theta, o.x, o.y);
    o.theta = wrap_angle(o.theta + theta);
  }
  return out;
}

inline WorldState rotate_state(const GroupElement& g, const WorldState& s) {
  return rotate_state(g.angle(), s);
}

// Rotates an action's planar delta; aperture, z and yaw deltas are invariant.
inline Action rotate_action(double theta, const Action& a) {
  Action out = a;
  rotate_xy(theta, out.dx, out.dy);
  return out;
}

// Sparse task predicate on a state. Distances only, so invariant under
// rotate_state exactly.
inline double task_reward(const WorldState& s) {
  const auto& g = s.gripper;
  switch (s.task) {
    case Task::pull: {
      const auto& a = s.objects[0];
      const auto& b = s.objects[1];
      double dx = a.x - b.x, dy = a.y - b.y;
      double gap = a.size + b.size + simc::kPullContact;
      return (dx * dx + dy * dy <= gap * gap) ? 1.0 : 0.0;
    }
    case Task::pick:
      return (g.holding >= 0 && g.z >= simc::kLiftZ) ? 1.0 : 0.0;
    default: {  // stack: top block resting on the other, gripper empty
      if (g.holding >= 0) return 0.0;
      const auto& a = s.objects[0];
      const auto& b = s.objects[1];
      const ObjectState& top = a.level > b.level ? a : b;
      const ObjectState& base = a.level > b.level ? b : a;
      if (top.level != base.level + 1) return 0.0;
      double dx = top.x - base.x, dy = top.y - base.y;
      return (dx * dx + dy * dy <= base.size * base.size) ? 1.0 : 0.0;
    }
  }
}

struct StepResult {
  WorldState state;
  double reward = 0;
  bool done = false;
};

// Kinematic step: integrate the gripper deltas, carry a held object, handle
// grasp/release on aperture change, push free objects out of the finger
// disks, clamp radially, then evaluate the sparse reward. Pure function.
inline StepResult step(const WorldState& s, const Action& raw) {
  Action a = raw;
  a.lambda = std::clamp(a.lambda, 0.0, 1.0);
  a.dx = std::clamp(a.dx, -0.05, 0.05);
  a.dy = std::clamp(a.dy, -0.05, 0.05);
  a.dz = std::clamp(a.dz, -0.05, 0.05);
  a.dtheta = std::clamp(a.dtheta, -kPi / 8, kPi / 8);

  StepResult res;
  res.state = s;
  WorldState& w = res.state;
  GripperState& g = w.gripper;

  double ap_old = g.aperture;
  g.x += a.dx;
  g.y += a.dy;
  detail::radial_clamp(g.x, g.y, simc::kWorkspaceR);
  g.z = std::clamp(g.z + a.dz, simc::kZMin, simc::kZMax);
  g.theta = wrap_angle(g.theta + a.dtheta);
  g.aperture = a.lambda;

  if (g.holding >= 0) {
    w.objects[g.holding].x = g.x;
    w.objects[g.holding].y = g.y;
  }

  // grasp: closing sweeps the fingers inward and captures the nearest object
  // whose center sits inside the pre-close opening at a reachable height
  if (g.aperture < ap_old && g.holding < 0) {
    double capture = simc::half_opening(ap_old);
    int best = -1;
    double best_d2 = capture * capture;
    for (std::size_t i = 0; i < w.objects.size(); ++i) {
      const auto& o = w.objects[i];
      if (g.z > detail::object_top(o) + simc::kGraspSlack) continue;
      if (o.shape == ShapeKind::rectangle) {
        // fingers must straddle the long sides
        double rel = std::abs(wrap_angle(g.theta - o.theta));
        rel = std::min(rel, kPi - rel);
        if (rel > kPi / 8) continue;
      }
      double dx = o.x - g.x, dy = o.y - g.y, d2 = dx * dx + dy * dy;
      if (d2 <= best_d2) {
        best_d2 = d2;
        best = static_cast<int>(i);
      }
    }
    if (best >= 0) {
      g.holding = best;
      w.objects[best].x = g.x;
      w.objects[best].y = g.y;
    }
  }

  // release: opening drops the held object at the gripper; it lands on top of
  // an object whose footprint covers the drop point, else on the table
  if (g.aperture > 0.5 && g.holding >= 0) {
    int held = g.holding;
    g.holding = -1;
    auto& o = w.objects[held];
    o.level = 0;
    for (std::size_t i = 0; i < w.objects.size(); ++i) {
      if (static_cast<int>(i) == held) continue;
      const auto& u = w.objects[i];
      double dx = o.x - u.x, dy = o.y - u.y;
      if (dx * dx + dy * dy <= u.size * u.size) o.level = u.level + 1;
    }
  }

  // pushing: each finger is a small disk; free table-level objects overlap-
  // resolve away from it along the center line (distance geometry only)
  double h = simc::half_opening(g.aperture);
  double fdx = std::cos(g.theta) * h, fdy = std::sin(g.theta) * h;
  for (int f = 0; f < 2; ++f) {
    double fx = g.x + (f == 0 ? fdx : -fdx), fy = g.y + (f == 0 ? fdy : -fdy);
    for (std::size_t i = 0; i < w.objects.size(); ++i) {
      if (static_cast<int>(i) == g.holding) continue;
      auto& o = w.objects[i];
      if (o.level != 0) continue;
      if (g.z > detail::object_top(o)) continue;
      double dx = o.x - fx, dy = o.y - fy;
      double d2 = dx * dx + dy * dy;
      double reach = o.size + simc::kFingerR;
      if (d2 >= reach * reach || d2 < 1e-24) continue;
      double d = std::sqrt(d2);
      o.x = fx + dx / d * reach;
      o.y = fy + dy / d * reach;
    }
  }
  for (auto& o : w.objects) detail::radial_clamp(o.x, o.y, simc::kObjectR);
  if (g.holding >= 0) {
    w.objects[g.holding].x = g.x;
    w.objects[g.holding].y = g.y;
  }

  w.step_count += 1;
  res.reward = task_reward(w);
  res.done = res.reward == 1.0 || w.step_count >= simc::kStepLimit;
  return res;
}

// Same-seed-same-state reset. Objects are placed uniformly in the inner disk,
// collision-free; the pull pair lands 8..16 cm apart.
inline WorldState reset(Task task, std::uint64_t seed) {
  Rng rng(seed);
  auto sample_disk = [&](double r) {
    for (;;) {
      double x = uniform(rng, -r, r), y = uniform(rng, -r, r);
      if (x * x + y * y <= r * r) return std::pair<double, double>(x, y);
    }
  };
  WorldState s;
  s.task = task;
  s.gripper = GripperState{};
  int count = task == Task::pick ? 1 : 2;
  for (int tries = 0; tries < 100000; ++tries) {
    s.objects.clear();
    for (int i = 0; i < count; ++i) {
      ObjectState o;
      auto [x, y] = sample_disk(0.15);
      o.x = x;
      o.y = y;
      o.theta = uniform(rng, -kPi, kPi);
      if (task == Task::pick && uniform(rng, 0.0, 1.0) < 0.5) {
        o.shape = ShapeKind::rectangle;
        o.size = 0.025;
      } else {
        o.shape = ShapeKind::disk;
        o.size = 0.02;
      }
      s.objects.push_back(o);
    }
    bool ok = true;
    if (count == 2) {
      double dx = s.objects[0].x - s.objects[1].x, dy = s.objects[0].y - s.objects[1].y;
      double d = std::sqrt(dx * dx + dy * dy);
      double min_gap = s.objects[0].size + s.objects[1].size + 0.01;
      ok = d >= min_gap && (task != Task::pull || (d >= 0.08 && d <= 0.16));
    }
    if (ok) return s;
  }
  fail("reset could not place objects");
}

// Orthographic depth rendered analytically at pixel centers over a square
// field of view centered on the gripper, axes world-aligned. Channel 0 is
// gripper height minus surface height; channel 1 is the holding flag.
// Quarter turns permute the pixel-center offsets exactly.
inline FeatureMap<double> render(const WorldState& s, int n = 4, int size = 64) {
  FieldType field = FieldType::trivials(n, 2);
  FeatureMap<double> out(field, static_cast<std::size_t>(size), static_cast<std::size_t>(size));
  const auto& g = s.gripper;
  double delta = simc::kFov / size;
  double half = (size - 1) / 2.0;
  double h = simc::half_opening(g.aperture);
  double fdx = std::cos(g.theta) * h, fdy = std::sin(g.theta) * h;
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      double wx = g.x + (j - half) * delta;
      double wy = g.y + (half - i) * delta;
      double height = 0.0;
      for (std::size_t oi = 0; oi < s.objects.size(); ++oi) {
        const auto& o = s.objects[oi];
        bool held = static_cast<int>(oi) == g.holding;
        double top = held ? g.z : detail::object_top(o);
        if (top <= height) continue;
        double dx = wx - o.x, dy = wy - o.y;
        bool inside;
        if (o.shape == ShapeKind::disk) {
          inside = dx * dx + dy * dy <= o.size * o.size;
        } else {
          double c = std::cos(o.theta), si = std::sin(o.theta);
          double u = c * dx + si * dy, v = -si * dx + c * dy;
          inside = std::abs(u) <= o.size && std::abs(v) <= 0.6 * o.size;
        }
        if (inside) height = top;
      }
      for (int f = 0; f < 2; ++f) {
        double dx = wx - (g.x + (f == 0 ? fdx : -fdx));
        double dy = wy - (g.y + (f == 0 ? fdy : -fdy));
        if (dx * dx + dy * dy <= simc::kFingerR * simc::kFingerR) height = std::max(height, g.z);
      }
      out.at(0, i, j) = g.z - height;
      out.at(1, i, j) = g.holding >= 0 ? 1.0 : 0.0;
    }
  return out;
}

// Deterministic waypoint controller per task. All decisions are made from
// relative vectors and invariant scalars, so it commutes with rotate_state.
// discrete_mode quantizes moves onto the +-0.02 grid with a dead band.
inline Action expert_action(const WorldState& s, bool discrete_mode) {
  const auto& g = s.gripper;
  double xy_step = discrete_mode ? 0.02 : 0.05;
  // dead band must exceed half the discrete step or alignment ping-pongs
  double dead = discrete_mode ? 0.0101 : 0.005;
  auto toward = [&](double tx, double ty, Action& a) {
    double dx = tx - g.x, dy = ty - g.y;
    if (discrete_mode) {
      a.dx = dx > dead ? xy_step : (dx < -dead ? -xy_step : 0.0);
      a.dy = dy > dead ? xy_step : (dy < -dead ? -xy_step : 0.0);
    } else {
      a.dx = std::clamp(dx, -xy_step, xy_step);
      a.dy = std::clamp(dy, -xy_step, xy_step);
    }
    return std::abs(dx) <= dead && std::abs(dy) <= dead;
  };
  auto z_to = [&](double tz, Action& a) {
    double dz = tz - g.z;
    double bound = discrete_mode ? 0.02 : 0.05;
    if (discrete_mode)
      a.dz = dz > 1e-9 ? bound : (dz < -1e-9 ? -bound : 0.0);
    else
      a.dz = std::clamp(dz, -bound, bound);
    return std::abs(dz) <= 1e-9;
  };

  Action a;
  a.lambda = g.aperture > 0.5 ? 1.0 : 0.0;  // hold the current grip by default

  if (s.task == Task::pull && g.holding == 0) {
    // drag the held block to the other one; the contact predicate fires on
    // center distance, before the fingers could shove the target block
    const auto& B = s.objects[1];
    toward(B.x, B.y, a);
    return a;
  }

  int target = 0;
  if (s.task == Task::stack && g.holding == 0) target = 1;

  if (g.holding < 0) {
    const auto& o = s.objects[target];
    bool aligned = toward(o.x, o.y, a);
    if (o.shape == ShapeKind::rectangle) {
      double rel = wrap_angle(o.theta - g.theta);
      while (rel > kPi / 2) rel -= kPi;   // rectangle is symmetric under 180 deg
      while (rel <= -kPi / 2) rel += kPi;
      if (discrete_mode)
        a.dtheta = rel > kPi / 32 ? kPi / 16 : (rel < -kPi / 32 ? -kPi / 16 : 0.0);
      else
        a.dtheta = std::clamp(rel, -kPi / 8, kPi / 8);
      aligned = aligned && std::abs(rel) <= kPi / 8;
    }
    if (!aligned) return a;
    if (!(g.z <= 0.02 + 1e-9)) {
      z_to(0.02, a);
      return a;
    }
    a.lambda = 0.0;  // close over the object
    return a;
  }

  if (s.task == Task::pick) {
    z_to(0.12, a);
    return a;
  }

  // stack: carry block 0 above block 1, then open
  const auto& base = s.objects[1];
  if (g.z < 0.06 - 1e-9) {
    z_to(0.06, a);
    return a;
  }
  bool over = toward(base.x, base.y, a);
  if (over) a.lambda = 1.0;
  return a;
}

// Line-delimited episode recording: states, actions and rewards, 17
// significant digits so replays are bit exact.
struct EpisodeRecord {
  Task task = Task::pick;
  std::vector<WorldState> states;   // length T+1
  std::vector<Action> actions;      // length T
  std::vector<double> rewards;      // length T
  std::vector<bool> dones;          // length T
};

inline void save_state_line(const WorldState& s, std::ostream& os) {
  os << "state " << std::setprecision(17) << s.gripper.x << ' ' << s.gripper.y << ' '
     << s.gripper.z << ' ' << s.gripper.theta << ' ' << s.gripper.aperture << ' '
     << s.gripper.holding << ' ' << s.step_count;
  for (const auto& o : s.objects)
    os << ' ' << (o.shape == ShapeKind::disk ? "disk" : "rect") << ' ' << o.x << ' ' << o.y << ' '
       << o.theta << ' ' << o.size << ' ' << o.level;
  os << '\n';
}

inline void save_episode(const EpisodeRecord& ep, std::ostream& os) {
  require(ep.states.size() == ep.actions.size() + 1 && ep.actions.size() == ep.rewards.size() &&
              ep.rewards.size() == ep.dones.size(),
          "inconsistent episode lengths");
  os << "episode " << task_name(ep.task) << ' ' << ep.states.front().objects.size() << ' '
     << ep.actions.size() << '\n';
  for (std::size_t t = 0; t < ep.actions.size(); ++t) {
    save_state_line(ep.states[t], os);
    const auto& a = ep.actions[t];
    os << "action " << std::setprecision(17) << a.lambda << ' ' << a.dx << ' ' << a.dy << ' '
       << a.dz << ' ' << a.dtheta << '\n';
    os << "reward " << std::setprecision(17) << ep.rewards[t] << ' ' << (ep.dones[t] ? 1 : 0)
       << '\n';
  }
  save_state_line(ep.states.back(), os);
  os << "end\n";
}

inline WorldState load_state_line(std::istream& is, Task task, std::size_t num_objects) {
  std::string tag;
  require(static_cast<bool>(is >> tag) && tag == "state", "expected state line");
  WorldState s;
  s.task = task;
  require(static_cast<bool>(is >> s.gripper.x >> s.gripper.y >> s.gripper.z >> s.gripper.theta >>
                            s.gripper.aperture >> s.gripper.holding >> s.step_count),
          "truncated state line");
  for (std::size_t i = 0; i < num_objects; ++i) {
    ObjectState o;
    std::string shape;
    require(static_cast<bool>(is >> shape >> o.x >> o.y >> o.theta >> o.size >> o.level),
            "truncated object fields");
    require(shape == "disk" || shape == "rect", "unknown shape '", shape, "'");
    o.shape = shape == "disk" ? ShapeKind::disk : ShapeKind::rectangle;
    s.objects.push_back(o);
  }
  return s;
}

inline EpisodeRecord load_episode(std::istream& is) {
  std::string tag, tname;
  std::size_t num_objects = 0, steps = 0;
  require(static_cast<bool>(is >> tag) && tag == "episode", "expected episode header");
  require(static_cast<bool>(is >> tname >> num_objects >> steps), "truncated episode header");
  EpisodeRecord ep;
  ep.task = task_from_name(tname);
  for (std::size_t t = 0; t < steps; ++t) {
    ep.states.push_back(load_state_line(is, ep.task, num_objects));
    double lam, dx, dy, dz, dth, r;
    int dn;
    require(static_cast<bool>(is >> tag) && tag == "action", "expected action line");
    require(static_cast<bool>(is >> lam >> dx >> dy >> dz >> dth), "truncated action line");
    ep.actions.push_back(Action{lam, dx, dy, dz, dth});
    require(static_cast<bool>(is >> tag) && tag == "reward", "expected reward line");
    require(static_cast<bool>(is >> r >> dn), "truncated reward line");
    ep.rewards.push_back(r);
    ep.dones.push_back(dn != 0);
  }
  ep.states.push_back(load_state_line(is, ep.task, num_objects));
  require(static_cast<bool>(is >> tag) && tag == "end", "missing end marker");
  return ep;
}

// Runs the scripted expert from a seeded reset; returns the recorded episode.
inline EpisodeRecord run_expert_episode(Task task, std::uint64_t seed, bool discrete_mode) {
  EpisodeRecord ep;
  ep.task = task;
  WorldState s = reset(task, seed);
  ep.states.push_back(s);
  for (;;) {
    Action a = expert_action(s, discrete_mode);
    auto res = step(s, a);
    ep.actions.push_back(a);
    ep.rewards.push_back(res.reward);
    ep.dones.push_back(res.done);
    ep.states.push_back(res.state);
    s = res.state;
    if (res.done) return ep;
  }
}

}  // namespace equirl
