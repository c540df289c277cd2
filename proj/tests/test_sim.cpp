#include <equirl/sim.hpp>

#include <gtest/gtest.h>

#include <sstream>

using namespace equirl;

namespace {

bool states_equal_exact(const WorldState& a, const WorldState& b) {
  if (a.task != b.task || a.step_count != b.step_count) return false;
  if (a.gripper.x != b.gripper.x || a.gripper.y != b.gripper.y || a.gripper.z != b.gripper.z ||
      a.gripper.theta != b.gripper.theta || a.gripper.aperture != b.gripper.aperture ||
      a.gripper.holding != b.gripper.holding)
    return false;
  if (a.objects.size() != b.objects.size()) return false;
  for (std::size_t i = 0; i < a.objects.size(); ++i) {
    const auto& u = a.objects[i];
    const auto& v = b.objects[i];
    if (u.shape != v.shape || u.x != v.x || u.y != v.y || u.theta != v.theta ||
        u.size != v.size || u.level != v.level)
      return false;
  }
  return true;
}

// max continuous-coordinate deviation; angle channels compared modulo 2 pi
double state_deviation(const WorldState& a, const WorldState& b) {
  double d = 0;
  d = std::max(d, std::abs(a.gripper.x - b.gripper.x));
  d = std::max(d, std::abs(a.gripper.y - b.gripper.y));
  d = std::max(d, std::abs(a.gripper.z - b.gripper.z));
  d = std::max(d, std::abs(wrap_angle(a.gripper.theta - b.gripper.theta)));
  d = std::max(d, std::abs(a.gripper.aperture - b.gripper.aperture));
  if (a.gripper.holding != b.gripper.holding) d = std::max(d, 1.0);
  if (a.objects.size() != b.objects.size()) return 1.0;
  for (std::size_t i = 0; i < a.objects.size(); ++i) {
    d = std::max(d, std::abs(a.objects[i].x - b.objects[i].x));
    d = std::max(d, std::abs(a.objects[i].y - b.objects[i].y));
    d = std::max(d, std::abs(wrap_angle(a.objects[i].theta - b.objects[i].theta)));
    if (a.objects[i].level != b.objects[i].level) d = std::max(d, 1.0);
  }
  return d;
}

Action random_action(Rng& rng) {
  Action a;
  a.lambda = uniform(rng, 0.0, 1.0) < 0.5 ? 0.0 : 1.0;
  a.dx = uniform(rng, -0.05, 0.05);
  a.dy = uniform(rng, -0.05, 0.05);
  a.dz = uniform(rng, -0.05, 0.05);
  a.dtheta = uniform(rng, -kPi / 8, kPi / 8);
  return a;
}

Task random_task(Rng& rng) {
  double u = uniform(rng, 0.0, 3.0);
  return u < 1.0 ? Task::pull : (u < 2.0 ? Task::pick : Task::stack);
}

// a mix of random-rollout states and expert-rollout prefixes (those reach
// holding/stacked configurations that pure random actions rarely do)
std::vector<WorldState> diverse_states(int count, Rng& rng) {
  std::vector<WorldState> out;
  while (static_cast<int>(out.size()) < count) {
    Task task = random_task(rng);
    std::uint64_t seed = rng();
    if (uniform(rng, 0.0, 1.0) < 0.5) {
      WorldState s = reset(task, seed);
      int burn = uniform_int(rng, 0, 5);
      for (int i = 0; i < burn; ++i) s = step(s, random_action(rng)).state;
      out.push_back(s);
    } else {
      auto ep = run_expert_episode(task, seed, uniform(rng, 0.0, 1.0) < 0.5);
      out.push_back(ep.states[uniform_int(rng, 0, static_cast<int>(ep.states.size()) - 1)]);
    }
  }
  return out;
}

TEST(Reset, SameSeedIdentical) {
  for (Task t : {Task::pull, Task::pick, Task::stack})
    EXPECT_TRUE(states_equal_exact(reset(t, 7), reset(t, 7)));
  EXPECT_FALSE(states_equal_exact(reset(Task::pick, 7), reset(Task::pick, 8)));
}

TEST(Reset, BoundsAndTaskInventory) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    Task t = random_task(rng);
    WorldState s = reset(t, i);
    EXPECT_EQ(s.objects.size(), t == Task::pick ? 1u : 2u);
    for (const auto& o : s.objects) {
      EXPECT_LE(std::sqrt(o.x * o.x + o.y * o.y), simc::kObjectR + 1e-12);
      EXPECT_EQ(o.level, 0);
    }
    EXPECT_EQ(s.gripper.holding, -1);
    EXPECT_EQ(s.gripper.aperture, 1.0);
    if (t == Task::pull) {
      double dx = s.objects[0].x - s.objects[1].x, dy = s.objects[0].y - s.objects[1].y;
      double d = std::sqrt(dx * dx + dy * dy);
      EXPECT_GE(d, 0.08);
      EXPECT_LE(d, 0.16);
    }
  }
}

TEST(Step, DeltaIntegrationExact) {
  WorldState s = reset(Task::pick, 3);
  Action a;
  a.lambda = 1.0;
  a.dx = 0.02;
  auto r = step(s, a);
  EXPECT_DOUBLE_EQ(r.state.gripper.x, s.gripper.x + 0.02);
  EXPECT_DOUBLE_EQ(r.state.gripper.y, s.gripper.y);
  Action b;
  b.lambda = 1.0;
  b.dz = -0.02;
  b.dtheta = kPi / 16;
  auto r2 = step(s, b);
  EXPECT_DOUBLE_EQ(r2.state.gripper.z, s.gripper.z - 0.02);
  EXPECT_DOUBLE_EQ(r2.state.gripper.theta, s.gripper.theta + kPi / 16);
}

TEST(Step, ClampsActionAndWorkspace) {
  WorldState s = reset(Task::pick, 4);
  Action a;
  a.lambda = 2.5;  // out of range
  a.dx = 9.0;
  a.dy = -9.0;
  a.dz = 9.0;
  WorldState cur = s;
  for (int i = 0; i < 30; ++i) cur = step(cur, a).state;
  double r = std::sqrt(cur.gripper.x * cur.gripper.x + cur.gripper.y * cur.gripper.y);
  EXPECT_LE(r, simc::kWorkspaceR + 1e-12);
  EXPECT_LE(cur.gripper.z, simc::kZMax);
  EXPECT_LE(cur.gripper.aperture, 1.0);
  for (const auto& o : cur.objects)
    EXPECT_LE(std::sqrt(o.x * o.x + o.y * o.y), simc::kObjectR + 1e-12);
}

TEST(Step, TwoPathEquivarianceThousandTriples) {
  Rng rng(5);
  auto states = diverse_states(250, rng);
  double worst = 0;
  int checked = 0;
  for (const auto& s : states)
    for (int rep = 0; rep < 4; ++rep) {
      Action a = random_action(rng);
      auto direct = step(s, a);
      for (int gi = 0; gi < 4; ++gi) {
        GroupElement g(4, gi);
        auto path1 = rotate_state(g, direct.state);
        auto path2 = step(rotate_state(g, s), rotate_action(g.angle(), a));
        worst = std::max(worst, state_deviation(path1, path2.state));
        ASSERT_EQ(direct.reward, path2.reward) << "g=" << gi;
        ASSERT_EQ(direct.done, path2.done) << "g=" << gi;
      }
      ++checked;
    }
  EXPECT_EQ(checked, 1000);
  EXPECT_LE(worst, 1e-9);
}

TEST(Step, PickGraspLiftScripted) {
  WorldState s;
  s.task = Task::pick;
  s.gripper = GripperState{0.0, 0.0, 0.02, 0.0, 1.0, -1};
  s.objects = {ObjectState{ShapeKind::disk, 0.03, 0.0, 0.0, 0.02, 0}};
  Action close;
  close.lambda = 0.0;
  auto r = step(s, close);
  EXPECT_EQ(r.state.gripper.holding, 0);
  EXPECT_EQ(r.reward, 0.0);
  Action lift;
  lift.lambda = 0.0;
  lift.dz = 0.02;
  WorldState cur = r.state;
  double reward = 0;
  for (int i = 0; i < 4; ++i) {
    auto rr = step(cur, lift);
    cur = rr.state;
    reward = rr.reward;
    EXPECT_DOUBLE_EQ(cur.objects[0].x, cur.gripper.x);  // held object tracks
  }
  EXPECT_EQ(reward, 1.0);
  EXPECT_GE(cur.gripper.z, simc::kLiftZ);
}

TEST(Step, RewardsAreSparse) {
  Rng rng(6);
  for (const auto& s : diverse_states(100, rng)) {
    auto r = step(s, random_action(rng));
    EXPECT_TRUE(r.reward == 0.0 || r.reward == 1.0);
  }
}

TEST(Render, EmptySceneConstantBackgroundOutsideFingers) {
  WorldState s;
  s.task = Task::pick;
  s.gripper = GripperState{0.05, -0.02, 0.12, 0.3, 1.0, -1};
  auto m = render(s);
  int background = 0, finger = 0;
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t j = 0; j < 64; ++j) {
      double v = m.at(0, i, j);
      if (v == s.gripper.z)
        ++background;
      else if (v == 0.0)
        ++finger;  // finger tops sit at gripper height
      else
        FAIL() << "unexpected depth " << v;
      EXPECT_EQ(m.at(1, i, j), 0.0);
    }
  EXPECT_GE(background, 64 * 64 - 12);
  EXPECT_GE(finger, 1);  // fingers visible
}

TEST(Render, HoldingFlagChannel) {
  WorldState s = reset(Task::pick, 9);
  auto m0 = render(s);
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t j = 0; j < 64; ++j) EXPECT_EQ(m0.at(1, i, j), 0.0);
  s.gripper.holding = 0;
  auto m1 = render(s);
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t j = 0; j < 64; ++j) EXPECT_EQ(m1.at(1, i, j), 1.0);
}

TEST(Render, ObservationEquivariance) {
  Rng rng(10);
  auto states = diverse_states(20, rng);
  double worst = 0;
  for (const auto& s : states) {
    auto base = render(s);
    for (int gi = 0; gi < 4; ++gi) {
      GroupElement g(4, gi);
      auto lhs = render(rotate_state(g, s));
      auto rhs = act_on_feature_map(base.field, g, base);
      for (std::size_t i = 0; i < lhs.data.size(); ++i)
        worst = std::max(worst, std::abs(lhs.data[i] - rhs.data[i]));
    }
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(RotateState, IdentityBitIdentical) {
  Rng rng(11);
  for (const auto& s : diverse_states(10, rng))
    EXPECT_TRUE(states_equal_exact(rotate_state(GroupElement(4, 0), s), s));
}

TEST(RotateState, CompositionAndInvolution) {
  Rng rng(12);
  auto states = diverse_states(10, rng);
  double worst = 0;
  for (const auto& s : states) {
    for (int g1 = 0; g1 < 4; ++g1)
      for (int g2 = 0; g2 < 4; ++g2) {
        GroupElement a(4, g1), b(4, g2);
        worst = std::max(worst, state_deviation(rotate_state(a, rotate_state(b, s)),
                                                rotate_state(a.compose(b), s)));
      }
    auto twice = rotate_state(kPi, rotate_state(kPi, s));
    worst = std::max(worst, state_deviation(twice, s));
    // continuous composition too
    auto c = rotate_state(0.4, rotate_state(0.9, s));
    worst = std::max(worst, state_deviation(c, rotate_state(1.3, s)));
  }
  EXPECT_LE(worst, 1e-12);
}

TEST(Expert, PointsTowardFarObjectAtBound) {
  WorldState s;
  s.task = Task::pick;
  s.gripper = GripperState{-0.1, 0.0, 0.12, 0.0, 1.0, -1};
  s.objects = {ObjectState{ShapeKind::disk, 0.1, 0.05, 0.0, 0.02, 0}};
  Action d = expert_action(s, true);
  EXPECT_DOUBLE_EQ(d.dx, 0.02);
  EXPECT_DOUBLE_EQ(d.dy, 0.02);
  Action c = expert_action(s, false);
  EXPECT_DOUBLE_EQ(c.dx, 0.05);
  EXPECT_DOUBLE_EQ(c.dy, 0.05);
}

TEST(Expert, EquivarianceTwoPath) {
  Rng rng(13);
  auto states = diverse_states(200, rng);
  double worst = 0;
  for (const auto& s : states)
    for (bool discrete : {true, false})
      for (int gi = 0; gi < 4; ++gi) {
        GroupElement g(4, gi);
        Action lhs = expert_action(rotate_state(g, s), discrete);
        Action rhs = rotate_action(g.angle(), expert_action(s, discrete));
        worst = std::max(worst, std::abs(lhs.lambda - rhs.lambda));
        worst = std::max(worst, std::abs(lhs.dx - rhs.dx));
        worst = std::max(worst, std::abs(lhs.dy - rhs.dy));
        worst = std::max(worst, std::abs(lhs.dz - rhs.dz));
        worst = std::max(worst, std::abs(lhs.dtheta - rhs.dtheta));
      }
  EXPECT_LE(worst, 1e-9);
}

TEST(Expert, SuccessRatesAllTasksBothModes) {
  for (Task t : {Task::pull, Task::pick, Task::stack})
    for (bool discrete : {true, false}) {
      int ok = 0;
      for (int seed = 0; seed < 200; ++seed) {
        auto ep = run_expert_episode(t, seed, discrete);
        if (!ep.rewards.empty() && ep.rewards.back() == 1.0) ++ok;
      }
      EXPECT_GE(ok, 190) << task_name(t) << (discrete ? " discrete" : " continuous");
    }
}

TEST(ActionSpace, DiscreteSnapAndClosure) {
  auto spec = ActionSpaceSpec::discrete_spec();
  Action a;
  a.lambda = 0.4;
  a.dx = 0.013;
  a.dy = -0.04;
  a.dz = 0.012;
  a.dtheta = 0.8;
  Action snapped = spec.clamp(a);
  EXPECT_DOUBLE_EQ(snapped.lambda, 0.0);
  EXPECT_DOUBLE_EQ(snapped.dx, 0.02);
  EXPECT_DOUBLE_EQ(snapped.dy, -0.02);
  EXPECT_DOUBLE_EQ(snapped.dz, 0.02);
  EXPECT_DOUBLE_EQ(snapped.dtheta, kPi / 16);
  // xy choice grid is closed under quarter turns
  for (double dx : spec.xy_choices)
    for (double dy : spec.xy_choices)
      for (int gi = 0; gi < 4; ++gi) {
        Action v;
        v.dx = dx;
        v.dy = dy;
        Action r = rotate_action(GroupElement(4, gi).angle(), v);
        bool in_x = false, in_y = false;
        for (double c : spec.xy_choices) {
          in_x = in_x || r.dx == c;
          in_y = in_y || r.dy == c;
        }
        EXPECT_TRUE(in_x && in_y);
      }
}

TEST(ActionSpace, ContinuousClamp) {
  auto spec = ActionSpaceSpec::continuous_spec();
  Action a;
  a.lambda = 1.7;
  a.dx = -0.2;
  a.dy = 0.01;
  a.dz = 0.2;
  a.dtheta = -2.0;
  Action c = spec.clamp(a);
  EXPECT_DOUBLE_EQ(c.lambda, 1.0);
  EXPECT_DOUBLE_EQ(c.dx, -0.05);
  EXPECT_DOUBLE_EQ(c.dy, 0.01);
  EXPECT_DOUBLE_EQ(c.dz, 0.05);
  EXPECT_DOUBLE_EQ(c.dtheta, -kPi / 8);
}

TEST(Episode, SerializationRoundTripBitExact) {
  for (Task t : {Task::pull, Task::pick, Task::stack}) {
    auto ep = run_expert_episode(t, 21, t == Task::pull);
    std::stringstream ss;
    save_episode(ep, ss);
    auto back = load_episode(ss);
    EXPECT_EQ(back.task, ep.task);
    ASSERT_EQ(back.states.size(), ep.states.size());
    for (std::size_t i = 0; i < ep.states.size(); ++i)
      EXPECT_TRUE(states_equal_exact(back.states[i], ep.states[i]));
    ASSERT_EQ(back.actions.size(), ep.actions.size());
    for (std::size_t i = 0; i < ep.actions.size(); ++i) {
      EXPECT_EQ(back.actions[i].lambda, ep.actions[i].lambda);
      EXPECT_EQ(back.actions[i].dx, ep.actions[i].dx);
      EXPECT_EQ(back.actions[i].dy, ep.actions[i].dy);
      EXPECT_EQ(back.actions[i].dz, ep.actions[i].dz);
      EXPECT_EQ(back.actions[i].dtheta, ep.actions[i].dtheta);
    }
    EXPECT_EQ(back.rewards, ep.rewards);
    EXPECT_EQ(back.dones, ep.dones);
  }
}

TEST(Episode, LoadRejectsMalformed) {
  std::stringstream bad("episode pick 1 2\nstate 0 0");
  EXPECT_THROW(load_episode(bad), std::invalid_argument);
  std::stringstream badtask("episode fly 1 0\nstate 0 0 0 0 1 -1 0 disk 0 0 0 0.02 0\nend\n");
  EXPECT_THROW(load_episode(badtask), std::invalid_argument);
}

}  // namespace
