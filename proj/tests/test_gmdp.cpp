#include <equirl/gmdp.hpp>

#include <gtest/gtest.h>

#include <sstream>

using namespace equirl;

namespace {

// 3x3 gridworld, goal at the center, deterministic moves that stay in place
// at walls, reward 1 for stepping onto the goal, goal absorbing. Rotating the
// board a quarter turn about the center while cycling the four move actions
// leaves R and T exactly unchanged, so this is an invariant fixture built
// directly, not via symmetrize.
TabularGMDP symmetric_gridworld() {
  const int dr[4] = {-1, 0, 1, 0};  // up, right, down, left
  const int dc[4] = {0, 1, 0, -1};
  const int goal = 4;  // (1,1)
  TabularGMDP m;
  m.num_states = 9;
  m.num_actions = 4;
  m.n = 4;
  m.gamma = 0.95;
  m.T.assign(9 * 4 * 9, 0.0);
  m.R.assign(9 * 4, 0.0);
  auto next = [&](int s, int a) {
    if (s == goal) return s;
    int r = s / 3 + dr[a], c = s % 3 + dc[a];
    if (r < 0 || r > 2 || c < 0 || c > 2) return s;
    return r * 3 + c;
  };
  for (int s = 0; s < 9; ++s)
    for (int a = 0; a < 4; ++a) {
      int s2 = next(s, a);
      m.trans(s, a, s2) = 1.0;
      m.reward(s, a) = (s != goal && s2 == goal) ? 1.0 : 0.0;
    }
  // quarter turn about the center: (r,c) -> (2-c, r); up -> left -> down -> right
  std::vector<int> s1(9), a1{3, 0, 1, 2};
  for (int s = 0; s < 9; ++s) {
    int r = s / 3, c = s % 3;
    s1[s] = (2 - c) * 3 + r;
  }
  m.sigma.assign(4, std::vector<int>(9));
  m.alpha.assign(4, std::vector<int>(4));
  for (int s = 0; s < 9; ++s) m.sigma[0][s] = s;
  for (int a = 0; a < 4; ++a) m.alpha[0][a] = a;
  for (int g = 1; g < 4; ++g)
    for (int s = 0; s < 9; ++s) m.sigma[g][s] = s1[m.sigma[g - 1][s]];
  for (int g = 1; g < 4; ++g)
    for (int a = 0; a < 4; ++a) m.alpha[g][a] = a1[m.alpha[g - 1][a]];
  m.validate();
  return m;
}

// Random MDP with an exact C_4 action: states and actions are chunked into
// 4-cycles (remainder fixed), the generator permutation is raised to powers.
TabularGMDP random_c4_mdp(std::size_t S, std::size_t A, Rng& rng) {
  TabularGMDP m;
  m.num_states = S;
  m.num_actions = A;
  m.n = 4;
  m.gamma = 0.9;
  m.T.assign(S * A * S, 0.0);
  m.R.assign(S * A, 0.0);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t a = 0; a < A; ++a) {
      double sum = 0;
      for (std::size_t s2 = 0; s2 < S; ++s2) {
        double w = std::exp(gaussian(rng));
        m.trans(s, a, s2) = w;
        sum += w;
      }
      for (std::size_t s2 = 0; s2 < S; ++s2) m.trans(s, a, s2) /= sum;
      m.reward(s, a) = uniform(rng, 0.0, 1.0);
    }
  auto cycle_perm = [&](std::size_t sz) {
    std::vector<int> order(sz);
    for (std::size_t i = 0; i < sz; ++i) order[i] = static_cast<int>(i);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int> p(sz);
    for (std::size_t i = 0; i < sz; ++i) p[i] = static_cast<int>(i);
    for (std::size_t i = 0; i + 4 <= sz; i += 4)
      for (int j = 0; j < 4; ++j) p[order[i + j]] = order[i + (j + 1) % 4];
    return p;
  };
  auto s1 = cycle_perm(S), a1 = cycle_perm(A);
  m.sigma.assign(4, std::vector<int>(S));
  m.alpha.assign(4, std::vector<int>(A));
  for (std::size_t s = 0; s < S; ++s) m.sigma[0][s] = static_cast<int>(s);
  for (std::size_t a = 0; a < A; ++a) m.alpha[0][a] = static_cast<int>(a);
  for (int g = 1; g < 4; ++g) {
    for (std::size_t s = 0; s < S; ++s) m.sigma[g][s] = s1[m.sigma[g - 1][s]];
    for (std::size_t a = 0; a < A; ++a) m.alpha[g][a] = a1[m.alpha[g - 1][a]];
  }
  m.validate();
  return m;
}

TabularGMDP identity_group_mdp(std::size_t S, std::size_t A, Rng& rng) {
  TabularGMDP m = random_c4_mdp(S, A, rng);
  m.n = 1;
  m.sigma.resize(1);
  m.alpha.resize(1);
  m.validate();
  return m;
}

// Independent oracle: evaluate the greedy policy of q by solving the linear
// system (I - gamma T_pi) V = R_pi with Gaussian elimination, then rebuild Q.
std::vector<double> q_from_policy_solve(const TabularGMDP& m, const std::vector<double>& q) {
  std::size_t S = m.num_states, A = m.num_actions;
  std::vector<int> pi(S);
  for (std::size_t s = 0; s < S; ++s) {
    int best = 0;
    for (std::size_t a = 1; a < A; ++a)
      if (q[s * A + a] > q[s * A + best]) best = static_cast<int>(a);
    pi[s] = best;
  }
  std::vector<std::vector<double>> M(S, std::vector<double>(S + 1, 0.0));
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t s2 = 0; s2 < S; ++s2)
      M[s][s2] = (s == s2 ? 1.0 : 0.0) - m.gamma * m.trans(s, pi[s], s2);
    M[s][S] = m.reward(s, pi[s]);
  }
  for (std::size_t col = 0; col < S; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < S; ++r)
      if (std::abs(M[r][col]) > std::abs(M[piv][col])) piv = r;
    std::swap(M[col], M[piv]);
    for (std::size_t r = 0; r < S; ++r) {
      if (r == col) continue;
      double f = M[r][col] / M[col][col];
      for (std::size_t c = col; c <= S; ++c) M[r][c] -= f * M[col][c];
    }
  }
  std::vector<double> v(S);
  for (std::size_t s = 0; s < S; ++s) v[s] = M[s][S] / M[s][s];
  std::vector<double> out(S * A);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t a = 0; a < A; ++a) {
      double acc = 0;
      for (std::size_t s2 = 0; s2 < S; ++s2) acc += m.trans(s, a, s2) * v[s2];
      out[s * A + a] = m.reward(s, a) + m.gamma * acc;
    }
  return out;
}

TEST(CheckInvariance, SymmetricGridworldExact) {
  auto m = symmetric_gridworld();
  auto rep = check_invariance(m);
  EXPECT_EQ(rep.reward_dev, 0.0);
  EXPECT_EQ(rep.transition_dev, 0.0);
}

TEST(CheckInvariance, PerturbedRewardDetected) {
  auto m = symmetric_gridworld();
  m.reward(0, 0) += 0.1;  // corner state, orbit of size 4
  auto rep = check_invariance(m);
  EXPECT_NEAR(rep.reward_dev, 0.1, 1e-15);
  EXPECT_EQ(rep.transition_dev, 0.0);
}

TEST(CheckInvariance, IdentityGroupAlwaysClean) {
  Rng rng(101);
  auto m = identity_group_mdp(11, 5, rng);
  auto rep = check_invariance(m);
  EXPECT_EQ(rep.reward_dev, 0.0);
  EXPECT_EQ(rep.transition_dev, 0.0);
}

TEST(ValueIteration, SingleStateGeometricSeries) {
  TabularGMDP m;
  m.num_states = 1;
  m.num_actions = 1;
  m.n = 1;
  m.gamma = 0.95;
  m.T = {1.0};
  m.R = {1.0};
  m.sigma = {{0}};
  m.alpha = {{0}};
  m.validate();
  auto q = value_iteration(m, 1e-12);
  // sum of gamma^k = 1/(1-gamma) = 20
  EXPECT_NEAR(q[0], 20.0, 1e-9);
}

TEST(ValueIteration, TwoStateChainHandRun) {
  // start(0) -> goal(1) on action 1 with reward 1; action 0 stays, reward 0;
  // goal absorbing with zero reward. From Q=0: sweep 1 gives Q(0,1)=1, sweep 2
  // adds gamma*V to the stay action: Q(0,0) = 0.5 * 1 = 0.5. Fixed point.
  TabularGMDP m;
  m.num_states = 2;
  m.num_actions = 2;
  m.n = 1;
  m.gamma = 0.5;
  m.T.assign(8, 0.0);
  m.R.assign(4, 0.0);
  m.trans(0, 0, 0) = 1.0;
  m.trans(0, 1, 1) = 1.0;
  m.trans(1, 0, 1) = 1.0;
  m.trans(1, 1, 1) = 1.0;
  m.reward(0, 1) = 1.0;
  m.sigma = {{0, 1}};
  m.alpha = {{0, 1}};
  m.validate();
  auto q = value_iteration(m, 1e-13);
  EXPECT_DOUBLE_EQ(q[0 * 2 + 1], 1.0);
  EXPECT_DOUBLE_EQ(q[0 * 2 + 0], 0.5);
  EXPECT_DOUBLE_EQ(q[1 * 2 + 0], 0.0);
  EXPECT_DOUBLE_EQ(q[1 * 2 + 1], 0.0);
}

TEST(ValueIteration, RejectsBadInputs) {
  auto m = symmetric_gridworld();
  EXPECT_THROW(value_iteration(m, 0.0), std::invalid_argument);
  EXPECT_THROW(value_iteration(m, -1e-9), std::invalid_argument);
  m.gamma = 1.0;
  EXPECT_THROW(value_iteration(m, 1e-9), std::invalid_argument);
}

TEST(ValueIteration, MatchesPolicyEvaluationLinearSolve) {
  auto m = symmetric_gridworld();
  auto q = value_iteration(m, 1e-12);
  auto q_solve = q_from_policy_solve(m, q);
  double dev = 0;
  for (std::size_t i = 0; i < q.size(); ++i) dev = std::max(dev, std::abs(q[i] - q_solve[i]));
  EXPECT_LE(dev, 1e-9);
}

TEST(Proposition1, HoldsOnSymmetricGridworld) {
  auto m = symmetric_gridworld();
  auto rep = verify_proposition1(m, value_iteration(m, 1e-12));
  EXPECT_LE(rep.q_dev, 1e-9);
  EXPECT_TRUE(rep.policy_equivariant);
}

TEST(Proposition1, FailsOnPerturbedReward) {
  auto m = symmetric_gridworld();
  m.reward(0, 0) += 0.1;
  auto rep = verify_proposition1(m, value_iteration(m, 1e-12));
  EXPECT_GT(rep.q_dev, 1e-3);
}

TEST(Proposition1, IdentityGroupTrivial) {
  Rng rng(102);
  auto m = identity_group_mdp(7, 3, rng);
  auto rep = verify_proposition1(m, value_iteration(m, 1e-12));
  EXPECT_EQ(rep.q_dev, 0.0);
  EXPECT_TRUE(rep.policy_equivariant);
}

TEST(Symmetrize, InvariantInputUnchanged) {
  auto m = symmetric_gridworld();
  auto s = symmetrize(m);
  double dev = 0;
  for (std::size_t i = 0; i < m.T.size(); ++i) dev = std::max(dev, std::abs(m.T[i] - s.T[i]));
  for (std::size_t i = 0; i < m.R.size(); ++i) dev = std::max(dev, std::abs(m.R[i] - s.R[i]));
  EXPECT_LE(dev, 1e-15);
}

TEST(Symmetrize, RandomBecomesInvariantStochasticIdempotent) {
  Rng rng(103);
  auto raw = random_c4_mdp(16, 4, rng);
  auto s = symmetrize(raw);
  auto rep = check_invariance(s);
  EXPECT_LE(rep.reward_dev, 1e-14);
  EXPECT_LE(rep.transition_dev, 1e-14);
  for (std::size_t st = 0; st < s.num_states; ++st)
    for (std::size_t a = 0; a < s.num_actions; ++a) {
      double sum = 0;
      for (std::size_t s2 = 0; s2 < s.num_states; ++s2) sum += s.trans(st, a, s2);
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  auto s2 = symmetrize(s);
  double dev = 0;
  for (std::size_t i = 0; i < s.T.size(); ++i) dev = std::max(dev, std::abs(s.T[i] - s2.T[i]));
  for (std::size_t i = 0; i < s.R.size(); ++i) dev = std::max(dev, std::abs(s.R[i] - s2.R[i]));
  EXPECT_LE(dev, 1e-15);
}

TEST(Proposition1, RandomSymmetrizedFamilyCertified) {
  Rng rng(104);
  const std::size_t sizes[3][2] = {{64, 8}, {36, 6}, {12, 4}};
  for (auto& sz : sizes) {
    auto m = symmetrize(random_c4_mdp(sz[0], sz[1], rng));
    auto inv = check_invariance(m);
    ASSERT_LE(inv.reward_dev, 1e-12);
    ASSERT_LE(inv.transition_dev, 1e-12);
    auto rep = verify_proposition1(m, value_iteration(m, 1e-12));
    EXPECT_LE(rep.q_dev, 1e-9) << "|S|=" << sz[0];
    EXPECT_TRUE(rep.policy_equivariant) << "|S|=" << sz[0];
  }
}

TEST(Io, RoundTripBitExact) {
  Rng rng(105);
  for (TabularGMDP m : {symmetric_gridworld(), symmetrize(random_c4_mdp(8, 4, rng))}) {
    std::stringstream ss;
    save_gmdp(m, ss);
    auto back = load_gmdp(ss);
    EXPECT_EQ(m.num_states, back.num_states);
    EXPECT_EQ(m.num_actions, back.num_actions);
    EXPECT_EQ(m.n, back.n);
    EXPECT_EQ(m.gamma, back.gamma);
    EXPECT_EQ(m.sigma, back.sigma);
    EXPECT_EQ(m.alpha, back.alpha);
    EXPECT_EQ(m.T, back.T);
    EXPECT_EQ(m.R, back.R);
  }
}

TEST(Io, RejectsMalformed) {
  std::stringstream bad_tag("mdpx 2 2 1 0.9");
  EXPECT_THROW(load_gmdp(bad_tag), std::invalid_argument);
  auto m = symmetric_gridworld();
  std::stringstream ss;
  save_gmdp(m, ss);
  std::string text = ss.str();
  std::stringstream truncated(text.substr(0, text.size() / 2));
  EXPECT_THROW(load_gmdp(truncated), std::invalid_argument);
}

TEST(Validate, CatchesStructuralErrors) {
  auto m = symmetric_gridworld();
  m.trans(0, 0, 0) += 0.5;  // breaks row stochasticity
  EXPECT_THROW(m.validate(), std::invalid_argument);

  auto m2 = symmetric_gridworld();
  m2.sigma[1][0] = m2.sigma[1][1];  // duplicate, not a permutation
  EXPECT_THROW(m2.validate(), std::invalid_argument);

  auto m3 = symmetric_gridworld();
  std::swap(m3.sigma[2][0], m3.sigma[2][1]);  // breaks the composition law
  EXPECT_THROW(m3.validate(), std::invalid_argument);

  auto m4 = symmetric_gridworld();
  m4.sigma[0][0] = 1;  // identity element must act as identity
  m4.sigma[0][1] = 0;
  EXPECT_THROW(m4.validate(), std::invalid_argument);
}

}  // namespace
