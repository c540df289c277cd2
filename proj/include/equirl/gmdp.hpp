#pragma once

// Finite MDPs carrying a cyclic-group action on states and actions, exact
// synchronous value iteration, and numerical checks that reward/transition
// invariance propagates to the optimal Q-function and greedy policy.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"

namespace equirl {

struct InvarianceReport {
  double reward_dev = 0;
  double transition_dev = 0;
};

struct Proposition1Report {
  double q_dev = 0;
  bool policy_equivariant = true;
};

// Tabular MDP with a C_n action given by per-element permutations sigma_g of
// states and alpha_g of actions. T is (s, a, s') flattened, R is (s, a).
struct TabularGMDP {
  std::size_t num_states = 0;
  std::size_t num_actions = 0;
  int n = 1;
  double gamma = 0.9;
  std::vector<double> T;
  std::vector<double> R;
  std::vector<std::vector<int>> sigma;  // [g][s], g = 0..n-1
  std::vector<std::vector<int>> alpha;  // [g][a]

  double trans(std::size_t s, std::size_t a, std::size_t s2) const {
    return T[(s * num_actions + a) * num_states + s2];
  }
  double& trans(std::size_t s, std::size_t a, std::size_t s2) {
    return T[(s * num_actions + a) * num_states + s2];
  }
  double reward(std::size_t s, std::size_t a) const { return R[s * num_actions + a]; }
  double& reward(std::size_t s, std::size_t a) { return R[s * num_actions + a]; }

  // Structural checks: shapes, stochastic rows, and that the permutations
  // form a group action of C_n (identity at g=0, composition law).
  void validate() const {
    require(num_states > 0 && num_actions > 0, "empty state or action set");
    require(n >= 1, "group order must be positive, got ", n);
    require(gamma > 0.0 && gamma < 1.0, "discount must lie in (0,1), got ", gamma);
    require(T.size() == num_states * num_actions * num_states, "transition table size mismatch");
    require(R.size() == num_states * num_actions, "reward table size mismatch");
    require(sigma.size() == static_cast<std::size_t>(n) &&
                alpha.size() == static_cast<std::size_t>(n),
            "need one state and one action permutation per group element");
    for (std::size_t s = 0; s < num_states; ++s)
      for (std::size_t a = 0; a < num_actions; ++a) {
        double sum = 0;
        for (std::size_t s2 = 0; s2 < num_states; ++s2) {
          double p = trans(s, a, s2);
          require(p >= -1e-12, "negative transition probability at (", s, ",", a, ",", s2, ")");
          sum += p;
        }
        require(std::abs(sum - 1.0) <= 1e-12, "transition row (", s, ",", a,
                ") sums to ", sum, ", expected 1");
      }
    auto check_perm = [](const std::vector<int>& p, std::size_t m, const char* what) {
      require(p.size() == m, what, " permutation has wrong length");
      std::vector<char> seen(m, 0);
      for (int v : p) {
        require(v >= 0 && static_cast<std::size_t>(v) < m && !seen[v], what,
                " map is not a permutation");
        seen[v] = 1;
      }
    };
    for (int g = 0; g < n; ++g) {
      check_perm(sigma[g], num_states, "state");
      check_perm(alpha[g], num_actions, "action");
    }
    for (std::size_t s = 0; s < num_states; ++s)
      require(sigma[0][s] == static_cast<int>(s), "sigma at identity must be the identity map");
    for (std::size_t a = 0; a < num_actions; ++a)
      require(alpha[0][a] == static_cast<int>(a), "alpha at identity must be the identity map");
    for (int g1 = 0; g1 < n; ++g1)
      for (int g2 = 0; g2 < n; ++g2) {
        int g12 = (g1 + g2) % n;
        for (std::size_t s = 0; s < num_states; ++s)
          require(sigma[g12][s] == sigma[g1][sigma[g2][s]],
                  "state maps violate the group action law at (", g1, ",", g2, ")");
        for (std::size_t a = 0; a < num_actions; ++a)
          require(alpha[g12][a] == alpha[g1][alpha[g2][a]],
                  "action maps violate the group action law at (", g1, ",", g2, ")");
      }
  }
};

// Worst-case deviation of R and T from invariance under every group element.
inline InvarianceReport check_invariance(const TabularGMDP& m) {
  InvarianceReport rep;
  for (int g = 0; g < m.n; ++g) {
    const auto& sg = m.sigma[g];
    const auto& ag = m.alpha[g];
    for (std::size_t s = 0; s < m.num_states; ++s)
      for (std::size_t a = 0; a < m.num_actions; ++a) {
        std::size_t gs = static_cast<std::size_t>(sg[s]);
        std::size_t ga = static_cast<std::size_t>(ag[a]);
        rep.reward_dev = std::max(rep.reward_dev, std::abs(m.reward(s, a) - m.reward(gs, ga)));
        for (std::size_t s2 = 0; s2 < m.num_states; ++s2)
          rep.transition_dev =
              std::max(rep.transition_dev,
                       std::abs(m.trans(s, a, s2) - m.trans(gs, ga, sg[s2])));
      }
  }
  return rep;
}

// Synchronous value iteration to a sup-norm Bellman residual below tol.
// Stopping at |Q_{k+1} - Q_k| <= tol leaves the returned iterate with
// residual <= gamma * tol by contraction.
inline std::vector<double> value_iteration(const TabularGMDP& m, double tol) {
  require(m.gamma < 1.0, "value iteration requires discount < 1, got ", m.gamma);
  require(tol > 0.0, "tolerance must be positive, got ", tol);
  std::size_t S = m.num_states, A = m.num_actions;
  std::vector<double> q(S * A, 0.0), next(S * A, 0.0), v(S, 0.0);
  for (long iter = 0;; ++iter) {
    for (std::size_t s = 0; s < S; ++s) {
      double best = q[s * A];
      for (std::size_t a = 1; a < A; ++a) best = std::max(best, q[s * A + a]);
      v[s] = best;
    }
    double delta = 0;
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t a = 0; a < A; ++a) {
        double acc = 0;
        for (std::size_t s2 = 0; s2 < S; ++s2) acc += m.trans(s, a, s2) * v[s2];
        double val = m.reward(s, a) + m.gamma * acc;
        delta = std::max(delta, std::abs(val - q[s * A + a]));
        next[s * A + a] = val;
      }
    q.swap(next);
    if (delta <= tol) return q;
    require(iter < 10'000'000, "value iteration failed to converge");
  }
}

// Greedy action set at tie tolerance: every action within tie_tol of the max.
inline std::set<int> greedy_set(const std::vector<double>& q, std::size_t num_actions,
                                std::size_t s, double tie_tol) {
  double best = q[s * num_actions];
  for (std::size_t a = 1; a < num_actions; ++a) best = std::max(best, q[s * num_actions + a]);
  std::set<int> out;
  for (std::size_t a = 0; a < num_actions; ++a)
    if (q[s * num_actions + a] >= best - tie_tol) out.insert(static_cast<int>(a));
  return out;
}

// Measures whether the group action leaves Q fixed and maps greedy sets onto
// greedy sets. Meaningful as a theorem check only when check_invariance is
// clean; on a non-invariant MDP it simply reports how badly symmetry fails.
inline Proposition1Report verify_proposition1(const TabularGMDP& m, const std::vector<double>& q,
                                              double tie_tol = 1e-9) {
  require(q.size() == m.num_states * m.num_actions, "Q table size mismatch");
  Proposition1Report rep;
  for (int g = 0; g < m.n; ++g) {
    const auto& sg = m.sigma[g];
    const auto& ag = m.alpha[g];
    for (std::size_t s = 0; s < m.num_states; ++s) {
      for (std::size_t a = 0; a < m.num_actions; ++a)
        rep.q_dev = std::max(rep.q_dev, std::abs(q[s * m.num_actions + a] -
                                                 q[sg[s] * m.num_actions + ag[a]]));
      std::set<int> mapped;
      for (int a : greedy_set(q, m.num_actions, s, tie_tol)) mapped.insert(ag[a]);
      if (mapped != greedy_set(q, m.num_actions, static_cast<std::size_t>(sg[s]), tie_tol))
        rep.policy_equivariant = false;
    }
  }
  return rep;
}

// Orbit-averages R and T with the MDP's own group maps so invariance holds by
// construction (up to summation rounding). Rows stay stochastic: each output
// row is a convex combination of stochastic rows.
inline TabularGMDP symmetrize(const TabularGMDP& raw) {
  TabularGMDP out = raw;
  std::fill(out.T.begin(), out.T.end(), 0.0);
  std::fill(out.R.begin(), out.R.end(), 0.0);
  double inv = 1.0 / raw.n;
  for (int g = 0; g < raw.n; ++g) {
    const auto& sg = raw.sigma[g];
    const auto& ag = raw.alpha[g];
    for (std::size_t s = 0; s < raw.num_states; ++s)
      for (std::size_t a = 0; a < raw.num_actions; ++a) {
        std::size_t gs = static_cast<std::size_t>(sg[s]);
        std::size_t ga = static_cast<std::size_t>(ag[a]);
        out.reward(s, a) += inv * raw.reward(gs, ga);
        for (std::size_t s2 = 0; s2 < raw.num_states; ++s2)
          out.trans(s, a, s2) += inv * raw.trans(gs, ga, sg[s2]);
      }
  }
  return out;
}

// Plain-text format, one MDP per stream:
//   gmdp <|S|> <|A|> <n> <gamma>
//   n lines of |S| ints   (sigma_g, g = 0..n-1)
//   n lines of |A| ints   (alpha_g)
//   |S|*|A| lines of |S| reals  (T row for each (s,a), s-major)
//   |S| lines of |A| reals      (R row for each s)
// Reals print with 17 significant digits so round trips are bit exact.
inline void save_gmdp(const TabularGMDP& m, std::ostream& os) {
  os << "gmdp " << m.num_states << ' ' << m.num_actions << ' ' << m.n << ' '
     << std::setprecision(17) << m.gamma << '\n';
  for (int g = 0; g < m.n; ++g) {
    for (std::size_t s = 0; s < m.num_states; ++s) os << m.sigma[g][s] << (s + 1 < m.num_states ? ' ' : '\n');
  }
  for (int g = 0; g < m.n; ++g) {
    for (std::size_t a = 0; a < m.num_actions; ++a) os << m.alpha[g][a] << (a + 1 < m.num_actions ? ' ' : '\n');
  }
  for (std::size_t s = 0; s < m.num_states; ++s)
    for (std::size_t a = 0; a < m.num_actions; ++a)
      for (std::size_t s2 = 0; s2 < m.num_states; ++s2)
        os << m.trans(s, a, s2) << (s2 + 1 < m.num_states ? ' ' : '\n');
  for (std::size_t s = 0; s < m.num_states; ++s)
    for (std::size_t a = 0; a < m.num_actions; ++a)
      os << m.reward(s, a) << (a + 1 < m.num_actions ? ' ' : '\n');
}

inline TabularGMDP load_gmdp(std::istream& is) {
  std::string tag;
  TabularGMDP m;
  require(static_cast<bool>(is >> tag), "empty MDP stream");
  require(tag == "gmdp", "bad MDP header tag '", tag, "'");
  require(static_cast<bool>(is >> m.num_states >> m.num_actions >> m.n >> m.gamma),
          "truncated MDP header");
  m.sigma.assign(m.n, std::vector<int>(m.num_states));
  m.alpha.assign(m.n, std::vector<int>(m.num_actions));
  m.T.assign(m.num_states * m.num_actions * m.num_states, 0.0);
  m.R.assign(m.num_states * m.num_actions, 0.0);
  for (auto& p : m.sigma)
    for (auto& v : p) require(static_cast<bool>(is >> v), "truncated state maps");
  for (auto& p : m.alpha)
    for (auto& v : p) require(static_cast<bool>(is >> v), "truncated action maps");
  for (auto& v : m.T) require(static_cast<bool>(is >> v), "truncated transition table");
  for (auto& v : m.R) require(static_cast<bool>(is >> v), "truncated reward table");
  m.validate();
  return m;
}

inline void save_gmdp_file(const TabularGMDP& m, const std::string& path) {
  std::ofstream os(path);
  require(os.good(), "cannot open ", path, " for writing");
  save_gmdp(m, os);
  require(os.good(), "write to ", path, " failed");
}

inline TabularGMDP load_gmdp_file(const std::string& path) {
  std::ifstream is(path);
  require(is.good(), "cannot open ", path);
  return load_gmdp(is);
}

}  // namespace equirl
