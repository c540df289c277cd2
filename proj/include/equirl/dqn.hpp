#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "equirl/networks.hpp"
#include "equirl/optim.hpp"
#include "equirl/replay.hpp"

// Discrete-action Q learning on the 162-way lattice. The Q map is (18, 3, 3):
// channel = invariant combination, spatial cell = planar displacement, and
// the flat index matches discrete_action_index, so a quarter turn of the
// observation permutes Q entries exactly as rotate_discrete_index permutes
// actions.

namespace equirl {

struct DqnConfig {
  double lr = 1e-4;
  double gamma = 0.95;
  std::size_t batch = 32;
  double tau = 1e-2;
  double eps_start = 1.0;
  double eps_end = 0.05;
  double eps_frac = 0.2;  // fraction of total steps over which epsilon anneals
};

inline double epsilon_at(std::size_t step, std::size_t total_steps, const DqnConfig& c) {
  double cut = c.eps_frac * static_cast<double>(total_steps);
  if (cut <= 0.0 || static_cast<double>(step) >= cut) return c.eps_end;
  return c.eps_start + (c.eps_end - c.eps_start) * (static_cast<double>(step) / cut);
}

template <typename T>
int dqn_greedy_index(const Tensor<T>& q) {
  require(q.numel() == static_cast<std::size_t>(kDiscreteActions), "q map must have 162 entries, got ",
          q.numel());
  int best = 0;
  for (int i = 1; i < kDiscreteActions; ++i)
    if (q.data[i] > q.data[best]) best = i;
  return best;
}

// All entries within tie_tol of the max; greedy selection takes the first.
template <typename T>
std::vector<int> dqn_argmax_set(const Tensor<T>& q, double tie_tol = 1e-9) {
  require(q.numel() == static_cast<std::size_t>(kDiscreteActions), "q map must have 162 entries");
  T best = q.data[dqn_greedy_index(q)];
  std::vector<int> out;
  for (int i = 0; i < kDiscreteActions; ++i)
    if (static_cast<double>(best - q.data[i]) <= tie_tol) out.push_back(i);
  return out;
}

template <typename T>
int dqn_select_action(const Tensor<T>& q, double eps, Rng& rng) {
  if (uniform(rng, 0.0, 1.0) < eps)
    return static_cast<int>(uniform_int(rng, 0, kDiscreteActions - 1));
  return dqn_greedy_index(q);
}

template <typename T>
struct DqnAgent {
  EquiNetwork<T> online;
  EquiNetwork<T> target;
  std::unique_ptr<Adam<T>> opt;
  DqnConfig cfg;

  Tensor<T> q_map(const FeatureMap<T>& obs) {
    ad::NoGradGuard ng;
    Tensor<T> x({1, obs.channels(), obs.height, obs.width});
    std::copy(obs.data.begin(), obs.data.end(), x.data.begin());
    return online.forward(ad::constant(std::move(x))).value();
  }
};

template <typename T>
DqnAgent<T> make_dqn_agent(bool equivariant, int n, Rng& rng, const DqnConfig& cfg = {},
                           const std::vector<std::size_t>& widths = {}) {
  DqnAgent<T> ag;
  ag.cfg = cfg;
  if (equivariant) {
    const auto& w = widths.empty() ? kDqnFieldWidths : widths;
    ag.online = build_equi_dqn<T>(n, rng, w);
    ag.target = build_equi_dqn<T>(n, rng, w);
  } else {
    const auto& w = widths.empty() ? kPlainDqnWidths : widths;
    ag.online = build_plain_dqn<T>(rng, w, n);
    ag.target = build_plain_dqn<T>(rng, w, n);
  }
  auto tp = ag.target.params();
  hard_update(tp, ag.online.params());
  ag.opt = std::make_unique<Adam<T>>(ag.online.params(), cfg.lr);
  return ag;
}

// One learning step: Huber TD loss against the frozen target net with
// importance weights, Adam, soft target update, priority write-back.
template <typename T>
double dqn_update(DqnAgent<T>& ag, ReplayBuffer<T>& buf, double beta) {
  auto samples = buf.sample(ag.cfg.batch, beta);
  std::size_t B = samples.size();
  std::vector<std::shared_ptr<const FeatureMap<T>>> obs(B), nobs(B);
  std::vector<std::size_t> act(B);
  Tensor<T> w({B});
  for (std::size_t i = 0; i < B; ++i) {
    obs[i] = samples[i].t.obs;
    nobs[i] = samples[i].t.next_obs;
    require(samples[i].t.action_index >= 0, "dqn update on a transition without a discrete index");
    act[i] = static_cast<std::size_t>(samples[i].t.action_index);
    w.data[i] = static_cast<T>(samples[i].weight);
  }

  Tensor<T> y({B});
  {
    ad::NoGradGuard ng;
    auto qn = ag.target.forward(ad::constant(stack_obs(nobs))).value();
    for (std::size_t i = 0; i < B; ++i) {
      T best = qn.data[i * kDiscreteActions];
      for (int j = 1; j < kDiscreteActions; ++j)
        best = std::max(best, qn.data[i * kDiscreteActions + j]);
      double target = samples[i].t.reward +
                      (samples[i].t.done ? 0.0 : ag.cfg.gamma * static_cast<double>(best));
      y.data[i] = static_cast<T>(target);
    }
  }

  auto q = ag.online.forward(ad::constant(stack_obs(obs)));
  auto qsel = ad::select_per_row(ad::reshape(q, {B, static_cast<std::size_t>(kDiscreteActions)}),
                                 act);
  auto td = ad::sub(qsel, ad::constant(y));
  // Huber via its closed form c*t - c^2/2 with c = clamp(t, -1, 1)
  auto c = ad::clamp(td, -1.0, 1.0);
  auto huber = ad::sub(ad::mul(c, td), ad::mul_scalar(ad::mul(c, c), 0.5));
  auto loss = ad::mean_all(ad::mul(ad::constant(w), huber));

  ag.opt->zero_grad();
  ad::backward(loss);
  ag.opt->step();
  auto tp = ag.target.params();
  soft_update(tp, ag.online.params(), ag.cfg.tau);

  for (std::size_t i = 0; i < B; ++i)
    buf.update_td_error(samples[i].index, std::abs(static_cast<double>(td.value().data[i])));
  return static_cast<double>(loss.value().data[0]);
}

}  // namespace equirl
