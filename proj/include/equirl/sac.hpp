#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "equirl/networks.hpp"
#include "equirl/optim.hpp"
#include "equirl/replay.hpp"

// Soft actor-critic over the 5-dim continuous action (dx, dy, lambda, dz,
// dtheta): squashed-Gaussian policy, twin Q heads with min targets, entropy
// temperature auto-tuned toward a fixed target. The demonstration variant
// adds a behavior-cloning L2 on expert samples to the actor loss.

namespace equirl {

struct SacConfig {
  double lr = 1e-3;
  double gamma = 0.99;
  std::size_t batch = 64;
  double tau = 1e-2;
  double alpha_init = 1e-2;
  double target_entropy = -5.0;
  double log_sigma_min = -20.0;
  double log_sigma_max = 2.0;
};

// Per-dimension action bounds in the 5-vector order.
inline constexpr double kSacLo[5] = {-0.05, -0.05, 0.0, -0.05, -kPi / 8};
inline constexpr double kSacHi[5] = {0.05, 0.05, 1.0, 0.05, kPi / 8};

template <typename T>
struct ActorOutput {
  ad::Var<T> mean;       // (B, 5) pre-squash means
  ad::Var<T> log_sigma;  // (B, 5) clamped
};

// Splits the 10-channel 1x1 actor head: 0..4 means, 5..9 log sigmas.
template <typename T>
ActorOutput<T> actor_head(const ad::Var<T>& raw, const SacConfig& cfg) {
  require(raw.value().rank() == 4 && raw.value().dim(1) == 10 && raw.value().dim(2) == 1 &&
              raw.value().dim(3) == 1,
          "actor output must be (B,10,1,1), got ", raw.value().shape_str());
  std::size_t B = raw.value().dim(0);
  ActorOutput<T> out;
  out.mean = ad::reshape(ad::slice(raw, 1, 0, 5), {B, 5});
  out.log_sigma = ad::clamp(ad::reshape(ad::slice(raw, 1, 5, 5), {B, 5}), cfg.log_sigma_min,
                            cfg.log_sigma_max);
  return out;
}

template <typename T>
Tensor<T> draw_noise(std::size_t batch, Rng& rng) {
  Tensor<T> xi({batch, 5});
  for (auto& v : xi.data) v = static_cast<T>(gaussian(rng));
  return xi;
}

namespace detail {

template <typename T>
ad::Var<T> bounds_tensor(std::size_t B, bool half) {
  Tensor<T> t({B, 5});
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      t.data[i * 5 + j] =
          static_cast<T>(half ? (kSacHi[j] - kSacLo[j]) / 2 : (kSacHi[j] + kSacLo[j]) / 2);
  return ad::constant(std::move(t));
}

}  // namespace detail

template <typename T>
struct SacSample {
  ad::Var<T> action;    // (B, 5), env units
  ad::Var<T> squashed;  // (B, 5), tanh output in [-1, 1], the policy's native units
  ad::Var<T> log_prob;  // (B)
};

// Reparameterized sample with the tanh change of variables:
// u = mean + sigma * xi, t = tanh(u), a = center + half * t.
// The density (and so the entropy bookkeeping) lives on the normalized
// squashed variable t in [-1,1]^5, where the -5 entropy target is reachable;
// the per-component affine scale to env units stays outside the density:
// log pi(t) = sum_i [ log N(u_i) - log(1 - tanh(u_i)^2) ].
template <typename T>
SacSample<T> sac_sample_action(const ActorOutput<T>& out, const Tensor<T>& xi) {
  std::size_t B = out.mean.value().dim(0);
  require(xi.shape == std::vector<std::size_t>({B, 5}), "noise shape mismatch");
  auto sigma = ad::exp_(out.log_sigma);
  auto xiv = ad::constant(xi);
  auto u = ad::add(out.mean, ad::mul(sigma, xiv));
  auto t = ad::tanh_(u);
  auto half = detail::bounds_tensor<T>(B, true);
  auto center = detail::bounds_tensor<T>(B, false);

  SacSample<T> s;
  s.squashed = t;
  s.action = ad::add(center, ad::mul(half, t));

  // log N(u; mean, sigma) with u - mean = sigma * xi: -xi^2/2 - log sigma - log(2 pi)/2
  Tensor<T> base({B, 5});
  for (std::size_t i = 0; i < base.data.size(); ++i)
    base.data[i] = static_cast<T>(-0.5 * static_cast<double>(xi.data[i]) * xi.data[i] -
                                  0.5 * std::log(2.0 * kPi));
  auto gauss = ad::sub(ad::constant(std::move(base)), out.log_sigma);
  auto one_minus_t2 = ad::add_scalar(ad::neg(ad::mul(t, t)), 1.0);
  auto jac = ad::log_(ad::add_scalar(one_minus_t2, 1e-12));
  s.log_prob = ad::sum_over_axis(ad::sub(gauss, jac), 1);
  return s;
}

// Env-unit action mapped back to the policy's normalized [-1,1] units.
template <typename T>
Tensor<T> normalize_actions(const Tensor<T>& packed) {
  std::size_t B = packed.dim(0);
  Tensor<T> out({B, 5});
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double half = (kSacHi[j] - kSacLo[j]) / 2;
      double center = (kSacHi[j] + kSacLo[j]) / 2;
      out.data[i * 5 + j] =
          static_cast<T>((static_cast<double>(packed.data[i * 5 + j]) - center) / half);
    }
  return out;
}

// Greedy evaluation action: the squashed mean.
template <typename T>
ad::Var<T> sac_mean_action(const ActorOutput<T>& out) {
  std::size_t B = out.mean.value().dim(0);
  auto half = detail::bounds_tensor<T>(B, true);
  auto center = detail::bounds_tensor<T>(B, false);
  return ad::add(center, ad::mul(half, ad::tanh_(out.mean)));
}

template <typename T>
Action action_from_row(const Tensor<T>& a, std::size_t row) {
  Action out;
  out.dx = static_cast<double>(a.data[row * 5 + 0]);
  out.dy = static_cast<double>(a.data[row * 5 + 1]);
  out.lambda = static_cast<double>(a.data[row * 5 + 2]);
  out.dz = static_cast<double>(a.data[row * 5 + 3]);
  out.dtheta = static_cast<double>(a.data[row * 5 + 4]);
  return out;
}

template <typename T>
struct SacBatch {
  Tensor<T> obs, next_obs;  // (B, C, H, W)
  Tensor<T> actions;        // (B, 5, 1, 1)
  std::vector<double> reward, weight;
  std::vector<bool> done, expert;
  std::vector<std::size_t> indices;
  std::size_t size() const { return reward.size(); }
};

template <typename T>
SacBatch<T> make_sac_batch(const std::vector<typename ReplayBuffer<T>::Sample>& samples) {
  SacBatch<T> b;
  std::size_t B = samples.size();
  std::vector<std::shared_ptr<const FeatureMap<T>>> obs(B), nobs(B);
  std::vector<Action> acts(B);
  for (std::size_t i = 0; i < B; ++i) {
    obs[i] = samples[i].t.obs;
    nobs[i] = samples[i].t.next_obs;
    acts[i] = samples[i].t.action;
    b.reward.push_back(samples[i].t.reward);
    b.weight.push_back(samples[i].weight);
    b.done.push_back(samples[i].t.done);
    b.expert.push_back(samples[i].t.is_expert);
    b.indices.push_back(samples[i].index);
  }
  b.obs = stack_obs(obs);
  b.next_obs = stack_obs(nobs);
  b.actions = pack_actions<T>(acts);
  return b;
}

template <typename T>
struct SacLosses {
  ad::Var<T> critic, actor, alpha;
  std::vector<double> td_abs;  // |min-head TD| per sample, for priorities
};

template <typename T>
ad::Var<T> critic_q(EquiNetwork<T>& head, const ad::Var<T>& sbar, const ad::Var<T>& act) {
  std::size_t B = sbar.value().dim(0);
  return ad::reshape(head.forward(ad::concat(sbar, act, 1)), {B});
}

// All three losses from one forward pass over the batch, with injected noise
// so the whole computation is a deterministic function of (params, batch, xi)
// and can be checked against finite differences.
//
// behavior_cloning adds the expert L2 term 1_e * ||a~ - a_e||^2 / 2 per
// sample (averaged over the batch) to the actor loss.
template <typename T>
SacLosses<T> sac_losses(SacModel<T>& model, SacModel<T>& target, ad::Var<T>& log_alpha,
                        const SacBatch<T>& batch, const Tensor<T>& xi, const Tensor<T>& xi_next,
                        const SacConfig& cfg, bool behavior_cloning) {
  std::size_t B = batch.size();
  double alpha_now = std::exp(static_cast<double>(log_alpha.value().data[0]));

  // target value: r + gamma (1 - done) (min_i q_i^targ(s', a') - alpha log pi(a'|s'))
  Tensor<T> y({B});
  {
    ad::NoGradGuard ng;
    auto out_next = actor_head(model.actor.forward(ad::constant(batch.next_obs)), cfg);
    auto next = sac_sample_action(out_next, xi_next);
    auto act4 = ad::reshape(next.action, {B, 5, 1, 1});
    auto sbar_t = target.encoder.forward(ad::constant(batch.next_obs));
    auto q1t = critic_q(target.q1, sbar_t, act4).value();
    auto q2t = critic_q(target.q2, sbar_t, act4).value();
    for (std::size_t i = 0; i < B; ++i) {
      double qmin = std::min(static_cast<double>(q1t.data[i]), static_cast<double>(q2t.data[i]));
      double soft = qmin - alpha_now * static_cast<double>(next.log_prob.value().data[i]);
      y.data[i] =
          static_cast<T>(batch.reward[i] + (batch.done[i] ? 0.0 : cfg.gamma * soft));
    }
  }

  auto sbar = model.encoder.forward(ad::constant(batch.obs));
  auto act_taken = ad::constant(batch.actions);
  auto q1 = critic_q(model.q1, sbar, act_taken);
  auto q2 = critic_q(model.q2, sbar, act_taken);
  auto yv = ad::constant(y);
  auto td1 = ad::sub(q1, yv);
  auto td2 = ad::sub(q2, yv);
  Tensor<T> w({B});
  for (std::size_t i = 0; i < B; ++i) w.data[i] = static_cast<T>(batch.weight[i]);
  auto wv = ad::constant(std::move(w));
  auto critic =
      ad::mean_all(ad::mul(wv, ad::add(ad::mul(td1, td1), ad::mul(td2, td2))));

  // actor on the same states; the encoder feature is detached so the actor
  // loss only reaches actor parameters
  auto out_cur = actor_head(model.actor.forward(ad::constant(batch.obs)), cfg);
  auto cur = sac_sample_action(out_cur, xi);
  auto act4 = ad::reshape(cur.action, {B, 5, 1, 1});
  auto sbar_d = ad::detach(sbar);
  auto qpi = ad::min2(critic_q(model.q1, sbar_d, act4), critic_q(model.q2, sbar_d, act4));
  auto actor = ad::mean_all(
      ad::sub(ad::mul_scalar(cur.log_prob, alpha_now), qpi));
  if (behavior_cloning) {
    // expert L2 in the policy's normalized units, on the reparameterized sample
    Tensor<T> mask({B});
    for (std::size_t i = 0; i < B; ++i) mask.data[i] = batch.expert[i] ? T(1) : T(0);
    auto diff = ad::sub(cur.squashed, ad::constant(normalize_actions(batch.actions)));
    auto l2 = ad::mul_scalar(ad::sum_over_axis(ad::mul(diff, diff), 1), 0.5);
    actor = ad::add(actor, ad::mean_all(ad::mul(ad::constant(std::move(mask)), l2)));
  }

  // temperature: L(alpha) = -alpha * mean(log pi + target entropy)
  auto alpha_loss = ad::mul_scalar(
      ad::mul(ad::exp_(log_alpha),
              ad::mean_all(ad::add_scalar(ad::detach(cur.log_prob), cfg.target_entropy))),
      -1.0);

  SacLosses<T> L{std::move(critic), std::move(actor), std::move(alpha_loss), {}};
  L.td_abs.resize(B);
  for (std::size_t i = 0; i < B; ++i) {
    double qmin = std::min(static_cast<double>(q1.value().data[i]),
                           static_cast<double>(q2.value().data[i]));
    L.td_abs[i] = std::abs(qmin - static_cast<double>(y.data[i]));
  }
  return L;
}

template <typename T>
struct SacAgent {
  SacModel<T> model, target;
  ad::Var<T> log_alpha;
  std::unique_ptr<Adam<T>> opt_actor, opt_critic, opt_alpha;
  SacConfig cfg;
  bool behavior_cloning = false;

  Action greedy(const FeatureMap<T>& obs) {
    ad::NoGradGuard ng;
    Tensor<T> x({1, obs.channels(), obs.height, obs.width});
    std::copy(obs.data.begin(), obs.data.end(), x.data.begin());
    auto out = actor_head(model.actor.forward(ad::constant(std::move(x))), cfg);
    return action_from_row(sac_mean_action(out).value(), 0);
  }

  Action sample(const FeatureMap<T>& obs, Rng& rng) {
    ad::NoGradGuard ng;
    Tensor<T> x({1, obs.channels(), obs.height, obs.width});
    std::copy(obs.data.begin(), obs.data.end(), x.data.begin());
    auto out = actor_head(model.actor.forward(ad::constant(std::move(x))), cfg);
    auto s = sac_sample_action(out, draw_noise<T>(1, rng));
    return action_from_row(s.action.value(), 0);
  }
};

template <typename T>
SacAgent<T> make_sac_agent(bool equivariant, int n, Rng& rng, const SacConfig& cfg = {},
                           bool behavior_cloning = false, const SacWidths& ew = {},
                           const PlainSacWidths& pw = {}) {
  SacAgent<T> ag;
  ag.cfg = cfg;
  ag.behavior_cloning = behavior_cloning;
  if (equivariant) {
    ag.model = build_equi_sac<T>(n, rng, ew);
    ag.target = build_equi_sac<T>(n, rng, ew);
  } else {
    ag.model = build_plain_sac<T>(n, rng, pw);
    ag.target = build_plain_sac<T>(n, rng, pw);
  }
  auto sync = [](EquiNetwork<T>& dst, EquiNetwork<T>& src) {
    auto dp = dst.params();
    hard_update(dp, src.params());
  };
  sync(ag.target.actor, ag.model.actor);
  sync(ag.target.encoder, ag.model.encoder);
  sync(ag.target.q1, ag.model.q1);
  sync(ag.target.q2, ag.model.q2);
  ag.log_alpha = ad::param(Tensor<T>::full({1}, static_cast<T>(std::log(cfg.alpha_init))));
  ag.opt_actor = std::make_unique<Adam<T>>(ag.model.actor.params(), cfg.lr);
  ag.opt_critic = std::make_unique<Adam<T>>(ag.model.critic_params(), cfg.lr);
  ag.opt_alpha = std::make_unique<Adam<T>>(std::vector<ad::Var<T>>{ag.log_alpha}, cfg.lr);
  return ag;
}

struct SacStepInfo {
  double critic_loss = 0, actor_loss = 0, alpha_loss = 0, alpha = 0;
};

// One learning step. The actor backward/step runs first: the critic loss
// contains no actor parameters, so its gradients stay exact afterwards,
// while running the critic first would invalidate the shared activations.
template <typename T>
SacStepInfo sac_update(SacAgent<T>& ag, ReplayBuffer<T>& buf, double beta, Rng& rng) {
  auto samples = buf.sample(ag.cfg.batch, beta);
  auto batch = make_sac_batch<T>(samples);
  auto xi = draw_noise<T>(batch.size(), rng);
  auto xi_next = draw_noise<T>(batch.size(), rng);
  auto L = sac_losses(ag.model, ag.target, ag.log_alpha, batch, xi, xi_next, ag.cfg,
                      ag.behavior_cloning);

  ag.opt_actor->zero_grad();
  ad::backward(L.actor);
  ag.opt_actor->step();

  ag.opt_critic->zero_grad();
  ad::backward(L.critic);
  ag.opt_critic->step();

  ag.opt_alpha->zero_grad();
  ad::backward(L.alpha);
  ag.opt_alpha->step();

  auto soft = [&](EquiNetwork<T>& dst, EquiNetwork<T>& src) {
    auto dp = dst.params();
    soft_update(dp, src.params(), ag.cfg.tau);
  };
  soft(ag.target.encoder, ag.model.encoder);
  soft(ag.target.q1, ag.model.q1);
  soft(ag.target.q2, ag.model.q2);

  for (std::size_t i = 0; i < batch.size(); ++i)
    buf.update_td_error(batch.indices[i], L.td_abs[i]);

  SacStepInfo info;
  info.critic_loss = static_cast<double>(L.critic.value().data[0]);
  info.actor_loss = static_cast<double>(L.actor.value().data[0]);
  info.alpha_loss = static_cast<double>(L.alpha.value().data[0]);
  info.alpha = std::exp(static_cast<double>(ag.log_alpha.value().data[0]));
  return info;
}

}  // namespace equirl
