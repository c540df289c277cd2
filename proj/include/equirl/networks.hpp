#pragma once

#include <memory>
#include <vector>

#include "equirl/sim.hpp"
#include "equirl/steerable.hpp"

// Network builders for the agents. Widths of steerable stacks count REGULAR
// FIELDS per stage (raw channels = fields * n); plain-baseline widths count
// raw channels, with defaults calibrated so trainable parameter counts match
// the equivariant defaults within 10% (the steerable side counts basis
// coefficients, not raw kernel entries, since off-basis directions are
// projected away on every forward).
//
// All stacks assume 64x64 2-channel trivial input: an initial 2x2 average
// pool, then convolutions and non-overlapping pools down to the quoted
// output grid. Every spatial grid along the way is even (pools) or odd
// (convolutions), so quarter turns act on it exactly.

namespace equirl {

namespace detail {

template <typename T>
void add_steerable_block(EquiNetwork<T>& net, const FieldType& in_f, const FieldType& out_f, int k,
                         int pad, Rng& rng, bool relu_after = true, int pool_after = 0) {
  net.add(std::make_shared<SteerableConv<T>>(in_f, out_f, k, pad, rng));
  if (relu_after) net.add(std::make_shared<EquiReLU<T>>(out_f));
  if (pool_after > 1)
    net.add(std::make_shared<SpatialMaxPool<T>>(out_f, static_cast<std::size_t>(pool_after)));
}

template <typename T>
void add_plain_block(EquiNetwork<T>& net, int n, std::size_t c_in, std::size_t c_out, int k,
                     int pad, Rng& rng, bool relu_after = true, int pool_after = 0) {
  net.add(std::make_shared<PlainConv<T>>(n, c_in, c_out, k, pad, rng));
  FieldType f = FieldType::trivials(n, c_out);
  if (relu_after) net.add(std::make_shared<EquiReLU<T>>(f));
  if (pool_after > 1)
    net.add(std::make_shared<SpatialMaxPool<T>>(f, static_cast<std::size_t>(pool_after)));
}

inline FieldType regulars(int n, std::size_t count) { return FieldType::regulars(n, count); }

inline FieldType join_fields(const FieldType& a, const FieldType& b) {
  require(a.n == b.n, "cannot join fields of different group orders");
  std::vector<Representation> blocks = a.blocks;
  blocks.insert(blocks.end(), b.blocks.begin(), b.blocks.end());
  return FieldType(a.n, std::move(blocks));
}

}  // namespace detail

inline const std::vector<std::size_t> kDqnFieldWidths = {4, 8, 8, 8, 8, 8};
inline const std::vector<std::size_t> kPlainDqnWidths = {10, 16, 16, 16, 16, 16};

// Q network: 64x64 2-channel trivial observation -> (18, 3, 3) trivial map.
// Channel = invariant action combination, spatial cell = planar displacement,
// so a rotated observation rotates the Q map spatially with channels fixed.
// Seven convolutions; hidden fields are regular.
template <typename T>
EquiNetwork<T> build_equi_dqn(int n, Rng& rng,
                              const std::vector<std::size_t>& widths = kDqnFieldWidths) {
  require(widths.size() == 6, "equi dqn takes 6 hidden stage widths, got ", widths.size());
  EquiNetwork<T> net;
  FieldType in_f = FieldType::trivials(n, 2);
  net.add(std::make_shared<SpatialAvgPool<T>>(in_f, 2));  // 64 -> 32
  auto f = [&](std::size_t i) { return detail::regulars(n, widths[i]); };
  detail::add_steerable_block(net, in_f, f(0), 3, 1, rng, true, 2);  // 32 -> 16
  detail::add_steerable_block(net, f(0), f(1), 3, 1, rng, true, 2);  // 16 -> 8
  detail::add_steerable_block(net, f(1), f(2), 3, 1, rng);
  detail::add_steerable_block(net, f(2), f(3), 3, 1, rng);
  detail::add_steerable_block(net, f(3), f(4), 3, 0, rng, true, 2);  // 8 -> 6 -> 3
  detail::add_steerable_block(net, f(4), f(5), 3, 1, rng);
  detail::add_steerable_block(net, f(5), FieldType::trivials(n, 18), 1, 0, rng, false);
  return net;
}

// Parameter-matched conventional CNN with the same spatial topology and the
// same (18, 3, 3) output contract, no weight tying.
template <typename T>
EquiNetwork<T> build_plain_dqn(Rng& rng, const std::vector<std::size_t>& widths = kPlainDqnWidths,
                               int n = 4) {
  require(widths.size() == 6, "plain dqn takes 6 hidden stage widths, got ", widths.size());
  EquiNetwork<T> net;
  net.add(std::make_shared<SpatialAvgPool<T>>(FieldType::trivials(n, 2), 2));
  detail::add_plain_block(net, n, 2, widths[0], 3, 1, rng, true, 2);
  detail::add_plain_block(net, n, widths[0], widths[1], 3, 1, rng, true, 2);
  detail::add_plain_block(net, n, widths[1], widths[2], 3, 1, rng);
  detail::add_plain_block(net, n, widths[2], widths[3], 3, 1, rng);
  detail::add_plain_block(net, n, widths[3], widths[4], 3, 0, rng, true, 2);
  detail::add_plain_block(net, n, widths[4], widths[5], 3, 1, rng);
  detail::add_plain_block(net, n, widths[5], 18, 1, 0, rng, false);
  return net;
}

// SAC action layout: 5-vector (dx, dy, lambda, dz, dtheta); the planar pair
// forms one standard block, the rest are trivial.
inline FieldType sac_action_field(int n) {
  return FieldType(n, {Representation::standard(n), Representation::trivial(n),
                       Representation::trivial(n), Representation::trivial(n)});
}

// Actor head layout: channels 0..1 planar mean (standard block), 2..4
// invariant means (lambda, dz, dtheta), 5..9 per-dimension log sigma.
inline FieldType sac_actor_out_field(int n) {
  std::vector<Representation> blocks;
  blocks.push_back(Representation::standard(n));
  for (int i = 0; i < 8; ++i) blocks.push_back(Representation::trivial(n));
  return FieldType(n, std::move(blocks));
}

struct SacWidths {
  std::vector<std::size_t> actor = {4, 8, 8, 8, 8, 8, 8};  // regular fields, A1..A7
  std::vector<std::size_t> encoder = {4, 8, 8, 8, 8, 16};  // E1..E6 (E6 is the 1x1 bottleneck)
  std::vector<std::size_t> head = {8, 8};                  // H1..H2 per Q head
};

struct PlainSacWidths {
  std::vector<std::size_t> actor = {10, 16, 16, 16, 16, 16, 16};  // raw channels
  std::vector<std::size_t> encoder = {10, 16, 16, 16, 16, 32};
  std::vector<std::size_t> head = {19, 19};
};

template <typename T>
struct SacModel {
  EquiNetwork<T> actor;
  EquiNetwork<T> encoder;  // obs -> 1x1 state feature shared by both heads
  EquiNetwork<T> q1, q2;   // concat(state feature, embedded action) -> scalar

  std::vector<ad::Var<T>> critic_params() {
    auto ps = encoder.params();
    for (auto& p : q1.params()) ps.push_back(p);
    for (auto& p : q2.params()) ps.push_back(p);
    return ps;
  }
  std::size_t effective_params() {
    return actor.effective_params() + encoder.effective_params() + q1.effective_params() +
           q2.effective_params();
  }
};

// Actor: eight convolutions ending in a 1x1 ten-channel field with no
// nonlinearity after the last layer (a relu would bend the standard block).
template <typename T>
EquiNetwork<T> build_equi_sac_actor(int n, Rng& rng, const std::vector<std::size_t>& w) {
  require(w.size() == 7, "equi sac actor takes 7 hidden widths, got ", w.size());
  EquiNetwork<T> net;
  FieldType in_f = FieldType::trivials(n, 2);
  net.add(std::make_shared<SpatialAvgPool<T>>(in_f, 2));  // 64 -> 32
  auto f = [&](std::size_t i) { return detail::regulars(n, w[i]); };
  detail::add_steerable_block(net, in_f, f(0), 3, 1, rng, true, 2);  // 32 -> 16
  detail::add_steerable_block(net, f(0), f(1), 3, 1, rng, true, 2);  // 16 -> 8
  detail::add_steerable_block(net, f(1), f(2), 3, 1, rng);
  detail::add_steerable_block(net, f(2), f(3), 3, 0, rng, true, 2);  // 8 -> 6 -> 3
  detail::add_steerable_block(net, f(3), f(4), 3, 1, rng);
  detail::add_steerable_block(net, f(4), f(5), 3, 0, rng);  // 3 -> 1
  detail::add_steerable_block(net, f(5), f(6), 1, 0, rng);
  detail::add_steerable_block(net, f(6), sac_actor_out_field(n), 1, 0, rng, false);
  return net;
}

template <typename T>
EquiNetwork<T> build_plain_sac_actor(int n, Rng& rng, const std::vector<std::size_t>& w) {
  require(w.size() == 7, "plain sac actor takes 7 hidden widths, got ", w.size());
  EquiNetwork<T> net;
  net.add(std::make_shared<SpatialAvgPool<T>>(FieldType::trivials(n, 2), 2));
  detail::add_plain_block(net, n, 2, w[0], 3, 1, rng, true, 2);
  detail::add_plain_block(net, n, w[0], w[1], 3, 1, rng, true, 2);
  detail::add_plain_block(net, n, w[1], w[2], 3, 1, rng);
  detail::add_plain_block(net, n, w[2], w[3], 3, 0, rng, true, 2);
  detail::add_plain_block(net, n, w[3], w[4], 3, 1, rng);
  detail::add_plain_block(net, n, w[4], w[5], 3, 0, rng);
  detail::add_plain_block(net, n, w[5], w[6], 1, 0, rng);
  detail::add_plain_block(net, n, w[6], 10, 1, 0, rng, false);
  return net;
}

// Critic: encoder to a 1x1 regular feature; each head consumes the feature
// concatenated with the embedded action, runs regular 1x1 stages, group-max
// pools to trivials (the nonlinear step that evades the linear invariance
// collapse), then maps linearly to one scalar. Encoder + head = 9 stages.
template <typename T>
void build_equi_sac_critic(int n, Rng& rng, const SacWidths& w, EquiNetwork<T>& encoder,
                           EquiNetwork<T>& q1, EquiNetwork<T>& q2) {
  require(w.encoder.size() == 6, "equi sac encoder takes 6 widths");
  require(w.head.size() == 2, "equi sac head takes 2 widths");
  FieldType in_f = FieldType::trivials(n, 2);
  encoder.add(std::make_shared<SpatialAvgPool<T>>(in_f, 2));
  auto f = [&](std::size_t i) { return detail::regulars(n, w.encoder[i]); };
  detail::add_steerable_block(encoder, in_f, f(0), 3, 1, rng, true, 2);
  detail::add_steerable_block(encoder, f(0), f(1), 3, 1, rng, true, 2);
  detail::add_steerable_block(encoder, f(1), f(2), 3, 1, rng);
  detail::add_steerable_block(encoder, f(2), f(3), 3, 0, rng, true, 2);
  detail::add_steerable_block(encoder, f(3), f(4), 3, 1, rng);
  detail::add_steerable_block(encoder, f(4), f(5), 3, 0, rng);  // 3 -> 1, 1x1 feature

  FieldType joint = detail::join_fields(encoder.out_field(), sac_action_field(n));
  for (EquiNetwork<T>* q : {&q1, &q2}) {
    FieldType h0 = detail::regulars(n, w.head[0]);
    FieldType h1 = detail::regulars(n, w.head[1]);
    detail::add_steerable_block(*q, joint, h0, 1, 0, rng);
    detail::add_steerable_block(*q, h0, h1, 1, 0, rng);
    q->add(std::make_shared<GroupMaxPool<T>>(h1));
    FieldType pooled = FieldType::trivials(n, h1.blocks.size());
    detail::add_steerable_block(*q, pooled, FieldType::trivials(n, 1), 1, 0, rng, false);
  }
}

template <typename T>
void build_plain_sac_critic(int n, Rng& rng, const PlainSacWidths& w, EquiNetwork<T>& encoder,
                            EquiNetwork<T>& q1, EquiNetwork<T>& q2) {
  require(w.encoder.size() == 6, "plain sac encoder takes 6 widths");
  require(w.head.size() == 2, "plain sac head takes 2 widths");
  encoder.add(std::make_shared<SpatialAvgPool<T>>(FieldType::trivials(n, 2), 2));
  detail::add_plain_block(encoder, n, 2, w.encoder[0], 3, 1, rng, true, 2);
  detail::add_plain_block(encoder, n, w.encoder[0], w.encoder[1], 3, 1, rng, true, 2);
  detail::add_plain_block(encoder, n, w.encoder[1], w.encoder[2], 3, 1, rng);
  detail::add_plain_block(encoder, n, w.encoder[2], w.encoder[3], 3, 0, rng, true, 2);
  detail::add_plain_block(encoder, n, w.encoder[3], w.encoder[4], 3, 1, rng);
  detail::add_plain_block(encoder, n, w.encoder[4], w.encoder[5], 3, 0, rng);
  std::size_t joint = w.encoder[5] + 5;
  for (EquiNetwork<T>* q : {&q1, &q2}) {
    detail::add_plain_block(*q, n, joint, w.head[0], 1, 0, rng);
    detail::add_plain_block(*q, n, w.head[0], w.head[1], 1, 0, rng);
    detail::add_plain_block(*q, n, w.head[1], 1, 1, 0, rng, false);
  }
}

template <typename T>
SacModel<T> build_equi_sac(int n, Rng& rng, const SacWidths& w = SacWidths{}) {
  SacModel<T> m;
  m.actor = build_equi_sac_actor<T>(n, rng, w.actor);
  build_equi_sac_critic(n, rng, w, m.encoder, m.q1, m.q2);
  return m;
}

template <typename T>
SacModel<T> build_plain_sac(int n, Rng& rng, const PlainSacWidths& w = PlainSacWidths{}) {
  SacModel<T> m;
  m.actor = build_plain_sac_actor<T>(n, rng, w.actor);
  build_plain_sac_critic(n, rng, w, m.encoder, m.q1, m.q2);
  return m;
}

// Stacks feature maps into an (N, C, H, W) batch tensor.
template <typename T>
Tensor<T> stack_obs(const std::vector<std::shared_ptr<const FeatureMap<T>>>& maps) {
  require(!maps.empty(), "empty observation batch");
  const auto& first = *maps.front();
  std::size_t c = first.channels(), h = first.height, w = first.width;
  Tensor<T> out({maps.size(), c, h, w});
  std::size_t stride = c * h * w;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    require(maps[i]->channels() == c && maps[i]->height == h && maps[i]->width == w,
            "observation batch shape mismatch");
    std::copy(maps[i]->data.begin(), maps[i]->data.end(), out.data.begin() + i * stride);
  }
  return out;
}

// Packs sim actions into the SAC 5-vector order as an (N, 5, 1, 1) tensor.
template <typename T>
Tensor<T> pack_actions(const std::vector<Action>& actions) {
  Tensor<T> out({actions.size(), 5, 1, 1});
  for (std::size_t i = 0; i < actions.size(); ++i) {
    out.data[i * 5 + 0] = static_cast<T>(actions[i].dx);
    out.data[i * 5 + 1] = static_cast<T>(actions[i].dy);
    out.data[i * 5 + 2] = static_cast<T>(actions[i].lambda);
    out.data[i * 5 + 3] = static_cast<T>(actions[i].dz);
    out.data[i * 5 + 4] = static_cast<T>(actions[i].dtheta);
  }
  return out;
}

inline Action unpack_action(const double* v) {
  Action a;
  a.dx = v[0];
  a.dy = v[1];
  a.lambda = v[2];
  a.dz = v[3];
  a.dtheta = v[4];
  return a;
}

}  // namespace equirl
