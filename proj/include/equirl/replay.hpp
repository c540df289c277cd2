#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "equirl/common.hpp"
#include "equirl/group.hpp"
#include "equirl/sim.hpp"

// Prioritized replay with rotation-augmented entries.
//
// Each add stores the base transition once plus `factor` logical copies that
// carry only a rotation angle; the rotated observation materializes at sample
// time, so memory scales with base transitions rather than logical size. A
// group of 1+factor entries occupies one ring slot and is evicted as a unit.

namespace equirl {

template <typename T>
struct Transition {
  std::shared_ptr<const FeatureMap<T>> obs;
  std::shared_ptr<const FeatureMap<T>> next_obs;
  Action action;
  int action_index = -1;  // flat discrete index when the policy is discrete
  double reward = 0.0;
  bool done = false;
  bool is_expert = false;
};

// Discrete action lattice: 18 invariant combinations (lambda, z, theta; 2*3*3)
// times 9 planar cells. Cell (i, j) maps to (dx, dy) = (j-1, 1-i) * 0.02, so
// quarter turns permute cells exactly. Flat index = combo * 9 + i * 3 + j.
inline constexpr int kDiscreteActions = 162;

inline Action discrete_action_from_index(int flat) {
  require(flat >= 0 && flat < kDiscreteActions, "discrete action index out of range: ", flat);
  int cell = flat % 9;
  int combo = flat / 9;
  int ti = combo % 3;
  int zi = (combo / 3) % 3;
  int li = combo / 9;
  Action a;
  a.lambda = li == 0 ? 1.0 : 0.0;
  a.dx = (cell % 3 - 1) * 0.02;
  a.dy = (1 - cell / 3) * 0.02;
  a.dz = (zi - 1) * 0.02;
  a.dtheta = (ti - 1) * (kPi / 16);
  return a;
}

inline int discrete_action_index(const Action& a) {
  auto lvl = [](double v, double step) {
    int k = static_cast<int>(std::lround(v / step));
    require(k >= -1 && k <= 1 && std::abs(v - k * step) < 1e-9,
            "action component off the discrete lattice: ", v);
    return k;
  };
  int li = a.lambda > 0.5 ? 0 : 1;
  int zi = lvl(a.dz, 0.02) + 1;
  int ti = lvl(a.dtheta, kPi / 16) + 1;
  int j = lvl(a.dx, 0.02) + 1;
  int i = 1 - lvl(a.dy, 0.02);
  return ((li * 3 + zi) * 3 + ti) * 9 + i * 3 + j;
}

// Quarter turns act on the flat index by rotating the planar cell; the
// invariant combination is untouched.
inline int rotate_discrete_index(const GroupElement& g, int flat) {
  require((4 * g.index) % g.n == 0, "discrete actions only rotate by quarter turns");
  Action a = discrete_action_from_index(flat);
  Action r = rotate_action(g.angle(), a);
  return discrete_action_index(r);
}

// Rotates the observation pixels and the planar action component; reward,
// done, the expert flag and the invariant action components pass through.
// Out-of-view samples fill with `background` (quarter turns need none).
template <typename T>
Transition<T> augment_transition(double theta, const Transition<T>& t, T background = T(0)) {
  Transition<T> out = t;
  if (theta == 0.0) return out;
  out.obs = std::make_shared<FeatureMap<T>>(rotate_feature_map(theta, *t.obs, background));
  out.next_obs = std::make_shared<FeatureMap<T>>(rotate_feature_map(theta, *t.next_obs, background));
  out.action = rotate_action(theta, t.action);
  if (t.action_index >= 0) {
    double quarters = theta / (kPi / 2);
    require(std::abs(quarters - std::round(quarters)) < 1e-9,
            "discrete transitions only augment by quarter turns");
    int k = static_cast<int>(std::llround(quarters)) & 3;
    out.action_index = rotate_discrete_index(GroupElement(4, k), t.action_index);
  }
  return out;
}

enum class AngleMode { continuous, quarter };

template <typename T>
class ReplayBuffer {
 public:
  struct Sample {
    std::size_t index = 0;  // logical entry id, for the priority write-back
    Transition<T> t;
    double angle = 0.0;
    double weight = 1.0;
  };

  ReplayBuffer(std::size_t capacity, int aug_factor, AngleMode mode, double alpha = 0.6,
               double expert_bonus = 1.0, std::uint64_t seed = 0)
      : k_(static_cast<std::size_t>(aug_factor) + 1),
        cap_groups_(capacity / (static_cast<std::size_t>(aug_factor) + 1)),
        mode_(mode),
        alpha_(alpha),
        expert_bonus_(expert_bonus),
        rng_(seed) {
    require(aug_factor >= 0, "augmentation factor must be >= 0");
    require(alpha >= 0.0, "priority exponent must be >= 0");
    require(cap_groups_ >= 1, "capacity ", capacity, " below one group of ", k_);
    std::size_t leaves = 1;
    while (leaves < cap_groups_ * k_) leaves *= 2;
    leaves_ = leaves;
    tree_.assign(2 * leaves_, 0.0);
    priority_.assign(cap_groups_ * k_, 0.0);
    angle_.assign(cap_groups_ * k_, 0.0);
  }

  std::size_t size() const { return std::min(next_group_, cap_groups_) * k_; }
  std::size_t capacity() const { return cap_groups_ * k_; }
  std::size_t entries_per_group() const { return k_; }

  // Inserts the base entry plus aug_factor rotated copies, all at the current
  // max base priority; expert entries carry a constant additive bonus on top.
  void add(Transition<T> t) {
    std::size_t slot = next_group_ % cap_groups_;
    ++next_group_;
    groups_.resize(std::min(next_group_, cap_groups_));
    groups_[slot] = std::move(t);
    for (std::size_t m = 0; m < k_; ++m) {
      std::size_t id = slot * k_ + m;
      angle_[id] = m == 0 ? 0.0 : draw_angle();
      set_raw_priority(id, max_base_ + (groups_[slot].is_expert ? expert_bonus_ : 0.0));
    }
  }

  Transition<T> materialize(std::size_t index, T background = T(0)) const {
    require(index < size(), "replay index ", index, " out of range ", size());
    return augment_transition(angle_[index], groups_[index / k_], background);
  }

  std::vector<Sample> sample(std::size_t batch, double beta) {
    require(size() > 0, "sample from an empty replay buffer");
    double total = tree_[1];
    require(total > 0.0, "replay buffer has no sampling mass");
    std::vector<Sample> out(batch);
    double n = static_cast<double>(size());
    double max_w = 0.0;
    for (auto& s : out) {
      double u = uniform(rng_, 0.0, total);
      std::size_t node = 1;
      while (node < leaves_) {
        node *= 2;
        if (u >= tree_[node] && tree_[node + 1] > 0.0) {
          u -= tree_[node];
          ++node;
        }
      }
      s.index = node - leaves_;
      s.angle = angle_[s.index];
      s.t = materialize(s.index);
      double p = tree_[leaves_ + s.index] / total;
      s.weight = std::pow(n * p, -beta);
      max_w = std::max(max_w, s.weight);
    }
    for (auto& s : out) s.weight /= max_w;
    return out;
  }

  // Post-learning write-back: base priority |TD| + eps, expert bonus kept.
  void update_td_error(std::size_t index, double td_abs) {
    require(index < size(), "replay index ", index, " out of range ", size());
    double base = std::abs(td_abs) + 1e-6;
    max_base_ = std::max(max_base_, base);
    set_raw_priority(index, base + (groups_[index / k_].is_expert ? expert_bonus_ : 0.0));
  }

  // Direct priority override (diagnostics; bypasses the expert bonus).
  void set_priority(std::size_t index, double p) {
    require(index < size(), "replay index ", index, " out of range ", size());
    require(p > 0.0, "priority must be positive");
    set_raw_priority(index, p);
  }

  double priority(std::size_t index) const { return priority_[index]; }
  double angle(std::size_t index) const { return angle_[index]; }
  double total_mass() const { return tree_[1]; }
  const Transition<T>& base(std::size_t group) const { return groups_[group]; }

 private:
  double draw_angle() {
    if (mode_ == AngleMode::quarter) return uniform_int(rng_, 0, 3) * (kPi / 2);
    return uniform(rng_, 0.0, 2 * kPi);
  }

  void set_raw_priority(std::size_t id, double p) {
    priority_[id] = p;
    std::size_t node = leaves_ + id;
    tree_[node] = std::pow(p, alpha_);
    for (node /= 2; node >= 1; node /= 2) tree_[node] = tree_[2 * node] + tree_[2 * node + 1];
  }

  std::size_t k_;
  std::size_t cap_groups_;
  AngleMode mode_;
  double alpha_;
  double expert_bonus_;
  Rng rng_;
  std::size_t next_group_ = 0;
  double max_base_ = 1.0;
  std::vector<Transition<T>> groups_;
  std::vector<double> tree_;
  std::size_t leaves_ = 0;
  std::vector<double> priority_;
  std::vector<double> angle_;
};

}  // namespace equirl
