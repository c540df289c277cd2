#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "equirl/autodiff.hpp"
#include "equirl/checkpoint.hpp"
#include "equirl/group.hpp"

namespace equirl {

/// Test hook: when true, project_kernel_op becomes the identity, breaking
/// the kernel constraint. Used by the verification CLI's fault injection to
/// prove the equivariance suite has teeth.
inline bool disable_kernel_projection = false;

namespace detail {

/// out(v) = in(rho1(g_angle) v) on a k x k grid whose coordinates are
/// centered pixel offsets. Exact permutation for quarter turns, bilinear
/// with zero fill otherwise. `planes` copies of the grid are transformed.
template <typename T>
void rotate_kernel_grid(const T* in, T* out, int k, std::size_t planes, double angle) {
  double quarters = angle / (kPi / 2.0);
  double nearest = std::round(quarters);
  std::size_t kk = static_cast<std::size_t>(k) * k;
  if (std::abs(quarters - nearest) < 1e-12) {
    int q = ((static_cast<int>(nearest) % 4) + 4) % 4;
    int m = k - 1;
    for (int r = 0; r < k; ++r)
      for (int c = 0; c < k; ++c) {
        // (x, y) = (c - m/2, m/2 - r) in doubled integer coordinates
        int X = 2 * c - m, Y = m - 2 * r;
        for (int t = 0; t < q; ++t) {
          int nx = -Y, ny = X;  // forward rotation: sample point rho1(g) v
          X = nx;
          Y = ny;
        }
        int sc = (X + m) / 2, sr = (m - Y) / 2;
        std::size_t dst = static_cast<std::size_t>(r) * k + c;
        std::size_t src = static_cast<std::size_t>(sr) * k + sc;
        for (std::size_t p = 0; p < planes; ++p) out[p * kk + dst] = in[p * kk + src];
      }
    return;
  }
  double co = std::cos(angle), si = std::sin(angle);
  double ctr = (k - 1) / 2.0;
  for (int r = 0; r < k; ++r)
    for (int c = 0; c < k; ++c) {
      double x = c - ctr, y = ctr - r;
      double xs = co * x - si * y;  // rho1(g) v
      double ys = si * x + co * y;
      double sc = xs + ctr, sr = ctr - ys;
      double fr = std::floor(sr), fc = std::floor(sc);
      double dr = sr - fr, dc = sc - fc;
      std::size_t dst = static_cast<std::size_t>(r) * k + c;
      for (std::size_t p = 0; p < planes; ++p) {
        auto sample = [&](double rr, double cc) -> double {
          if (rr < 0 || cc < 0 || rr >= k || cc >= k) return 0.0;
          return static_cast<double>(
              in[p * kk + static_cast<std::size_t>(rr) * k + static_cast<std::size_t>(cc)]);
        };
        out[p * kk + dst] = static_cast<T>(
            (1 - dr) * (1 - dc) * sample(fr, fc) + (1 - dr) * dc * sample(fr, fc + 1) +
            dr * (1 - dc) * sample(fr + 1, fc) + dr * dc * sample(fr + 1, fc + 1));
      }
    }
}

/// Exact adjoint of rotate_kernel_grid at the same angle (scatter with the
/// same interpolation weights). For quarter turns this equals rotation by
/// the inverse angle.
template <typename T>
void rotate_kernel_grid_adjoint(const T* gout, T* gin, int k, std::size_t planes, double angle) {
  double quarters = angle / (kPi / 2.0);
  double nearest = std::round(quarters);
  std::size_t kk = static_cast<std::size_t>(k) * k;
  if (std::abs(quarters - nearest) < 1e-12) {
    int q = ((static_cast<int>(nearest) % 4) + 4) % 4;
    int m = k - 1;
    for (int r = 0; r < k; ++r)
      for (int c = 0; c < k; ++c) {
        int X = 2 * c - m, Y = m - 2 * r;
        for (int t = 0; t < q; ++t) {
          int nx = -Y, ny = X;
          X = nx;
          Y = ny;
        }
        int sc = (X + m) / 2, sr = (m - Y) / 2;
        std::size_t dst = static_cast<std::size_t>(r) * k + c;
        std::size_t src = static_cast<std::size_t>(sr) * k + sc;
        for (std::size_t p = 0; p < planes; ++p) gin[p * kk + src] += gout[p * kk + dst];
      }
    return;
  }
  double co = std::cos(angle), si = std::sin(angle);
  double ctr = (k - 1) / 2.0;
  for (int r = 0; r < k; ++r)
    for (int c = 0; c < k; ++c) {
      double x = c - ctr, y = ctr - r;
      double xs = co * x - si * y;
      double ys = si * x + co * y;
      double sc = xs + ctr, sr = ctr - ys;
      double fr = std::floor(sr), fc = std::floor(sc);
      double dr = sr - fr, dc = sc - fc;
      std::size_t dst = static_cast<std::size_t>(r) * k + c;
      auto scatter = [&](std::size_t p, double rr, double cc, double w) {
        if (rr < 0 || cc < 0 || rr >= k || cc >= k || w == 0.0) return;
        gin[p * kk + static_cast<std::size_t>(rr) * k + static_cast<std::size_t>(cc)] +=
            static_cast<T>(w * static_cast<double>(gout[p * kk + dst]));
      };
      for (std::size_t p = 0; p < planes; ++p) {
        scatter(p, fr, fc, (1 - dr) * (1 - dc));
        scatter(p, fr, fc + 1, (1 - dr) * dc);
        scatter(p, fr + 1, fc, dr * (1 - dc));
        scatter(p, fr + 1, fc + 1, dr * dc);
      }
    }
}

/// R = A K B blockwise on the channel axes of K (out_dim, in_dim, k*k),
/// where A = rho_out(go) and B = rho_in(gi), evaluated per block pair.
template <typename T>
Tensor<T> channel_sandwich(const Tensor<T>& K, const FieldType& in_f, const FieldType& out_f,
                           const GroupElement& go, const GroupElement& gi) {
  std::size_t in_dim = in_f.total_dim(), kk = K.shape[2] * K.shape[3];
  Tensor<T> R(K.shape);
  std::size_t oo = 0;
  for (const auto& ob : out_f.blocks) {
    std::size_t od = ob.dim();
    Mat A = rep_matrix(ob, go);
    std::size_t io = 0;
    for (const auto& ib : in_f.blocks) {
      std::size_t id = ib.dim();
      Mat B = rep_matrix(ib, gi);
      for (std::size_t a = 0; a < od; ++a)
        for (std::size_t b = 0; b < id; ++b) {
          T* dst = &R.data[((oo + a) * in_dim + (io + b)) * kk];
          for (std::size_t c = 0; c < od; ++c) {
            double Aac = A(a, c);
            if (Aac == 0.0) continue;
            for (std::size_t d = 0; d < id; ++d) {
              double w = Aac * B(d, b);
              if (w == 0.0) continue;
              const T* src = &K.data[((oo + c) * in_dim + (io + d)) * kk];
              for (std::size_t p = 0; p < kk; ++p)
                dst[p] += static_cast<T>(w * static_cast<double>(src[p]));
            }
          }
        }
      io += id;
    }
    oo += od;
  }
  return R;
}

}  // namespace detail

namespace detail {

/// One pass of the group average
///   A(K)(v) = (1/n) sum_g rho_out(g)^{-1} K(rho1(g) v) rho_in(g).
template <typename T>
Tensor<T> average_kernel_once(const Tensor<T>& raw, const FieldType& in_f,
                              const FieldType& out_f) {
  int n = in_f.n;
  int k = static_cast<int>(raw.shape[2]);
  std::size_t planes = raw.shape[0] * raw.shape[1];
  Tensor<T> acc(raw.shape);
  Tensor<T> rot(raw.shape);
  for (int gi = 0; gi < n; ++gi) {
    GroupElement g(n, gi);
    detail::rotate_kernel_grid(raw.data.data(), rot.data.data(), k, planes, g.angle());
    Tensor<T> term = detail::channel_sandwich(rot, in_f, out_f, g.inverse(), g);
    for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += term.data[i];
  }
  T inv = T(1) / static_cast<T>(n);
  for (auto& x : acc.data) x *= inv;
  return acc;
}

/// Adjoint of a single average pass under the Frobenius inner product.
template <typename T>
Tensor<T> average_kernel_once_adjoint(const Tensor<T>& grad, const FieldType& in_f,
                                      const FieldType& out_f) {
  int n = in_f.n;
  int k = static_cast<int>(grad.shape[2]);
  std::size_t planes = grad.shape[0] * grad.shape[1];
  Tensor<T> acc(grad.shape);
  for (int gi = 0; gi < n; ++gi) {
    GroupElement g(n, gi);
    // adjoint of (A . B) is (A^T . B^T); for orthogonal reps that is the
    // sandwich at the inverse element
    Tensor<T> term = detail::channel_sandwich(grad, in_f, out_f, g, g.inverse());
    detail::rotate_kernel_grid_adjoint(term.data.data(), acc.data.data(), k, planes, g.angle());
  }
  T inv = T(1) / static_cast<T>(n);
  for (auto& x : acc.data) x *= inv;
  return acc;
}

/// Number of average passes composing the projector. For group orders whose
/// rotations all land on the grid (n in {1,2,4}), and for 1x1 kernels where no
/// spatial resampling happens, the single-pass average is exactly idempotent.
/// Other orders sample the grid bilinearly; there the single-pass ops do not
/// compose as a group, so the average is power-iterated to its fixed space
/// (contraction ratio about 0.73 per pass for 3x3 C_8; 128 passes push the
/// off-space residual below 1e-9). The count is a pure function of (n, k) so
/// forward and adjoint always agree, keeping the adjoint exact.
inline int projection_passes(int n, int k) {
  if (k == 1 || n == 1 || n == 2 || n == 4) return 1;
  return 128;
}

}  // namespace detail

/// Group-averaging projector onto the steerable kernel space:
///   P(K)(v) = (1/n) sum_g rho_out(g)^{-1} K(rho1(g) v) rho_in(g),
/// power-iterated when grid rotations are interpolated (see
/// detail::projection_passes). Its fixed points satisfy
/// K(rho1(g) v) = rho_out(g) K(v) rho_in(g)^{-1}, which is the equivariance
/// condition for correlation under the feature-map action
/// (gF)(x) = rho(g) F(rho1(g)^{-1} x). Idempotent and (over the
/// quarter-turn-exact grid) self-adjoint.
template <typename T>
Tensor<T> project_kernel(const Tensor<T>& raw, const FieldType& in_f, const FieldType& out_f) {
  require(raw.rank() == 4, "kernel must be (out_dim, in_dim, k, k)");
  require(raw.shape[0] == out_f.total_dim() && raw.shape[1] == in_f.total_dim(),
          "kernel channel extents ", raw.shape_str(), " do not match fields (",
          out_f.total_dim(), ",", in_f.total_dim(), ")");
  require(raw.shape[2] == raw.shape[3], "kernel grid must be square");
  require(raw.shape[2] % 2 == 1, "kernel size must be odd, got ", raw.shape[2]);
  require(in_f.n == out_f.n, "field group order mismatch");
  int passes = detail::projection_passes(in_f.n, static_cast<int>(raw.shape[2]));
  Tensor<T> cur = detail::average_kernel_once(raw, in_f, out_f);
  for (int i = 1; i < passes; ++i) cur = detail::average_kernel_once(cur, in_f, out_f);
  return cur;
}

/// Adjoint of project_kernel under the Frobenius inner product; used as the
/// backward map so gradients check against finite differences even when the
/// grid rotation is interpolated (n not dividing 4).
template <typename T>
Tensor<T> project_kernel_adjoint(const Tensor<T>& grad, const FieldType& in_f,
                                 const FieldType& out_f) {
  int passes = detail::projection_passes(in_f.n, static_cast<int>(grad.shape[2]));
  Tensor<T> cur = detail::average_kernel_once_adjoint(grad, in_f, out_f);
  for (int i = 1; i < passes; ++i) cur = detail::average_kernel_once_adjoint(cur, in_f, out_f);
  return cur;
}

/// Autodiff wrapper: forward projects, backward applies the adjoint
/// projector to the upstream gradient.
template <typename T>
ad::Var<T> project_kernel_op(const ad::Var<T>& raw, const FieldType& in_f, const FieldType& out_f) {
  if (disable_kernel_projection) return ad::mul_scalar(raw, 1.0);
  Tensor<T> out = project_kernel(raw.value(), in_f, out_f);
  auto p = raw.node();
  return ad::make_node<T>(std::move(out), {p}, [p, in_f, out_f](ad::Node<T>& nd) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    Tensor<T> g = project_kernel_adjoint(nd.grad, in_f, out_f);
    for (std::size_t i = 0; i < g.data.size(); ++i) p->grad.data[i] += g.data[i];
  });
}

/// Dimension of the steerable kernel space: null-space analysis of the
/// stacked linear constraint K - rho_out(g) K(rho1(g) .) rho_in(g)^{-1} = 0
/// at the group generator, computed independently per block pair (the
/// constraint decouples across block pairs).
inline int basis_dimension(const FieldType& in_f, const FieldType& out_f, int k, int n) {
  require(k % 2 == 1, "kernel size must be odd, got ", k);
  require(in_f.n == n && out_f.n == n, "field group order mismatch");
  int total = 0;
  for (const auto& ob : out_f.blocks)
    for (const auto& ib : in_f.blocks) {
      FieldType fi(n, {ib}), fo(n, {ob});
      std::size_t D = ib.dim() * ob.dim() * static_cast<std::size_t>(k) * k;
      // M = I - T_gen acting on vec(K)
      std::vector<std::vector<double>> M(D, std::vector<double>(D, 0.0));
      GroupElement gen(n, 1);
      Tensor<double> e({ob.dim(), ib.dim(), static_cast<std::size_t>(k),
                        static_cast<std::size_t>(k)});
      Tensor<double> rot(e.shape);
      for (std::size_t j = 0; j < D; ++j) {
        std::fill(e.data.begin(), e.data.end(), 0.0);
        e.data[j] = 1.0;
        detail::rotate_kernel_grid(e.data.data(), rot.data.data(), k, ob.dim() * ib.dim(),
                                   gen.angle());
        Tensor<double> t = detail::channel_sandwich(rot, fi, fo, gen.inverse(), gen);
        for (std::size_t i = 0; i < D; ++i) M[i][j] = (i == j ? 1.0 : 0.0) - t.data[i];
      }
      // rank via Gaussian elimination with partial pivoting
      std::size_t rank = 0;
      std::size_t row = 0;
      for (std::size_t col = 0; col < D && row < D; ++col) {
        std::size_t piv = row;
        for (std::size_t r = row + 1; r < D; ++r)
          if (std::abs(M[r][col]) > std::abs(M[piv][col])) piv = r;
        if (std::abs(M[piv][col]) < 1e-9) continue;
        std::swap(M[piv], M[row]);
        for (std::size_t r = row + 1; r < D; ++r) {
          double f = M[r][col] / M[row][col];
          if (f == 0.0) continue;
          for (std::size_t c = col; c < D; ++c) M[r][c] -= f * M[row][c];
        }
        ++row;
        ++rank;
      }
      total += static_cast<int>(D - rank);
    }
  return total;
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
struct Layer {
  virtual ~Layer() = default;
  virtual ad::Var<T> forward(const ad::Var<T>& x) = 0;
  virtual const FieldType& in_field() const = 0;
  virtual const FieldType& out_field() const = 0;
  virtual std::vector<ad::Var<T>> params() { return {}; }
  virtual std::string kind() const = 0;
  virtual void save(Checkpoint&, const std::string&) const {}
  virtual void load(const Checkpoint&, const std::string&) {}
};

namespace detail {

// channel -> index of its trivial/regular block (-1 for standard blocks)
inline std::vector<int> bias_block_of_channel(const FieldType& f, std::size_t& n_bias) {
  std::vector<int> map(f.total_dim(), -1);
  std::size_t off = 0;
  int b = 0;
  for (const auto& blk : f.blocks) {
    std::size_t d = blk.dim();
    if (blk.kind != RepKind::standard) {
      for (std::size_t i = 0; i < d; ++i) map[off + i] = b;
      ++b;
    }
    off += d;
  }
  n_bias = static_cast<std::size_t>(b);
  return map;
}

/// Expands one bias value per trivial/regular block to a per-channel vector
/// (standard blocks get zero: a nonzero bias there would break equivariance).
template <typename T>
ad::Var<T> expand_block_bias(const ad::Var<T>& bias, const FieldType& f) {
  std::size_t n_bias = 0;
  auto map = bias_block_of_channel(f, n_bias);
  require(bias.value().numel() == n_bias, "bias length ", bias.value().numel(),
          " != trivial/regular block count ", n_bias);
  Tensor<T> out({f.total_dim()});
  for (std::size_t c = 0; c < map.size(); ++c)
    out.data[c] = map[c] >= 0 ? bias.value().data[map[c]] : T(0);
  auto p = bias.node();
  auto saved = std::make_shared<std::vector<int>>(std::move(map));
  return ad::make_node<T>(std::move(out), {p}, [p, saved](ad::Node<T>& nd) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t c = 0; c < saved->size(); ++c)
      if ((*saved)[c] >= 0) p->grad.data[(*saved)[c]] += nd.grad.data[c];
  });
}

}  // namespace detail

/// Convolution whose kernel lives in the steerable space: raw coefficients
/// pass through the group-averaging projector on every forward, so the
/// realized kernel satisfies the constraint after any optimizer step.
template <typename T>
class SteerableConv : public Layer<T> {
 public:
  SteerableConv(FieldType in_f, FieldType out_f, int k, int pad, Rng& rng)
      : in_f_(std::move(in_f)), out_f_(std::move(out_f)), k_(k), pad_(pad) {
    require(in_f_.n == out_f_.n, "field group order mismatch");
    require(k_ % 2 == 1, "kernel size must be odd, got ", k_);
    double stddev = std::sqrt(2.0 / (static_cast<double>(in_f_.total_dim()) * k_ * k_));
    raw_ = ad::param(Tensor<T>::randn(
        {out_f_.total_dim(), in_f_.total_dim(), static_cast<std::size_t>(k_),
         static_cast<std::size_t>(k_)},
        rng, stddev));
    std::size_t n_bias = 0;
    detail::bias_block_of_channel(out_f_, n_bias);
    bias_ = ad::param(Tensor<T>::zeros({n_bias}));
  }

  ad::Var<T> forward(const ad::Var<T>& x) override {
    require(x.value().rank() == 4, "conv input must be (N,C,H,W)");
    require(x.value().dim(1) == in_f_.total_dim(), "input channels ", x.value().dim(1),
            " do not match field dim ", in_f_.total_dim());
    auto kproj = project_kernel_op(raw_, in_f_, out_f_);
    auto y = ad::conv2d(x, kproj, pad_, 1);
    if (bias_.value().numel() == 0) return y;
    return ad::bias_channels(y, detail::expand_block_bias(bias_, out_f_));
  }

  const FieldType& in_field() const override { return in_f_; }
  const FieldType& out_field() const override { return out_f_; }
  std::vector<ad::Var<T>> params() override {
    if (bias_.value().numel() == 0) return {raw_};
    return {raw_, bias_};
  }
  std::string kind() const override { return "steerable_conv"; }

  /// Trainable degrees of freedom: the steerable-basis dimension plus bias
  /// count (raw directions orthogonal to the basis have no effect).
  std::size_t effective_params() const {
    return static_cast<std::size_t>(basis_dimension(in_f_, out_f_, k_, in_f_.n)) +
           bias_.value().numel();
  }

  Tensor<T> realized_kernel() const { return project_kernel(raw_.value(), in_f_, out_f_); }
  int kernel_size() const { return k_; }
  const ad::Var<T>& raw() const { return raw_; }

  void save(Checkpoint& ck, const std::string& prefix) const override {
    ck.put(prefix + ".raw", raw_.value());
    ck.put(prefix + ".bias", bias_.value());
  }
  void load(const Checkpoint& ck, const std::string& prefix) override {
    Tensor<T> r = ck.get<T>(prefix + ".raw");
    require(r.shape == raw_.value().shape, "checkpoint kernel shape mismatch at ", prefix);
    raw_.mutable_value() = std::move(r);
    Tensor<T> b = ck.get<T>(prefix + ".bias");
    require(b.shape == bias_.value().shape, "checkpoint bias shape mismatch at ", prefix);
    bias_.mutable_value() = std::move(b);
  }

 private:
  FieldType in_f_, out_f_;
  int k_, pad_;
  ad::Var<T> raw_, bias_;
};

/// Ordinary convolution for the non-equivariant baselines. Carries all-
/// trivial field annotations so it plugs into the same network plumbing.
template <typename T>
class PlainConv : public Layer<T> {
 public:
  PlainConv(int n, std::size_t c_in, std::size_t c_out, int k, int pad, Rng& rng)
      : in_f_(FieldType::trivials(n, c_in)), out_f_(FieldType::trivials(n, c_out)), k_(k),
        pad_(pad) {
    double stddev = std::sqrt(2.0 / (static_cast<double>(c_in) * k * k));
    w_ = ad::param(Tensor<T>::randn(
        {c_out, c_in, static_cast<std::size_t>(k), static_cast<std::size_t>(k)}, rng, stddev));
    b_ = ad::param(Tensor<T>::zeros({c_out}));
  }

  ad::Var<T> forward(const ad::Var<T>& x) override {
    return ad::bias_channels(ad::conv2d(x, w_, pad_, 1), b_);
  }
  const FieldType& in_field() const override { return in_f_; }
  const FieldType& out_field() const override { return out_f_; }
  std::vector<ad::Var<T>> params() override { return {w_, b_}; }
  std::string kind() const override { return "plain_conv"; }
  std::size_t effective_params() const { return w_.value().numel() + b_.value().numel(); }

  void save(Checkpoint& ck, const std::string& prefix) const override {
    ck.put(prefix + ".w", w_.value());
    ck.put(prefix + ".b", b_.value());
  }
  void load(const Checkpoint& ck, const std::string& prefix) override {
    w_.mutable_value() = ck.get<T>(prefix + ".w");
    b_.mutable_value() = ck.get<T>(prefix + ".b");
  }

 private:
  FieldType in_f_, out_f_;
  int k_, pad_;
  ad::Var<T> w_, b_;
};

/// Pointwise relu; only valid on trivial/regular fields (a pointwise map
/// commutes with permutations but not with planar rotation matrices).
template <typename T>
class EquiReLU : public Layer<T> {
 public:
  explicit EquiReLU(FieldType f) : f_(std::move(f)) {
    require(f_.trivial_or_regular_only(),
            "equivariant relu requires trivial/regular blocks only (a standard block would "
            "break equivariance)");
  }
  ad::Var<T> forward(const ad::Var<T>& x) override { return ad::relu(x); }
  const FieldType& in_field() const override { return f_; }
  const FieldType& out_field() const override { return f_; }
  std::string kind() const override { return "equi_relu"; }

 private:
  FieldType f_;
};

/// Non-overlapping spatial max pool; 90-degree rotations permute the pooling
/// blocks of an evenly divisible grid, so equivariance is exact.
template <typename T>
class SpatialMaxPool : public Layer<T> {
 public:
  SpatialMaxPool(FieldType f, std::size_t k) : f_(std::move(f)), k_(k) {}
  ad::Var<T> forward(const ad::Var<T>& x) override { return ad::max_pool2d(x, k_); }
  const FieldType& in_field() const override { return f_; }
  const FieldType& out_field() const override { return f_; }
  std::string kind() const override { return "spatial_max_pool"; }

 private:
  FieldType f_;
  std::size_t k_;
};

template <typename T>
class SpatialAvgPool : public Layer<T> {
 public:
  SpatialAvgPool(FieldType f, std::size_t k) : f_(std::move(f)), k_(k) {}
  ad::Var<T> forward(const ad::Var<T>& x) override { return ad::avg_pool2d(x, k_); }
  const FieldType& in_field() const override { return f_; }
  const FieldType& out_field() const override { return f_; }
  std::string kind() const override { return "spatial_avg_pool"; }

 private:
  FieldType f_;
  std::size_t k_;
};

/// Max over the n coordinates of each regular block: the nonlinear
/// equivariant regular -> trivial map that escapes the linear Schur
/// restriction.
template <typename T>
class GroupMaxPool : public Layer<T> {
 public:
  explicit GroupMaxPool(FieldType f) : in_f_(std::move(f)) {
    for (const auto& b : in_f_.blocks)
      require(b.kind == RepKind::regular, "group max pool expects regular blocks only");
    out_f_ = FieldType::trivials(in_f_.n, in_f_.blocks.size());
  }
  ad::Var<T> forward(const ad::Var<T>& x) override {
    return ad::group_max_pool_channels(x, static_cast<std::size_t>(in_f_.n));
  }
  const FieldType& in_field() const override { return in_f_; }
  const FieldType& out_field() const override { return out_f_; }
  std::string kind() const override { return "group_max_pool"; }

 private:
  FieldType in_f_, out_f_;
};

/// Ordered layer stack with field-compatibility validation at wiring time.
template <typename T>
class EquiNetwork {
 public:
  void add(std::shared_ptr<Layer<T>> layer) {
    if (!layers_.empty())
      require(layers_.back()->out_field() == layer->in_field(),
              "layer field mismatch: output of layer ", layers_.size() - 1,
              " does not feed layer ", layers_.size());
    layers_.push_back(std::move(layer));
  }

  ad::Var<T> forward(const ad::Var<T>& x) {
    require(!layers_.empty(), "empty network");
    ad::Var<T> h = x;
    for (auto& l : layers_) h = l->forward(h);
    return h;
  }

  const FieldType& in_field() const { return layers_.front()->in_field(); }
  const FieldType& out_field() const { return layers_.back()->out_field(); }
  std::size_t size() const { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_[i]; }

  std::vector<ad::Var<T>> params() {
    std::vector<ad::Var<T>> ps;
    for (auto& l : layers_)
      for (auto& p : l->params()) ps.push_back(p);
    return ps;
  }

  std::size_t effective_params() const {
    std::size_t total = 0;
    for (const auto& l : layers_) {
      if (auto* sc = dynamic_cast<const SteerableConv<T>*>(l.get()))
        total += sc->effective_params();
      else if (auto* pc = dynamic_cast<const PlainConv<T>*>(l.get()))
        total += pc->effective_params();
    }
    return total;
  }

  void save(Checkpoint& ck, const std::string& prefix) const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i]->save(ck, prefix + ".L" + std::to_string(i));
  }
  void load(const Checkpoint& ck, const std::string& prefix) {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i]->load(ck, prefix + ".L" + std::to_string(i));
  }

 private:
  std::vector<std::shared_ptr<Layer<T>>> layers_;
};

// ---------------------------------------------------------------------------
// Linear overconstraint verification

struct SchurReport {
  double fit_residual = 0.0;    // worst |f(v,w) - a*sum(v) - b*sum(w)|
  double corollary_dev = 0.0;   // worst |f(g1 v, g2 w) - f(v,w)|
  double a = 0.0, b = 0.0;      // coefficients of the last fitted map
};

/// Projects random linear maps V_reg + V_reg -> V_triv to equivariance and
/// fits them against the two-parameter family a*sum(v) + b*sum(w); also
/// checks the independent-rotation corollary f(g1 v, g2 w) = f(v, w).
inline SchurReport verify_schur_form(int n, int trials, Rng& rng) {
  SchurReport rep;
  FieldType in_f(n, {Representation::regular(n), Representation::regular(n)});
  FieldType out_f(n, {Representation::trivial(n)});
  std::size_t d = static_cast<std::size_t>(n);
  for (int t = 0; t < trials; ++t) {
    Tensor<double> raw = Tensor<double>::randn({1, 2 * d, 1, 1}, rng);
    Tensor<double> proj = project_kernel(raw, in_f, out_f);
    auto f = [&](const std::vector<double>& v, const std::vector<double>& w) {
      double s = 0;
      for (std::size_t i = 0; i < d; ++i) s += proj.data[i] * v[i] + proj.data[d + i] * w[i];
      return s;
    };
    // least-squares fit of (a, b) over random inputs
    double saa = 0, sbb = 0, sab = 0, sfa = 0, sfb = 0;
    std::vector<std::vector<double>> vs, ws;
    std::vector<double> fs;
    for (int i = 0; i < 100; ++i) {
      std::vector<double> v(d), w(d);
      for (auto& x : v) x = uniform(rng, -1, 1);
      for (auto& x : w) x = uniform(rng, -1, 1);
      double sv = 0, sw = 0;
      for (std::size_t j = 0; j < d; ++j) {
        sv += v[j];
        sw += w[j];
      }
      double fv = f(v, w);
      saa += sv * sv;
      sbb += sw * sw;
      sab += sv * sw;
      sfa += fv * sv;
      sfb += fv * sw;
      vs.push_back(std::move(v));
      ws.push_back(std::move(w));
      fs.push_back(fv);
    }
    double det = saa * sbb - sab * sab;
    double a = (sfa * sbb - sfb * sab) / det;
    double b = (saa * sfb - sab * sfa) / det;
    rep.a = a;
    rep.b = b;
    for (std::size_t i = 0; i < fs.size(); ++i) {
      double sv = 0, sw = 0;
      for (std::size_t j = 0; j < d; ++j) {
        sv += vs[i][j];
        sw += ws[i][j];
      }
      rep.fit_residual = std::max(rep.fit_residual, std::abs(fs[i] - a * sv - b * sw));
    }
    // corollary: independent rotations of the two arguments leave f fixed
    std::vector<double> v(d), w(d);
    for (auto& x : v) x = uniform(rng, -1, 1);
    for (auto& x : w) x = uniform(rng, -1, 1);
    double base = f(v, w);
    FieldType reg1(n, {Representation::regular(n)});
    for (int g1 = 0; g1 < n; ++g1)
      for (int g2 = 0; g2 < n; ++g2) {
        auto gv = act_on_vector(reg1, GroupElement(n, g1), v);
        auto gw = act_on_vector(reg1, GroupElement(n, g2), w);
        rep.corollary_dev = std::max(rep.corollary_dev, std::abs(f(gv, gw) - base));
      }
  }
  return rep;
}

}  // namespace equirl
