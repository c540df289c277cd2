#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "equirl/common.hpp"

namespace equirl {

/// Element of the cyclic rotation group C_n: the rotation by 2*pi*index/n.
struct GroupElement {
  int n = 1;
  int index = 0;

  GroupElement() = default;
  GroupElement(int order, int idx) : n(order), index(((idx % order) + order) % order) {
    require(order >= 1, "group order must be positive, got ", order);
  }

  double angle() const { return 2.0 * kPi * index / n; }
  bool is_identity() const { return index == 0; }

  GroupElement compose(const GroupElement& other) const {
    require(n == other.n, "group order mismatch: ", n, " vs ", other.n);
    return GroupElement(n, (index + other.index) % n);
  }
  GroupElement inverse() const { return GroupElement(n, (n - index) % n); }

  static GroupElement identity(int order) { return GroupElement(order, 0); }
};

enum class RepKind { trivial, standard, regular, direct_sum };

/// A real representation of C_n: trivial (1-dim), standard (2-dim planar
/// rotation), regular (n-dim cyclic permutation), or a direct sum of blocks.
struct Representation {
  RepKind kind = RepKind::trivial;
  int n = 1;
  std::vector<Representation> parts;  // direct_sum only

  static Representation trivial(int n) { return {RepKind::trivial, n, {}}; }
  static Representation standard(int n) { return {RepKind::standard, n, {}}; }
  static Representation regular(int n) { return {RepKind::regular, n, {}}; }
  static Representation direct_sum(std::vector<Representation> blocks) {
    require(!blocks.empty(), "direct_sum needs at least one block");
    int n = blocks.front().n;
    for (const auto& b : blocks) require(b.n == n, "direct_sum blocks must share group order");
    return {RepKind::direct_sum, n, std::move(blocks)};
  }

  std::size_t dim() const {
    switch (kind) {
      case RepKind::trivial: return 1;
      case RepKind::standard: return 2;
      case RepKind::regular: return static_cast<std::size_t>(n);
      case RepKind::direct_sum: {
        std::size_t d = 0;
        for (const auto& p : parts) d += p.dim();
        return d;
      }
    }
    return 0;
  }

  bool operator==(const Representation& o) const {
    if (kind != o.kind || n != o.n) return false;
    if (kind != RepKind::direct_sum) return true;
    if (parts.size() != o.parts.size()) return false;
    for (std::size_t i = 0; i < parts.size(); ++i)
      if (!(parts[i] == o.parts[i])) return false;
    return true;
  }
};

/// Dense row-major matrix of doubles, sized for representation blocks.
struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }

  static Mat eye(std::size_t d) {
    Mat m(d, d);
    for (std::size_t i = 0; i < d; ++i) m(i, i) = 1.0;
    return m;
  }

  Mat mul(const Mat& o) const {
    require(cols == o.rows, "matrix product shape mismatch");
    Mat r(rows, o.cols);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t k = 0; k < cols; ++k) {
        double v = (*this)(i, k);
        if (v == 0.0) continue;
        for (std::size_t j = 0; j < o.cols; ++j) r(i, j) += v * o(k, j);
      }
    return r;
  }
};

/// cos/sin of 2*pi*k/n, exact for multiples of a quarter turn so that C_4
/// actions stay bit-precise.
inline void rotation_entries(int n, int k, double& c, double& s) {
  k = ((k % n) + n) % n;
  if ((4LL * k) % n == 0) {
    int q = static_cast<int>((4LL * k) / n) % 4;
    static constexpr double cs[4] = {1.0, 0.0, -1.0, 0.0};
    static constexpr double sn[4] = {0.0, 1.0, 0.0, -1.0};
    c = cs[q];
    s = sn[q];
  } else if ((2LL * k) % n == 0) {
    c = -1.0;
    s = 0.0;
  } else {
    double t = 2.0 * kPi * k / n;
    c = std::cos(t);
    s = std::sin(t);
  }
}

/// Matrix realization of `rep` at group element `g` (block diagonal for
/// direct sums). Orthogonal for every kind.
inline Mat rep_matrix(const Representation& rep, const GroupElement& g) {
  require(rep.n == g.n, "group order mismatch: representation has n=", rep.n, ", element has n=", g.n);
  switch (rep.kind) {
    case RepKind::trivial:
      return Mat::eye(1);
    case RepKind::standard: {
      Mat m(2, 2);
      double c, s;
      rotation_entries(g.n, g.index, c, s);
      m(0, 0) = c;
      m(0, 1) = -s;
      m(1, 0) = s;
      m(1, 1) = c;
      return m;
    }
    case RepKind::regular: {
      // (rho(g) x)_i = x_{(i - k) mod n}: the generator sends
      // (x_1, ..., x_n) to (x_n, x_1, ..., x_{n-1}).
      std::size_t n = static_cast<std::size_t>(g.n);
      Mat m(n, n);
      for (std::size_t i = 0; i < n; ++i) m(i, (i + n - g.index) % n) = 1.0;
      return m;
    }
    case RepKind::direct_sum: {
      std::size_t d = rep.dim();
      Mat m(d, d);
      std::size_t off = 0;
      for (const auto& p : rep.parts) {
        Mat b = rep_matrix(p, g);
        for (std::size_t i = 0; i < b.rows; ++i)
          for (std::size_t j = 0; j < b.cols; ++j) m(off + i, off + j) = b(i, j);
        off += b.rows;
      }
      return m;
    }
  }
  fail("unreachable representation kind");
}

/// Channel-space semantics of a feature map: an ordered list of
/// representation blocks whose dimensions add up to the channel count.
struct FieldType {
  int n = 1;
  std::vector<Representation> blocks;

  FieldType() = default;
  FieldType(int order, std::vector<Representation> b) : n(order), blocks(std::move(b)) {
    for (const auto& r : blocks) require(r.n == n, "field block group order mismatch");
  }

  static FieldType trivials(int n, std::size_t count) {
    return FieldType(n, std::vector<Representation>(count, Representation::trivial(n)));
  }
  static FieldType regulars(int n, std::size_t count) {
    return FieldType(n, std::vector<Representation>(count, Representation::regular(n)));
  }

  std::size_t total_dim() const {
    std::size_t d = 0;
    for (const auto& b : blocks) d += b.dim();
    return d;
  }

  Representation as_representation() const { return Representation::direct_sum(blocks); }

  bool operator==(const FieldType& o) const {
    if (n != o.n || blocks.size() != o.blocks.size()) return false;
    for (std::size_t i = 0; i < blocks.size(); ++i)
      if (!(blocks[i] == o.blocks[i])) return false;
    return true;
  }

  bool trivial_or_regular_only() const {
    for (const auto& b : blocks)
      if (b.kind != RepKind::trivial && b.kind != RepKind::regular) return false;
    return true;
  }
};

/// H x W grid of channel vectors annotated with a FieldType. A "vector" is
/// the degenerate 1x1 case.
template <typename T = double>
struct FeatureMap {
  FieldType field;
  std::size_t height = 0, width = 0;
  std::vector<T> data;  // (total_dim, height, width), row-major

  FeatureMap() = default;
  FeatureMap(FieldType f, std::size_t h, std::size_t w)
      : field(std::move(f)), height(h), width(w), data(field.total_dim() * h * w, T(0)) {}

  static FeatureMap vector(FieldType f, std::vector<T> values) {
    FeatureMap m(std::move(f), 1, 1);
    require(values.size() == m.data.size(), "vector dimension ", values.size(),
            " does not match field dim ", m.data.size());
    m.data = std::move(values);
    return m;
  }

  std::size_t channels() const { return field.total_dim(); }
  T& at(std::size_t c, std::size_t i, std::size_t j) { return data[(c * height + i) * width + j]; }
  T at(std::size_t c, std::size_t i, std::size_t j) const { return data[(c * height + i) * width + j]; }
};

/// rho_j(g) v applied blockwise to a channel vector.
template <typename T>
std::vector<T> act_on_vector(const FieldType& field, const GroupElement& g, const std::vector<T>& v) {
  require(v.size() == field.total_dim(), "vector dim ", v.size(), " does not match field dim ",
          field.total_dim());
  std::vector<T> out(v.size(), T(0));
  std::size_t off = 0;
  for (const auto& block : field.blocks) {
    std::size_t d = block.dim();
    if (block.kind == RepKind::trivial) {
      out[off] = v[off];
    } else if (block.kind == RepKind::regular) {
      for (std::size_t i = 0; i < d; ++i) out[off + (i + g.index) % d] = v[off + i];
    } else {
      Mat m = rep_matrix(block, g);
      for (std::size_t i = 0; i < d; ++i) {
        double acc = 0;
        for (std::size_t j = 0; j < d; ++j) acc += m(i, j) * static_cast<double>(v[off + j]);
        out[off + i] = static_cast<T>(acc);
      }
    }
    off += d;
  }
  return out;
}

namespace detail {

// Applies rho(g) to every pixel's channel vector in place.
template <typename T>
void transform_channels(const FieldType& field, const GroupElement& g, std::size_t h, std::size_t w,
                        std::vector<T>& data) {
  if (g.is_identity()) return;
  std::size_t hw = h * w;
  std::size_t off = 0;
  std::vector<T> tmp;
  for (const auto& block : field.blocks) {
    std::size_t d = block.dim();
    if (block.kind == RepKind::trivial) {
      off += d;
      continue;
    }
    if (block.kind == RepKind::regular) {
      tmp.assign(d * hw, T(0));
      for (std::size_t i = 0; i < d; ++i) {
        std::size_t dst = (i + g.index) % d;
        for (std::size_t p = 0; p < hw; ++p) tmp[dst * hw + p] = data[(off + i) * hw + p];
      }
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t p = 0; p < hw; ++p) data[(off + i) * hw + p] = tmp[i * hw + p];
    } else {
      Mat m = rep_matrix(block, g);
      tmp.assign(d * hw, T(0));
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
          double mij = m(i, j);
          if (mij == 0.0) continue;
          for (std::size_t p = 0; p < hw; ++p)
            tmp[i * hw + p] += static_cast<T>(mij * static_cast<double>(data[(off + j) * hw + p]));
        }
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t p = 0; p < hw; ++p) data[(off + i) * hw + p] = tmp[i * hw + p];
    }
    off += d;
  }
}

}  // namespace detail

/// Spatially rotates a square map by `quarters` * 90 degrees as an exact
/// pixel permutation. Pixel (i,j) sits at continuous coordinates
/// (j - (W-1)/2, (H-1)/2 - i), so the rotation center is the image center.
template <typename T>
FeatureMap<T> rotate_pixels_quarter(const FeatureMap<T>& f, int quarters) {
  require(f.height == f.width, "feature map must be square, got ", f.height, "x", f.width);
  int q = ((quarters % 4) + 4) % 4;
  if (q == 0) return f;
  std::size_t n = f.height;
  FeatureMap<T> out(f.field, n, n);
  std::size_t c = f.channels();
  int m = static_cast<int>(n) - 1;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      // doubled integer pixel-center coordinates, exact for any parity
      int X = 2 * static_cast<int>(j) - m;
      int Y = m - 2 * static_cast<int>(i);
      // inverse rotation by q quarter turns
      for (int t = 0; t < q; ++t) {
        int nx = Y, ny = -X;
        X = nx;
        Y = ny;
      }
      std::size_t jj = static_cast<std::size_t>((X + m) / 2);
      std::size_t ii = static_cast<std::size_t>((m - Y) / 2);
      for (std::size_t ch = 0; ch < c; ++ch) out.at(ch, i, j) = f.at(ch, ii, jj);
    }
  return out;
}

/// Spatial rotation by an arbitrary angle, bilinear interpolation with
/// out-of-bounds fill value `background`. Exact permutation path is taken
/// when the angle is a multiple of 90 degrees.
template <typename T>
FeatureMap<T> rotate_pixels(const FeatureMap<T>& f, double theta, T background = T(0)) {
  require(f.height == f.width, "feature map must be square, got ", f.height, "x", f.width);
  double quarters = theta / (kPi / 2.0);
  double nearest = std::round(quarters);
  if (std::abs(quarters - nearest) < 1e-12)
    return rotate_pixels_quarter(f, static_cast<int>(nearest));

  std::size_t n = f.height;
  FeatureMap<T> out(f.field, n, n);
  std::size_t nc = f.channels();
  double ctr = (static_cast<double>(n) - 1.0) / 2.0;
  double c = std::cos(theta), s = std::sin(theta);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double x = static_cast<double>(j) - ctr;
      double y = ctr - static_cast<double>(i);
      // inverse rotation of the sample point
      double xs = c * x + s * y;
      double ys = -s * x + c * y;
      double jj = xs + ctr;
      double ii = ctr - ys;
      double fi = std::floor(ii), fj = std::floor(jj);
      double di = ii - fi, dj = jj - fj;
      for (std::size_t ch = 0; ch < nc; ++ch) {
        auto sample = [&](double pi, double pj) -> double {
          if (pi < 0 || pj < 0 || pi >= static_cast<double>(n) || pj >= static_cast<double>(n))
            return static_cast<double>(background);
          return static_cast<double>(
              f.at(ch, static_cast<std::size_t>(pi), static_cast<std::size_t>(pj)));
        };
        double v = (1 - di) * (1 - dj) * sample(fi, fj) + (1 - di) * dj * sample(fi, fj + 1) +
                   di * (1 - dj) * sample(fi + 1, fj) + di * dj * sample(fi + 1, fj + 1);
        out.at(ch, i, j) = static_cast<T>(v);
      }
    }
  return out;
}

/// The group action of Eq-style feature-map transforms:
/// (gF)(x, y) = rho_j(g) F(rho_1(g)^{-1} (x, y)), blockwise over channels.
template <typename T>
FeatureMap<T> act_on_feature_map(const FieldType& field, const GroupElement& g, const FeatureMap<T>& f,
                                 T background = T(0)) {
  require(field == f.field, "field type mismatch between action and feature map");
  require(g.n == field.n, "group order mismatch: element n=", g.n, ", field n=", field.n);
  FeatureMap<T> out = rotate_pixels(f, g.angle(), background);
  detail::transform_channels(field, g, out.height, out.width, out.data);
  return out;
}

/// Rotation by a continuous angle (the SO(2) augmentation path); channel
/// blocks transform through the angle's rotation matrix for standard blocks
/// and are left untouched for trivial blocks. Regular blocks require the
/// angle to be a multiple of 2*pi/n and are permuted accordingly.
template <typename T>
FeatureMap<T> rotate_feature_map(double theta, const FeatureMap<T>& f, T background = T(0)) {
  FeatureMap<T> out = rotate_pixels(f, theta, background);
  for (const auto& b : f.field.blocks) {
    if (b.kind == RepKind::trivial) continue;
    if (b.kind == RepKind::standard) continue;  // handled below via matrix path
    double steps = theta * b.n / (2.0 * kPi);
    require(std::abs(steps - std::round(steps)) < 1e-9,
            "regular blocks only rotate by multiples of 2*pi/n");
  }
  bool needs_channels = false;
  for (const auto& b : f.field.blocks)
    if (b.kind != RepKind::trivial) needs_channels = true;
  if (needs_channels) {
    // Emulate a group element at this angle blockwise; standard blocks use
    // the continuous rotation matrix directly.
    std::size_t hw = out.height * out.width;
    std::size_t off = 0;
    double c = std::cos(theta), s = std::sin(theta);
    double quarters = theta / (kPi / 2.0);
    if (std::abs(quarters - std::round(quarters)) < 1e-12)
      rotation_entries(4, static_cast<int>(std::round(quarters)), c, s);
    for (const auto& b : f.field.blocks) {
      std::size_t d = b.dim();
      if (b.kind == RepKind::standard) {
        for (std::size_t p = 0; p < hw; ++p) {
          double vx = out.data[off * hw + p], vy = out.data[(off + 1) * hw + p];
          out.data[off * hw + p] = static_cast<T>(c * vx - s * vy);
          out.data[(off + 1) * hw + p] = static_cast<T>(s * vx + c * vy);
        }
      } else if (b.kind == RepKind::regular) {
        int k = static_cast<int>(std::llround(theta * b.n / (2.0 * kPi)));
        GroupElement g(b.n, k);
        FieldType single(b.n, {b});
        std::vector<T> slab(out.data.begin() + off * hw, out.data.begin() + (off + d) * hw);
        detail::transform_channels(single, g, out.height, out.width, slab);
        std::copy(slab.begin(), slab.end(), out.data.begin() + off * hw);
      }
      off += d;
    }
  }
  return out;
}

/// Planar rotation of a 2-vector; exact for quarter turns.
inline void rotate_xy(double theta, double& x, double& y) {
  double quarters = theta / (kPi / 2.0);
  double nearest = std::round(quarters);
  double c, s;
  if (std::abs(quarters - nearest) < 1e-12) {
    rotation_entries(4, static_cast<int>(nearest), c, s);
  } else {
    c = std::cos(theta);
    s = std::sin(theta);
  }
  double nx = c * x - s * y;
  double ny = s * x + c * y;
  x = nx;
  y = ny;
}

}  // namespace equirl
