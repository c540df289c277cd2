#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "equirl/tensor.hpp"

namespace equirl::ad {

using equirl::Tensor;

/// Reverse-mode autodiff over Tensor<T>. Graphs are built eagerly as ops
/// execute; backward(loss) re-zeroes every gradient reachable from the loss
/// and then accumulates, so calling backward twice on the same graph yields
/// identical gradients (documented contract).

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on demand; same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> back;  // pulls this->grad into parents' grads

  void ensure_grad() {
    if (grad.data.empty()) grad = Tensor<T>::zeros(value.shape);
  }
  void accumulate(const Tensor<T>& g) {
    ensure_grad();
    for (std::size_t i = 0; i < g.data.size(); ++i) grad.data[i] += g.data[i];
  }
};

/// When false, newly created ops record no graph (inference mode).
inline thread_local bool grad_mode_enabled = true;

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_enabled) { grad_mode_enabled = false; }
  ~NoGradGuard() { grad_mode_enabled = prev; }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> v, bool requires_grad = false) : n_(std::make_shared<Node<T>>()) {
    n_->value = std::move(v);
    n_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Tensor<T>& value() const { return n_->value; }
  Tensor<T>& mutable_value() { return n_->value; }
  const Tensor<T>& grad() const { return n_->grad; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  std::shared_ptr<Node<T>> node() const { return n_; }

  void zero_grad() {
    if (n_) n_->grad = Tensor<T>();
  }

  static Var wrap(std::shared_ptr<Node<T>> n) {
    Var v;
    v.n_ = std::move(n);
    return v;
  }

 private:
  std::shared_ptr<Node<T>> n_;
};

template <typename T>
Var<T> constant(Tensor<T> v) {
  return Var<T>(std::move(v), false);
}
template <typename T>
Var<T> param(Tensor<T> v) {
  return Var<T>(std::move(v), true);
}

/// Builds an op node. `back` receives the result node; it must add into the
/// parents' grads (via accumulate) guarded by each parent's requires_grad.
template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
                 std::function<void(Node<T>&)> back) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool rg = false;
  if (grad_mode_enabled)
    for (const auto& p : parents) rg = rg || (p && p->requires_grad);
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->back = std::move(back);
  }
  return Var<T>::wrap(std::move(n));
}

template <typename T>
Var<T> detach(const Var<T>& x) {
  return Var<T>(x.value(), false);
}

/// backward: loss must be scalar (numel 1). Gradients of every node
/// reachable from the loss are zeroed, the loss seed is set to 1, and the
/// chain rule runs in reverse topological order.
template <typename T>
void backward(const Var<T>& loss) {
  require(loss.value().numel() == 1, "backward requires a scalar loss, got shape ",
          loss.value().shape_str());
  require(loss.requires_grad(), "backward on a graph with no differentiable leaves");

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.push_back({loss.node().get(), 0});
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // order is now a topological sort with parents before children
  for (Node<T>* n : order) {
    n->ensure_grad();
    std::fill(n->grad.data.begin(), n->grad.data.end(), T(0));
  }
  loss.node()->grad.data[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->back) (*it)->back(**it);
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.value().data[i];
  auto pa = a.node(), pb = b.node();
  return make_node<T>(std::move(out), {pa, pb}, [pa, pb](Node<T>& n) {
    if (pa->requires_grad) pa->accumulate(n.grad);
    if (pb->requires_grad) pb->accumulate(n.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.value(), b.value(), "subtract");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.value().data[i];
  auto pa = a.node(), pb = b.node();
  return make_node<T>(std::move(out), {pa, pb}, [pa, pb](Node<T>& n) {
    if (pa->requires_grad) pa->accumulate(n.grad);
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n.grad.data.size(); ++i) pb->grad.data[i] -= n.grad.data[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.value(), b.value(), "multiply");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.value().data[i];
  auto pa = a.node(), pb = b.node();
  return make_node<T>(std::move(out), {pa, pb}, [pa, pb](Node<T>& n) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n.grad.data.size(); ++i)
        pa->grad.data[i] += n.grad.data[i] * pb->value.data[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n.grad.data.size(); ++i)
        pb->grad.data[i] += n.grad.data[i] * pa->value.data[i];
    }
  });
}

template <typename T>
Var<T> divide(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.value(), b.value(), "divide");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] /= b.value().data[i];
  auto pa = a.node(), pb = b.node();
  return make_node<T>(std::move(out), {pa, pb}, [pa, pb](Node<T>& n) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n.grad.data.size(); ++i)
        pa->grad.data[i] += n.grad.data[i] / pb->value.data[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n.grad.data.size(); ++i) {
        T bv = pb->value.data[i];
        pb->grad.data[i] -= n.grad.data[i] * pa->value.data[i] / (bv * bv);
      }
    }
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, double c) {
  Tensor<T> out = a.value();
  for (auto& x : out.data) x += static_cast<T>(c);
  auto pa = a.node();
  return make_node<T>(std::move(out), {pa}, [pa](Node<T>& n) {
    if (pa->requires_grad) pa->accumulate(n.grad);
  });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, double c) {
  Tensor<T> out = a.value();
  for (auto& x : out.data) x = static_cast<T>(x * c);
  auto pa = a.node();
  return make_node<T>(std::move(out), {pa}, [pa, c](Node<T>& n) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n.grad.data.size(); ++i)
        pa->grad.data[i] += static_cast<T>(n.grad.data[i] * c);
    }
  });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  return mul_scalar(a, -1.0);
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& x : out.data) x = x > T(0) ? x : T(0);
  auto pa = a.node();
  return make_node<T>(std::move(out), {pa}, [pa](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.data.size(); ++i)
      if (pa->value.data[i] > T(0)) pa->grad.data[i] += n.grad.data[i];
  });
}

template <typename T>
Var<T> tanh_(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& x : out.data) x = std::tanh(x);
  auto pa = a.node();
  Tensor<T> saved = out;
  return make_node<T>(std::move(out), {pa}, [pa, saved](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.data.size(); ++i)
      pa->grad.data[i] += n.grad.data[i] * (T(1) - saved.data[i] * saved.data[i]);
  });
}

template <typename T>
Var<T> exp_(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& x : out.data) x = std::exp(x);
  auto pa = a.node();
  Tensor<T> saved = out;
  return make_node<T>(std::move(out), {pa}, [pa, saved](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.data.size(); ++i)
      pa->grad.data[i] += n.grad.data[i] * saved.data[i];
  });
}

template <typename T>
Var<T> log_(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& x : out.data) x = std::log(x);
  auto pa = a.node();
  return make_node<T>(std::move(out), {pa}, [pa](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.data.size(); ++i)
      pa->grad.data[i] += n.grad.data[i] / pa->value.data[i];
  });
}

/// Gradient passes only where lo <= x <= hi.
template <typename T>
Var<T> clamp(const Var<T>& a, double lo, double hi) {
  Tensor<T> out = a.value();
  for (auto& x : out.data) x = std::min(std::max(x, static_cast<T>(lo)), static_cast<T>(hi));
  auto pa = a.node();
  return make_node<T>(std::move(out), {pa}, [pa, lo, hi](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.data.size(); ++i) {
      T x = pa->value.data[i];
      if (x >= static_cast<T>(lo) && x <= static_cast<T>(hi)) pa->grad.data[i] += n.grad.data[i];
    }
  });
}

template <typename T>
Var<T> min2(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.value(), b.value(), "min2");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::min(out.data[i], b.value().data[i]);
  auto pa = a.node(), pb = b.node();
  return make_node<T>(std::move(out), {pa, pb}, [pa, pb](Node<T>& n) {
    for (std::size_t i = 0; i < n.grad.data.size(); ++i) {
      bool a_min = pa->value.data[i] <= pb->value.data[i];
      Node<T>* dst = a_min ? pa.get() : pb.get();
      if (dst->requires_grad) {
        dst->ensure_grad();
        dst->grad.data[i] += n.grad.data[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<std::size_t> shape) {
  require(Tensor<T>::count(shape) == a.value().numel(), "reshape volume mismatch: ",
          a.value().shape_str(), " -> requested volume ", Tensor<T>::count(shape));
  Tensor<T> out(std::move(shape), a.value().data);
  auto pa = a.node();
  return make_node<T>(std::move(out), {pa}, [pa](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.data.size(); ++i) pa->grad.data[i] += n.grad.data[i];
  });
}

namespace detail {
inline void axis_split(const std::vector<std::size_t>& shape, std::size_t axis, std::size_t& outer,
                       std::size_t& len, std::size_t& inner) {
  outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  len = shape[axis];
  inner = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}
}  // namespace detail

template <typename T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
  require(axis < a.value().rank(), "slice axis out of range");
  require(start + len <= a.value().dim(axis), "slice [", start, ",", start + len,
          ") exceeds axis extent ", a.value().dim(axis));
  std::size_t outer, alen, inner;
  detail::axis_split(a.value().shape, axis, outer, alen, inner);
  std::vector<std::size_t> oshape = a.value().shape;
  oshape[axis] = len;
  Tensor<T> out(oshape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      std::copy_n(&a.value().data[(o * alen + start + l) * inner], inner,
                  &out.data[(o * len + l) * inner]);
  auto pa = a.node();
  return make_node<T>(std::move(out), {pa}, [pa, axis, start, len](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    std::size_t outer, alen, inner;
    detail::axis_split(pa->value.shape, axis, outer, alen, inner);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < len; ++l) {
        const T* src = &n.grad.data[(o * len + l) * inner];
        T* dst = &pa->grad.data[(o * alen + start + l) * inner];
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
  });
}

template <typename T>
Var<T> concat(const Var<T>& a, const Var<T>& b, std::size_t axis) {
  require(a.value().rank() == b.value().rank(), "concat rank mismatch");
  require(axis < a.value().rank(), "concat axis out of range");
  for (std::size_t i = 0; i < a.value().rank(); ++i)
    if (i != axis)
      require(a.value().dim(i) == b.value().dim(i), "concat non-axis extent mismatch at dim ", i);
  std::size_t outer, la, inner, lb;
  detail::axis_split(a.value().shape, axis, outer, la, inner);
  lb = b.value().dim(axis);
  std::vector<std::size_t> oshape = a.value().shape;
  oshape[axis] = la + lb;
  Tensor<T> out(oshape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(&a.value().data[o * la * inner], la * inner, &out.data[o * (la + lb) * inner]);
    std::copy_n(&b.value().data[o * lb * inner], lb * inner,
                &out.data[(o * (la + lb) + la) * inner]);
  }
  auto pa = a.node(), pb = b.node();
  return make_node<T>(std::move(out), {pa, pb}, [pa, pb, axis](Node<T>& n) {
    std::size_t outer, la, inner;
    detail::axis_split(pa->value.shape, axis, outer, la, inner);
    std::size_t lb = pb->value.shape[axis];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        const T* src = &n.grad.data[o * (la + lb) * inner];
        T* dst = &pa->grad.data[o * la * inner];
        for (std::size_t i = 0; i < la * inner; ++i) dst[i] += src[i];
      }
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        const T* src = &n.grad.data[(o * (la + lb) + la) * inner];
        T* dst = &pb->grad.data[o * lb * inner];
        for (std::size_t i = 0; i < lb * inner; ++i) dst[i] += src[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  T s = 0;
  for (T x : a.value().data) s += x;
  auto pa = a.node();
  return make_node<T>(Tensor<T>::scalar(s), {pa}, [pa](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    T g = n.grad.data[0];
    for (auto& x : pa->grad.data) x += g;
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  std::size_t m = a.value().numel();
  T s = 0;
  for (T x : a.value().data) s += x;
  auto pa = a.node();
  return make_node<T>(Tensor<T>::scalar(s / static_cast<T>(m)), {pa}, [pa, m](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    T g = n.grad.data[0] / static_cast<T>(m);
    for (auto& x : pa->grad.data) x += g;
  });
}

template <typename T>
Var<T> sum_over_axis(const Var<T>& a, std::size_t axis) {
  require(axis < a.value().rank(), "sum_over_axis axis out of range");
  std::size_t outer, len, inner;
  detail::axis_split(a.value().shape, axis, outer, len, inner);
  std::vector<std::size_t> oshape;
  for (std::size_t i = 0; i < a.value().rank(); ++i)
    if (i != axis) oshape.push_back(a.value().shape[i]);
  if (oshape.empty()) oshape.push_back(1);
  Tensor<T> out(oshape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i)
        out.data[o * inner + i] += a.value().data[(o * len + l) * inner + i];
  auto pa = a.node();
  return make_node<T>(std::move(out), {pa}, [pa, axis](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    std::size_t outer, len, inner;
    detail::axis_split(pa->value.shape, axis, outer, len, inner);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < inner; ++i)
          pa->grad.data[(o * len + l) * inner + i] += n.grad.data[o * inner + i];
  });
}

/// Max over one axis; gradient routes to the first maximal element.
template <typename T>
Var<T> max_over_axis(const Var<T>& a, std::size_t axis) {
  require(axis < a.value().rank(), "max_over_axis axis out of range");
  std::size_t outer, len, inner;
  detail::axis_split(a.value().shape, axis, outer, len, inner);
  require(len > 0, "max_over_axis over empty axis");
  std::vector<std::size_t> oshape;
  for (std::size_t i = 0; i < a.value().rank(); ++i)
    if (i != axis) oshape.push_back(a.value().shape[i]);
  if (oshape.empty()) oshape.push_back(1);
  Tensor<T> out(oshape);
  auto argmax = std::make_shared<std::vector<std::size_t>>(outer * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      T best = a.value().data[o * len * inner + i];
      std::size_t bl = 0;
      for (std::size_t l = 1; l < len; ++l) {
        T v = a.value().data[(o * len + l) * inner + i];
        if (v > best) {
          best = v;
          bl = l;
        }
      }
      out.data[o * inner + i] = best;
      (*argmax)[o * inner + i] = bl;
    }
  auto pa = a.node();
  return make_node<T>(std::move(out), {pa}, [pa, axis, argmax](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    std::size_t outer, len, inner;
    detail::axis_split(pa->value.shape, axis, outer, len, inner);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        std::size_t l = (*argmax)[o * inner + i];
        pa->grad.data[(o * len + l) * inner + i] += n.grad.data[o * inner + i];
      }
  });
}

/// Row gather: x is (N, M), idx selects one column per row.
template <typename T>
Var<T> select_per_row(const Var<T>& x, const std::vector<std::size_t>& idx) {
  require(x.value().rank() == 2, "select_per_row expects a 2-D tensor");
  std::size_t N = x.value().dim(0), M = x.value().dim(1);
  require(idx.size() == N, "select_per_row index count mismatch");
  Tensor<T> out({N});
  for (std::size_t i = 0; i < N; ++i) {
    require(idx[i] < M, "select_per_row index out of range");
    out.data[i] = x.value().data[i * M + idx[i]];
  }
  auto px = x.node();
  auto saved = std::make_shared<std::vector<std::size_t>>(idx);
  return make_node<T>(std::move(out), {px}, [px, saved](Node<T>& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    std::size_t M = px->value.shape[1];
    for (std::size_t i = 0; i < n.grad.data.size(); ++i)
      px->grad.data[i * M + (*saved)[i]] += n.grad.data[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and convolution

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2, "matmul expects 2-D tensors");
  std::size_t N = a.value().dim(0), K = a.value().dim(1), M = b.value().dim(1);
  require(b.value().dim(0) == K, "matmul inner extent mismatch: ", a.value().shape_str(), " x ",
          b.value().shape_str());
  Tensor<T> out({N, M});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      T av = a.value().data[i * K + k];
      if (av == T(0)) continue;
      const T* brow = &b.value().data[k * M];
      T* orow = &out.data[i * M];
      for (std::size_t j = 0; j < M; ++j) orow[j] += av * brow[j];
    }
  auto pa = a.node(), pb = b.node();
  return make_node<T>(std::move(out), {pa, pb}, [pa, pb](Node<T>& n) {
    std::size_t N = pa->value.shape[0], K = pa->value.shape[1], M = pb->value.shape[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < M; ++j) {
          T g = n.grad.data[i * M + j];
          if (g == T(0)) continue;
          for (std::size_t k = 0; k < K; ++k)
            pa->grad.data[i * K + k] += g * pb->value.data[k * M + j];
        }
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          T av = pa->value.data[i * K + k];
          if (av == T(0)) continue;
          for (std::size_t j = 0; j < M; ++j)
            pb->grad.data[k * M + j] += av * n.grad.data[i * M + j];
        }
    }
  });
}

namespace detail {

template <typename T>
void conv2d_accum(const Tensor<T>& x, const Tensor<T>& w, Tensor<T>& out, int pad, int stride) {
  std::size_t N = x.shape[0], Cin = x.shape[1];
  int H = static_cast<int>(x.shape[2]), W = static_cast<int>(x.shape[3]);
  std::size_t Cout = w.shape[0];
  int kh = static_cast<int>(w.shape[2]), kw = static_cast<int>(w.shape[3]);
  int OH = static_cast<int>(out.shape[2]), OW = static_cast<int>(out.shape[3]);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < Cout; ++co)
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const T* xp = &x.data[((n * Cin + ci) * H) * W];
        const T* wp = &w.data[((co * Cin + ci) * kh) * kw];
        T* op = &out.data[((n * Cout + co) * OH) * OW];
        for (int ky = 0; ky < kh; ++ky)
          for (int oy = 0; oy < OH; ++oy) {
            int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            const T* xrow = xp + iy * W;
            T* orow = op + oy * OW;
            for (int kx = 0; kx < kw; ++kx) {
              T wv = wp[ky * kw + kx];
              if (wv == T(0)) continue;
              if (stride == 1) {
                int lo = std::max(0, pad - kx);
                int hi = std::min(OW - 1, W - 1 + pad - kx);
                const T* xr = xrow + lo + kx - pad;
                T* orp = orow + lo;
                for (int ox = lo; ox <= hi; ++ox) *orp++ += wv * *xr++;
              } else {
                for (int ox = 0; ox < OW; ++ox) {
                  int ix = ox * stride + kx - pad;
                  if (ix < 0 || ix >= W) continue;
                  orow[ox] += wv * xrow[ix];
                }
              }
            }
          }
      }
}

template <typename T>
void conv2d_backward_input(Tensor<T>& dx, const Tensor<T>& w, const Tensor<T>& dout, int pad,
                           int stride) {
  std::size_t N = dx.shape[0], Cin = dx.shape[1];
  int H = static_cast<int>(dx.shape[2]), W = static_cast<int>(dx.shape[3]);
  std::size_t Cout = w.shape[0];
  int kh = static_cast<int>(w.shape[2]), kw = static_cast<int>(w.shape[3]);
  int OH = static_cast<int>(dout.shape[2]), OW = static_cast<int>(dout.shape[3]);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < Cout; ++co)
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        T* dxp = &dx.data[((n * Cin + ci) * H) * W];
        const T* wp = &w.data[((co * Cin + ci) * kh) * kw];
        const T* dop = &dout.data[((n * Cout + co) * OH) * OW];
        for (int ky = 0; ky < kh; ++ky)
          for (int oy = 0; oy < OH; ++oy) {
            int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            T* dxrow = dxp + iy * W;
            const T* dorow = dop + oy * OW;
            for (int kx = 0; kx < kw; ++kx) {
              T wv = wp[ky * kw + kx];
              if (wv == T(0)) continue;
              if (stride == 1) {
                int lo = std::max(0, pad - kx);
                int hi = std::min(OW - 1, W - 1 + pad - kx);
                T* dxr = dxrow + lo + kx - pad;
                const T* dor = dorow + lo;
                for (int ox = lo; ox <= hi; ++ox) *dxr++ += wv * *dor++;
              } else {
                for (int ox = 0; ox < OW; ++ox) {
                  int ix = ox * stride + kx - pad;
                  if (ix < 0 || ix >= W) continue;
                  dxrow[ix] += wv * dorow[ox];
                }
              }
            }
          }
      }
}

template <typename T>
void conv2d_backward_kernel(const Tensor<T>& x, Tensor<T>& dw, const Tensor<T>& dout, int pad,
                            int stride) {
  std::size_t N = x.shape[0], Cin = x.shape[1];
  int H = static_cast<int>(x.shape[2]), W = static_cast<int>(x.shape[3]);
  std::size_t Cout = dw.shape[0];
  int kh = static_cast<int>(dw.shape[2]), kw = static_cast<int>(dw.shape[3]);
  int OH = static_cast<int>(dout.shape[2]), OW = static_cast<int>(dout.shape[3]);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < Cout; ++co)
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const T* xp = &x.data[((n * Cin + ci) * H) * W];
        T* dwp = &dw.data[((co * Cin + ci) * kh) * kw];
        const T* dop = &dout.data[((n * Cout + co) * OH) * OW];
        for (int ky = 0; ky < kh; ++ky)
          for (int oy = 0; oy < OH; ++oy) {
            int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            const T* xrow = xp + iy * W;
            const T* dorow = dop + oy * OW;
            for (int kx = 0; kx < kw; ++kx) {
              T acc = T(0);
              if (stride == 1) {
                int lo = std::max(0, pad - kx);
                int hi = std::min(OW - 1, W - 1 + pad - kx);
                const T* xr = xrow + lo + kx - pad;
                const T* dor = dorow + lo;
                for (int ox = lo; ox <= hi; ++ox) acc += *xr++ * *dor++;
              } else {
                for (int ox = 0; ox < OW; ++ox) {
                  int ix = ox * stride + kx - pad;
                  if (ix < 0 || ix >= W) continue;
                  acc += xrow[ix] * dorow[ox];
                }
              }
              dwp[ky * kw + kx] += acc;
            }
          }
      }
}

}  // namespace detail

/// 2-D convolution on (N, Cin, H, W) with kernel (Cout, Cin, kh, kw),
/// zero padding `pad`, stride `stride`.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int pad = 0, int stride = 1) {
  require(x.value().rank() == 4, "conv2d input must be 4-D (N,C,H,W), got ",
          x.value().shape_str());
  require(w.value().rank() == 4, "conv2d kernel must be 4-D (Cout,Cin,kh,kw), got ",
          w.value().shape_str());
  require(x.value().dim(1) == w.value().dim(1), "conv2d channel mismatch: input ",
          x.value().shape_str(), " kernel ", w.value().shape_str());
  require(stride >= 1, "conv2d stride must be >= 1");
  int H = static_cast<int>(x.value().dim(2)), W = static_cast<int>(x.value().dim(3));
  int kh = static_cast<int>(w.value().dim(2)), kw = static_cast<int>(w.value().dim(3));
  int OH = (H + 2 * pad - kh) / stride + 1;
  int OW = (W + 2 * pad - kw) / stride + 1;
  require(OH >= 1 && OW >= 1, "conv2d output would be empty: input ", x.value().shape_str(),
          " kernel ", w.value().shape_str(), " pad ", pad);
  Tensor<T> out({x.value().dim(0), w.value().dim(0), static_cast<std::size_t>(OH),
                 static_cast<std::size_t>(OW)});
  detail::conv2d_accum(x.value(), w.value(), out, pad, stride);
  auto px = x.node(), pw = w.node();
  return make_node<T>(std::move(out), {px, pw}, [px, pw, pad, stride](Node<T>& n) {
    if (px->requires_grad) {
      px->ensure_grad();
      detail::conv2d_backward_input(px->grad, pw->value, n.grad, pad, stride);
    }
    if (pw->requires_grad) {
      pw->ensure_grad();
      detail::conv2d_backward_kernel(px->value, pw->grad, n.grad, pad, stride);
    }
  });
}

/// Adds a per-channel bias vector (C) to a (N, C, H, W) map.
template <typename T>
Var<T> bias_channels(const Var<T>& x, const Var<T>& b) {
  require(x.value().rank() == 4, "bias_channels input must be 4-D");
  require(b.value().rank() == 1 && b.value().dim(0) == x.value().dim(1),
          "bias length must equal channel count");
  Tensor<T> out = x.value();
  std::size_t N = out.shape[0], C = out.shape[1], HW = out.shape[2] * out.shape[3];
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      T bv = b.value().data[c];
      T* p = &out.data[(n * C + c) * HW];
      for (std::size_t i = 0; i < HW; ++i) p[i] += bv;
    }
  auto px = x.node(), pb = b.node();
  return make_node<T>(std::move(out), {px, pb}, [px, pb](Node<T>& n) {
    std::size_t N = n.value.shape[0], C = n.value.shape[1],
                HW = n.value.shape[2] * n.value.shape[3];
    if (px->requires_grad) px->accumulate(n.grad);
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t b2 = 0; b2 < N; ++b2)
        for (std::size_t c = 0; c < C; ++c) {
          const T* p = &n.grad.data[(b2 * C + c) * HW];
          T acc = T(0);
          for (std::size_t i = 0; i < HW; ++i) acc += p[i];
          pb->grad.data[c] += acc;
        }
    }
  });
}

/// Adds a row vector (K) to every row of a (N, K) matrix.
template <typename T>
Var<T> add_rowvec(const Var<T>& x, const Var<T>& b) {
  require(x.value().rank() == 2 && b.value().rank() == 1 && b.value().dim(0) == x.value().dim(1),
          "add_rowvec shape mismatch");
  Tensor<T> out = x.value();
  std::size_t N = out.shape[0], K = out.shape[1];
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t k = 0; k < K; ++k) out.data[i * K + k] += b.value().data[k];
  auto px = x.node(), pb = b.node();
  return make_node<T>(std::move(out), {px, pb}, [px, pb](Node<T>& n) {
    std::size_t N = n.value.shape[0], K = n.value.shape[1];
    if (px->requires_grad) px->accumulate(n.grad);
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t k = 0; k < K; ++k) pb->grad.data[k] += n.grad.data[i * K + k];
    }
  });
}

// ---------------------------------------------------------------------------
// Pooling

/// Non-overlapping k x k max pool; height/width must divide evenly so the
/// pooling grid commutes with quarter-turn rotations.
template <typename T>
Var<T> max_pool2d(const Var<T>& x, std::size_t k) {
  require(x.value().rank() == 4, "max_pool2d input must be 4-D");
  std::size_t N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2),
              W = x.value().dim(3);
  require(H % k == 0 && W % k == 0, "max_pool2d requires extents divisible by ", k, ", got ",
          x.value().shape_str());
  std::size_t OH = H / k, OW = W / k;
  Tensor<T> out({N, C, OH, OW});
  auto arg = std::make_shared<std::vector<std::size_t>>(N * C * OH * OW);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          T best = x.value().at4(n, c, oy * k, ox * k);
          std::size_t bidx = (oy * k) * W + ox * k;
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t dx = 0; dx < k; ++dx) {
              T v = x.value().at4(n, c, oy * k + dy, ox * k + dx);
              if (v > best) {
                best = v;
                bidx = (oy * k + dy) * W + ox * k + dx;
              }
            }
          out.at4(n, c, oy, ox) = best;
          (*arg)[((n * C + c) * OH + oy) * OW + ox] = bidx;
        }
  auto px = x.node();
  return make_node<T>(std::move(out), {px}, [px, arg](Node<T>& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    std::size_t HW = px->value.shape[2] * px->value.shape[3];
    std::size_t NC = px->value.shape[0] * px->value.shape[1];
    std::size_t OHW = n.value.shape[2] * n.value.shape[3];
    for (std::size_t nc = 0; nc < NC; ++nc)
      for (std::size_t o = 0; o < OHW; ++o)
        px->grad.data[nc * HW + (*arg)[nc * OHW + o]] += n.grad.data[nc * OHW + o];
  });
}

/// Non-overlapping k x k average pool.
template <typename T>
Var<T> avg_pool2d(const Var<T>& x, std::size_t k) {
  require(x.value().rank() == 4, "avg_pool2d input must be 4-D");
  std::size_t N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2),
              W = x.value().dim(3);
  require(H % k == 0 && W % k == 0, "avg_pool2d requires extents divisible by ", k, ", got ",
          x.value().shape_str());
  std::size_t OH = H / k, OW = W / k;
  Tensor<T> out({N, C, OH, OW});
  T inv = T(1) / static_cast<T>(k * k);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          T acc = T(0);
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t dx = 0; dx < k; ++dx) acc += x.value().at4(n, c, oy * k + dy, ox * k + dx);
          out.at4(n, c, oy, ox) = acc * inv;
        }
  auto px = x.node();
  return make_node<T>(std::move(out), {px}, [px, k, inv](Node<T>& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    std::size_t NC = px->value.shape[0] * px->value.shape[1];
    std::size_t H = px->value.shape[2], W = px->value.shape[3];
    std::size_t OH = n.value.shape[2], OW = n.value.shape[3];
    for (std::size_t nc = 0; nc < NC; ++nc)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          T g = n.grad.data[(nc * OH + oy) * OW + ox] * inv;
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t dx = 0; dx < k; ++dx)
              px->grad.data[(nc * H + oy * k + dy) * W + ox * k + dx] += g;
        }
  });
}

/// Reduces each contiguous channel group of size `group` to its max
/// (N, m*group, H, W) -> (N, m, H, W); the equivariant regular -> trivial map.
template <typename T>
Var<T> group_max_pool_channels(const Var<T>& x, std::size_t group) {
  require(x.value().rank() == 4, "group_max_pool input must be 4-D");
  std::size_t N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2),
              W = x.value().dim(3);
  require(group >= 1 && C % group == 0, "channel count ", C, " not divisible by group size ",
          group);
  std::size_t M = C / group, HW = H * W;
  Tensor<T> out({N, M, H, W});
  auto arg = std::make_shared<std::vector<std::size_t>>(N * M * HW);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t p = 0; p < HW; ++p) {
        T best = x.value().data[((n * C + m * group) * HW) + p];
        std::size_t bg = 0;
        for (std::size_t g = 1; g < group; ++g) {
          T v = x.value().data[((n * C + m * group + g) * HW) + p];
          if (v > best) {
            best = v;
            bg = g;
          }
        }
        out.data[(n * M + m) * HW + p] = best;
        (*arg)[(n * M + m) * HW + p] = bg;
      }
  auto px = x.node();
  return make_node<T>(std::move(out), {px}, [px, group, arg](Node<T>& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    std::size_t N = n.value.shape[0], M = n.value.shape[1],
                HW = n.value.shape[2] * n.value.shape[3];
    std::size_t C = px->value.shape[1];
    for (std::size_t b = 0; b < N; ++b)
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t p = 0; p < HW; ++p) {
          std::size_t g = (*arg)[(b * M + m) * HW + p];
          px->grad.data[(b * C + m * group + g) * HW + p] += n.grad.data[(b * M + m) * HW + p];
        }
  });
}

// ---------------------------------------------------------------------------
// Losses

/// Per-element Huber penalty of (pred - target): quadratic inside |e| <= delta,
/// linear outside, continuous first derivative.
template <typename T>
Var<T> huber_elem(const Var<T>& pred, const Var<T>& target, double delta = 1.0) {
  check_same_shape(pred.value(), target.value(), "huber");
  Tensor<T> out(pred.value().shape);
  T d = static_cast<T>(delta);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    T e = pred.value().data[i] - target.value().data[i];
    T a = std::abs(e);
    out.data[i] = a <= d ? T(0.5) * e * e : d * (a - T(0.5) * d);
  }
  auto pp = pred.node(), pt = target.node();
  return make_node<T>(std::move(out), {pp, pt}, [pp, pt, d](Node<T>& n) {
    for (std::size_t i = 0; i < n.grad.data.size(); ++i) {
      T e = pp->value.data[i] - pt->value.data[i];
      T de = std::min(std::max(e, -d), d) * n.grad.data[i];
      if (pp->requires_grad) {
        pp->ensure_grad();
        pp->grad.data[i] += de;
      }
      if (pt->requires_grad) {
        pt->ensure_grad();
        pt->grad.data[i] -= de;
      }
    }
  });
}

/// Mean Huber loss over all elements.
template <typename T>
Var<T> huber_loss(const Var<T>& pred, const Var<T>& target, double delta = 1.0) {
  return mean_all(huber_elem(pred, target, delta));
}

template <typename T>
Var<T> mse_loss(const Var<T>& pred, const Var<T>& target) {
  auto e = sub(pred, target);
  return mean_all(mul(e, e));
}

}  // namespace equirl::ad
