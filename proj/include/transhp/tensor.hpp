#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <unordered_set>
#include <utility>
#include <vector>

#include "transhp/common.hpp"
#include "transhp/kernels.hpp"

// Reverse-mode autodiff over dense tensors. Graphs are built define-by-run:
// each op returns a tensor whose node records its parents and a backward
// closure. backward() visits reachable nodes in descending creation order,
// which is a valid reverse topological order because parents always precede
// children; gradient accumulation order is therefore fixed by graph
// construction and independent of thread count.

namespace transhp {

namespace detail {

inline std::atomic<uint64_t>& node_counter() {
  static std::atomic<uint64_t> c{1};
  return c;
}

template <class S>
struct Node {
  std::vector<int> shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until needed; same length as value afterwards
  bool requires_grad = false;
  uint64_t id = node_counter().fetch_add(1, std::memory_order_relaxed);
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backfn;

  long numel() const { return static_cast<long>(value.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Disables graph construction in scope (evaluation, finite differences).
struct NoGradGuard {
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline long shape_numel(const std::vector<int>& shape) {
  long n = 1;
  for (int d : shape) n *= d;
  return n;
}

template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape) {
    return from(std::move(shape), {});
  }
  static Tensor full(std::vector<int> shape, S v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
  }
  static Tensor scalar(S v) { return full({}, v); }
  static Tensor from(std::vector<int> shape, std::vector<S> value) {
    for (int d : shape)
      if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    const long n = shape_numel(shape);
    Tensor t;
    t.node_ = std::make_shared<detail::Node<S>>();
    t.node_->shape = std::move(shape);
    if (value.empty())
      t.node_->value.assign(static_cast<size_t>(n), S(0));
    else {
      if (static_cast<long>(value.size()) != n)
        throw ShapeError("value size " + std::to_string(value.size()) + " does not match shape " +
                         shape_str(t.node_->shape));
      t.node_->value = std::move(value);
    }
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  long numel() const { return node_->numel(); }

  std::vector<S>& data() { return node_->value; }
  const std::vector<S>& data() const { return node_->value; }
  S item() const {
    if (numel() != 1) throw ContractError("item() requires a scalar tensor, got shape " + shape_str(shape()));
    return node_->value[0];
  }

  Tensor& set_requires_grad(bool b = true) {
    node_->requires_grad = b;
    return *this;
  }
  bool requires_grad() const { return node_->requires_grad; }
  std::vector<S>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<S>& grad() const {
    const_cast<detail::Node<S>*>(node_.get())->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
  }

  std::shared_ptr<detail::Node<S>> node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<S>> node_;
};

namespace detail {

template <class S>
bool any_requires(std::initializer_list<const Tensor<S>*> ps) {
  if (!grad_enabled()) return false;
  for (auto* p : ps)
    if (p->node()->requires_grad) return true;
  return false;
}

// y += x
template <class S>
void vec_acc(const S* x, S* y, long n) {
#pragma omp parallel for simd schedule(static) if (n > kern::kParMin)
  for (long i = 0; i < n; ++i) y[i] += x[i];
}

// y += a*x
template <class S>
void vec_axpy(S a, const S* x, S* y, long n) {
#pragma omp parallel for simd schedule(static) if (n > kern::kParMin)
  for (long i = 0; i < n; ++i) y[i] += a * x[i];
}

template <class S>
void attach(Tensor<S>& out, std::type_identity_t<std::vector<std::shared_ptr<Node<S>>>> parents,
            std::type_identity_t<std::function<void(Node<S>&)>> backfn) {
  auto n = out.node();
  n->requires_grad = true;
  n->parents = std::move(parents);
  n->backfn = std::move(backfn);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops

template <class S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "add");
  const long n = a.numel();
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.data().data();
#pragma omp parallel for simd schedule(static) if (n > kern::kParMin)
  for (long i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (detail::any_requires<S>({&a, &b})) {
    auto an = a.node(), bn = b.node();
    detail::attach(out, {an, bn}, [an, bn](detail::Node<S>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        detail::vec_acc(self.grad.data(), an->grad.data(), self.numel());
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::vec_acc(self.grad.data(), bn->grad.data(), self.numel());
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "sub");
  const long n = a.numel();
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.data().data();
#pragma omp parallel for simd schedule(static) if (n > kern::kParMin)
  for (long i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  if (detail::any_requires<S>({&a, &b})) {
    auto an = a.node(), bn = b.node();
    detail::attach(out, {an, bn}, [an, bn](detail::Node<S>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        detail::vec_acc(self.grad.data(), an->grad.data(), self.numel());
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::vec_axpy(S(-1), self.grad.data(), bn->grad.data(), self.numel());
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "mul");
  const long n = a.numel();
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.data().data();
#pragma omp parallel for simd schedule(static) if (n > kern::kParMin)
  for (long i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (detail::any_requires<S>({&a, &b})) {
    auto an = a.node(), bn = b.node();
    detail::attach(out, {an, bn}, [an, bn](detail::Node<S>& self) {
      const long m = self.numel();
      if (an->requires_grad) {
        an->ensure_grad();
        const S* g = self.grad.data();
        const S* pb2 = bn->value.data();
        S* d = an->grad.data();
#pragma omp parallel for simd schedule(static) if (m > kern::kParMin)
        for (long i = 0; i < m; ++i) d[i] += g[i] * pb2[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        const S* g = self.grad.data();
        const S* pa2 = an->value.data();
        S* d = bn->grad.data();
#pragma omp parallel for simd schedule(static) if (m > kern::kParMin)
        for (long i = 0; i < m; ++i) d[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  const long n = a.numel();
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data().data();
  S* po = out.data().data();
#pragma omp parallel for simd schedule(static) if (n > kern::kParMin)
  for (long i = 0; i < n; ++i) po[i] = pa[i] * c;
  if (detail::any_requires<S>({&a})) {
    auto an = a.node();
    detail::attach(out, {an}, [an, c](detail::Node<S>& self) {
      if (!an->requires_grad) return;
      an->ensure_grad();
      detail::vec_axpy(c, self.grad.data(), an->grad.data(), self.numel());
    });
  }
  return out;
}

template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
  // tanh form; the cached tanh values feed the backward pass so forward and
  // backward describe the same function.
  const long n = a.numel();
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  auto tcache = std::make_shared<std::vector<S>>(static_cast<size_t>(n));
  const S c = std::sqrt(S(2) / S(M_PI));
  const S k = S(0.044715);
  const S* pa = a.data().data();
  S* po = out.data().data();
  S* pt = tcache->data();
#pragma omp parallel for simd schedule(static) if (n > kern::kParMin)
  for (long i = 0; i < n; ++i) {
    const S x = pa[i];
    const S t = fastmath::tanh_approx(c * (x + k * x * x * x));
    pt[i] = t;
    po[i] = S(0.5) * x * (S(1) + t);
  }
  if (detail::any_requires<S>({&a})) {
    auto an = a.node();
    detail::attach(out, {an}, [an, tcache, c, k](detail::Node<S>& self) {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const long m = self.numel();
      const S* g = self.grad.data();
      const S* px = an->value.data();
      const S* pt2 = tcache->data();
      S* d = an->grad.data();
#pragma omp parallel for simd schedule(static) if (m > kern::kParMin)
      for (long i = 0; i < m; ++i) {
        const S x = px[i];
        const S t = pt2[i];
        const S du = c * (S(1) + S(3) * k * x * x);
        d[i] += g[i] * (S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du);
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
  const long n = a.numel();
  const S* pa = a.data().data();
  S acc = S(0);
  for (long i = 0; i < n; ++i) acc += pa[i];  // fixed ascending order
  Tensor<S> out = Tensor<S>::scalar(acc);
  if (detail::any_requires<S>({&a})) {
    auto an = a.node();
    detail::attach(out, {an}, [an](detail::Node<S>& self) {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const S g = self.grad[0];
      S* d = an->grad.data();
      const long m = an->numel();
      for (long i = 0; i < m; ++i) d[i] += g;
    });
  }
  return out;
}

template <class S>
Tensor<S> mean(const Tensor<S>& a) {
  return scale(sum(a), S(1) / static_cast<S>(a.numel()));
}

// ---------------------------------------------------------------------------
// Shape ops

template <class S>
Tensor<S> reshape(const Tensor<S>& a, std::vector<int> newshape) {
  if (shape_numel(newshape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(newshape));
  Tensor<S> out = Tensor<S>::from(std::move(newshape), a.data());
  if (detail::any_requires<S>({&a})) {
    auto an = a.node();
    detail::attach(out, {an}, [an](detail::Node<S>& self) {
      if (!an->requires_grad) return;
      an->ensure_grad();
      detail::vec_acc(self.grad.data(), an->grad.data(), self.numel());
    });
  }
  return out;
}

// Tokens t0..t0+len-1 along axis 1 of [B,T,C].
template <class S>
Tensor<S> slice_tokens(const Tensor<S>& a, int t0, int len) {
  if (a.rank() != 3) throw ShapeError("slice_tokens expects rank-3 input, got " + shape_str(a.shape()));
  const int B = a.dim(0), T = a.dim(1), C = a.dim(2);
  if (t0 < 0 || len < 0 || t0 + len > T)
    throw IndexError("slice_tokens: range [" + std::to_string(t0) + "," + std::to_string(t0 + len) +
                     ") out of " + std::to_string(T) + " tokens");
  Tensor<S> out = Tensor<S>::zeros({B, len, C});
  const S* pa = a.data().data();
  S* po = out.data().data();
  for (int b = 0; b < B; ++b)
    std::copy_n(pa + (static_cast<size_t>(b) * T + t0) * C, static_cast<size_t>(len) * C,
                po + static_cast<size_t>(b) * len * C);
  if (detail::any_requires<S>({&a})) {
    auto an = a.node();
    detail::attach(out, {an}, [an, B, T, C, t0, len](detail::Node<S>& self) {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const S* g = self.grad.data();
      S* d = an->grad.data();
      for (int b = 0; b < B; ++b) {
        const S* gs = g + static_cast<size_t>(b) * len * C;
        S* ds = d + (static_cast<size_t>(b) * T + t0) * C;
        for (long i = 0; i < static_cast<long>(len) * C; ++i) ds[i] += gs[i];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> concat_tokens(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
    throw ShapeError("concat_tokens: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const int B = a.dim(0), T1 = a.dim(1), T2 = b.dim(1), C = a.dim(2);
  Tensor<S> out = Tensor<S>::zeros({B, T1 + T2, C});
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.data().data();
  for (int bb = 0; bb < B; ++bb) {
    std::copy_n(pa + static_cast<size_t>(bb) * T1 * C, static_cast<size_t>(T1) * C,
                po + static_cast<size_t>(bb) * (T1 + T2) * C);
    std::copy_n(pb + static_cast<size_t>(bb) * T2 * C, static_cast<size_t>(T2) * C,
                po + (static_cast<size_t>(bb) * (T1 + T2) + T1) * C);
  }
  if (detail::any_requires<S>({&a, &b})) {
    auto an = a.node(), bn = b.node();
    detail::attach(out, {an, bn}, [an, bn, B, T1, T2, C](detail::Node<S>& self) {
      const S* g = self.grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        S* d = an->grad.data();
        for (int bb = 0; bb < B; ++bb) {
          const S* gs = g + static_cast<size_t>(bb) * (T1 + T2) * C;
          S* ds = d + static_cast<size_t>(bb) * T1 * C;
          for (long i = 0; i < static_cast<long>(T1) * C; ++i) ds[i] += gs[i];
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        S* d = bn->grad.data();
        for (int bb = 0; bb < B; ++bb) {
          const S* gs = g + (static_cast<size_t>(bb) * (T1 + T2) + T1) * C;
          S* ds = d + static_cast<size_t>(bb) * T2 * C;
          for (long i = 0; i < static_cast<long>(T2) * C; ++i) ds[i] += gs[i];
        }
      }
    });
  }
  return out;
}

// Replicates a over a new leading batch axis; gradient sums over that axis
// in ascending batch order.
template <class S>
Tensor<S> broadcast_batch(const Tensor<S>& a, int B) {
  std::vector<int> shape = a.shape();
  shape.insert(shape.begin(), B);
  const long n = a.numel();
  Tensor<S> out = Tensor<S>::zeros(shape);
  const S* pa = a.data().data();
  S* po = out.data().data();
  for (int b = 0; b < B; ++b) std::copy_n(pa, n, po + static_cast<size_t>(b) * n);
  if (detail::any_requires<S>({&a})) {
    auto an = a.node();
    detail::attach(out, {an}, [an, B, n](detail::Node<S>& self) {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const S* g = self.grad.data();
      S* d = an->grad.data();
      for (int b = 0; b < B; ++b)
        for (long i = 0; i < n; ++i) d[i] += g[static_cast<size_t>(b) * n + i];
    });
  }
  return out;
}

// x[B,...] + m[...] broadcast over the batch axis.
template <class S>
Tensor<S> add_broadcast_batch(const Tensor<S>& x, const Tensor<S>& m) {
  if (x.rank() != m.rank() + 1 ||
      !std::equal(m.shape().begin(), m.shape().end(), x.shape().begin() + 1))
    throw ShapeError("add_broadcast_batch: shapes " + shape_str(x.shape()) + " and " +
                     shape_str(m.shape()) + " incompatible");
  const int B = x.dim(0);
  const long n = m.numel();
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data().data();
  const S* pm = m.data().data();
  S* po = out.data().data();
  const long total = x.numel();
#pragma omp parallel for schedule(static) if (total > kern::kParMin)
  for (int b = 0; b < B; ++b) {
    const S* xs = px + static_cast<size_t>(b) * n;
    S* os = po + static_cast<size_t>(b) * n;
    for (long i = 0; i < n; ++i) os[i] = xs[i] + pm[i];
  }
  if (detail::any_requires<S>({&x, &m})) {
    auto xn = x.node(), mn = m.node();
    detail::attach(out, {xn, mn}, [xn, mn, B, n](detail::Node<S>& self) {
      const S* g = self.grad.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        detail::vec_acc(g, xn->grad.data(), self.numel());
      }
      if (mn->requires_grad) {
        mn->ensure_grad();
        S* d = mn->grad.data();
        for (int b = 0; b < B; ++b)
          for (long i = 0; i < n; ++i) d[i] += g[static_cast<size_t>(b) * n + i];
      }
    });
  }
  return out;
}

// [B,T,h*d] -> [B*h,T,d]
template <class S>
Tensor<S> split_heads(const Tensor<S>& x, int h) {
  if (x.rank() != 3 || x.dim(2) % h != 0)
    throw ShapeError("split_heads: shape " + shape_str(x.shape()) + " not divisible into " +
                     std::to_string(h) + " heads");
  const int B = x.dim(0), T = x.dim(1), C = x.dim(2), d = C / h;
  Tensor<S> out = Tensor<S>::zeros({B * h, T, d});
  const S* px = x.data().data();
  S* po = out.data().data();
  const long total = x.numel();
#pragma omp parallel for collapse(2) schedule(static) if (total > kern::kParMin)
  for (int b = 0; b < B; ++b)
    for (int hh = 0; hh < h; ++hh)
      for (int t = 0; t < T; ++t)
        std::copy_n(px + (static_cast<size_t>(b) * T + t) * C + static_cast<size_t>(hh) * d, d,
                    po + ((static_cast<size_t>(b) * h + hh) * T + t) * d);
  if (detail::any_requires<S>({&x})) {
    auto xn = x.node();
    detail::attach(out, {xn}, [xn, B, T, h, d](detail::Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const int C = h * d;
      const S* g = self.grad.data();
      S* dd = xn->grad.data();
      for (int b = 0; b < B; ++b)
        for (int hh = 0; hh < h; ++hh)
          for (int t = 0; t < T; ++t) {
            const S* gs = g + ((static_cast<size_t>(b) * h + hh) * T + t) * d;
            S* ds = dd + (static_cast<size_t>(b) * T + t) * C + static_cast<size_t>(hh) * d;
            for (int i = 0; i < d; ++i) ds[i] += gs[i];
          }
    });
  }
  return out;
}

// [B*h,T,d] -> [B,T,h*d]
template <class S>
Tensor<S> merge_heads(const Tensor<S>& x, int h) {
  if (x.rank() != 3 || x.dim(0) % h != 0)
    throw ShapeError("merge_heads: shape " + shape_str(x.shape()) + " not divisible by " +
                     std::to_string(h) + " heads");
  const int B = x.dim(0) / h, T = x.dim(1), d = x.dim(2), C = h * d;
  Tensor<S> out = Tensor<S>::zeros({B, T, C});
  const S* px = x.data().data();
  S* po = out.data().data();
  const long total = x.numel();
#pragma omp parallel for collapse(2) schedule(static) if (total > kern::kParMin)
  for (int b = 0; b < B; ++b)
    for (int hh = 0; hh < h; ++hh)
      for (int t = 0; t < T; ++t)
        std::copy_n(px + ((static_cast<size_t>(b) * h + hh) * T + t) * d, d,
                    po + (static_cast<size_t>(b) * T + t) * C + static_cast<size_t>(hh) * d);
  if (detail::any_requires<S>({&x})) {
    auto xn = x.node();
    detail::attach(out, {xn}, [xn, B, T, h, d](detail::Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const int C = h * d;
      const S* g = self.grad.data();
      S* dd = xn->grad.data();
      for (int b = 0; b < B; ++b)
        for (int hh = 0; hh < h; ++hh)
          for (int t = 0; t < T; ++t) {
            const S* gs = g + (static_cast<size_t>(b) * T + t) * C + static_cast<size_t>(hh) * d;
            S* ds = dd + ((static_cast<size_t>(b) * h + hh) * T + t) * d;
            for (int i = 0; i < d; ++i) ds[i] += gs[i];
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Contractions

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " do not chain");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> out = Tensor<S>::zeros({m, n});
  kern::mm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  if (detail::any_requires<S>({&a, &b})) {
    auto an = a.node(), bn = b.node();
    detail::attach(out, {an, bn}, [an, bn, m, k, n](detail::Node<S>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        // dA += dC * B^T
        kern::mm_nt(self.grad.data(), bn->value.data(), an->grad.data(), m, n, k, true);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        // dB += A^T * dC
        kern::mm_tn(an->value.data(), self.grad.data(), bn->grad.data(), m, k, n, true);
      }
    });
  }
  return out;
}

// x[...,k] @ W[k,n] (+ bias[n]); leading axes of x are flattened row-wise.
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& W, const Tensor<S>& bias = {}) {
  if (x.rank() < 1 || W.rank() != 2 || x.dim(x.rank() - 1) != W.dim(0))
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not chain with weight " +
                     shape_str(W.shape()));
  const int k = W.dim(0), n = W.dim(1);
  const long rows = x.numel() / k;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != n))
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match output width " +
                     std::to_string(n));
  std::vector<int> oshape(x.shape().begin(), x.shape().end() - 1);
  oshape.push_back(n);
  Tensor<S> out = Tensor<S>::zeros(oshape);
  kern::mm_nn(x.data().data(), W.data().data(), out.data().data(), static_cast<int>(rows), k, n);
  if (bias.defined()) {
    S* po = out.data().data();
    const S* pb = bias.data().data();
    const long total = out.numel();
#pragma omp parallel for schedule(static) if (total > kern::kParMin)
    for (long r = 0; r < rows; ++r) {
      S* orow = po + r * n;
      for (int j = 0; j < n; ++j) orow[j] += pb[j];
    }
  }
  const bool bias_req = bias.defined() && grad_enabled() && bias.node()->requires_grad;
  if (detail::any_requires<S>({&x, &W}) || bias_req) {
    auto xn = x.node(), wn = W.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    std::vector<std::shared_ptr<detail::Node<S>>> parents{xn, wn};
    if (bn) parents.push_back(bn);
    detail::attach(out, std::move(parents), [xn, wn, bn, rows, k, n](detail::Node<S>& self) {
      if (xn->requires_grad) {
        xn->ensure_grad();
        kern::mm_nt(self.grad.data(), wn->value.data(), xn->grad.data(), static_cast<int>(rows), n,
                    k, true);
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        kern::mm_tn(xn->value.data(), self.grad.data(), wn->grad.data(), static_cast<int>(rows), k,
                    n, true);
      }
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        kern::colsum(self.grad.data(), bn->grad.data(), static_cast<int>(rows), n, true);
      }
    });
  }
  return out;
}

// Batched matmul a[L,m,k] @ b[L,k,n].
template <class S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw ShapeError("bmm: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " do not chain");
  const int L = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor<S> out = Tensor<S>::zeros({L, m, n});
  kern::bmm_nn(a.data().data(), b.data().data(), out.data().data(), L, m, k, n);
  if (detail::any_requires<S>({&a, &b})) {
    auto an = a.node(), bn = b.node();
    detail::attach(out, {an, bn}, [an, bn, L, m, k, n](detail::Node<S>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        std::vector<S> tmp(static_cast<size_t>(L) * m * k);
        kern::bmm_nt(self.grad.data(), bn->value.data(), tmp.data(), L, m, n, k);
        detail::vec_acc(tmp.data(), an->grad.data(), an->numel());
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        std::vector<S> tmp(static_cast<size_t>(L) * k * n);
        kern::bmm_tn(an->value.data(), self.grad.data(), tmp.data(), L, m, k, n);
        detail::vec_acc(tmp.data(), bn->grad.data(), bn->numel());
      }
    });
  }
  return out;
}

// Batched a[L,m,k] @ b[L,n,k]^T.
template <class S>
Tensor<S> bmm_nt(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
    throw ShapeError("bmm_nt: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " do not chain");
  const int L = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  Tensor<S> out = Tensor<S>::zeros({L, m, n});
  kern::bmm_nt(a.data().data(), b.data().data(), out.data().data(), L, m, k, n);
  if (detail::any_requires<S>({&a, &b})) {
    auto an = a.node(), bn = b.node();
    detail::attach(out, {an, bn}, [an, bn, L, m, k, n](detail::Node<S>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        std::vector<S> tmp(static_cast<size_t>(L) * m * k);
        kern::bmm_nn(self.grad.data(), bn->value.data(), tmp.data(), L, m, n, k);
        detail::vec_acc(tmp.data(), an->grad.data(), an->numel());
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        std::vector<S> tmp(static_cast<size_t>(L) * n * k);
        kern::bmm_tn(self.grad.data(), an->value.data(), tmp.data(), L, m, n, k);
        detail::vec_acc(tmp.data(), bn->grad.data(), bn->numel());
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and losses

template <class S>
Tensor<S> softmax(const Tensor<S>& x, int axis = -1) {
  const int r = x.rank();
  if (r == 0) throw ShapeError("softmax: scalar input");
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  for (S v : x.data())
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
  const int n = x.dim(axis);
  long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  if (inner == 1) {
    kern::softmax_rows(x.data().data(), out.data().data(), outer, n);
  } else {
    const S* px = x.data().data();
    S* po = out.data().data();
    for (long o = 0; o < outer; ++o)
      for (long in = 0; in < inner; ++in) {
        const S* xs = px + o * n * inner + in;
        S* ys = po + o * n * inner + in;
        S mx = xs[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, xs[static_cast<size_t>(j) * inner]);
        S s = S(0);
        for (int j = 0; j < n; ++j) {
          const S e = std::exp(xs[static_cast<size_t>(j) * inner] - mx);
          ys[static_cast<size_t>(j) * inner] = e;
          s += e;
        }
        for (int j = 0; j < n; ++j) ys[static_cast<size_t>(j) * inner] /= s;
      }
  }
  if (detail::any_requires<S>({&x})) {
    auto xn = x.node();
    // self.value is the softmax output; capturing the output node here would
    // create an ownership cycle.
    detail::attach(out, {xn}, [xn, n, outer, inner](detail::Node<S>& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      if (inner == 1) {
        kern::softmax_rows_backward(self.value.data(), self.grad.data(), xn->grad.data(), outer, n);
      } else {
        const S* y = self.value.data();
        const S* g = self.grad.data();
        S* d = xn->grad.data();
        for (long o = 0; o < outer; ++o)
          for (long in = 0; in < inner; ++in) {
            const size_t base = static_cast<size_t>(o) * n * inner + in;
            S dot = S(0);
            for (int j = 0; j < n; ++j)
              dot += g[base + static_cast<size_t>(j) * inner] * y[base + static_cast<size_t>(j) * inner];
            for (int j = 0; j < n; ++j)
              d[base + static_cast<size_t>(j) * inner] +=
                  (g[base + static_cast<size_t>(j) * inner] - dot) * y[base + static_cast<size_t>(j) * inner];
          }
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps) {
  const int r = x.rank();
  if (r == 0) throw ShapeError("layer_norm: scalar input");
  const int C = x.dim(r - 1);
  if (gain.rank() != 1 || gain.dim(0) != C || bias.rank() != 1 || bias.dim(0) != C)
    throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                     shape_str(bias.shape()) + " do not match channel count " + std::to_string(C));
  if (eps <= S(0)) throw ContractError("layer_norm: eps must be positive");
  const long rows = x.numel() / C;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<S>>(x.data().size());
  auto invstd = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
  const S* px = x.data().data();
  const S* pg = gain.data().data();
  const S* pb = bias.data().data();
  S* po = out.data().data();
  S* ph = xhat->data();
  S* pi = invstd->data();
  const long total = x.numel();
#pragma omp parallel for schedule(static) if (total > kern::kParMin)
  for (long rr = 0; rr < rows; ++rr) {
    const S* xs = px + rr * C;
    S m = S(0);
    for (int j = 0; j < C; ++j) m += xs[j];
    m /= S(C);
    S var = S(0);
    for (int j = 0; j < C; ++j) {
      const S dd = xs[j] - m;
      var += dd * dd;
    }
    var /= S(C);
    const S inv = S(1) / std::sqrt(var + eps);
    pi[rr] = inv;
    S* hs = ph + rr * C;
    S* os = po + rr * C;
    for (int j = 0; j < C; ++j) {
      hs[j] = (xs[j] - m) * inv;
      os[j] = hs[j] * pg[j] + pb[j];
    }
  }
  if (detail::any_requires<S>({&x, &gain, &bias})) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    detail::attach(out, {xn, gn, bn}, [xn, gn, bn, xhat, invstd, rows, C](detail::Node<S>& self) {
      const S* g = self.grad.data();
      const S* ph2 = xhat->data();
      const S* pi2 = invstd->data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        const S* pg2 = gn->value.data();
        S* d = xn->grad.data();
        const long total2 = rows * C;
#pragma omp parallel for schedule(static) if (total2 > kern::kParMin)
        for (long rr = 0; rr < rows; ++rr) {
          const S* gs = g + rr * C;
          const S* hs = ph2 + rr * C;
          S m1 = S(0), m2 = S(0);
          for (int j = 0; j < C; ++j) {
            const S dyg = gs[j] * pg2[j];
            m1 += dyg;
            m2 += dyg * hs[j];
          }
          m1 /= S(C);
          m2 /= S(C);
          S* ds = d + rr * C;
          for (int j = 0; j < C; ++j)
            ds[j] += (gs[j] * pg2[j] - m1 - hs[j] * m2) * pi2[rr];
        }
      }
      if (gn->requires_grad) {
        gn->ensure_grad();
        S* d = gn->grad.data();
        for (long rr = 0; rr < rows; ++rr)
          for (int j = 0; j < C; ++j) d[j] += g[rr * C + j] * ph2[rr * C + j];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        kern::colsum(g, bn->grad.data(), static_cast<int>(rows), C, true);
      }
    });
  }
  return out;
}

// -log softmax(logits)[target] for a single logit vector.
template <class S>
Tensor<S> cross_entropy(const Tensor<S>& logits, int target) {
  if (logits.rank() != 1)
    throw ShapeError("cross_entropy: expected rank-1 logits, got " + shape_str(logits.shape()));
  const int n = logits.dim(0);
  if (target < 0 || target >= n)
    throw IndexError("cross_entropy: target " + std::to_string(target) + " out of range [0," +
                     std::to_string(n) + ")");
  const S* z = logits.data().data();
  S mx = z[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, z[j]);
  S s = S(0);
  for (int j = 0; j < n; ++j) s += std::exp(z[j] - mx);
  const S loss = std::log(s) + mx - z[target];
  Tensor<S> out = Tensor<S>::scalar(loss);
  if (detail::any_requires<S>({&logits})) {
    auto ln = logits.node();
    detail::attach(out, {ln}, [ln, n, target, mx, s](detail::Node<S>& self) {
      if (!ln->requires_grad) return;
      ln->ensure_grad();
      const S g = self.grad[0];
      const S* z2 = ln->value.data();
      S* d = ln->grad.data();
      for (int j = 0; j < n; ++j) {
        const S p = std::exp(z2[j] - mx) / s;
        d[j] += g * (p - (j == target ? S(1) : S(0)));
      }
    });
  }
  return out;
}

// Mean softmax cross-entropy over rows of logits[B,n].
template <class S>
Tensor<S> cross_entropy_rows(const Tensor<S>& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2)
    throw ShapeError("cross_entropy_rows: expected rank-2 logits, got " + shape_str(logits.shape()));
  const int B = logits.dim(0), n = logits.dim(1);
  if (static_cast<int>(targets.size()) != B)
    throw ContractError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
                        std::to_string(B) + " rows");
  for (int t : targets)
    if (t < 0 || t >= n)
      throw IndexError("cross_entropy_rows: target " + std::to_string(t) + " out of range [0," +
                       std::to_string(n) + ")");
  const S* z = logits.data().data();
  S acc = S(0);
  for (int b = 0; b < B; ++b) {
    const S* zr = z + static_cast<size_t>(b) * n;
    S mx = zr[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, zr[j]);
    S s = S(0);
    for (int j = 0; j < n; ++j) s += std::exp(zr[j] - mx);
    acc += std::log(s) + mx - zr[targets[static_cast<size_t>(b)]];
  }
  Tensor<S> out = Tensor<S>::scalar(acc / static_cast<S>(B));
  if (detail::any_requires<S>({&logits})) {
    auto ln = logits.node();
    auto tgt = std::make_shared<std::vector<int>>(targets);
    detail::attach(out, {ln}, [ln, tgt, B, n](detail::Node<S>& self) {
      if (!ln->requires_grad) return;
      ln->ensure_grad();
      const S g = self.grad[0] / static_cast<S>(B);
      const S* z2 = ln->value.data();
      S* d = ln->grad.data();
      for (int b = 0; b < B; ++b) {
        const S* zr = z2 + static_cast<size_t>(b) * n;
        S* dr = d + static_cast<size_t>(b) * n;
        S mx = zr[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, zr[j]);
        S s = S(0);
        for (int j = 0; j < n; ++j) s += std::exp(zr[j] - mx);
        const int t = (*tgt)[static_cast<size_t>(b)];
        for (int j = 0; j < n; ++j) {
          const S p = std::exp(zr[j] - mx) / s;
          dr[j] += g * (p - (j == t ? S(1) : S(0)));
        }
      }
    });
  }
  return out;
}

// Paired row scores: S[..,i] = <phat[..,i,:], protos[i,:]>, each row scored
// only against its own prototype.
template <class S>
Tensor<S> paired_row_scores(const Tensor<S>& phat, const Tensor<S>& protos) {
  if (protos.rank() != 2)
    throw ShapeError("paired_row_scores: prototypes must be rank-2, got " + shape_str(protos.shape()));
  const int M = protos.dim(0), C = protos.dim(1);
  if (phat.rank() < 2 || phat.dim(phat.rank() - 2) != M || phat.dim(phat.rank() - 1) != C)
    throw ShapeError("paired_row_scores: states " + shape_str(phat.shape()) +
                     " do not pair with prototypes " + shape_str(protos.shape()));
  const long batch = phat.numel() / (static_cast<long>(M) * C);
  std::vector<int> oshape(phat.shape().begin(), phat.shape().end() - 1);
  Tensor<S> out = Tensor<S>::zeros(oshape);
  const S* pp = phat.data().data();
  const S* pw = protos.data().data();
  S* po = out.data().data();
  for (long b = 0; b < batch; ++b)
    for (int i = 0; i < M; ++i) {
      const S* pr = pp + (b * M + i) * C;
      const S* wr = pw + static_cast<size_t>(i) * C;
      S acc = S(0);
      for (int j = 0; j < C; ++j) acc += pr[j] * wr[j];
      po[b * M + i] = acc;
    }
  if (detail::any_requires<S>({&phat, &protos})) {
    auto pn = phat.node(), wn = protos.node();
    detail::attach(out, {pn, wn}, [pn, wn, batch, M, C](detail::Node<S>& self) {
      const S* g = self.grad.data();
      if (pn->requires_grad) {
        pn->ensure_grad();
        S* d = pn->grad.data();
        const S* pw2 = wn->value.data();
        for (long b = 0; b < batch; ++b)
          for (int i = 0; i < M; ++i) {
            const S gi = g[b * M + i];
            const S* wr = pw2 + static_cast<size_t>(i) * C;
            S* dr = d + (b * M + i) * C;
            for (int j = 0; j < C; ++j) dr[j] += gi * wr[j];
          }
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        S* d = wn->grad.data();
        const S* pp2 = pn->value.data();
        for (long b = 0; b < batch; ++b)
          for (int i = 0; i < M; ++i) {
            const S gi = g[b * M + i];
            const S* pr = pp2 + (b * M + i) * C;
            S* dr = d + static_cast<size_t>(i) * C;
            for (int j = 0; j < C; ++j) dr[j] += gi * pr[j];
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward driver

template <class S>
void backward(const Tensor<S>& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  auto root = loss.node();
  // Collect ancestors; descending id is a reverse topological order.
  std::vector<detail::Node<S>*> nodes;
  std::vector<detail::Node<S>*> stack{root.get()};
  std::unordered_set<const void*> seen;
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    nodes.push_back(n);
    for (auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const detail::Node<S>* a, const detail::Node<S>* b) { return a->id > b->id; });
  // Interior grads are scratch for this pass; only leaf grads accumulate
  // across repeated backward calls.
  for (auto* n : nodes)
    if (n->backfn && !n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), S(0));
  root->ensure_grad();
  root->grad[0] += S(1);
  for (auto* n : nodes)
    if (n->backfn && !n->grad.empty()) n->backfn(*n);
}

// ---------------------------------------------------------------------------
// Random initializers (not part of the autodiff graph)

template <class S>
Tensor<S> make_uniform(std::vector<int> shape, std::mt19937_64& rng, S lo = S(-1), S hi = S(1)) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  std::uniform_real_distribution<double> d(static_cast<double>(lo), static_cast<double>(hi));
  for (auto& v : t.data()) v = static_cast<S>(d(rng));
  return t;
}

template <class S>
Tensor<S> make_normal(std::vector<int> shape, std::mt19937_64& rng, S stddev) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  std::normal_distribution<double> d(0.0, static_cast<double>(stddev));
  for (auto& v : t.data()) v = static_cast<S>(d(rng));
  return t;
}

// Truncated normal: redraw outside two standard deviations.
template <class S>
Tensor<S> make_trunc_normal(std::vector<int> shape, std::mt19937_64& rng, S stddev) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  std::normal_distribution<double> d(0.0, static_cast<double>(stddev));
  for (auto& v : t.data()) {
    double z = d(rng);
    while (std::abs(z) > 2.0 * static_cast<double>(stddev)) z = d(rng);
    v = static_cast<S>(z);
  }
  return t;
}

}  // namespace transhp
