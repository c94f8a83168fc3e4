#pragma once

// Tape-free reverse-mode automatic differentiation over dense row-major
// tensors. Every op returns a Var holding a node that keeps its inputs alive;
// backward() walks the DAG in reverse topological order.

// Small products would otherwise take Eigen's coefficient-wise path, whose
// rounding depends on where malloc placed the buffers.
#ifndef EIGEN_GEMM_TO_COEFFBASED_THRESHOLD
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#endif
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mixlat/error.hpp"

namespace mixlat {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace ad {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace ad

template <class T>
class Var {
 public:
  using Node = ad::Node<T>;

  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Var constant(Shape shape, std::vector<T> values) {
    require(numel(shape) == values.size(), "Var: value count does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Var(std::move(n));
  }
  static Var constant(Shape shape, T fill = T(0)) {
    const auto count = numel(shape);
    return constant(std::move(shape), std::vector<T>(count, fill));
  }
  static Var scalar(T v) { return constant(Shape{}, std::vector<T>{v}); }
  static Var parameter(Shape shape, std::vector<T> values) {
    Var v = constant(std::move(shape), std::move(values));
    v.node_->requires_grad = true;
    return v;
  }
  static Var parameter(Shape shape, T fill = T(0)) {
    const auto count = numel(shape);
    return parameter(std::move(shape), std::vector<T>(count, fill));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i < 0 ? i + rank() : i)); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> value() const { return node_->value; }
  std::span<T> mutable_value() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  T item() const {
    require(size() == 1, "Var::item on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  /// Accumulated gradient; zeros if nothing reached this node.
  std::vector<T> grad() const {
    if (node_->grad.size() != node_->value.size()) return std::vector<T>(node_->value.size(), T(0));
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  /// Deep copy of the value into a fresh leaf with the same grad flag.
  Var clone() const {
    Var v = constant(shape(), node_->value);
    v.node_->requires_grad = node_->requires_grad;
    return v;
  }

 private:
  std::shared_ptr<Node> node_;
};

/// Runs reverse accumulation from a scalar root. Leaf gradients accumulate
/// across calls; interior gradients are reset on every call.
template <class T>
void backward(const Var<T>& root) {
  require(root.size() == 1, "backward: root must be a scalar, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;
  using Node = ad::Node<T>;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->inputs.size()) {
      Node* child = n->inputs[i++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order)
    if (!n->is_leaf) n->grad.assign(n->value.size(), T(0));
  root.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

namespace ad {

template <class T>
Var<T> make_op(Shape shape, std::vector<T> value, std::vector<Var<T>> inputs,
               std::function<void(Node<T>&)> bw) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->is_leaf = false;
  for (auto& in : inputs) {
    if (in.requires_grad()) n->requires_grad = true;
    n->inputs.push_back(in.node_ptr());
  }
  if (n->requires_grad) n->backward = std::move(bw);
  return Var<T>(std::move(n));
}

template <class T>
std::vector<T>* grad_of(const Var<T>& v) {
  return v.requires_grad() ? &v.node()->grad_buffer() : nullptr;
}

// Shapes broadcast when the smaller one equals a suffix of the larger one
// after dropping leading unit dimensions (scalars broadcast everywhere).
inline bool suffix_compatible(const Shape& big, const Shape& small) {
  Shape s = small;
  while (!s.empty() && s.front() == 1 && s.size() > 0) s.erase(s.begin());
  if (s.size() > big.size()) return false;
  return std::equal(s.begin(), s.end(), big.end() - static_cast<std::ptrdiff_t>(s.size()));
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const auto na = numel(a), nb = numel(b);
  if (a == b) return a;
  if (na >= nb && suffix_compatible(a, b)) return a;
  if (nb > na && suffix_compatible(b, a)) return b;
  throw ContractViolation(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

template <class T, class F, class DA, class DB>
Var<T> binary(const Var<T>& a, const Var<T>& b, const char* name, F f, DA da, DB db) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  const std::size_t n = numel(out_shape), na = a.size(), nb = b.size();
  std::vector<T> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i % na], bv[i % nb]);
  return make_op<T>(std::move(out_shape), std::move(out), {a, b}, [a, b, n, na, nb, da, db](Node<T>& o) {
    const auto& av = a.values();
    const auto& bv = b.values();
    if (auto* ga = grad_of(a))
      for (std::size_t i = 0; i < n; ++i) (*ga)[i % na] += o.grad[i] * da(av[i % na], bv[i % nb], o.value[i]);
    if (auto* gb = grad_of(b))
      for (std::size_t i = 0; i < n; ++i) (*gb)[i % nb] += o.grad[i] * db(av[i % na], bv[i % nb], o.value[i]);
  });
}

template <class T, class F, class D>
Var<T> unary(const Var<T>& a, F f, D d) {
  std::vector<T> out(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return make_op<T>(a.shape(), std::move(out), {a}, [a, d](Node<T>& o) {
    auto& ga = *grad_of(a);
    const auto& av = a.values();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * d(av[i], o.value[i]);
  });
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

}  // namespace ad

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return ad::binary<T>(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  return ad::binary<T>(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}
template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  return ad::binary<T>(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}
template <class T>
Var<T> operator-(const Var<T>& a) {
  return ad::unary<T>(a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
  return ad::unary<T>(a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}
template <class T>
Var<T> add_scalar(const Var<T>& a, T c) {
  return ad::unary<T>(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}
template <class T>
Var<T> exp(const Var<T>& a) {
  return ad::unary<T>(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}
template <class T>
Var<T> log(const Var<T>& a) {
  return ad::unary<T>(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}
template <class T>
Var<T> square(const Var<T>& a) {
  return ad::unary<T>(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}
template <class T>
Var<T> abs(const Var<T>& a) {
  return ad::unary<T>(
      a, [](T x) { return std::abs(x); }, [](T x, T) { return x > 0 ? T(1) : (x < 0 ? T(-1) : T(0)); });
}
template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return ad::unary<T>(
      a,
      [](T x) {
        if (x >= 0) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}
/// log(1 + e^x), stable for large |x|.
template <class T>
T softplus_value(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}
template <class T>
Var<T> softplus(const Var<T>& a) {
  return ad::unary<T>(
      a, [](T x) { return softplus_value(x); },
      [](T x, T) {
        if (x >= 0) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      });
}
template <class T>
Var<T> tanh(const Var<T>& a) {
  return ad::unary<T>(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}
template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return ad::unary<T>(
      a, [slope](T x) { return x > 0 ? x : slope * x; }, [slope](T x, T) { return x > 0 ? T(1) : slope; });
}
template <class T>
Var<T> elu(const Var<T>& a) {
  return ad::unary<T>(
      a, [](T x) { return x > 0 ? x : std::expm1(x); }, [](T x, T y) { return x > 0 ? T(1) : y + T(1); });
}
/// Identity on [0,1], constant outside; gradient is 1 strictly inside.
template <class T>
Var<T> clamp01(const Var<T>& a) {
  return ad::unary<T>(
      a, [](T x) { return std::clamp(x, T(0), T(1)); }, [](T x, T) { return (x > 0 && x < 1) ? T(1) : T(0); });
}
template <class T>
Var<T> clamp_min(const Var<T>& a, T lo) {
  return ad::unary<T>(
      a, [lo](T x) { return std::max(x, lo); }, [lo](T x, T) { return x >= lo ? T(1) : T(0); });
}

/// Same value, no gradient path.
template <class T>
Var<T> detach(const Var<T>& a) {
  return Var<T>::constant(a.shape(), a.values());
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  require(numel(shape) == a.size(), "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return ad::make_op<T>(std::move(shape), a.values(), {a}, [a](ad::Node<T>& o) {
    auto& ga = *ad::grad_of(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
  });
}

/// Repeats the whole tensor along a new leading block: [N,...] -> [reps*N,...].
template <class T>
Var<T> tile_rows(const Var<T>& a, int reps) {
  require(a.rank() >= 1 && reps >= 1, "tile_rows: need rank >= 1 and reps >= 1");
  Shape shape = a.shape();
  shape[0] *= reps;
  const std::size_t block = a.size();
  std::vector<T> out(block * static_cast<std::size_t>(reps));
  for (int r = 0; r < reps; ++r) std::copy(a.values().begin(), a.values().end(), out.begin() + r * block);
  return ad::make_op<T>(std::move(shape), std::move(out), {a}, [a, block](ad::Node<T>& o) {
    auto& ga = *ad::grad_of(a);
    for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i % block] += o.grad[i];
  });
}

// ----------------------------------------------------------------- reductions

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = T(0);
  for (T x : a.values()) s += x;
  return ad::make_op<T>(Shape{}, {s}, {a}, [a](ad::Node<T>& o) {
    auto& ga = *ad::grad_of(a);
    for (auto& g : ga) g += o.grad[0];
  });
}
template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

namespace ad {
inline std::pair<std::size_t, std::size_t> split_last(const Shape& s) {
  require(!s.empty(), "reduction over last axis of a scalar");
  const auto inner = static_cast<std::size_t>(s.back());
  return {numel(s) / std::max<std::size_t>(inner, 1), inner};
}
inline Shape drop_last(Shape s) {
  s.pop_back();
  return s;
}
}  // namespace ad

template <class T>
Var<T> sum_last(const Var<T>& a) {
  const auto [rows, inner] = ad::split_last(a.shape());
  std::vector<T> out(rows, T(0));
  const auto& av = a.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < inner; ++j) out[r] += av[r * inner + j];
  return ad::make_op<T>(ad::drop_last(a.shape()), std::move(out), {a}, [a, rows, inner](ad::Node<T>& o) {
    auto& ga = *ad::grad_of(a);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < inner; ++j) ga[r * inner + j] += o.grad[r];
  });
}

/// Max-shifted log-sum-exp over the last axis.
template <class T>
Var<T> logsumexp_last(const Var<T>& a) {
  const auto [rows, inner] = ad::split_last(a.shape());
  std::vector<T> out(rows);
  const auto& av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * inner;
    const T m = *std::max_element(x, x + inner);
    if (!std::isfinite(m)) {
      out[r] = m;
      continue;
    }
    T s = T(0);
    for (std::size_t j = 0; j < inner; ++j) s += std::exp(x[j] - m);
    out[r] = m + std::log(s);
  }
  return ad::make_op<T>(ad::drop_last(a.shape()), std::move(out), {a}, [a, rows, inner](ad::Node<T>& o) {
    auto& ga = *ad::grad_of(a);
    const auto& av = a.values();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < inner; ++j)
        ga[r * inner + j] += o.grad[r] * std::exp(av[r * inner + j] - o.value[r]);
  });
}

template <class T>
Var<T> log_softmax_last(const Var<T>& a) {
  const auto [rows, inner] = ad::split_last(a.shape());
  std::vector<T> out(a.size());
  const auto& av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * inner;
    const T m = *std::max_element(x, x + inner);
    T s = T(0);
    for (std::size_t j = 0; j < inner; ++j) s += std::exp(x[j] - m);
    const T lse = m + std::log(s);
    for (std::size_t j = 0; j < inner; ++j) out[r * inner + j] = x[j] - lse;
  }
  return ad::make_op<T>(a.shape(), std::move(out), {a}, [a, rows, inner](ad::Node<T>& o) {
    auto& ga = *ad::grad_of(a);
    for (std::size_t r = 0; r < rows; ++r) {
      T gs = T(0);
      for (std::size_t j = 0; j < inner; ++j) gs += o.grad[r * inner + j];
      for (std::size_t j = 0; j < inner; ++j)
        ga[r * inner + j] += o.grad[r * inner + j] - std::exp(o.value[r * inner + j]) * gs;
    }
  });
}

template <class T>
Var<T> softmax_last(const Var<T>& a) {
  const auto [rows, inner] = ad::split_last(a.shape());
  std::vector<T> out(a.size());
  const auto& av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * inner;
    const T m = *std::max_element(x, x + inner);
    T s = T(0);
    for (std::size_t j = 0; j < inner; ++j) s += (out[r * inner + j] = std::exp(x[j] - m));
    for (std::size_t j = 0; j < inner; ++j) out[r * inner + j] /= s;
  }
  return ad::make_op<T>(a.shape(), std::move(out), {a}, [a, rows, inner](ad::Node<T>& o) {
    auto& ga = *ad::grad_of(a);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = T(0);
      for (std::size_t j = 0; j < inner; ++j) dot += o.grad[r * inner + j] * o.value[r * inner + j];
      for (std::size_t j = 0; j < inner; ++j)
        ga[r * inner + j] += o.value[r * inner + j] * (o.grad[r * inner + j] - dot);
    }
  });
}

// -------------------------------------------------------------- dense layers

/// y = x W^T + b with x [N,in], W [out,in], b [out].
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require(x.rank() == 2 && w.rank() == 2 && w.dim(1) == x.dim(1),
          "linear: x " + shape_str(x.shape()) + " incompatible with W " + shape_str(w.shape()));
  require(b.size() == static_cast<std::size_t>(w.dim(0)), "linear: bias size");
  const int n = x.dim(0), in = x.dim(1), out = w.dim(0);
  std::vector<T> y(static_cast<std::size_t>(n) * out);
  ad::MapMat<T> Y(y.data(), n, out);
  ad::CMapMat<T> X(x.values().data(), n, in), W(w.values().data(), out, in);
  Y.noalias() = X * W.transpose();
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < out; ++c) Y(r, c) += b.values()[static_cast<std::size_t>(c)];
  return ad::make_op<T>(Shape{n, out}, std::move(y), {x, w, b}, [x, w, b, n, in, out](ad::Node<T>& o) {
    ad::CMapMat<T> G(o.grad.data(), n, out);
    if (auto* gx = ad::grad_of(x)) {
      ad::MapMat<T> GX(gx->data(), n, in);
      GX.noalias() += G * ad::CMapMat<T>(w.values().data(), out, in);
    }
    if (auto* gw = ad::grad_of(w)) {
      ad::MapMat<T> GW(gw->data(), out, in);
      GW.noalias() += G.transpose() * ad::CMapMat<T>(x.values().data(), n, in);
    }
    if (auto* gb = ad::grad_of(b))
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < out; ++c) (*gb)[static_cast<std::size_t>(c)] += G(r, c);
  });
}

namespace ad {

struct ConvGeom {
  int n, c, h, w, k, stride, pad, ho, wo;
};

// cols is [C*k*k, N*Ho*Wo] row-major.
template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;
  const std::size_t width = static_cast<std::size_t>(g.n) * plane;
  for (int ch = 0; ch < g.c; ++ch)
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj) {
        T* row = cols + (static_cast<std::size_t>(ch * g.k + ki) * g.k + kj) * width;
        for (int b = 0; b < g.n; ++b) {
          const T* img = x + (static_cast<std::size_t>(b) * g.c + ch) * g.h * g.w;
          T* dst = row + b * plane;
          for (int oi = 0; oi < g.ho; ++oi) {
            const int ii = oi * g.stride - g.pad + ki;
            for (int oj = 0; oj < g.wo; ++oj) {
              const int jj = oj * g.stride - g.pad + kj;
              dst[oi * g.wo + oj] = (ii >= 0 && ii < g.h && jj >= 0 && jj < g.w) ? img[ii * g.w + jj] : T(0);
            }
          }
        }
      }
}

template <class T>
void col2im(const T* cols, const ConvGeom& g, T* x) {
  const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;
  const std::size_t width = static_cast<std::size_t>(g.n) * plane;
  for (int ch = 0; ch < g.c; ++ch)
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj) {
        const T* row = cols + (static_cast<std::size_t>(ch * g.k + ki) * g.k + kj) * width;
        for (int b = 0; b < g.n; ++b) {
          T* img = x + (static_cast<std::size_t>(b) * g.c + ch) * g.h * g.w;
          const T* src = row + b * plane;
          for (int oi = 0; oi < g.ho; ++oi) {
            const int ii = oi * g.stride - g.pad + ki;
            if (ii < 0 || ii >= g.h) continue;
            for (int oj = 0; oj < g.wo; ++oj) {
              const int jj = oj * g.stride - g.pad + kj;
              if (jj >= 0 && jj < g.w) img[ii * g.w + jj] += src[oi * g.wo + oj];
            }
          }
        }
      }
}

// [N, C, P] <-> [C, N*P]
template <class T>
void nchw_to_cn(const T* src, int n, int c, std::size_t plane, T* dst) {
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      std::copy_n(src + (static_cast<std::size_t>(b) * c + ch) * plane, plane,
                  dst + static_cast<std::size_t>(ch) * n * plane + b * plane);
}
template <class T>
void cn_to_nchw(const T* src, int n, int c, std::size_t plane, T* dst) {
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      std::copy_n(src + static_cast<std::size_t>(ch) * n * plane + b * plane, plane,
                  dst + (static_cast<std::size_t>(b) * c + ch) * plane);
}

}  // namespace ad

/// 2-D convolution. x [N,C,H,W], w [O,C,k,k], b [O] -> [N,O,Ho,Wo].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  require(x.rank() == 4 && w.rank() == 4 && w.dim(1) == x.dim(1) && w.dim(2) == w.dim(3),
          "conv2d: x " + shape_str(x.shape()) + " vs w " + shape_str(w.shape()));
  const int k = w.dim(2), out_ch = w.dim(0);
  require(b.size() == static_cast<std::size_t>(out_ch), "conv2d: bias size");
  ad::ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k, stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - k) / stride + 1;
  g.wo = (g.w + 2 * pad - k) / stride + 1;
  require(g.ho > 0 && g.wo > 0, "conv2d: empty output");
  const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;
  const int rows = g.c * k * k;
  const auto cols_n = static_cast<int>(g.n * plane);
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows) * cols_n);
  ad::im2col(x.values().data(), g, cols->data());
  std::vector<T> cn(static_cast<std::size_t>(out_ch) * cols_n);
  ad::MapMat<T>(cn.data(), out_ch, cols_n).noalias() =
      ad::CMapMat<T>(w.values().data(), out_ch, rows) * ad::CMapMat<T>(cols->data(), rows, cols_n);
  std::vector<T> y(cn.size());
  ad::cn_to_nchw(cn.data(), g.n, out_ch, plane, y.data());
  for (int bb = 0; bb < g.n; ++bb)
    for (int o = 0; o < out_ch; ++o) {
      T* p = y.data() + (static_cast<std::size_t>(bb) * out_ch + o) * plane;
      const T bias = b.values()[static_cast<std::size_t>(o)];
      for (std::size_t i = 0; i < plane; ++i) p[i] += bias;
    }
  return ad::make_op<T>(
      Shape{g.n, out_ch, g.ho, g.wo}, std::move(y), {x, w, b},
      [x, w, b, g, cols, rows, cols_n, out_ch, plane](ad::Node<T>& o) {
        std::vector<T> gcn(static_cast<std::size_t>(out_ch) * cols_n);
        ad::nchw_to_cn(o.grad.data(), g.n, out_ch, plane, gcn.data());
        ad::CMapMat<T> G(gcn.data(), out_ch, cols_n);
        if (auto* gw = ad::grad_of(w))
          ad::MapMat<T>(gw->data(), out_ch, rows).noalias() +=
              G * ad::CMapMat<T>(cols->data(), rows, cols_n).transpose();
        if (auto* gb = ad::grad_of(b))
          for (int oc = 0; oc < out_ch; ++oc) {
            T acc = 0;
            for (int c = 0; c < cols_n; ++c) acc += G(oc, c);
            (*gb)[static_cast<std::size_t>(oc)] += acc;
          }
        if (auto* gx = ad::grad_of(x)) {
          std::vector<T> gcols(static_cast<std::size_t>(rows) * cols_n);
          ad::MapMat<T>(gcols.data(), rows, cols_n).noalias() =
              ad::CMapMat<T>(w.values().data(), out_ch, rows).transpose() * G;
          ad::col2im(gcols.data(), g, gx->data());
        }
      });
}

/// Transposed 2-D convolution (adjoint of conv2d in x).
/// x [N,C,H,W], w [C,O,k,k], b [O] -> [N,O,(H-1)s-2p+k, ...].
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  require(x.rank() == 4 && w.rank() == 4 && w.dim(0) == x.dim(1) && w.dim(2) == w.dim(3),
          "conv_transpose2d: x " + shape_str(x.shape()) + " vs w " + shape_str(w.shape()));
  const int n = x.dim(0), in_ch = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int out_ch = w.dim(1), k = w.dim(2);
  require(b.size() == static_cast<std::size_t>(out_ch), "conv_transpose2d: bias size");
  const int ho = (h - 1) * stride - 2 * pad + k, wo = (wd - 1) * stride - 2 * pad + k;
  require(ho > 0 && wo > 0, "conv_transpose2d: empty output");
  // Geometry of the forward conv that maps the output back onto x.
  const ad::ConvGeom g{n, out_ch, ho, wo, k, stride, pad, h, wd};
  const std::size_t in_plane = static_cast<std::size_t>(h) * wd;
  const int rows = out_ch * k * k;
  const auto cols_n = static_cast<int>(n * in_plane);
  auto xc = std::make_shared<std::vector<T>>(static_cast<std::size_t>(in_ch) * cols_n);
  ad::nchw_to_cn(x.values().data(), n, in_ch, in_plane, xc->data());
  std::vector<T> cols(static_cast<std::size_t>(rows) * cols_n);
  ad::MapMat<T>(cols.data(), rows, cols_n).noalias() =
      ad::CMapMat<T>(w.values().data(), in_ch, rows).transpose() * ad::CMapMat<T>(xc->data(), in_ch, cols_n);
  std::vector<T> y(static_cast<std::size_t>(n) * out_ch * ho * wo, T(0));
  ad::col2im(cols.data(), g, y.data());
  const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;
  for (int bb = 0; bb < n; ++bb)
    for (int o = 0; o < out_ch; ++o) {
      T* p = y.data() + (static_cast<std::size_t>(bb) * out_ch + o) * out_plane;
      const T bias = b.values()[static_cast<std::size_t>(o)];
      for (std::size_t i = 0; i < out_plane; ++i) p[i] += bias;
    }
  return ad::make_op<T>(
      Shape{n, out_ch, ho, wo}, std::move(y), {x, w, b},
      [x, w, b, g, xc, rows, cols_n, in_ch, out_ch, in_plane, out_plane](ad::Node<T>& o) {
        std::vector<T> gcols(static_cast<std::size_t>(rows) * cols_n);
        ad::im2col(o.grad.data(), g, gcols.data());
        ad::CMapMat<T> GC(gcols.data(), rows, cols_n);
        if (auto* gw = ad::grad_of(w))
          ad::MapMat<T>(gw->data(), in_ch, rows).noalias() +=
              ad::CMapMat<T>(xc->data(), in_ch, cols_n) * GC.transpose();
        if (auto* gb = ad::grad_of(b))
          for (int bb = 0; bb < g.n; ++bb)
            for (int oc = 0; oc < out_ch; ++oc) {
              const T* p = o.grad.data() + (static_cast<std::size_t>(bb) * out_ch + oc) * out_plane;
              T s = T(0);
              for (std::size_t i = 0; i < out_plane; ++i) s += p[i];
              (*gb)[static_cast<std::size_t>(oc)] += s;
            }
        if (auto* gx = ad::grad_of(x)) {
          std::vector<T> gxc(static_cast<std::size_t>(in_ch) * cols_n);
          ad::MapMat<T>(gxc.data(), in_ch, cols_n).noalias() = ad::CMapMat<T>(w.values().data(), in_ch, rows) * GC;
          std::vector<T> tmp(gx->size());
          ad::cn_to_nchw(gxc.data(), g.n, in_ch, in_plane, tmp.data());
          for (std::size_t i = 0; i < tmp.size(); ++i) (*gx)[i] += tmp[i];
        }
      });
}

// ------------------------------------------------------- mixture primitives

/// Convex combination of component vectors: w [N,K], comps [N,K,d] -> [N,d].
template <class T>
Var<T> mix(const Var<T>& w, const Var<T>& comps) {
  require(w.rank() == 2 && comps.rank() == 3 && comps.dim(0) == w.dim(0) && comps.dim(1) == w.dim(1),
          "mix: weights " + shape_str(w.shape()) + " vs components " + shape_str(comps.shape()));
  const int n = comps.dim(0), kk = comps.dim(1), d = comps.dim(2);
  std::vector<T> out(static_cast<std::size_t>(n) * d, T(0));
  const auto& wv = w.values();
  const auto& cv = comps.values();
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < kk; ++c) {
      const T wt = wv[static_cast<std::size_t>(r * kk + c)];
      const T* src = cv.data() + (static_cast<std::size_t>(r) * kk + c) * d;
      for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(r) * d + j] += wt * src[j];
    }
  return ad::make_op<T>(Shape{n, d}, std::move(out), {w, comps}, [w, comps, n, kk, d](ad::Node<T>& o) {
    const auto& wv = w.values();
    const auto& cv = comps.values();
    auto* gw = ad::grad_of(w);
    auto* gc = ad::grad_of(comps);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < kk; ++c) {
        const std::size_t base = (static_cast<std::size_t>(r) * kk + c) * d;
        const T* g = o.grad.data() + static_cast<std::size_t>(r) * d;
        if (gw) {
          T s = T(0);
          for (int j = 0; j < d; ++j) s += g[j] * cv[base + j];
          (*gw)[static_cast<std::size_t>(r * kk + c)] += s;
        }
        if (gc) {
          const T wt = wv[static_cast<std::size_t>(r * kk + c)];
          for (int j = 0; j < d; ++j) (*gc)[base + j] += wt * g[j];
        }
      }
  });
}

/// Lower bound on exp(log_var) everywhere in the mixture math.
template <class T>
constexpr T kLogVarFloor = T(-18.420680743952367);  // log(1e-8)

/// Per-component diagonal Gaussian log-density.
/// z [N,d]; mu, log_var each [N,K,d] or [K,d] (shared across rows) -> [N,K].
template <class T>
Var<T> gaussian_log_pdf(const Var<T>& z, const Var<T>& mu, const Var<T>& log_var) {
  require(z.rank() == 2, "gaussian_log_pdf: z must be [N,d], got " + shape_str(z.shape()));
  const int n = z.dim(0), d = z.dim(1);
  require(mu.rank() >= 2 && mu.dim(-1) == d, "gaussian_log_pdf: mean dim mismatch " + shape_str(mu.shape()));
  const int kk = mu.dim(-2);
  const std::size_t full = static_cast<std::size_t>(n) * kk * d, per = static_cast<std::size_t>(kk) * d;
  require(mu.size() == full || mu.size() == per, "gaussian_log_pdf: mean shape " + shape_str(mu.shape()));
  require(log_var.size() == full || log_var.size() == per,
          "gaussian_log_pdf: log_var shape " + shape_str(log_var.shape()));
  const std::size_t nm = mu.size(), nl = log_var.size();
  constexpr T half_log_2pi = T(0.91893853320467274178);
  std::vector<T> out(static_cast<std::size_t>(n) * kk);
  const auto &zv = z.values(), &mv = mu.values(), &lv = log_var.values();
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < kk; ++c) {
      T acc = T(0);
      for (int j = 0; j < d; ++j) {
        const std::size_t idx = (static_cast<std::size_t>(r) * kk + c) * d + j;
        const T l = std::max(lv[idx % nl], kLogVarFloor<T>);
        const T diff = zv[static_cast<std::size_t>(r) * d + j] - mv[idx % nm];
        acc += half_log_2pi + T(0.5) * l + T(0.5) * diff * diff * std::exp(-l);
      }
      out[static_cast<std::size_t>(r) * kk + c] = -acc;
    }
  return ad::make_op<T>(Shape{n, kk}, std::move(out), {z, mu, log_var},
                        [z, mu, log_var, n, kk, d, nm, nl](ad::Node<T>& o) {
                          const auto &zv = z.values(), &mv = mu.values(), &lv = log_var.values();
                          auto* gz = ad::grad_of(z);
                          auto* gm = ad::grad_of(mu);
                          auto* gl = ad::grad_of(log_var);
                          for (int r = 0; r < n; ++r)
                            for (int c = 0; c < kk; ++c) {
                              const T g = o.grad[static_cast<std::size_t>(r) * kk + c];
                              for (int j = 0; j < d; ++j) {
                                const std::size_t idx = (static_cast<std::size_t>(r) * kk + c) * d + j;
                                const T raw = lv[idx % nl];
                                const T l = std::max(raw, kLogVarFloor<T>);
                                const T inv = std::exp(-l);
                                const T diff = zv[static_cast<std::size_t>(r) * d + j] - mv[idx % nm];
                                if (gz) (*gz)[static_cast<std::size_t>(r) * d + j] -= g * diff * inv;
                                if (gm) (*gm)[idx % nm] += g * diff * inv;
                                if (gl && raw >= kLogVarFloor<T>)
                                  (*gl)[idx % nl] += g * T(-0.5) * (T(1) - diff * diff * inv);
                              }
                            }
                        });
}

/// Closed-form KL(N(mu_q, e^lv_q) || N(mu_p, e^lv_p)) summed over the last
/// axis. Operands broadcast by suffix tiling; output drops the last axis of
/// the largest operand.
template <class T>
Var<T> gaussian_kl(const Var<T>& mu_q, const Var<T>& lv_q, const Var<T>& mu_p, const Var<T>& lv_p) {
  const Var<T>* ops[4] = {&mu_q, &lv_q, &mu_p, &lv_p};
  const Var<T>* big = ops[0];
  for (auto* v : ops)
    if (v->size() > big->size()) big = v;
  const Shape full = big->shape();
  const std::size_t total = numel(full);
  for (auto* v : ops)
    require(v->rank() >= 1 && total % v->size() == 0 && ad::suffix_compatible(full, v->shape()),
            "gaussian_kl: shape " + shape_str(v->shape()) + " incompatible with " + shape_str(full));
  const auto d = static_cast<std::size_t>(full.back());
  const std::size_t rows = total / d;
  const std::size_t n0 = mu_q.size(), n1 = lv_q.size(), n2 = mu_p.size(), n3 = lv_p.size();
  std::vector<T> out(rows, T(0));
  const auto &a = mu_q.values(), &b = lv_q.values(), &c = mu_p.values(), &e = lv_p.values();
  for (std::size_t i = 0; i < total; ++i) {
    const T lq = std::max(b[i % n1], kLogVarFloor<T>), lp = std::max(e[i % n3], kLogVarFloor<T>);
    const T diff = a[i % n0] - c[i % n2];
    out[i / d] += T(0.5) * (lp - lq + (std::exp(lq) + diff * diff) * std::exp(-lp) - T(1));
  }
  return ad::make_op<T>(ad::drop_last(full), std::move(out), {mu_q, lv_q, mu_p, lv_p},
                        [mu_q, lv_q, mu_p, lv_p, total, d, n0, n1, n2, n3](ad::Node<T>& o) {
                          const auto &a = mu_q.values(), &b = lv_q.values(), &c = mu_p.values(),
                                     &e = lv_p.values();
                          auto* g0 = ad::grad_of(mu_q);
                          auto* g1 = ad::grad_of(lv_q);
                          auto* g2 = ad::grad_of(mu_p);
                          auto* g3 = ad::grad_of(lv_p);
                          for (std::size_t i = 0; i < total; ++i) {
                            const T g = o.grad[i / d];
                            const T rq = b[i % n1], rp = e[i % n3];
                            const T lq = std::max(rq, kLogVarFloor<T>), lp = std::max(rp, kLogVarFloor<T>);
                            const T inv_p = std::exp(-lp);
                            const T diff = a[i % n0] - c[i % n2];
                            if (g0) (*g0)[i % n0] += g * diff * inv_p;
                            if (g2) (*g2)[i % n2] -= g * diff * inv_p;
                            if (g1 && rq >= kLogVarFloor<T>) (*g1)[i % n1] += g * T(0.5) * (std::exp(lq) * inv_p - T(1));
                            if (g3 && rp >= kLogVarFloor<T>)
                              (*g3)[i % n3] += g * T(0.5) * (T(1) - (std::exp(lq) + diff * diff) * inv_p);
                          }
                        });
}

// ------------------------------------------------------------------- helpers

template <class T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

template <class T>
std::vector<T> to_vector(const Var<T>& v) {
  return v.values();
}

}  // namespace mixlat
