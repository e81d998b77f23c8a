#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ilm/common.hpp"

namespace ilm {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

class Graph;

namespace detail {
struct TensorNode {
  Shape shape;
  std::vector<real> value;
  std::vector<real> grad;  // allocated iff tracked
  bool tracked = false;
  const Graph* producer = nullptr;
};
}  // namespace detail

/// Dense n-dimensional array, value-semantics handle to shared storage.
/// Gradients accumulate into `grad` when the tensor participates in an
/// active Graph (parameters always do).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.n_ = std::make_shared<detail::TensorNode>();
    t.n_->shape = std::move(shape);
    t.n_->value.assign(shape_numel(t.n_->shape), real(0));
    return t;
  }

  static Tensor full(Shape shape, real v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.n_->value.begin(), t.n_->value.end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<real> data) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("Tensor::from: shape " + shape_str(shape) +
                       " does not match data length " + std::to_string(data.size()));
    Tensor t;
    t.n_ = std::make_shared<detail::TensorNode>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(data);
    return t;
  }

  static Tensor scalar(real v) { return from({1}, {v}); }

  /// Leaf parameter: gradient buffer always present.
  static Tensor param(Shape shape) {
    Tensor t = zeros(std::move(shape));
    t.n_->tracked = true;
    t.n_->grad.assign(t.numel(), real(0));
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  int64_t dim(int i) const { return n_->shape[i]; }
  int64_t numel() const { return static_cast<int64_t>(n_->value.size()); }

  std::vector<real>& value() { return n_->value; }
  const std::vector<real>& value() const { return n_->value; }
  std::vector<real>& grad() {
    if (!n_->tracked) throw ValueError("Tensor::grad: tensor is not tracked");
    return n_->grad;
  }
  const std::vector<real>& grad() const {
    if (!n_->tracked) throw ValueError("Tensor::grad: tensor is not tracked");
    return n_->grad;
  }

  bool tracked() const { return n_->tracked; }

  real item() const {
    if (numel() != 1) throw ShapeError("Tensor::item: tensor is not scalar");
    return n_->value[0];
  }

  /// Value copy detached from any graph.
  Tensor detach() const { return from(n_->shape, n_->value); }

  void zero_grad() {
    if (n_->tracked) std::fill(n_->grad.begin(), n_->grad.end(), real(0));
  }

  bool same_node(const Tensor& o) const { return n_ == o.n_; }

  detail::TensorNode* node() const { return n_.get(); }

 private:
  friend class Graph;
  std::shared_ptr<detail::TensorNode> n_;
};

using ParamMap = std::vector<std::pair<std::string, Tensor>>;

/// Reverse-mode tape. Ops executed while a Graph is installed append
/// records in construction order; backward() replays them in reverse,
/// visiting each exactly once.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Installs a graph as the active tape for the current thread.
  class Scope {
   public:
    explicit Scope(Graph& g) : prev_(current_ref()) { current_ref() = &g; }
    ~Scope() { current_ref() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Graph* prev_;
  };

  /// Temporarily disables recording (evaluation passes inside training).
  class NoGrad {
   public:
    NoGrad() : prev_(current_ref()) { current_ref() = nullptr; }
    ~NoGrad() { current_ref() = prev_; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

   private:
    Graph* prev_;
  };

  static Graph* current() { return current_ref(); }

  void record(Tensor out, std::function<void()> backward) {
    out.n_->tracked = true;
    out.n_->grad.assign(out.numel(), real(0));
    out.n_->producer = this;
    records_.push_back(std::move(backward));
  }

  void backward(const Tensor& loss) {
    if (consumed_)
      throw Error("Graph::backward: graph already consumed; run a new forward pass");
    if (loss.numel() != 1)
      throw ValueError("Graph::backward: loss must be scalar, got shape " +
                       shape_str(loss.shape()));
    if (!loss.tracked() || loss.node()->producer != this)
      throw ValueError("Graph::backward: loss is not a product of the active graph");
    loss.n_->grad[0] = real(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    consumed_ = true;
  }

  void reset() {
    records_.clear();
    consumed_ = false;
  }

  size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

 private:
  static Graph*& current_ref() {
    thread_local Graph* g = nullptr;
    return g;
  }

  std::vector<std::function<void()>> records_;
  bool consumed_ = false;
};

namespace detail {

using Mat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<Mat>;
using CMapM = Eigen::Map<const Mat>;

inline bool want_grad(std::initializer_list<const Tensor*> inputs) {
  if (Graph::current() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->tracked()) return true;
  return false;
}

inline void add_into(std::vector<real>& dst, const std::vector<real>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

[[noreturn]] inline void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra kernels
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    detail::shape_fail("add", "operand shapes differ: " + shape_str(a.shape()) +
                                  " vs " + shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i)
    out.value()[i] = a.value()[i] + b.value()[i];
  if (detail::want_grad({&a, &b})) {
    Graph::current()->record(out, [a = a, b = b, out = out]() mutable {
      if (a.tracked()) detail::add_into(a.grad(), out.grad());
      if (b.tracked()) detail::add_into(b.grad(), out.grad());
    });
  }
  return out;
}

/// [N,D] + [D], bias broadcast over rows.
inline Tensor add_bias(const Tensor& m, const Tensor& bias) {
  if (m.ndim() != 2 || bias.ndim() != 1 || m.dim(1) != bias.dim(0))
    detail::shape_fail("add_bias", "expected [N,D]+[D], got " +
                                       shape_str(m.shape()) + " + " +
                                       shape_str(bias.shape()));
  const int64_t n = m.dim(0), d = m.dim(1);
  Tensor out = Tensor::zeros(m.shape());
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < d; ++c)
      out.value()[r * d + c] = m.value()[r * d + c] + bias.value()[c];
  if (detail::want_grad({&m, &bias})) {
    Graph::current()->record(out, [m = m, bias = bias, out = out, n, d]() mutable {
      if (m.tracked()) detail::add_into(m.grad(), out.grad());
      if (bias.tracked()) {
        for (int64_t r = 0; r < n; ++r)
          for (int64_t c = 0; c < d; ++c) bias.grad()[c] += out.grad()[r * d + c];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    detail::shape_fail("mul", "operand shapes differ: " + shape_str(a.shape()) +
                                  " vs " + shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i)
    out.value()[i] = a.value()[i] * b.value()[i];
  if (detail::want_grad({&a, &b})) {
    Graph::current()->record(out, [a = a, b = b, out = out]() mutable {
      if (a.tracked())
        for (int64_t i = 0; i < a.numel(); ++i)
          a.grad()[i] += out.grad()[i] * b.value()[i];
      if (b.tracked())
        for (int64_t i = 0; i < b.numel(); ++i)
          b.grad()[i] += out.grad()[i] * a.value()[i];
    });
  }
  return out;
}

/// scale*x + shift, elementwise with constants.
inline Tensor affine(const Tensor& x, real scale, real shift) {
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i)
    out.value()[i] = scale * x.value()[i] + shift;
  if (detail::want_grad({&x})) {
    Graph::current()->record(out, [x = x, out = out, scale]() mutable {
      if (x.tracked())
        for (int64_t i = 0; i < x.numel(); ++i)
          x.grad()[i] += scale * out.grad()[i];
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, affine(b, real(-1), real(0))); }

/// [N,K] x [K,M] -> [N,M].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    detail::shape_fail("matmul", "expected [N,K]x[K,M], got " +
                                     shape_str(a.shape()) + " x " +
                                     shape_str(b.shape()));
  const int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor out = Tensor::zeros({n, m});
  {
    detail::CMapM A(a.value().data(), n, k), B(b.value().data(), k, m);
    detail::MapM O(out.value().data(), n, m);
    O.noalias() = A * B;
  }
  if (detail::want_grad({&a, &b})) {
    Graph::current()->record(out, [a = a, b = b, out = out, n, k, m = m]() mutable {
      detail::CMapM A(a.value().data(), n, k), B(b.value().data(), k, m);
      detail::CMapM dO(out.grad().data(), n, m);
      if (a.tracked()) {
        detail::MapM dA(a.grad().data(), n, k);
        dA.noalias() += dO * B.transpose();
      }
      if (b.tracked()) {
        detail::MapM dB(b.grad().data(), k, m);
        dB.noalias() += A.transpose() * dO;
      }
    });
  }
  return out;
}

/// Row lookup: table [V,E], ids -> [n,E].
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  if (table.ndim() != 2)
    detail::shape_fail("embedding", "table must be [V,E], got " + shape_str(table.shape()));
  const int64_t v = table.dim(0), e = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw IndexError("embedding: token id " + std::to_string(id) +
                       " out of range [0," + std::to_string(v) + ")");
  const int64_t n = static_cast<int64_t>(ids.size());
  Tensor out = Tensor::zeros({n, e});
  for (int64_t i = 0; i < n; ++i)
    std::copy_n(table.value().data() + ids[i] * e, e, out.value().data() + i * e);
  if (detail::want_grad({&table})) {
    Graph::current()->record(out, [table = table, out = out, ids, e]() mutable {
      for (size_t i = 0; i < ids.size(); ++i) {
        real* dst = table.grad().data() + static_cast<int64_t>(ids[i]) * e;
        const real* src = out.grad().data() + static_cast<int64_t>(i) * e;
        for (int64_t j = 0; j < e; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i)
    out.value()[i] = real(1) / (real(1) + std::exp(-x.value()[i]));
  if (detail::want_grad({&x})) {
    Graph::current()->record(out, [x = x, out = out]() mutable {
      if (!x.tracked()) return;
      for (int64_t i = 0; i < x.numel(); ++i) {
        const real y = out.value()[i];
        x.grad()[i] += out.grad()[i] * y * (real(1) - y);
      }
    });
  }
  return out;
}

inline Tensor tanh(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out.value()[i] = std::tanh(x.value()[i]);
  if (detail::want_grad({&x})) {
    Graph::current()->record(out, [x = x, out = out]() mutable {
      if (!x.tracked()) return;
      for (int64_t i = 0; i < x.numel(); ++i) {
        const real y = out.value()[i];
        x.grad()[i] += out.grad()[i] * (real(1) - y * y);
      }
    });
  }
  return out;
}

inline Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i)
    out.value()[i] = x.value()[i] > real(0) ? x.value()[i] : real(0);
  if (detail::want_grad({&x})) {
    Graph::current()->record(out, [x = x, out = out]() mutable {
      if (!x.tracked()) return;
      for (int64_t i = 0; i < x.numel(); ++i)
        if (x.value()[i] > real(0)) x.grad()[i] += out.grad()[i];
    });
  }
  return out;
}

namespace detail {
inline void rows_of(const Tensor& t, const char* op, int64_t& rows, int64_t& cols) {
  if (t.ndim() == 1) {
    rows = 1;
    cols = t.dim(0);
  } else if (t.ndim() == 2) {
    rows = t.dim(0);
    cols = t.dim(1);
  } else {
    shape_fail(op, "expected 1-D or 2-D input, got " + shape_str(t.shape()));
  }
}
}  // namespace detail

/// Row-wise softmax over the last axis (1-D treated as a single row).
inline Tensor softmax(const Tensor& x) {
  int64_t n, c;
  detail::rows_of(x, "softmax", n, c);
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t r = 0; r < n; ++r) {
    const real* xi = x.value().data() + r * c;
    real* yi = out.value().data() + r * c;
    real mx = xi[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
    real sum = 0;
    for (int64_t j = 0; j < c; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    for (int64_t j = 0; j < c; ++j) yi[j] /= sum;
  }
  if (detail::want_grad({&x})) {
    Graph::current()->record(out, [x = x, out = out, n, c]() mutable {
      if (!x.tracked()) return;
      for (int64_t r = 0; r < n; ++r) {
        const real* y = out.value().data() + r * c;
        const real* dy = out.grad().data() + r * c;
        real dot = 0;
        for (int64_t j = 0; j < c; ++j) dot += dy[j] * y[j];
        real* dx = x.grad().data() + r * c;
        for (int64_t j = 0; j < c; ++j) dx[j] += y[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

inline Tensor log_softmax(const Tensor& x) {
  int64_t n, c;
  detail::rows_of(x, "log_softmax", n, c);
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t r = 0; r < n; ++r) {
    const real* xi = x.value().data() + r * c;
    real* yi = out.value().data() + r * c;
    real mx = xi[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
    real sum = 0;
    for (int64_t j = 0; j < c; ++j) sum += std::exp(xi[j] - mx);
    const real lse = mx + std::log(sum);
    for (int64_t j = 0; j < c; ++j) yi[j] = xi[j] - lse;
  }
  if (detail::want_grad({&x})) {
    Graph::current()->record(out, [x = x, out = out, n, c]() mutable {
      if (!x.tracked()) return;
      for (int64_t r = 0; r < n; ++r) {
        const real* y = out.value().data() + r * c;
        const real* dy = out.grad().data() + r * c;
        real total = 0;
        for (int64_t j = 0; j < c; ++j) total += dy[j];
        real* dx = x.grad().data() + r * c;
        for (int64_t j = 0; j < c; ++j) dx[j] += dy[j] - std::exp(y[j]) * total;
      }
    });
  }
  return out;
}

/// out[i] = x[i, ids[i]].
inline Tensor pick(const Tensor& x, const std::vector<int>& ids) {
  if (x.ndim() != 2)
    detail::shape_fail("pick", "expected [N,C] input, got " + shape_str(x.shape()));
  const int64_t n = x.dim(0), c = x.dim(1);
  if (static_cast<int64_t>(ids.size()) != n)
    detail::shape_fail("pick", "got " + std::to_string(ids.size()) + " ids for " +
                                   std::to_string(n) + " rows");
  for (int id : ids)
    if (id < 0 || id >= c)
      throw IndexError("pick: index " + std::to_string(id) + " out of range [0," +
                       std::to_string(c) + ")");
  Tensor out = Tensor::zeros({n});
  for (int64_t i = 0; i < n; ++i) out.value()[i] = x.value()[i * c + ids[i]];
  if (detail::want_grad({&x})) {
    Graph::current()->record(out, [x = x, out = out, ids, c]() mutable {
      if (!x.tracked()) return;
      for (size_t i = 0; i < ids.size(); ++i)
        x.grad()[static_cast<int64_t>(i) * c + ids[i]] += out.grad()[i];
    });
  }
  return out;
}

inline Tensor sum(const Tensor& x) {
  Tensor out = Tensor::scalar(std::accumulate(x.value().begin(), x.value().end(), real(0)));
  if (detail::want_grad({&x})) {
    Graph::current()->record(out, [x = x, out = out]() mutable {
      if (!x.tracked()) return;
      const real g = out.grad()[0];
      for (int64_t i = 0; i < x.numel(); ++i) x.grad()[i] += g;
    });
  }
  return out;
}

inline Tensor mean(const Tensor& x) {
  const real inv = real(1) / static_cast<real>(x.numel());
  Tensor out = Tensor::scalar(
      std::accumulate(x.value().begin(), x.value().end(), real(0)) * inv);
  if (detail::want_grad({&x})) {
    Graph::current()->record(out, [x = x, out = out, inv]() mutable {
      if (!x.tracked()) return;
      const real g = out.grad()[0] * inv;
      for (int64_t i = 0; i < x.numel(); ++i) x.grad()[i] += g;
    });
  }
  return out;
}

/// Stack equal-width pieces along axis 0. 1-D inputs of width D become the
/// rows of an [n,D] output; [Ni,D] inputs concatenate to [sum Ni, D].
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ValueError("concat_rows: no inputs");
  int64_t width = parts[0].ndim() == 1 ? parts[0].dim(0) : parts[0].dim(1);
  int64_t rows = 0;
  for (const Tensor& p : parts) {
    int64_t r, c;
    detail::rows_of(p, "concat_rows", r, c);
    if (c != width)
      detail::shape_fail("concat_rows", "piece width " + std::to_string(c) +
                                            " != " + std::to_string(width));
    rows += r;
  }
  Tensor out = Tensor::zeros({rows, width});
  int64_t at = 0;
  for (const Tensor& p : parts) {
    std::copy(p.value().begin(), p.value().end(), out.value().begin() + at);
    at += p.numel();
  }
  bool any = false;
  for (const Tensor& p : parts) any = any || p.tracked();
  if (Graph::current() != nullptr && any) {
    Graph::current()->record(out, [parts = parts, out = out]() mutable {
      int64_t at = 0;
      for (Tensor& p : parts) {
        if (p.tracked())
          for (int64_t i = 0; i < p.numel(); ++i) p.grad()[i] += out.grad()[at + i];
        at += p.numel();
      }
    });
  }
  return out;
}

/// Column slice [c0, c1) of an [N,C] matrix.
inline Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1) {
  if (x.ndim() != 2)
    detail::shape_fail("slice_cols", "expected [N,C] input, got " + shape_str(x.shape()));
  const int64_t n = x.dim(0), c = x.dim(1);
  if (c0 < 0 || c1 > c || c0 >= c1)
    detail::shape_fail("slice_cols", "column range " + std::to_string(c0) + ".." +
                                         std::to_string(c1) + " invalid for " +
                                         std::to_string(c) + " columns");
  const int64_t w = c1 - c0;
  Tensor out = Tensor::zeros({n, w});
  for (int64_t r = 0; r < n; ++r)
    std::copy_n(x.value().data() + r * c + c0, w, out.value().data() + r * w);
  if (detail::want_grad({&x})) {
    Graph::current()->record(out, [x = x, out = out, n, c, c0, w]() mutable {
      if (!x.tracked()) return;
      for (int64_t r = 0; r < n; ++r)
        for (int64_t j = 0; j < w; ++j)
          x.grad()[r * c + c0 + j] += out.grad()[r * w + j];
    });
  }
  return out;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    detail::shape_fail("reshape", "cannot view " + shape_str(x.shape()) + " as " +
                                      shape_str(shape));
  Tensor out = Tensor::from(std::move(shape), x.value());
  if (detail::want_grad({&x})) {
    Graph::current()->record(out, [x = x, out = out]() mutable {
      if (x.tracked()) detail::add_into(x.grad(), out.grad());
    });
  }
  return out;
}

/// Mean squared error, scalar.
inline Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    detail::shape_fail("mse", "operand shapes differ: " + shape_str(a.shape()) +
                                  " vs " + shape_str(b.shape()));
  const real inv = real(1) / static_cast<real>(a.numel());
  real acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const real d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  Tensor out = Tensor::scalar(acc * inv);
  if (detail::want_grad({&a, &b})) {
    Graph::current()->record(out, [a = a, b = b, out = out, inv]() mutable {
      const real g = out.grad()[0] * real(2) * inv;
      for (int64_t i = 0; i < a.numel(); ++i) {
        const real d = a.value()[i] - b.value()[i];
        if (a.tracked()) a.grad()[i] += g * d;
        if (b.tracked()) b.grad()[i] -= g * d;
      }
    });
  }
  return out;
}

/// Mean negative log-likelihood of integer targets under row softmax.
/// Gradient w.r.t. logits is (softmax - onehot) / N.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  int64_t n, c;
  detail::rows_of(logits, "cross_entropy", n, c);
  if (static_cast<int64_t>(targets.size()) != n)
    detail::shape_fail("cross_entropy", "got " + std::to_string(targets.size()) +
                                            " targets for " + std::to_string(n) + " rows");
  for (int t : targets)
    if (t < 0 || t >= c)
      throw IndexError("cross_entropy: target " + std::to_string(t) +
                       " out of range [0," + std::to_string(c) + ")");
  std::vector<real> probs(static_cast<size_t>(n * c));
  real loss = 0;
  for (int64_t r = 0; r < n; ++r) {
    const real* xi = logits.value().data() + r * c;
    real* pi = probs.data() + r * c;
    real mx = xi[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
    real sum = 0;
    for (int64_t j = 0; j < c; ++j) {
      pi[j] = std::exp(xi[j] - mx);
      sum += pi[j];
    }
    for (int64_t j = 0; j < c; ++j) pi[j] /= sum;
    loss -= std::log(pi[targets[r]]);
  }
  Tensor out = Tensor::scalar(loss / static_cast<real>(n));
  if (detail::want_grad({&logits})) {
    Graph::current()->record(out, [logits = logits, out = out, targets, probs = std::move(probs), n, c]() mutable {
      if (!logits.tracked()) return;
      const real g = out.grad()[0] / static_cast<real>(n);
      for (int64_t r = 0; r < n; ++r) {
        real* dx = logits.grad().data() + r * c;
        const real* pi = probs.data() + r * c;
        for (int64_t j = 0; j < c; ++j) dx[j] += g * pi[j];
        dx[targets[r]] -= g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Spatial kernels (NCHW layout)
// ---------------------------------------------------------------------------

/// 2-D convolution, stride 1. x [N,Ci,H,W], w [Co,Ci,Kh,Kw], bias [Co].
/// Output H_out = H + 2*pad - Kh + 1 (no padding by default).
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int pad = 0) {
  if (x.ndim() != 4 || w.ndim() != 4)
    detail::shape_fail("conv2d", "expected x [N,Ci,H,W] and w [Co,Ci,Kh,Kw], got " +
                                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != ci)
    detail::shape_fail("conv2d", "input channels " + std::to_string(ci) +
                                     " != kernel channels " + std::to_string(w.dim(1)));
  if (bias.ndim() != 1 || bias.dim(0) != co)
    detail::shape_fail("conv2d", "bias must be [Co]=" + std::to_string(co) + ", got " +
                                     shape_str(bias.shape()));
  const int64_t ho = h + 2 * pad - kh + 1, wo = wd + 2 * pad - kw + 1;
  if (ho <= 0 || wo <= 0)
    detail::shape_fail("conv2d", "kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                     " too large for input " + std::to_string(h) + "x" +
                                     std::to_string(wd) + " with pad " + std::to_string(pad));

  const int64_t k2 = ci * kh * kw;
  const int64_t cols_n = n * ho * wo;
  std::vector<real> cols(static_cast<size_t>(k2 * cols_n), real(0));
  for (int64_t c = 0; c < ci; ++c)
    for (int64_t dh = 0; dh < kh; ++dh)
      for (int64_t dw = 0; dw < kw; ++dw) {
        const int64_t row = (c * kh + dh) * kw + dw;
        real* dst = cols.data() + row * cols_n;
        for (int64_t b = 0; b < n; ++b) {
          const real* src = x.value().data() + (b * ci + c) * h * wd;
          for (int64_t oh = 0; oh < ho; ++oh) {
            const int64_t ih = oh + dh - pad;
            if (ih < 0 || ih >= h) continue;
            for (int64_t ow = 0; ow < wo; ++ow) {
              const int64_t iw = ow + dw - pad;
              if (iw < 0 || iw >= wd) continue;
              dst[(b * ho + oh) * wo + ow] = src[ih * wd + iw];
            }
          }
        }
      }

  std::vector<real> out_mat(static_cast<size_t>(co * cols_n));
  {
    detail::CMapM W(w.value().data(), co, k2), C(cols.data(), k2, cols_n);
    detail::MapM O(out_mat.data(), co, cols_n);
    O.noalias() = W * C;
  }
  Tensor out = Tensor::zeros({n, co, ho, wo});
  for (int64_t b = 0; b < n; ++b)
    for (int64_t c = 0; c < co; ++c) {
      real* dst = out.value().data() + (b * co + c) * ho * wo;
      const real* src = out_mat.data() + c * cols_n + b * ho * wo;
      const real bv = bias.value()[c];
      for (int64_t i = 0; i < ho * wo; ++i) dst[i] = src[i] + bv;
    }

  if (detail::want_grad({&x, &w, &bias})) {
    Graph::current()->record(out, [x = x, w = w, bias = bias, out = out, cols = std::move(cols), n, ci, h, wd, co, kh, kw, ho, wo, k2, cols_n, pad]() mutable {
      std::vector<real> dout_mat(static_cast<size_t>(co * cols_n));
      for (int64_t b = 0; b < n; ++b)
        for (int64_t c = 0; c < co; ++c)
          std::copy_n(out.grad().data() + (b * co + c) * ho * wo, ho * wo,
                      dout_mat.data() + c * cols_n + b * ho * wo);
      if (bias.tracked()) {
        for (int64_t c = 0; c < co; ++c) {
          real acc = 0;
          const real* src = dout_mat.data() + c * cols_n;
          for (int64_t i = 0; i < cols_n; ++i) acc += src[i];
          bias.grad()[c] += acc;
        }
      }
      if (w.tracked()) {
        detail::CMapM dO(dout_mat.data(), co, cols_n), C(cols.data(), k2, cols_n);
        detail::MapM dW(w.grad().data(), co, k2);
        dW.noalias() += dO * C.transpose();
      }
      if (x.tracked()) {
        std::vector<real> dcols(static_cast<size_t>(k2 * cols_n));
        detail::CMapM W(w.value().data(), co, k2), dO(dout_mat.data(), co, cols_n);
        detail::MapM dC(dcols.data(), k2, cols_n);
        dC.noalias() = W.transpose() * dO;
        for (int64_t c = 0; c < ci; ++c)
          for (int64_t dh = 0; dh < kh; ++dh)
            for (int64_t dw = 0; dw < kw; ++dw) {
              const int64_t row = (c * kh + dh) * kw + dw;
              const real* src = dcols.data() + row * cols_n;
              for (int64_t b = 0; b < n; ++b) {
                real* dst = x.grad().data() + (b * ci + c) * h * wd;
                for (int64_t oh = 0; oh < ho; ++oh) {
                  const int64_t ih = oh + dh - pad;
                  if (ih < 0 || ih >= h) continue;
                  for (int64_t ow = 0; ow < wo; ++ow) {
                    const int64_t iw = ow + dw - pad;
                    if (iw < 0 || iw >= wd) continue;
                    dst[ih * wd + iw] += src[(b * ho + oh) * wo + ow];
                  }
                }
              }
            }
      }
    });
  }
  return out;
}

/// Max pooling with square window k, stride k; trailing remainder dropped.
inline Tensor max_pool2d(const Tensor& x, int k) {
  if (x.ndim() != 4)
    detail::shape_fail("max_pool2d", "expected [N,C,H,W] input, got " + shape_str(x.shape()));
  if (k < 1) throw ValueError("max_pool2d: window must be >= 1");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t ho = h / k, wo = w / k;
  if (ho == 0 || wo == 0)
    detail::shape_fail("max_pool2d", "window " + std::to_string(k) +
                                         " exceeds spatial dims " + std::to_string(h) +
                                         "x" + std::to_string(w));
  Tensor out = Tensor::zeros({n, c, ho, wo});
  std::vector<int64_t> argmax(static_cast<size_t>(n * c * ho * wo));
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch) {
      const real* src = x.value().data() + (b * c + ch) * h * w;
      real* dst = out.value().data() + (b * c + ch) * ho * wo;
      int64_t* am = argmax.data() + (b * c + ch) * ho * wo;
      for (int64_t oh = 0; oh < ho; ++oh)
        for (int64_t ow = 0; ow < wo; ++ow) {
          int64_t best = (oh * k) * w + ow * k;
          real bv = src[best];
          for (int64_t dh = 0; dh < k; ++dh)
            for (int64_t dw = 0; dw < k; ++dw) {
              const int64_t idx = (oh * k + dh) * w + (ow * k + dw);
              if (src[idx] > bv) {
                bv = src[idx];
                best = idx;
              }
            }
          dst[oh * wo + ow] = bv;
          am[oh * wo + ow] = best;
        }
    }
  if (detail::want_grad({&x})) {
    Graph::current()->record(out, [x = x, out = out, argmax = std::move(argmax), n, c, h, w = w, ho, wo]() mutable {
      if (!x.tracked()) return;
      for (int64_t plane = 0; plane < n * c; ++plane) {
        real* dx = x.grad().data() + plane * h * w;
        const real* dy = out.grad().data() + plane * ho * wo;
        const int64_t* am = argmax.data() + plane * ho * wo;
        for (int64_t i = 0; i < ho * wo; ++i) dx[am[i]] += dy[i];
      }
    });
  }
  return out;
}

/// Inverted dropout: keeps each element with probability keep_prob and
/// scales survivors by 1/keep_prob. Draws exactly numel() values from rng.
inline Tensor dropout(const Tensor& x, real keep_prob, Rng& rng) {
  if (!(keep_prob > real(0)) || keep_prob > real(1))
    throw ValueError("dropout: keep probability must be in (0,1], got " +
                     fmt_real(keep_prob));
  std::vector<real> mask(static_cast<size_t>(x.numel()));
  const real inv = real(1) / keep_prob;
  for (auto& m : mask)
    m = rng.uniform() < static_cast<double>(keep_prob) ? inv : real(0);
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i)
    out.value()[i] = x.value()[i] * mask[i];
  if (detail::want_grad({&x})) {
    Graph::current()->record(out, [x = x, out = out, mask = std::move(mask)]() mutable {
      if (!x.tracked()) return;
      for (int64_t i = 0; i < x.numel(); ++i) x.grad()[i] += out.grad()[i] * mask[i];
    });
  }
  return out;
}

/// Batched dot products against per-row candidate sets:
/// m [N,D], cands [N,C,D] -> scores [N,C]. Candidates are treated as
/// constants (the referential target branch is stop-gradient).
inline Tensor candidate_scores(const Tensor& m, const Tensor& cands) {
  if (m.ndim() != 2 || cands.ndim() != 3 || cands.dim(0) != m.dim(0) ||
      cands.dim(2) != m.dim(1))
    detail::shape_fail("candidate_scores", "expected m [N,D] with cands [N,C,D], got " +
                                               shape_str(m.shape()) + " and " +
                                               shape_str(cands.shape()));
  if (cands.tracked())
    throw ValueError("candidate_scores: candidate embeddings must be detached");
  const int64_t n = m.dim(0), d = m.dim(1), c = cands.dim(1);
  Tensor out = Tensor::zeros({n, c});
  for (int64_t r = 0; r < n; ++r)
    for (int64_t j = 0; j < c; ++j) {
      const real* mv = m.value().data() + r * d;
      const real* cv = cands.value().data() + (r * c + j) * d;
      real acc = 0;
      for (int64_t i = 0; i < d; ++i) acc += mv[i] * cv[i];
      out.value()[r * c + j] = acc;
    }
  if (detail::want_grad({&m})) {
    Graph::current()->record(out, [m = m, cands = cands, out = out, n, d, c]() mutable {
      if (!m.tracked()) return;
      for (int64_t r = 0; r < n; ++r)
        for (int64_t j = 0; j < c; ++j) {
          const real g = out.grad()[r * c + j];
          const real* cv = cands.value().data() + (r * c + j) * d;
          real* dm = m.grad().data() + r * d;
          for (int64_t i = 0; i < d; ++i) dm[i] += g * cv[i];
        }
    });
  }
  return out;
}

/// Row-wise entropy of softmax(logits): H = -sum p log p. Returns [N].
inline Tensor softmax_entropy(const Tensor& logits) {
  Tensor p = softmax(logits);
  Tensor logp = log_softmax(logits);
  Tensor plogp = mul(p, logp);
  int64_t n, c;
  detail::rows_of(logits, "softmax_entropy", n, c);
  // Row-sum via matmul with a ones column: [N,C] x [C,1] -> [N,1].
  Tensor ones = Tensor::full({c, 1}, real(1));
  Tensor rows = matmul(reshape(plogp, {n, c}), ones);
  return affine(reshape(rows, {n}), real(-1), real(0));
}

// ---------------------------------------------------------------------------
// RMSProp
// ---------------------------------------------------------------------------

struct RmsPropConfig {
  real lr = real(1e-3);
  real decay = real(0.99);
  real eps = real(1e-8);
};

/// Per-parameter squared-gradient accumulator update:
///   acc <- decay*acc + (1-decay)*g^2 ; p <- p - lr*g/(sqrt(acc)+eps).
/// Non-finite gradients abort with the parameter name (no clipping).
class RmsProp {
 public:
  explicit RmsProp(ParamMap params, RmsPropConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    if (!(cfg_.lr > real(0))) throw ValueError("rmsprop: learning rate must be > 0");
    if (!(cfg_.decay > real(0)) || !(cfg_.decay < real(1)))
      throw ValueError("rmsprop: decay must be in (0,1)");
    acc_.reserve(params_.size());
    for (auto& [name, t] : params_)
      acc_.emplace_back(static_cast<size_t>(t.numel()), real(0));
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  void step() {
    for (size_t p = 0; p < params_.size(); ++p) {
      auto& [name, t] = params_[p];
      auto& acc = acc_[p];
      auto& g = t.grad();
      auto& v = t.value();
      for (size_t i = 0; i < g.size(); ++i) {
        if (!std::isfinite(g[i]))
          throw NumericError("rmsprop: non-finite gradient in parameter '" + name + "'");
        acc[i] = cfg_.decay * acc[i] + (real(1) - cfg_.decay) * g[i] * g[i];
        v[i] -= cfg_.lr * g[i] / (std::sqrt(acc[i]) + cfg_.eps);
      }
    }
  }

  const RmsPropConfig& config() const { return cfg_; }
  const std::vector<real>& accumulator(size_t i) const { return acc_[i]; }
  const ParamMap& params() const { return params_; }

 private:
  ParamMap params_;
  std::vector<std::vector<real>> acc_;
  RmsPropConfig cfg_;
};

}  // namespace ilm
