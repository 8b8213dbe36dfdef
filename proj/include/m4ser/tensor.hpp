#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors of
// rank 0, 1 or 2. A Graph records every differentiable primitive applied to
// tensors that require gradients; backward() replays the record in reverse.
//
// Primitive reference (shapes use [r x c] for rank 2, [n] for rank 1, [] for
// scalars; gradients accumulate additively into every input that requires
// them):
//
//   matmul([a x b], [b x c])        -> [a x c]
//   add(x, y)                       -> same shape; also [r x c] + [c] row bias
//   sub(x, y), mul(x, y)            -> same shape, elementwise
//   scalar_mul(x, k)                -> shape of x
//   concat({...}, axis)             -> along axis 0 or 1, other dims equal
//   slice(x, axis, begin, end)      -> contiguous range along one axis
//   transpose([r x c])              -> [c x r]
//   softmax_rows(x)                 -> rows sum to 1; rank 1 = single row
//   log(x)                          -> input clamped to >= 1e-6, zero slope below
//   exp, sigmoid, relu, tanh        -> elementwise
//   prelu(x, slope)                 -> slope is a learned scalar tensor
//   layer_norm(x, gain, bias)       -> per row, epsilon 1e-5 inside the sqrt
//   mean_axis0(x[, row mask])       -> [r x c] -> [c]; [n] -> []; mask-aware
//   dropout(x, rate, rng, train)    -> inverted scaling; identity when !train
//   gather_rows(t, ids)             -> embedding lookup / row resampling
//   cross_entropy_logits(z, ids)    -> per-row -log softmax(z)[id], stable
//   cosine(a, b)                    -> scalar; rejects zero-norm input
//   clamp(x, lo, hi)                -> unit slope inside [lo, hi], zero outside
//   reshape(x, shape)               -> same element count
//
// A graph is confined to one logical thread. Tensors are immutable after
// construction except for their grad buffers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "m4ser/common.hpp"

namespace m4ser {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += " x ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

inline std::uint64_t next_node_id() {
  static std::uint64_t counter = 0;
  return ++counter;
}

template <class Real>
struct TensorData {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t node_id = 0;
  const void* graph_tag = nullptr;  // owning graph for non-leaf tensors
  int producer = -1;                // step index within that graph

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), Real(0));
  }
};

}  // namespace detail

template <class Real>
class Tensor {
 public:
  using Data = detail::TensorData<Real>;

  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<Real> value, bool requires_grad = false) {
    if (numel(shape) != value.size())
      fail("Tensor: value size " + std::to_string(value.size()) + " does not match shape " + shape_str(shape));
    auto d = std::make_shared<Data>();
    d->shape = std::move(shape);
    d->value = std::move(value);
    d->requires_grad = requires_grad;
    d->node_id = detail::next_node_id();
    return Tensor(std::move(d));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<Real> v(numel(shape), Real(0));
    return leaf(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, Real x, bool requires_grad = false) {
    std::vector<Real> v(numel(shape), x);
    return leaf(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(Real x, bool requires_grad = false) { return leaf({}, {x}, requires_grad); }

  // uniform init in [lo, hi]; the usual weight initializer routes through here
  static Tensor randu(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = true) {
    std::vector<Real> v(numel(shape));
    for (auto& x : v) x = static_cast<Real>(rng.uniform(lo, hi));
    return leaf(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t size() const { return d_->value.size(); }
  std::size_t rows() const { return d_->shape.size() == 2 ? d_->shape[0] : 1; }
  std::size_t cols() const { return d_->shape.empty() ? 1 : d_->shape.back(); }

  const std::vector<Real>& value() const { return d_->value; }
  std::vector<Real>& value_mut() { return d_->value; }
  const std::vector<Real>& grad() const { return d_->grad; }

  std::vector<Real> grad_or_zeros() const {
    return d_->grad.empty() ? std::vector<Real>(d_->value.size(), Real(0)) : d_->grad;
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool b) { d_->requires_grad = b; }
  void clear_grad() { d_->grad.clear(); }

  Real item() const {
    if (d_->value.size() != 1) fail("Tensor::item: tensor has " + std::to_string(d_->value.size()) + " elements");
    return d_->value[0];
  }

  Real at(std::size_t i) const { return d_->value.at(i); }
  Real at(std::size_t r, std::size_t c) const {
    if (d_->shape.size() != 2) fail("Tensor::at(r,c): rank is not 2");
    return d_->value.at(r * d_->shape[1] + c);
  }

  std::uint64_t id() const { return d_->node_id; }

  // Copies values into a fresh leaf that does not require gradients; used to
  // block gradient flow into the encoder stack during the discriminator step.
  Tensor detach() const {
    return leaf(d_->shape, d_->value, false);
  }

  std::shared_ptr<Data> data_ptr() const { return d_; }

 private:
  explicit Tensor(std::shared_ptr<Data> d) : d_(std::move(d)) {}
  std::shared_ptr<Data> d_;

  template <class R>
  friend class Graph;
};

// The computation record. Ops executed through a recording graph push one
// step each; backward() zeroes intermediate grads, seeds d loss / d loss = 1
// and replays the steps in reverse, so each step runs at most once per call.
// Leaf gradients accumulate across calls until cleared.
template <class Real>
class Graph {
 public:
  explicit Graph(bool recording = true) : recording_(recording) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }
  std::size_t steps() const { return steps_.size(); }

  // ---- binary arithmetic ----

  Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.rank() != 2 || b.rank() != 2)
      fail("matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const std::size_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
      fail("matmul: inner dimensions differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<Real> out(m * n, Real(0));
    const Real* pa = a.value().data();
    const Real* pb = b.value().data();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const Real s = pa[i * k + p];
        if (s == Real(0)) continue;
        const Real* brow = pb + p * n;
        Real* crow = out.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
      }
    }
    auto y = make_out({m, n}, std::move(out), {a, b});
    record({a, b}, y, [a, b, y, m, k, n]() {
      const auto& g = y.d_->grad;
      if (a.requires_grad()) {
        a.d_->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            Real acc = 0;
            const Real* grow = g.data() + i * n;
            const Real* brow = b.d_->value.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            a.d_->grad[i * k + p] += acc;
          }
      }
      if (b.requires_grad()) {
        b.d_->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          const Real* grow = g.data() + i * n;
          const Real* arow = a.d_->value.data() + i * k;
          for (std::size_t p = 0; p < k; ++p) {
            const Real s = arow[p];
            if (s == Real(0)) continue;
            Real* brow = b.d_->grad.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) brow[j] += s * grow[j];
          }
        }
      }
    });
    return y;
  }

  Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() == b.shape()) {
      std::vector<Real> out(a.size());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
      auto y = make_out(a.shape(), std::move(out), {a, b});
      record({a, b}, y, [a, b, y]() {
        const auto& g = y.d_->grad;
        accumulate_same(a, g);
        accumulate_same(b, g);
      });
      return y;
    }
    // row-broadcast bias: [r x c] + [c]
    if (a.rank() == 2 && b.rank() == 1 && a.shape()[1] == b.shape()[0]) {
      const std::size_t r = a.shape()[0], c = a.shape()[1];
      std::vector<Real> out(a.size());
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.value()[i * c + j] + b.value()[j];
      auto y = make_out(a.shape(), std::move(out), {a, b});
      record({a, b}, y, [a, b, y, r, c]() {
        const auto& g = y.d_->grad;
        accumulate_same(a, g);
        if (b.requires_grad()) {
          b.d_->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) b.d_->grad[j] += g[i * c + j];
        }
      });
      return y;
    }
    fail("add: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }

  Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    check_same_shape("sub", a, b);
    std::vector<Real> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    auto y = make_out(a.shape(), std::move(out), {a, b});
    record({a, b}, y, [a, b, y]() {
      const auto& g = y.d_->grad;
      accumulate_same(a, g);
      if (b.requires_grad()) {
        b.d_->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) b.d_->grad[i] -= g[i];
      }
    });
    return y;
  }

  Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    check_same_shape("mul", a, b);
    std::vector<Real> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    auto y = make_out(a.shape(), std::move(out), {a, b});
    record({a, b}, y, [a, b, y]() {
      const auto& g = y.d_->grad;
      if (a.requires_grad()) {
        a.d_->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) a.d_->grad[i] += g[i] * b.d_->value[i];
      }
      if (b.requires_grad()) {
        b.d_->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) b.d_->grad[i] += g[i] * a.d_->value[i];
      }
    });
    return y;
  }

  Tensor<Real> scalar_mul(const Tensor<Real>& a, Real k) {
    std::vector<Real> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * k;
    auto y = make_out(a.shape(), std::move(out), {a});
    record({a}, y, [a, y, k]() {
      if (!a.requires_grad()) return;
      a.d_->ensure_grad();
      const auto& g = y.d_->grad;
      for (std::size_t i = 0; i < g.size(); ++i) a.d_->grad[i] += k * g[i];
    });
    return y;
  }

  // ---- structural ops ----

  Tensor<Real> concat(const std::vector<Tensor<Real>>& xs, int axis) {
    if (xs.empty()) fail("concat: empty operand list");
    if (axis != 0 && axis != 1) fail("concat: axis must be 0 or 1, got " + std::to_string(axis));
    const std::size_t rank = xs[0].rank();
    if (rank == 0) fail("concat: scalar operands are not concatenable");
    for (const auto& x : xs)
      if (x.rank() != rank)
        fail("concat: mixed ranks: " + shape_str(xs[0].shape()) + " vs " + shape_str(x.shape()));
    if (rank == 1) {
      if (axis != 0) fail("concat: rank-1 operands only concatenate along axis 0");
      std::size_t total = 0;
      for (const auto& x : xs) total += x.size();
      std::vector<Real> out;
      out.reserve(total);
      for (const auto& x : xs) out.insert(out.end(), x.value().begin(), x.value().end());
      auto y = make_out({total}, std::move(out), xs);
      record(xs, y, [xs, y]() {
        std::size_t off = 0;
        for (const auto& x : xs) {
          if (x.requires_grad()) {
            x.d_->ensure_grad();
            for (std::size_t i = 0; i < x.size(); ++i) x.d_->grad[i] += y.d_->grad[off + i];
          }
          off += x.size();
        }
      });
      return y;
    }
    if (axis == 0) {
      const std::size_t c = xs[0].shape()[1];
      std::size_t rtotal = 0;
      for (const auto& x : xs) {
        if (x.shape()[1] != c)
          fail("concat axis 0: column counts differ: " + shape_str(xs[0].shape()) + " vs " + shape_str(x.shape()));
        rtotal += x.shape()[0];
      }
      std::vector<Real> out;
      out.reserve(rtotal * c);
      for (const auto& x : xs) out.insert(out.end(), x.value().begin(), x.value().end());
      auto y = make_out({rtotal, c}, std::move(out), xs);
      record(xs, y, [xs, y]() {
        std::size_t off = 0;
        for (const auto& x : xs) {
          if (x.requires_grad()) {
            x.d_->ensure_grad();
            for (std::size_t i = 0; i < x.size(); ++i) x.d_->grad[i] += y.d_->grad[off + i];
          }
          off += x.size();
        }
      });
      return y;
    }
    const std::size_t r = xs[0].shape()[0];
    std::size_t ctotal = 0;
    for (const auto& x : xs) {
      if (x.shape()[0] != r)
        fail("concat axis 1: row counts differ: " + shape_str(xs[0].shape()) + " vs " + shape_str(x.shape()));
      ctotal += x.shape()[1];
    }
    std::vector<Real> out(r * ctotal);
    std::size_t coff = 0;
    for (const auto& x : xs) {
      const std::size_t c = x.shape()[1];
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * ctotal + coff + j] = x.value()[i * c + j];
      coff += c;
    }
    auto y = make_out({r, ctotal}, std::move(out), xs);
    record(xs, y, [xs, y, r, ctotal]() {
      std::size_t off = 0;
      for (const auto& x : xs) {
        const std::size_t c = x.shape()[1];
        if (x.requires_grad()) {
          x.d_->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) x.d_->grad[i * c + j] += y.d_->grad[i * ctotal + off + j];
        }
        off += c;
      }
    });
    return y;
  }

  Tensor<Real> slice(const Tensor<Real>& x, int axis, std::size_t begin, std::size_t end) {
    if (axis != 0 && axis != 1) fail("slice: axis must be 0 or 1");
    if (x.rank() == 1) {
      if (axis != 0) fail("slice: rank-1 input only slices along axis 0");
      if (begin >= end || end > x.shape()[0])
        fail("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of bounds for " +
             shape_str(x.shape()));
      std::vector<Real> out(x.value().begin() + begin, x.value().begin() + end);
      auto y = make_out({end - begin}, std::move(out), {x});
      record({x}, y, [x, y, begin]() {
        if (!x.requires_grad()) return;
        x.d_->ensure_grad();
        for (std::size_t i = 0; i < y.size(); ++i) x.d_->grad[begin + i] += y.d_->grad[i];
      });
      return y;
    }
    if (x.rank() != 2) fail("slice: expects rank 1 or 2, got " + shape_str(x.shape()));
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    if (begin >= end || end > (axis == 0 ? r : c))
      fail("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of bounds for " +
           shape_str(x.shape()) + " on axis " + std::to_string(axis));
    if (axis == 0) {
      std::vector<Real> out(x.value().begin() + begin * c, x.value().begin() + end * c);
      auto y = make_out({end - begin, c}, std::move(out), {x});
      record({x}, y, [x, y, begin, c]() {
        if (!x.requires_grad()) return;
        x.d_->ensure_grad();
        for (std::size_t i = 0; i < y.size(); ++i) x.d_->grad[begin * c + i] += y.d_->grad[i];
      });
      return y;
    }
    const std::size_t w = end - begin;
    std::vector<Real> out(r * w);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x.value()[i * c + begin + j];
    auto y = make_out({r, w}, std::move(out), {x});
    record({x}, y, [x, y, begin, r, c, w]() {
      if (!x.requires_grad()) return;
      x.d_->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) x.d_->grad[i * c + begin + j] += y.d_->grad[i * w + j];
    });
    return y;
  }

  Tensor<Real> transpose(const Tensor<Real>& x) {
    if (x.rank() != 2) fail("transpose: expects rank 2, got " + shape_str(x.shape()));
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    std::vector<Real> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.value()[i * c + j];
    auto y = make_out({c, r}, std::move(out), {x});
    record({x}, y, [x, y, r, c]() {
      if (!x.requires_grad()) return;
      x.d_->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) x.d_->grad[i * c + j] += y.d_->grad[j * r + i];
    });
    return y;
  }

  Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
    if (numel(shape) != x.size())
      fail("reshape: element count mismatch: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    auto y = make_out(std::move(shape), std::vector<Real>(x.value()), {x});
    record({x}, y, [x, y]() {
      if (!x.requires_grad()) return;
      x.d_->ensure_grad();
      for (std::size_t i = 0; i < y.size(); ++i) x.d_->grad[i] += y.d_->grad[i];
    });
    return y;
  }

  // ---- row-wise nonlinear ops ----

  Tensor<Real> softmax_rows(const Tensor<Real>& x) {
    if (x.rank() == 0) fail("softmax_rows: scalar input");
    const std::size_t r = x.rank() == 2 ? x.shape()[0] : 1;
    const std::size_t c = x.rank() == 2 ? x.shape()[1] : x.shape()[0];
    std::vector<Real> out(x.size());
    for (std::size_t i = 0; i < r; ++i) {
      const Real* row = x.value().data() + i * c;
      Real mx = row[0];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      Real sum = 0;
      for (std::size_t j = 0; j < c; ++j) {
        out[i * c + j] = std::exp(row[j] - mx);
        sum += out[i * c + j];
      }
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= sum;
    }
    auto y = make_out(x.shape(), std::move(out), {x});
    record({x}, y, [x, y, r, c]() {
      if (!x.requires_grad()) return;
      x.d_->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        const Real* yr = y.d_->value.data() + i * c;
        const Real* gr = y.d_->grad.data() + i * c;
        Real dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
        for (std::size_t j = 0; j < c; ++j) x.d_->grad[i * c + j] += yr[j] * (gr[j] - dot);
      }
    });
    return y;
  }

  Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias) {
    const std::size_t r = x.rank() == 2 ? x.shape()[0] : 1;
    const std::size_t c = x.rank() == 2 ? x.shape()[1] : x.shape()[0];
    if (x.rank() == 0 || gain.rank() != 1 || gain.shape()[0] != c || bias.shape() != gain.shape())
      fail("layer_norm: incompatible shapes " + shape_str(x.shape()) + ", " + shape_str(gain.shape()) + ", " +
           shape_str(bias.shape()));
    constexpr Real eps = Real(1e-5);
    std::vector<Real> out(x.size());
    std::vector<Real> inv_sd(r), mean(r);
    for (std::size_t i = 0; i < r; ++i) {
      const Real* row = x.value().data() + i * c;
      Real mu = 0;
      for (std::size_t j = 0; j < c; ++j) mu += row[j];
      mu /= static_cast<Real>(c);
      Real var = 0;
      for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= static_cast<Real>(c);
      const Real s = Real(1) / std::sqrt(var + eps);
      mean[i] = mu;
      inv_sd[i] = s;
      for (std::size_t j = 0; j < c; ++j)
        out[i * c + j] = (row[j] - mu) * s * gain.value()[j] + bias.value()[j];
    }
    auto y = make_out(x.shape(), std::move(out), {x, gain, bias});
    record({x, gain, bias}, y, [x, gain, bias, y, r, c, mean, inv_sd]() {
      for (std::size_t i = 0; i < r; ++i) {
        const Real* row = x.d_->value.data() + i * c;
        const Real* g = y.d_->grad.data() + i * c;
        const Real s = inv_sd[i];
        const Real mu = mean[i];
        Real gy_mean = 0, gyx_mean = 0;
        for (std::size_t j = 0; j < c; ++j) {
          const Real xh = (row[j] - mu) * s;
          const Real gy = g[j] * gain.d_->value[j];
          gy_mean += gy;
          gyx_mean += gy * xh;
        }
        gy_mean /= static_cast<Real>(c);
        gyx_mean /= static_cast<Real>(c);
        if (x.requires_grad()) {
          x.d_->ensure_grad();
          for (std::size_t j = 0; j < c; ++j) {
            const Real xh = (row[j] - mu) * s;
            const Real gy = g[j] * gain.d_->value[j];
            x.d_->grad[i * c + j] += s * (gy - gy_mean - xh * gyx_mean);
          }
        }
        if (gain.requires_grad()) {
          gain.d_->ensure_grad();
          for (std::size_t j = 0; j < c; ++j) gain.d_->grad[j] += g[j] * (row[j] - mu) * s;
        }
        if (bias.requires_grad()) {
          bias.d_->ensure_grad();
          for (std::size_t j = 0; j < c; ++j) bias.d_->grad[j] += g[j];
        }
      }
    });
    return y;
  }

  // ---- elementwise nonlinearities ----

  Tensor<Real> log(const Tensor<Real>& x) {
    const Real floor_ = Real(1e-6);
    std::vector<Real> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(x.value()[i], floor_));
    auto y = make_out(x.shape(), std::move(out), {x});
    record({x}, y, [x, y, floor_]() {
      if (!x.requires_grad()) return;
      x.d_->ensure_grad();
      for (std::size_t i = 0; i < y.size(); ++i)
        if (x.d_->value[i] > floor_) x.d_->grad[i] += y.d_->grad[i] / x.d_->value[i];
    });
    return y;
  }

  Tensor<Real> exp(const Tensor<Real>& x) {
    std::vector<Real> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.value()[i]);
    auto y = make_out(x.shape(), std::move(out), {x});
    record({x}, y, [x, y]() {
      if (!x.requires_grad()) return;
      x.d_->ensure_grad();
      for (std::size_t i = 0; i < y.size(); ++i) x.d_->grad[i] += y.d_->grad[i] * y.d_->value[i];
    });
    return y;
  }

  Tensor<Real> sigmoid(const Tensor<Real>& x) {
    std::vector<Real> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const Real v = x.value()[i];
      out[i] = v >= 0 ? Real(1) / (Real(1) + std::exp(-v)) : std::exp(v) / (Real(1) + std::exp(v));
    }
    auto y = make_out(x.shape(), std::move(out), {x});
    record({x}, y, [x, y]() {
      if (!x.requires_grad()) return;
      x.d_->ensure_grad();
      for (std::size_t i = 0; i < y.size(); ++i) {
        const Real s = y.d_->value[i];
        x.d_->grad[i] += y.d_->grad[i] * s * (Real(1) - s);
      }
    });
    return y;
  }

  Tensor<Real> relu(const Tensor<Real>& x) {
    std::vector<Real> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] > 0 ? x.value()[i] : Real(0);
    auto y = make_out(x.shape(), std::move(out), {x});
    record({x}, y, [x, y]() {
      if (!x.requires_grad()) return;
      x.d_->ensure_grad();
      for (std::size_t i = 0; i < y.size(); ++i)
        if (x.d_->value[i] > 0) x.d_->grad[i] += y.d_->grad[i];
    });
    return y;
  }

  Tensor<Real> prelu(const Tensor<Real>& x, const Tensor<Real>& slope) {
    if (slope.size() != 1) fail("prelu: slope must be a scalar tensor, got " + shape_str(slope.shape()));
    const Real s = slope.value()[0];
    std::vector<Real> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] > 0 ? x.value()[i] : s * x.value()[i];
    auto y = make_out(x.shape(), std::move(out), {x, slope});
    record({x, slope}, y, [x, slope, y, s]() {
      const auto& g = y.d_->grad;
      if (x.requires_grad()) {
        x.d_->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
          x.d_->grad[i] += g[i] * (x.d_->value[i] > 0 ? Real(1) : s);
      }
      if (slope.requires_grad()) {
        slope.d_->ensure_grad();
        Real acc = 0;
        for (std::size_t i = 0; i < g.size(); ++i)
          if (x.d_->value[i] <= 0) acc += g[i] * x.d_->value[i];
        slope.d_->grad[0] += acc;
      }
    });
    return y;
  }

  Tensor<Real> tanh(const Tensor<Real>& x) {
    std::vector<Real> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.value()[i]);
    auto y = make_out(x.shape(), std::move(out), {x});
    record({x}, y, [x, y]() {
      if (!x.requires_grad()) return;
      x.d_->ensure_grad();
      for (std::size_t i = 0; i < y.size(); ++i) {
        const Real t = y.d_->value[i];
        x.d_->grad[i] += y.d_->grad[i] * (Real(1) - t * t);
      }
    });
    return y;
  }

  Tensor<Real> clamp(const Tensor<Real>& x, Real lo, Real hi) {
    if (!(lo < hi)) fail("clamp: lo must be below hi");
    std::vector<Real> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(x.value()[i], lo), hi);
    auto y = make_out(x.shape(), std::move(out), {x});
    record({x}, y, [x, y, lo, hi]() {
      if (!x.requires_grad()) return;
      x.d_->ensure_grad();
      for (std::size_t i = 0; i < y.size(); ++i) {
        const Real v = x.d_->value[i];
        if (v >= lo && v <= hi) x.d_->grad[i] += y.d_->grad[i];
      }
    });
    return y;
  }

  // ---- reductions and lookups ----

  Tensor<Real> mean_axis0(const Tensor<Real>& x) {
    return mean_axis0_masked(x, std::vector<std::uint8_t>());
  }

  // `valid` marks rows that participate; empty means all rows. Padded rows are
  // never read, so poisoned padding cannot leak into the mean.
  Tensor<Real> mean_axis0_masked(const Tensor<Real>& x, const std::vector<std::uint8_t>& valid) {
    if (x.rank() == 0) fail("mean_axis0: scalar input");
    const std::size_t r = x.rank() == 2 ? x.shape()[0] : x.shape()[0];
    const std::size_t c = x.rank() == 2 ? x.shape()[1] : 1;
    if (!valid.empty() && valid.size() != r)
      fail("mean_axis0: mask length " + std::to_string(valid.size()) + " does not match " + std::to_string(r) +
           " rows");
    std::size_t count = 0;
    for (std::size_t i = 0; i < r; ++i)
      if (valid.empty() || valid[i]) ++count;
    if (count == 0) fail("mean_axis0: no unmasked rows");
    std::vector<Real> out(c, Real(0));
    for (std::size_t i = 0; i < r; ++i) {
      if (!valid.empty() && !valid[i]) continue;
      for (std::size_t j = 0; j < c; ++j) out[j] += x.value()[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[j] /= static_cast<Real>(count);
    Shape yshape = x.rank() == 2 ? Shape{c} : Shape{};
    auto y = make_out(std::move(yshape), std::move(out), {x});
    record({x}, y, [x, y, valid, r, c, count]() {
      if (!x.requires_grad()) return;
      x.d_->ensure_grad();
      const Real inv = Real(1) / static_cast<Real>(count);
      for (std::size_t i = 0; i < r; ++i) {
        if (!valid.empty() && !valid[i]) continue;
        for (std::size_t j = 0; j < c; ++j) x.d_->grad[i * c + j] += y.d_->grad[j] * inv;
      }
    });
    return y;
  }

  // Inverted dropout: kept entries scale by 1/(1-rate); eval mode is the
  // identity and records nothing.
  Tensor<Real> dropout(const Tensor<Real>& x, double rate, Rng& rng, bool train) {
    if (rate < 0.0 || rate >= 1.0) fail("dropout: rate must lie in [0, 1)");
    if (!train || rate == 0.0) return x;
    const Real scale = Real(1.0 / (1.0 - rate));
    std::vector<Real> mask(x.size());
    for (auto& m : mask) m = rng.uniform() < rate ? Real(0) : scale;
    std::vector<Real> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * mask[i];
    auto y = make_out(x.shape(), std::move(out), {x});
    record({x}, y, [x, y, mask = std::move(mask)]() {
      if (!x.requires_grad()) return;
      x.d_->ensure_grad();
      for (std::size_t i = 0; i < y.size(); ++i) x.d_->grad[i] += y.d_->grad[i] * mask[i];
    });
    return y;
  }

  // Embedding lookup and row resampling share this gather; backward scatters
  // additively, so repeated ids accumulate.
  Tensor<Real> gather_rows(const Tensor<Real>& table, const std::vector<std::int32_t>& ids) {
    if (table.rank() != 2) fail("gather_rows: table must be rank 2, got " + shape_str(table.shape()));
    const std::size_t v = table.shape()[0], c = table.shape()[1];
    for (std::size_t k = 0; k < ids.size(); ++k)
      if (ids[k] < 0 || static_cast<std::size_t>(ids[k]) >= v)
        fail("gather_rows: id " + std::to_string(ids[k]) + " at position " + std::to_string(k) +
             " outside table with " + std::to_string(v) + " rows");
    if (ids.empty()) fail("gather_rows: empty id list");
    std::vector<Real> out(ids.size() * c);
    for (std::size_t k = 0; k < ids.size(); ++k)
      std::copy_n(table.value().data() + static_cast<std::size_t>(ids[k]) * c, c, out.data() + k * c);
    auto y = make_out({ids.size(), c}, std::move(out), {table});
    record({table}, y, [table, y, ids, c]() {
      if (!table.requires_grad()) return;
      table.d_->ensure_grad();
      for (std::size_t k = 0; k < ids.size(); ++k) {
        Real* dst = table.d_->grad.data() + static_cast<std::size_t>(ids[k]) * c;
        const Real* src = y.d_->grad.data() + k * c;
        for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
      }
    });
    return y;
  }

  // Per-row -log softmax(z)[target], computed against the shifted logits so
  // large magnitudes stay finite.
  Tensor<Real> cross_entropy_logits(const Tensor<Real>& z, const std::vector<std::int32_t>& targets) {
    if (z.rank() != 2) fail("cross_entropy_logits: logits must be rank 2, got " + shape_str(z.shape()));
    const std::size_t r = z.shape()[0], v = z.shape()[1];
    if (targets.size() != r)
      fail("cross_entropy_logits: " + std::to_string(targets.size()) + " targets for " + std::to_string(r) + " rows");
    for (std::size_t i = 0; i < r; ++i)
      if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
        fail("cross_entropy_logits: target " + std::to_string(targets[i]) + " at row " + std::to_string(i) +
             " outside [0, " + std::to_string(v) + ")");
    std::vector<Real> out(r);
    for (std::size_t i = 0; i < r; ++i) {
      const Real* row = z.value().data() + i * v;
      Real mx = row[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      Real sum = 0;
      for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
      out[i] = std::log(sum) + mx - row[targets[i]];
    }
    auto y = make_out({r}, std::move(out), {z});
    record({z}, y, [z, y, targets, r, v]() {
      if (!z.requires_grad()) return;
      z.d_->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        const Real g = y.d_->grad[i];
        if (g == Real(0)) continue;
        const Real* row = z.d_->value.data() + i * v;
        Real mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        Real sum = 0;
        for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < v; ++j) {
          const Real p = std::exp(row[j] - mx) / sum;
          z.d_->grad[i * v + j] += g * (p - (static_cast<std::size_t>(targets[i]) == j ? Real(1) : Real(0)));
        }
      }
    });
    return y;
  }

  Tensor<Real> cosine(const Tensor<Real>& a, const Tensor<Real>& b) {
    check_same_shape("cosine", a, b);
    if (a.size() == 0) fail("cosine: empty input");
    Real dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      dot += a.value()[i] * b.value()[i];
      na += a.value()[i] * a.value()[i];
      nb += b.value()[i] * b.value()[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na == Real(0) || nb == Real(0)) fail("cosine: zero-norm input vector");
    const Real c = dot / (na * nb);
    auto y = make_out({}, {c}, {a, b});
    record({a, b}, y, [a, b, y, c, na, nb]() {
      const Real g = y.d_->grad[0];
      if (a.requires_grad()) {
        a.d_->ensure_grad();
        for (std::size_t i = 0; i < a.size(); ++i)
          a.d_->grad[i] += g * (b.d_->value[i] / (na * nb) - c * a.d_->value[i] / (na * na));
      }
      if (b.requires_grad()) {
        b.d_->ensure_grad();
        for (std::size_t i = 0; i < b.size(); ++i)
          b.d_->grad[i] += g * (a.d_->value[i] / (na * nb) - c * b.d_->value[i] / (nb * nb));
      }
    });
    return y;
  }

  // ---- backward machinery ----

  void backward(const Tensor<Real>& loss) {
    if (!loss.defined() || loss.size() != 1)
      fail("backward: loss must be a defined scalar tensor");
    if (loss.d_->graph_tag != this || loss.d_->producer < 0)
      fail("backward: loss is not the output of a computation recorded on this graph");
    for (auto& s : steps_) s.out->grad.clear();
    loss.d_->ensure_grad();
    loss.d_->grad[0] += Real(1);
    for (std::size_t i = steps_.size(); i-- > 0;) {
      if (!steps_[i].out->grad.empty()) steps_[i].back();
    }
  }

  // Clears the grad buffers of every tensor the record touches, leaves
  // included. Used between the discriminator and main halves of a train step.
  void zero_grads() {
    for (auto& s : steps_) {
      s.out->grad.clear();
      for (auto& in : s.inputs) in->grad.clear();
    }
  }

 private:
  using NodePtr = std::shared_ptr<detail::TensorData<Real>>;

  struct Step {
    std::vector<NodePtr> inputs;
    NodePtr out;
    std::function<void()> back;
  };

  static void accumulate_same(const Tensor<Real>& t, const std::vector<Real>& g) {
    if (!t.requires_grad()) return;
    t.d_->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) t.d_->grad[i] += g[i];
  }

  static void check_same_shape(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape())
      fail(std::string(op) + ": shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }

  Tensor<Real> make_out(Shape shape, std::vector<Real> value, const std::vector<Tensor<Real>>& ins) {
    auto d = std::make_shared<detail::TensorData<Real>>();
    d->shape = std::move(shape);
    d->value = std::move(value);
    d->node_id = detail::next_node_id();
    if (recording_) {
      for (const auto& in : ins)
        if (in.requires_grad()) {
          d->requires_grad = true;
          break;
        }
    }
    return Tensor<Real>(std::move(d));
  }

  void record(const std::vector<Tensor<Real>>& ins, const Tensor<Real>& out, std::function<void()> back) {
    if (!recording_ || !out.requires_grad()) return;
    Step s;
    s.inputs.reserve(ins.size());
    for (const auto& in : ins) s.inputs.push_back(in.d_);
    s.out = out.d_;
    s.back = std::move(back);
    out.d_->graph_tag = this;
    out.d_->producer = static_cast<int>(steps_.size());
    steps_.push_back(std::move(s));
  }

  bool recording_;
  std::vector<Step> steps_;
};

// Dynamic dispatch over the primitive table. Layers call the typed Graph
// methods directly; this surface exists so harnesses can iterate the table by
// kind. Attribute fields are read per kind and ignored otherwise.
enum class Prim {
  matmul,
  add,
  sub,
  mul,
  scalar_mul,
  concat,
  slice,
  transpose,
  softmax_rows,
  log,
  exp,
  sigmoid,
  relu,
  prelu,
  tanh,
  layer_norm,
  mean_axis0,
  dropout,
  embedding_lookup,
  cross_entropy_logits,
  cosine,
  clamp,
  reshape,
};

template <class Real>
struct PrimAttrs {
  int axis = 0;
  std::size_t begin = 0, end = 0;
  Real scalar = Real(0);
  Real lo = Real(0), hi = Real(0);
  double rate = 0.0;
  bool train = false;
  Rng* rng = nullptr;
  Shape shape;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;
};

template <class Real>
Tensor<Real> forward_primitive(Graph<Real>& g, Prim kind, const std::vector<Tensor<Real>>& in,
                               const PrimAttrs<Real>& attrs = {}) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n)
      fail("forward_primitive: kind expects " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
  };
  switch (kind) {
    case Prim::matmul: arity(2); return g.matmul(in[0], in[1]);
    case Prim::add: arity(2); return g.add(in[0], in[1]);
    case Prim::sub: arity(2); return g.sub(in[0], in[1]);
    case Prim::mul: arity(2); return g.mul(in[0], in[1]);
    case Prim::scalar_mul: arity(1); return g.scalar_mul(in[0], attrs.scalar);
    case Prim::concat: return g.concat(in, attrs.axis);
    case Prim::slice: arity(1); return g.slice(in[0], attrs.axis, attrs.begin, attrs.end);
    case Prim::transpose: arity(1); return g.transpose(in[0]);
    case Prim::softmax_rows: arity(1); return g.softmax_rows(in[0]);
    case Prim::log: arity(1); return g.log(in[0]);
    case Prim::exp: arity(1); return g.exp(in[0]);
    case Prim::sigmoid: arity(1); return g.sigmoid(in[0]);
    case Prim::relu: arity(1); return g.relu(in[0]);
    case Prim::prelu: arity(2); return g.prelu(in[0], in[1]);
    case Prim::tanh: arity(1); return g.tanh(in[0]);
    case Prim::layer_norm: arity(3); return g.layer_norm(in[0], in[1], in[2]);
    case Prim::mean_axis0: arity(1); return g.mean_axis0_masked(in[0], attrs.mask);
    case Prim::dropout:
      arity(1);
      if (!attrs.rng) fail("forward_primitive: dropout needs an rng attribute");
      return g.dropout(in[0], attrs.rate, *attrs.rng, attrs.train);
    case Prim::embedding_lookup: arity(1); return g.gather_rows(in[0], attrs.ids);
    case Prim::cross_entropy_logits: arity(1); return g.cross_entropy_logits(in[0], attrs.ids);
    case Prim::cosine: arity(2); return g.cosine(in[0], in[1]);
    case Prim::clamp: arity(1); return g.clamp(in[0], attrs.lo, attrs.hi);
    case Prim::reshape: arity(1); return g.reshape(in[0], attrs.shape);
  }
  fail("forward_primitive: unknown primitive kind " + std::to_string(static_cast<int>(kind)));
}

// Central-difference gradient check. `f` must build its computation from
// scratch on the graph it is handed; the probe mutates x in place and
// restores it. Returns the max over components of
// |analytic - central| / max(1e-8, |analytic| + |central|).
template <class Real, class F>
double finite_difference_check(F f, Tensor<Real> x, double epsilon) {
  x.set_requires_grad(true);
  x.clear_grad();
  Graph<Real> g;
  Tensor<Real> y = f(g, x);
  if (y.size() != 1) fail("finite_difference_check: f must return a scalar");
  g.backward(y);
  std::vector<Real> analytic = x.grad_or_zeros();

  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Real keep = x.value()[i];
    x.value_mut()[i] = keep + static_cast<Real>(epsilon);
    Graph<Real> gp(false);
    const double fp = static_cast<double>(f(gp, x).item());
    x.value_mut()[i] = keep - static_cast<Real>(epsilon);
    Graph<Real> gm(false);
    const double fm = static_cast<double>(f(gm, x).item());
    x.value_mut()[i] = keep;
    const double central = (fp - fm) / (2.0 * epsilon);
    const double an = static_cast<double>(analytic[i]);
    if (!std::isfinite(central) || !std::isfinite(an))
      fail("finite_difference_check: non-finite derivative at component " + std::to_string(i));
    const double rel = std::abs(an - central) / std::max(1e-8, std::abs(an) + std::abs(central));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace m4ser
