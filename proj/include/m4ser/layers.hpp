#pragma once

// Network building blocks. Parameter counts per block:
//   Linear(in, out)            in*out + out
//   LayerNorm(d)               2d
//   MultiHeadCrossAttention(d) 4*(d*d + d)
//   EncoderLayer(d, f)         MHA + 2*LayerNorm + Linear(d,f) + Linear(f,d)
//   DecoderLayer(d, f)         2*MHA + 3*LayerNorm + Linear(d,f) + Linear(f,d)
//   EmbeddingTable(v, L, d)    v*d + L*d
// Weights draw uniform from +-sqrt(6 / (fan_in + fan_out)), biases start at
// zero, layer-norm gains at one, prelu slopes at 0.25.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "m4ser/tensor.hpp"

namespace m4ser {

template <class Real>
struct ParamMap {
  std::vector<std::pair<std::string, Tensor<Real>>> items;

  void add(const std::string& name, const Tensor<Real>& t) {
    for (const auto& [n, _] : items)
      if (n == name) fail("ParamMap: duplicate parameter name " + name);
    items.emplace_back(name, t);
  }

  void merge(const ParamMap& other) {
    for (const auto& [n, t] : other.items) add(n, t);
  }

  std::vector<Tensor<Real>> tensors() const {
    std::vector<Tensor<Real>> out;
    out.reserve(items.size());
    for (const auto& [_, t] : items) out.push_back(t);
    return out;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [_, t] : items) n += t.size();
    return n;
  }

  std::uint64_t value_hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& [name, t] : items) {
      h = hash_bytes(name.data(), name.size(), h);
      h = hash_bytes(t.value().data(), t.value().size() * sizeof(Real), h);
    }
    return h;
  }
};

// Bundles the per-pass state every forward needs: the recording graph, the
// dropout source and whether stochastic regularization is live.
template <class Real>
struct Runtime {
  Graph<Real>& g;
  Rng& rng;
  bool train = false;
  double dropout_rate = 0.0;

  Tensor<Real> drop(const Tensor<Real>& x) { return g.dropout(x, dropout_rate, rng, train); }
};

template <class Real>
Tensor<Real> glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return Tensor<Real>::randu(std::move(shape), rng, -bound, bound, true);
}

template <class Real>
struct Linear {
  Tensor<Real> w, b;  // w is [in x out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : w(glorot<Real>({in, out}, in, out, rng)), b(Tensor<Real>::zeros({out}, true)) {}

  Tensor<Real> forward(Graph<Real>& g, const Tensor<Real>& x) const { return g.add(g.matmul(x, w), b); }

  void collect(const std::string& prefix, ParamMap<Real>& out) const {
    out.add(prefix + ".w", w);
    out.add(prefix + ".b", b);
  }

  static std::size_t param_count(std::size_t in, std::size_t out) { return in * out + out; }
};

template <class Real>
struct LayerNorm {
  Tensor<Real> gain, bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d)
      : gain(Tensor<Real>::full({d}, Real(1), true)), bias(Tensor<Real>::zeros({d}, true)) {}

  Tensor<Real> forward(Graph<Real>& g, const Tensor<Real>& x) const { return g.layer_norm(x, gain, bias); }

  void collect(const std::string& prefix, ParamMap<Real>& out) const {
    out.add(prefix + ".gain", gain);
    out.add(prefix + ".bias", bias);
  }

  static std::size_t param_count(std::size_t d) { return 2 * d; }
};

// Learned token plus learned absolute position embeddings.
template <class Real>
struct EmbeddingTable {
  Tensor<Real> tokens;     // [vocab x d]
  Tensor<Real> positions;  // [max_len x d]
  std::size_t vocab = 0, max_len = 0, d = 0;

  EmbeddingTable() = default;
  EmbeddingTable(std::size_t vocab_, std::size_t max_len_, std::size_t d_, Rng& rng)
      : tokens(glorot<Real>({vocab_, d_}, vocab_, d_, rng)),
        positions(glorot<Real>({max_len_, d_}, max_len_, d_, rng)),
        vocab(vocab_),
        max_len(max_len_),
        d(d_) {}

  Tensor<Real> embed(Graph<Real>& g, const std::vector<std::int32_t>& ids) const {
    if (ids.empty()) fail("EmbeddingTable::embed: empty id sequence");
    if (ids.size() > max_len)
      fail("EmbeddingTable::embed: sequence length " + std::to_string(ids.size()) +
           " exceeds max position " + std::to_string(max_len));
    auto tok = g.gather_rows(tokens, ids);
    auto pos = g.slice(positions, 0, 0, ids.size());
    return g.add(tok, pos);
  }

  void collect(const std::string& prefix, ParamMap<Real>& out) const {
    out.add(prefix + ".tokens", tokens);
    out.add(prefix + ".positions", positions);
  }

  static std::size_t param_count(std::size_t vocab, std::size_t max_len, std::size_t d) {
    return vocab * d + max_len * d;
  }
};

// Scaled dot-product attention with h heads carved out of shared [d x d]
// projections; scores scale by 1/sqrt(d/h). Masked and causally-forbidden
// keys receive -1e30 before the softmax, which zeroes their weight exactly.
template <class Real>
struct MultiHeadCrossAttention {
  std::size_t d = 0, heads = 0;
  Linear<Real> q_proj, k_proj, v_proj, out_proj;

  MultiHeadCrossAttention() = default;
  MultiHeadCrossAttention(std::size_t d_, std::size_t heads_, Rng& rng)
      : d(d_), heads(heads_), q_proj(d_, d_, rng), k_proj(d_, d_, rng), v_proj(d_, d_, rng),
        out_proj(d_, d_, rng) {
    if (heads == 0 || d % heads != 0)
      fail("MultiHeadCrossAttention: head count " + std::to_string(heads_) + " must divide width " +
           std::to_string(d_));
  }

  Tensor<Real> forward(Graph<Real>& g, const Tensor<Real>& query, const Tensor<Real>& keys,
                       const Tensor<Real>& values, const std::vector<std::uint8_t>& key_valid = {},
                       bool causal = false) const {
    if (query.rank() != 2 || query.shape()[1] != d)
      fail("cross_attention: query shape " + shape_str(query.shape()) + " does not match width " +
           std::to_string(d));
    if (keys.rank() != 2 || keys.shape()[1] != d || values.shape() != keys.shape())
      fail("cross_attention: key/value shapes " + shape_str(keys.shape()) + " and " +
           shape_str(values.shape()) + " must agree and match width " + std::to_string(d));
    const std::size_t lq = query.shape()[0], lk = keys.shape()[0];
    if (lk == 0) fail("cross_attention: empty key sequence");
    if (!key_valid.empty() && key_valid.size() != lk)
      fail("cross_attention: key mask length " + std::to_string(key_valid.size()) + " does not match " +
           std::to_string(lk) + " keys");

    Tensor<Real> bias;
    if (!key_valid.empty() || causal) {
      std::vector<Real> m(lq * lk, Real(0));
      for (std::size_t i = 0; i < lq; ++i) {
        bool any = false;
        for (std::size_t j = 0; j < lk; ++j) {
          const bool masked = (!key_valid.empty() && !key_valid[j]) || (causal && j > i);
          if (masked)
            m[i * lk + j] = Real(-1e30);
          else
            any = true;
        }
        if (!any)
          fail("cross_attention: all keys masked for query row " + std::to_string(i));
      }
      bias = Tensor<Real>::leaf({lq, lk}, std::move(m));
    }

    auto q = q_proj.forward(g, query);
    auto k = k_proj.forward(g, keys);
    auto v = v_proj.forward(g, values);
    const std::size_t dh = d / heads;
    const Real scale = Real(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<Tensor<Real>> ctx;
    ctx.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      auto qh = g.slice(q, 1, h * dh, (h + 1) * dh);
      auto kh = g.slice(k, 1, h * dh, (h + 1) * dh);
      auto vh = g.slice(v, 1, h * dh, (h + 1) * dh);
      auto scores = g.scalar_mul(g.matmul(qh, g.transpose(kh)), scale);
      if (bias.defined()) scores = g.add(scores, bias);
      auto weights = g.softmax_rows(scores);
      ctx.push_back(g.matmul(weights, vh));
    }
    return out_proj.forward(g, heads == 1 ? ctx[0] : g.concat(ctx, 1));
  }

  void collect(const std::string& prefix, ParamMap<Real>& out) const {
    q_proj.collect(prefix + ".q", out);
    k_proj.collect(prefix + ".k", out);
    v_proj.collect(prefix + ".v", out);
    out_proj.collect(prefix + ".out", out);
  }

  static std::size_t param_count(std::size_t d) { return 4 * (d * d + d); }
};

template <class Real>
struct FeedForward {
  Linear<Real> lift, lower;

  FeedForward() = default;
  FeedForward(std::size_t d, std::size_t hidden, Rng& rng) : lift(d, hidden, rng), lower(hidden, d, rng) {}

  Tensor<Real> forward(Graph<Real>& g, const Tensor<Real>& x) const {
    return lower.forward(g, g.relu(lift.forward(g, x)));
  }

  void collect(const std::string& prefix, ParamMap<Real>& out) const {
    lift.collect(prefix + ".lift", out);
    lower.collect(prefix + ".lower", out);
  }

  static std::size_t param_count(std::size_t d, std::size_t hidden) {
    return Linear<Real>::param_count(d, hidden) + Linear<Real>::param_count(hidden, d);
  }
};

// Post-norm residual encoder layer: self-attention then position-wise feed
// forward, each followed by add-and-norm.
template <class Real>
struct TransformerEncoderLayer {
  MultiHeadCrossAttention<Real> self_attn;
  FeedForward<Real> ff;
  LayerNorm<Real> norm1, norm2;

  TransformerEncoderLayer() = default;
  TransformerEncoderLayer(std::size_t d, std::size_t heads, std::size_t ff_hidden, Rng& rng)
      : self_attn(d, heads, rng), ff(d, ff_hidden, rng), norm1(d), norm2(d) {}

  Tensor<Real> forward(Runtime<Real>& rt, const Tensor<Real>& x,
                       const std::vector<std::uint8_t>& valid = {}) const {
    auto a = self_attn.forward(rt.g, x, x, x, valid, false);
    auto x1 = norm1.forward(rt.g, rt.g.add(x, rt.drop(a)));
    auto f = ff.forward(rt.g, x1);
    return norm2.forward(rt.g, rt.g.add(x1, rt.drop(f)));
  }

  void collect(const std::string& prefix, ParamMap<Real>& out) const {
    self_attn.collect(prefix + ".attn", out);
    ff.collect(prefix + ".ff", out);
    norm1.collect(prefix + ".norm1", out);
    norm2.collect(prefix + ".norm2", out);
  }

  static std::size_t param_count(std::size_t d, std::size_t ff_hidden) {
    return MultiHeadCrossAttention<Real>::param_count(d) + FeedForward<Real>::param_count(d, ff_hidden) +
           2 * LayerNorm<Real>::param_count(d);
  }
};

// Decoder layer: causal self-attention, cross-attention over the memory, feed
// forward; three add-and-norm stages.
template <class Real>
struct TransformerDecoderLayer {
  MultiHeadCrossAttention<Real> self_attn, cross_attn;
  FeedForward<Real> ff;
  LayerNorm<Real> norm1, norm2, norm3;

  TransformerDecoderLayer() = default;
  TransformerDecoderLayer(std::size_t d, std::size_t heads, std::size_t ff_hidden, Rng& rng)
      : self_attn(d, heads, rng), cross_attn(d, heads, rng), ff(d, ff_hidden, rng), norm1(d), norm2(d),
        norm3(d) {}

  Tensor<Real> forward(Runtime<Real>& rt, const Tensor<Real>& targets, const Tensor<Real>& memory,
                       const std::vector<std::uint8_t>& memory_valid = {}) const {
    if (!memory.defined() || memory.rank() != 2 || memory.shape()[0] == 0)
      fail("decoder: memory must be a non-empty rank-2 tensor");
    auto a = self_attn.forward(rt.g, targets, targets, targets, {}, true);
    auto y1 = norm1.forward(rt.g, rt.g.add(targets, rt.drop(a)));
    auto c = cross_attn.forward(rt.g, y1, memory, memory, memory_valid, false);
    auto y2 = norm2.forward(rt.g, rt.g.add(y1, rt.drop(c)));
    auto f = ff.forward(rt.g, y2);
    return norm3.forward(rt.g, rt.g.add(y2, rt.drop(f)));
  }

  void collect(const std::string& prefix, ParamMap<Real>& out) const {
    self_attn.collect(prefix + ".self", out);
    cross_attn.collect(prefix + ".cross", out);
    ff.collect(prefix + ".ff", out);
    norm1.collect(prefix + ".norm1", out);
    norm2.collect(prefix + ".norm2", out);
    norm3.collect(prefix + ".norm3", out);
  }

  static std::size_t param_count(std::size_t d, std::size_t ff_hidden) {
    return 2 * MultiHeadCrossAttention<Real>::param_count(d) +
           FeedForward<Real>::param_count(d, ff_hidden) + 3 * LayerNorm<Real>::param_count(d);
  }
};

}  // namespace m4ser
