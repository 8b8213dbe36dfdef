#pragma once

// Output heads: the emotion classifier over the pooled fused representation
// and the per-frame modality discriminator.

#include <cstdint>
#include <vector>

#include "m4ser/layers.hpp"

namespace m4ser {

template <class Real>
struct EmotionHead {
  Linear<Real> proj;  // [d -> e]
  std::size_t classes = 0;

  EmotionHead() = default;
  EmotionHead(std::size_t d, std::size_t classes_, Rng& rng) : proj(d, classes_, rng), classes(classes_) {}

  // pooled is the [d] time-average; returns a [1 x e] probability row.
  Tensor<Real> probs_row(Graph<Real>& g, const Tensor<Real>& pooled) const {
    if (pooled.rank() != 1) fail("EmotionHead: pooled input must be rank 1, got " + shape_str(pooled.shape()));
    auto row = g.reshape(pooled, {std::size_t(1), pooled.shape()[0]});
    return g.softmax_rows(proj.forward(g, row));
  }

  Tensor<Real> logits_row(Graph<Real>& g, const Tensor<Real>& pooled) const {
    auto row = g.reshape(pooled, {std::size_t(1), pooled.shape()[0]});
    return proj.forward(g, row);
  }

  void collect(const std::string& prefix, ParamMap<Real>& out) const { proj.collect(prefix + ".proj", out); }
};

template <class Real>
int argmax_index(const std::vector<Real>& v) {
  if (v.empty()) fail("argmax_index: empty vector");
  int best = 0;
  for (std::size_t j = 1; j < v.size(); ++j)
    if (v[j] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
  return best;
}

// Two linear layers with a ReLU between, sigmoid output per frame, clamped
// away from {0, 1} so downstream logs stay finite.
template <class Real>
struct ModalityDiscriminator {
  Linear<Real> hidden, out;

  ModalityDiscriminator() = default;
  ModalityDiscriminator(std::size_t d, std::size_t d_hidden, Rng& rng)
      : hidden(d, d_hidden, rng), out(d_hidden, 1, rng) {}

  // frames [m x d] -> clamped scores [m x 1].
  Tensor<Real> score(Graph<Real>& g, const Tensor<Real>& frames) const {
    auto s = g.sigmoid(out.forward(g, g.relu(hidden.forward(g, frames))));
    return g.clamp(s, Real(1e-6), Real(1) - Real(1e-6));
  }

  void collect(const std::string& prefix, ParamMap<Real>& out_map) const {
    hidden.collect(prefix + ".hidden", out_map);
    out.collect(prefix + ".out", out_map);
  }

  static std::size_t param_count(std::size_t d, std::size_t d_hidden) {
    return Linear<Real>::param_count(d, d_hidden) + Linear<Real>::param_count(d_hidden, 1);
  }
};

}  // namespace m4ser
