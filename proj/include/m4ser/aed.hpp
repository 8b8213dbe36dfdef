#pragma once

// ASR error detection: a linear head over per-token text representations
// predicting {keep, delete, change}, with its token-level loss.

#include <cstdint>
#include <vector>

#include "m4ser/align.hpp"
#include "m4ser/layers.hpp"

namespace m4ser {

enum class AedReduction { mean, sum };

template <class Real>
struct AedHead {
  Linear<Real> proj;  // [d -> 3]

  AedHead() = default;
  AedHead(std::size_t d, Rng& rng) : proj(d, 3, rng) {}

  Tensor<Real> logits(Graph<Real>& g, const Tensor<Real>& text_repr) const {
    return proj.forward(g, text_repr);
  }

  Tensor<Real> probs(Graph<Real>& g, const Tensor<Real>& text_repr) const {
    return g.softmax_rows(logits(g, text_repr));
  }

  void collect(const std::string& prefix, ParamMap<Real>& out) const { proj.collect(prefix + ".proj", out); }
};

inline std::vector<std::int32_t> edit_labels_to_targets(const std::vector<EditLabel>& labels) {
  std::vector<std::int32_t> t(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) t[i] = static_cast<std::int32_t>(labels[i]);
  return t;
}

// Negative log-likelihood of the true edit labels; logits may concatenate
// several utterances, with labels matching row for row.
template <class Real>
Tensor<Real> aed_loss(Graph<Real>& g, const Tensor<Real>& logits, const std::vector<EditLabel>& labels,
                      AedReduction reduction = AedReduction::mean) {
  if (logits.rank() != 2 || logits.shape()[1] != 3)
    fail("aed_loss: logits must be [n x 3], got " + shape_str(logits.shape()));
  if (labels.size() != logits.shape()[0])
    fail("aed_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(logits.shape()[0]) +
         " rows");
  auto per_token = g.cross_entropy_logits(logits, edit_labels_to_targets(labels));
  auto mean = g.mean_axis0(per_token);
  if (reduction == AedReduction::sum) return g.scalar_mul(mean, static_cast<Real>(labels.size()));
  return mean;
}

}  // namespace m4ser
