#pragma once

// ASR error correction: a partially autoregressive decoder that generates a
// replacement span for each CHANGE-labeled token, conditioned on that token's
// text representation and attending over the full text memory. Token
// embeddings are shared with the text encoder.

#include <cstdint>
#include <vector>

#include "m4ser/align.hpp"
#include "m4ser/layers.hpp"

namespace m4ser {

template <class Real>
struct AecDecoder {
  const EmbeddingTable<Real>* table = nullptr;  // owned by the text encoder
  Linear<Real> input_proj;                      // [2d -> d]
  std::vector<TransformerDecoderLayer<Real>> layers;
  Linear<Real> out_proj;                        // [d -> vocab]

  AecDecoder() = default;
  AecDecoder(const EmbeddingTable<Real>* table_, std::size_t d, std::size_t vocab, std::size_t n_layers,
             std::size_t heads, std::size_t ff_hidden, Rng& rng)
      : table(table_), input_proj(2 * d, d, rng), out_proj(d, vocab, rng) {
    if (!table_) fail("AecDecoder: embedding table required");
    layers.reserve(n_layers);
    for (std::size_t i = 0; i < n_layers; ++i) layers.emplace_back(d, heads, ff_hidden, rng);
  }

  // Prefix rows: (token + position embedding) of each prefix id, feature-
  // concatenated with the conditioning row repeated per position, projected
  // back to width d.
  Tensor<Real> build_inputs(Graph<Real>& g, const TokenSeq& prefix, const Tensor<Real>& cond_row) const {
    if (prefix.empty()) fail("AecDecoder: empty prefix");
    if (cond_row.rank() != 2 || cond_row.shape()[0] != 1)
      fail("AecDecoder: conditioning row must be [1 x d], got " + shape_str(cond_row.shape()));
    auto emb = table->embed(g, prefix);
    auto rep = g.matmul(Tensor<Real>::full({prefix.size(), std::size_t(1)}, Real(1)), cond_row);
    return input_proj.forward(g, g.concat({emb, rep}, 1));
  }

  Tensor<Real> decode(Runtime<Real>& rt, const TokenSeq& prefix, const Tensor<Real>& cond_row,
                      const Tensor<Real>& memory) const {
    auto x = build_inputs(rt.g, prefix, cond_row);
    for (const auto& layer : layers) x = layer.forward(rt, x, memory);
    return out_proj.forward(rt.g, x);
  }

  // Teacher-forced logits for one correction task: the prefix is BOS followed
  // by the target minus its terminator; one logit row per target token.
  Tensor<Real> teacher_logits(Runtime<Real>& rt, const TokenSeq& target, const Tensor<Real>& cond_row,
                              const Tensor<Real>& memory) const {
    if (target.empty() || target.back() != kEosId)
      fail("AecDecoder: target must be non-empty and end with the end-of-sequence id");
    TokenSeq prefix;
    prefix.reserve(target.size());
    prefix.push_back(kBosId);
    prefix.insert(prefix.end(), target.begin(), target.end() - 1);
    return decode(rt, prefix, cond_row, memory);
  }

  // Greedy span generation: argmax over content-or-EOS ids each step, stop on
  // EOS or after max_len emitted tokens. Never emits pad or BOS.
  TokenSeq greedy_span(Runtime<Real>& rt, const Tensor<Real>& cond_row, const Tensor<Real>& memory,
                       std::size_t max_len) const {
    if (max_len == 0) fail("AecDecoder: max_len must be positive");
    TokenSeq prefix{kBosId};
    TokenSeq out;
    const std::size_t vocab = out_proj.w.shape()[1];
    while (out.size() < max_len) {
      auto logits = decode(rt, prefix, cond_row, memory);
      const std::size_t last = logits.shape()[0] - 1;
      const Real* row = logits.value().data() + last * vocab;
      std::int32_t best = kEosId;
      for (std::size_t j = kEosId; j < vocab; ++j)
        if (row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<std::int32_t>(j);
      if (best == kEosId) break;
      out.push_back(best);
      prefix.push_back(best);
    }
    return out;
  }

  void collect(const std::string& prefix, ParamMap<Real>& out) const {
    input_proj.collect(prefix + ".input", out);
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].collect(prefix + ".layer" + std::to_string(i), out);
    out_proj.collect(prefix + ".out", out);
  }
};

// Mean over all (task, step) pairs of the teacher-forced negative
// log-likelihood; an empty task list contributes a constant zero.
template <class Real>
Tensor<Real> aec_loss(Graph<Real>& g, const std::vector<Tensor<Real>>& task_logits,
                      const std::vector<TokenSeq>& task_targets) {
  if (task_logits.size() != task_targets.size())
    fail("aec_loss: " + std::to_string(task_logits.size()) + " logit blocks for " +
         std::to_string(task_targets.size()) + " targets");
  if (task_logits.empty()) return Tensor<Real>::zeros({});
  std::vector<Tensor<Real>> per_step;
  per_step.reserve(task_logits.size());
  for (std::size_t t = 0; t < task_logits.size(); ++t) {
    if (task_logits[t].shape()[0] != task_targets[t].size())
      fail("aec_loss: task " + std::to_string(t) + " has " + std::to_string(task_logits[t].shape()[0]) +
           " logit rows for " + std::to_string(task_targets[t].size()) + " target tokens");
    per_step.push_back(g.cross_entropy_logits(task_logits[t], task_targets[t]));
  }
  auto all = per_step.size() == 1 ? per_step[0] : g.concat(per_step, 0);
  return g.mean_axis0(all);
}

// Applies detection-gated correction to one utterance: keep, drop, or replace
// each token by the greedily decoded span at its position.
template <class Real>
TokenSeq greedy_correct(Runtime<Real>& rt, const AecDecoder<Real>& dec, const TokenSeq& tokens,
                        const Tensor<Real>& text_repr, const std::vector<EditLabel>& labels,
                        std::size_t max_len) {
  if (labels.size() != tokens.size())
    fail("greedy_correct: " + std::to_string(labels.size()) + " labels for " + std::to_string(tokens.size()) +
         " tokens");
  if (text_repr.rank() != 2 || text_repr.shape()[0] != tokens.size())
    fail("greedy_correct: text representation shape " + shape_str(text_repr.shape()) + " does not cover " +
         std::to_string(tokens.size()) + " tokens");
  TokenSeq out;
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    switch (labels[k]) {
      case EditLabel::Keep:
        out.push_back(tokens[k]);
        break;
      case EditLabel::Delete:
        break;
      case EditLabel::Change: {
        auto row = rt.g.slice(text_repr, 0, k, k + 1);
        auto span = dec.greedy_span(rt, row, text_repr, max_len);
        out.insert(out.end(), span.begin(), span.end());
        break;
      }
    }
  }
  return out;
}

}  // namespace m4ser
