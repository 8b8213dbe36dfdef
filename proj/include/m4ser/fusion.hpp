#pragma once

// Cross-modal fusion. Three cross-modality encoder blocks carve out
// modality-specific representations, a joint projection plus two gated
// hybrid-modal attention branches feed the invariant-representation
// generator, and the fused output is the time-axis concatenation
// (speech-specific, text-specific, invariant), pooled for classification.

#include <cassert>
#include <cstdint>
#include <vector>

#include "m4ser/layers.hpp"

namespace m4ser {

// Cross-attention with residual on the query stream, then feed-forward, each
// followed by add-and-norm.
template <class Real>
struct CmeBlock {
  MultiHeadCrossAttention<Real> attn;
  FeedForward<Real> ff;
  LayerNorm<Real> norm1, norm2;

  CmeBlock() = default;
  CmeBlock(std::size_t d, std::size_t heads, std::size_t ff_hidden, Rng& rng)
      : attn(d, heads, rng), ff(d, ff_hidden, rng), norm1(d), norm2(d) {}

  Tensor<Real> forward(Runtime<Real>& rt, const Tensor<Real>& query, const Tensor<Real>& kv,
                       const std::vector<std::uint8_t>& kv_valid = {}) const {
    auto a = attn.forward(rt.g, query, kv, kv, kv_valid, false);
    auto x1 = norm1.forward(rt.g, rt.g.add(query, rt.drop(a)));
    auto f = ff.forward(rt.g, x1);
    return norm2.forward(rt.g, rt.g.add(x1, rt.drop(f)));
  }

  void collect(const std::string& prefix, ParamMap<Real>& out) const {
    attn.collect(prefix + ".attn", out);
    ff.collect(prefix + ".ff", out);
    norm1.collect(prefix + ".norm1", out);
    norm2.collect(prefix + ".norm2", out);
  }

  static std::size_t param_count(std::size_t d, std::size_t ff_hidden) {
    return TransformerEncoderLayer<Real>::param_count(d, ff_hidden);
  }
};

// Shared-information extractor: the joint representation attends into one
// modality-specific stream, and a learned sigmoid gate (1x1 convolution over
// the feature concat) filters the result frame by frame.
template <class Real>
struct HybridModalAttention {
  MultiHeadCrossAttention<Real> attn;
  Linear<Real> gate;  // [2d -> d]

  HybridModalAttention() = default;
  HybridModalAttention(std::size_t d, std::size_t heads, Rng& rng)
      : attn(d, heads, rng), gate(2 * d, d, rng) {}

  struct Out {
    Tensor<Real> shared;  // [m x d]
    Tensor<Real> gated;   // [m x d]
  };

  Out forward(Runtime<Real>& rt, const Tensor<Real>& specific, const Tensor<Real>& joint) const {
    auto& g = rt.g;
    auto shared = attn.forward(g, joint, specific, specific);
    auto gate_v = g.sigmoid(gate.forward(g, g.concat({specific, joint}, 1)));
    return {shared, g.mul(shared, gate_v)};
  }

  void collect(const std::string& prefix, ParamMap<Real>& out) const {
    attn.collect(prefix + ".attn", out);
    gate.collect(prefix + ".gate", out);
  }

  static std::size_t param_count(std::size_t d) {
    return MultiHeadCrossAttention<Real>::param_count(d) + Linear<Real>::param_count(2 * d, d);
  }
};

// Invariant-representation generator: joint plus one 1x1-conv-PReLU branch
// per modality, layer-normed.
template <class Real>
struct MirGenerator {
  Linear<Real> conv_speech, conv_text;  // [d -> d]
  Tensor<Real> slope_speech, slope_text;
  LayerNorm<Real> norm;

  MirGenerator() = default;
  MirGenerator(std::size_t d, Rng& rng)
      : conv_speech(d, d, rng), conv_text(d, d, rng),
        slope_speech(Tensor<Real>::full({1}, Real(0.25), true)),
        slope_text(Tensor<Real>::full({1}, Real(0.25), true)), norm(d) {}

  Tensor<Real> forward(Graph<Real>& g, const Tensor<Real>& joint, const Tensor<Real>& speech_gated,
                       const Tensor<Real>& text_gated) const {
    auto bs = g.prelu(conv_speech.forward(g, speech_gated), slope_speech);
    auto bt = g.prelu(conv_text.forward(g, text_gated), slope_text);
    return norm.forward(g, g.add(g.add(joint, bs), bt));
  }

  void collect(const std::string& prefix, ParamMap<Real>& out) const {
    conv_speech.collect(prefix + ".conv_s", out);
    conv_text.collect(prefix + ".conv_t", out);
    out.add(prefix + ".slope_s", slope_speech);
    out.add(prefix + ".slope_t", slope_text);
    norm.collect(prefix + ".norm", out);
  }

  static std::size_t param_count(std::size_t d) {
    return 2 * Linear<Real>::param_count(d, d) + 2 + LayerNorm<Real>::param_count(d);
  }
};

// Every intermediate the fusion pass produces, kept for the auxiliary losses
// and for inspection in tests.
template <class Real>
struct FusionOutputs {
  Tensor<Real> speech;           // [m x d] acoustic encoder output
  Tensor<Real> text;             // [n x d] text encoder output
  Tensor<Real> speech_by_token;  // [n x d] speech content viewed per token
  Tensor<Real> speech_specific;  // [m x d]
  Tensor<Real> text_specific;    // [m x d]
  Tensor<Real> joint_raw;        // [m x 2d] resampled-text feature concat
  Tensor<Real> joint;            // [m x d]
  Tensor<Real> speech_shared, text_shared;  // [m x d]
  Tensor<Real> speech_gated, text_gated;    // [m x d]
  Tensor<Real> invariant;        // [m x d]
  Tensor<Real> fused;            // [3m x d] (speech_specific, text_specific, invariant)
  Tensor<Real> pooled;           // [d] mask-aware time average of fused
  std::vector<std::uint8_t> frame_valid;    // [m]
};

// Nearest-index time resampling: row i of the m-frame output reads row
// floor(i*n/m) of the n-row input.
inline std::vector<std::int32_t> resample_indices(std::size_t m, std::size_t n) {
  if (m == 0 || n == 0) fail("resample_indices: empty axis");
  std::vector<std::int32_t> ids(m);
  for (std::size_t i = 0; i < m; ++i) ids[i] = static_cast<std::int32_t>(i * n / m);
  return ids;
}

template <class Real>
struct FusionModule {
  std::size_t d = 0;
  CmeBlock<Real> cme_speech_by_token;  // q = text, kv = speech
  CmeBlock<Real> cme_speech_specific;  // q = speech, kv = speech_by_token
  CmeBlock<Real> cme_text_specific;    // q = speech, kv = text
  Linear<Real> joint_proj;             // [2d -> d], shared by both HMA branches
  HybridModalAttention<Real> hma_speech, hma_text;
  MirGenerator<Real> mir;

  FusionModule() = default;
  FusionModule(std::size_t d_, std::size_t heads, std::size_t ff_hidden, Rng& rng)
      : d(d_), cme_speech_by_token(d_, heads, ff_hidden, rng),
        cme_speech_specific(d_, heads, ff_hidden, rng), cme_text_specific(d_, heads, ff_hidden, rng),
        joint_proj(2 * d_, d_, rng), hma_speech(d_, heads, rng), hma_text(d_, heads, rng),
        mir(d_, rng) {}

  FusionOutputs<Real> forward(Runtime<Real>& rt, const Tensor<Real>& speech, const Tensor<Real>& text,
                              const std::vector<std::uint8_t>& frame_valid = {}) const {
    auto& g = rt.g;
    if (speech.rank() != 2 || speech.shape()[1] != d)
      fail("fusion: speech shape " + shape_str(speech.shape()) + " does not match width " + std::to_string(d));
    if (text.rank() != 2 || text.shape()[1] != d)
      fail("fusion: text shape " + shape_str(text.shape()) + " does not match width " + std::to_string(d));
    const std::size_t m = speech.shape()[0], n = text.shape()[0];
    if (!frame_valid.empty() && frame_valid.size() != m)
      fail("fusion: frame mask length " + std::to_string(frame_valid.size()) + " does not match " +
           std::to_string(m) + " frames");

    FusionOutputs<Real> out;
    out.speech = speech;
    out.text = text;
    out.frame_valid = frame_valid.empty() ? std::vector<std::uint8_t>(m, 1) : frame_valid;

    out.speech_by_token = cme_speech_by_token.forward(rt, text, speech, frame_valid);
    out.speech_specific = cme_speech_specific.forward(rt, speech, out.speech_by_token);
    out.text_specific = cme_text_specific.forward(rt, speech, text);
    assert(out.speech_by_token.shape() == (Shape{n, d}));
    assert(out.speech_specific.shape() == (Shape{m, d}));
    assert(out.text_specific.shape() == (Shape{m, d}));

    auto text_resampled = g.gather_rows(text, resample_indices(m, n));
    out.joint_raw = g.concat({speech, text_resampled}, 1);
    out.joint = joint_proj.forward(g, out.joint_raw);
    assert(out.joint_raw.shape() == (Shape{m, 2 * d}));
    assert(out.joint.shape() == (Shape{m, d}));

    auto hs = hma_speech.forward(rt, out.speech_specific, out.joint);
    auto ht = hma_text.forward(rt, out.text_specific, out.joint);
    out.speech_shared = hs.shared;
    out.speech_gated = hs.gated;
    out.text_shared = ht.shared;
    out.text_gated = ht.gated;

    out.invariant = mir.forward(g, out.joint, out.speech_gated, out.text_gated);
    out.fused = g.concat({out.speech_specific, out.text_specific, out.invariant}, 0);
    assert(out.invariant.shape() == (Shape{m, d}));
    assert(out.fused.shape() == (Shape{3 * m, d}));

    std::vector<std::uint8_t> fused_valid;
    fused_valid.reserve(3 * m);
    for (int rep = 0; rep < 3; ++rep)
      fused_valid.insert(fused_valid.end(), out.frame_valid.begin(), out.frame_valid.end());
    out.pooled = g.mean_axis0_masked(out.fused, fused_valid);
    assert(out.pooled.shape() == (Shape{d}));
    return out;
  }

  void collect(const std::string& prefix, ParamMap<Real>& out) const {
    cme_speech_by_token.collect(prefix + ".cme_tok", out);
    cme_speech_specific.collect(prefix + ".cme_speech", out);
    cme_text_specific.collect(prefix + ".cme_text", out);
    joint_proj.collect(prefix + ".joint", out);
    hma_speech.collect(prefix + ".hma_speech", out);
    hma_text.collect(prefix + ".hma_text", out);
    mir.collect(prefix + ".mir", out);
  }

  static std::size_t param_count(std::size_t d, std::size_t ff_hidden) {
    return 3 * CmeBlock<Real>::param_count(d, ff_hidden) + Linear<Real>::param_count(2 * d, d) +
           2 * HybridModalAttention<Real>::param_count(d) + MirGenerator<Real>::param_count(d);
  }
};

}  // namespace m4ser
