#pragma once

// Full model assembly: both encoders, the fusion stack, the task heads and
// the modality discriminator, plus the per-item and per-batch forward passes
// that produce every training signal. The correction decoder reads token and
// position embeddings from the text encoder's table; those weights are
// registered once, under the text prefix.

#include <cstdint>
#include <string>
#include <vector>

#include "m4ser/aec.hpp"
#include "m4ser/aed.hpp"
#include "m4ser/data.hpp"
#include "m4ser/encoders.hpp"
#include "m4ser/fusion.hpp"
#include "m4ser/heads.hpp"
#include "m4ser/layers.hpp"

namespace m4ser {

enum class Modality { both, speech, text };

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::both: return "both";
    case Modality::speech: return "speech";
    case Modality::text: return "text";
  }
  fail("modality_name: unknown value");
}

inline Modality parse_modality(const std::string& s) {
  if (s == "both") return Modality::both;
  if (s == "speech") return Modality::speech;
  if (s == "text") return Modality::text;
  fail("modality must be one of both/speech/text, got '" + s + "'");
}

struct ModelConfig {
  std::size_t d = 32;
  std::size_t d_vocab = 64;
  std::size_t attention_layers = 2;
  std::size_t attention_heads = 4;
  std::size_t ff_mult = 4;
  std::size_t num_classes = 4;
  std::size_t feat_dim = 16;
  std::size_t conv_stride = 2;
  std::size_t max_len = 512;
  std::size_t disc_hidden = 16;  // 0 means "same as d"
  std::size_t max_correction_len = 8;
  double dropout = 0.5;
  Modality modality = Modality::both;

  std::size_t disc_width() const { return disc_hidden == 0 ? d : disc_hidden; }

  void validate() const {
    if (d == 0 || attention_heads == 0 || d % attention_heads != 0)
      fail("ModelConfig: width " + std::to_string(d) + " must be a positive multiple of " +
           std::to_string(attention_heads) + " heads");
    if (attention_layers == 0) fail("ModelConfig: need at least one attention layer");
    if (ff_mult == 0) fail("ModelConfig: feed-forward multiplier must be positive");
    if (num_classes < 2) fail("ModelConfig: need at least two emotion classes");
    if (d_vocab < static_cast<std::size_t>(kFirstContentId) + 1)
      fail("ModelConfig: vocab " + std::to_string(d_vocab) + " leaves no room for content tokens");
    if (feat_dim == 0) fail("ModelConfig: feature dimension must be positive");
    if (conv_stride == 0) fail("ModelConfig: stride must be positive");
    if (max_len == 0) fail("ModelConfig: max length must be positive");
    if (max_correction_len == 0) fail("ModelConfig: correction cap must be positive");
    if (dropout < 0.0 || dropout >= 1.0) fail("ModelConfig: dropout must lie in [0, 1)");
  }
};

template <class Real>
Tensor<Real> feature_tensor(const FeatureMatrix& m) {
  if (m.rows == 0 || m.cols == 0) fail("feature_tensor: empty feature matrix");
  std::vector<Real> v(m.data.begin(), m.data.end());
  return Tensor<Real>::leaf({m.rows, m.cols}, std::move(v));
}

// One utterance's activations. Fusion fields are populated only in the
// two-modality configuration; single-modality runs pool the lone encoder.
template <class Real>
struct ItemForward {
  Tensor<Real> speech_repr;  // [m x d]
  Tensor<Real> text_repr;    // [n x d]
  FusionOutputs<Real> fusion;
  Tensor<Real> pooled;  // [d]
  Tensor<Real> probs;   // [1 x e]
};

template <class Real>
struct BatchForward {
  std::vector<ItemForward<Real>> items;
  Tensor<Real> probs;                // [B x e]
  std::vector<Tensor<Real>> pooled;  // per item, [d]

  // frame concatenations across the batch, two-modality runs only
  Tensor<Real> speech_specific, text_specific, invariant;

  Tensor<Real> aed_logits;  // [sum n_i x 3]
  std::vector<EditLabel> aed_labels;
  std::vector<Tensor<Real>> aec_logits;  // one block per correction task
  std::vector<TokenSeq> aec_targets;
};

template <class Real>
struct M4serModel {
  ModelConfig cfg;
  AcousticEncoder<Real> acoustic;
  TextEncoder<Real> text;
  FusionModule<Real> fusion;
  AedHead<Real> aed;
  AecDecoder<Real> aec;
  EmotionHead<Real> emotion;
  ModalityDiscriminator<Real> disc;

  explicit M4serModel(const ModelConfig& cfg_, Rng& rng)
      : cfg(validated(cfg_)),
        acoustic(cfg.feat_dim, cfg.d, cfg.conv_stride, cfg.attention_layers, cfg.attention_heads,
                 cfg.d * cfg.ff_mult, rng),
        text(cfg.d_vocab, cfg.max_len, cfg.d, cfg.attention_layers, cfg.attention_heads,
             cfg.d * cfg.ff_mult, rng),
        fusion(cfg.d, cfg.attention_heads, cfg.d * cfg.ff_mult, rng),
        aed(cfg.d, rng),
        aec(&text.table, cfg.d, cfg.d_vocab, 1, cfg.attention_heads, cfg.d * cfg.ff_mult, rng),
        emotion(cfg.d, cfg.num_classes, rng),
        disc(cfg.d, cfg.disc_width(), rng) {}

  // The correction decoder aliases the text embedding table, so a byte copy
  // would leave it pointing into the source object.
  M4serModel(const M4serModel&) = delete;
  M4serModel& operator=(const M4serModel&) = delete;

  static ModelConfig validated(ModelConfig c) {
    c.validate();
    return c;
  }

  ParamMap<Real> main_params() const {
    ParamMap<Real> out;
    acoustic.collect("acoustic", out);
    text.collect("text", out);
    fusion.collect("fusion", out);
    aed.collect("aed", out);
    aec.collect("aec", out);
    emotion.collect("emotion", out);
    return out;
  }

  ParamMap<Real> disc_params() const {
    ParamMap<Real> out;
    disc.collect("disc", out);
    return out;
  }

  ParamMap<Real> params() const {
    auto out = main_params();
    out.merge(disc_params());
    return out;
  }

  ItemForward<Real> forward_item(Runtime<Real>& rt, const Tensor<Real>& features,
                                 const TokenSeq& asr) const {
    ItemForward<Real> out;
    if (cfg.modality != Modality::text) out.speech_repr = acoustic.forward(rt, features);
    if (cfg.modality != Modality::speech) out.text_repr = text.forward(rt, asr);
    switch (cfg.modality) {
      case Modality::both:
        out.fusion = fusion.forward(rt, out.speech_repr, out.text_repr);
        out.pooled = out.fusion.pooled;
        break;
      case Modality::speech:
        out.pooled = rt.g.mean_axis0(out.speech_repr);
        break;
      case Modality::text:
        out.pooled = rt.g.mean_axis0(out.text_repr);
        break;
    }
    out.probs = emotion.probs_row(rt.g, out.pooled);
    return out;
  }

  // Builds every training signal for a batch: class probabilities, pooled
  // vectors, the frame concatenations the discriminator scores, and the
  // detection/correction supervision drawn from the batch's edit scripts.
  BatchForward<Real> forward_batch(Runtime<Real>& rt, const Batch& batch) const {
    BatchForward<Real> out;
    std::vector<Tensor<Real>> prob_rows, spe_s, spe_t, inv, aed_blocks;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Tensor<Real> feats;
      if (cfg.modality != Modality::text) feats = batch.speech_tensor<Real>(i);
      auto item = forward_item(rt, feats, batch.asr_of(i));
      prob_rows.push_back(item.probs);
      out.pooled.push_back(item.pooled);
      if (cfg.modality == Modality::both) {
        spe_s.push_back(item.fusion.speech_specific);
        spe_t.push_back(item.fusion.text_specific);
        inv.push_back(item.fusion.invariant);
        aed_blocks.push_back(aed.logits(rt.g, item.text_repr));
        const auto& script = batch.scripts[i];
        out.aed_labels.insert(out.aed_labels.end(), script.labels.begin(), script.labels.end());
        for (const auto& task : script.tasks) {
          auto cond = rt.g.slice(item.text_repr, 0, task.position, task.position + 1);
          out.aec_logits.push_back(aec.teacher_logits(rt, task.target, cond, item.text_repr));
          out.aec_targets.push_back(task.target);
        }
      }
      out.items.push_back(std::move(item));
    }
    out.probs = rt.g.concat(prob_rows, 0);
    if (cfg.modality == Modality::both) {
      out.speech_specific = rt.g.concat(spe_s, 0);
      out.text_specific = rt.g.concat(spe_t, 0);
      out.invariant = rt.g.concat(inv, 0);
      out.aed_logits = rt.g.concat(aed_blocks, 0);
    }
    return out;
  }

  // Inference probabilities for one utterance. Runs encoders, fusion and the
  // emotion head only; the detection and correction heads are never touched.
  std::vector<Real> infer_probs(const FeatureMatrix& speech, const TokenSeq& asr) const {
    Graph<Real> g(false);
    Rng rng(0);
    Runtime<Real> rt{g, rng, false, 0.0};
    Tensor<Real> feats;
    if (cfg.modality != Modality::text) feats = feature_tensor<Real>(speech);
    return forward_item(rt, feats, asr).probs.value();
  }
};

}  // namespace m4ser
