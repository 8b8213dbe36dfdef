#pragma once

// Modality encoders. The acoustic side patchifies raw frames with a strided
// window (zero-filled tail, so ceil(m_raw / stride) output frames), lifts
// them to width d and runs transformer encoder layers. The text side embeds
// token plus position and runs the same layer stack.

#include <cstdint>
#include <vector>

#include "m4ser/layers.hpp"

namespace m4ser {

template <class Real>
struct AcousticEncoder {
  std::size_t feat_dim = 0, d = 0, stride = 1;
  Linear<Real> patch;  // [stride * feat_dim -> d]
  std::vector<TransformerEncoderLayer<Real>> layers;

  AcousticEncoder() = default;
  AcousticEncoder(std::size_t feat_dim_, std::size_t d_, std::size_t stride_, std::size_t n_layers,
                  std::size_t heads, std::size_t ff_hidden, Rng& rng)
      : feat_dim(feat_dim_), d(d_), stride(stride_), patch(stride_ * feat_dim_, d_, rng) {
    if (stride == 0) fail("AcousticEncoder: stride must be positive");
    layers.reserve(n_layers);
    for (std::size_t i = 0; i < n_layers; ++i) layers.emplace_back(d_, heads, ff_hidden, rng);
  }

  static std::size_t out_frames(std::size_t in_frames, std::size_t stride) {
    return (in_frames + stride - 1) / stride;
  }

  // Windows of `stride` consecutive frames, flattened; the tail window pads
  // with fresh zeros rather than reading past the input.
  Tensor<Real> build_patches(Graph<Real>& g, const Tensor<Real>& features) const {
    if (features.rank() != 2 || features.shape()[1] != feat_dim)
      fail("AcousticEncoder: features shape " + shape_str(features.shape()) + " does not match feat_dim " +
           std::to_string(feat_dim));
    const std::size_t m_raw = features.shape()[0];
    if (m_raw == 0) fail("AcousticEncoder: empty utterance");
    const std::size_t m = out_frames(m_raw, stride);
    std::vector<Tensor<Real>> windows;
    windows.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
      std::vector<Tensor<Real>> parts;
      parts.reserve(stride);
      for (std::size_t k = 0; k < stride; ++k) {
        const std::size_t row = i * stride + k;
        if (row < m_raw)
          parts.push_back(g.slice(features, 0, row, row + 1));
        else
          parts.push_back(Tensor<Real>::zeros({1, feat_dim}));
      }
      windows.push_back(stride == 1 ? parts[0] : g.concat(parts, 1));
    }
    return m == 1 ? windows[0] : g.concat(windows, 0);
  }

  Tensor<Real> forward(Runtime<Real>& rt, const Tensor<Real>& features) const {
    auto x = patch.forward(rt.g, build_patches(rt.g, features));
    for (const auto& layer : layers) x = layer.forward(rt, x);
    return x;
  }

  void collect(const std::string& prefix, ParamMap<Real>& out) const {
    patch.collect(prefix + ".patch", out);
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].collect(prefix + ".layer" + std::to_string(i), out);
  }
};

template <class Real>
struct TextEncoder {
  EmbeddingTable<Real> table;
  std::vector<TransformerEncoderLayer<Real>> layers;

  TextEncoder() = default;
  TextEncoder(std::size_t vocab, std::size_t max_len, std::size_t d, std::size_t n_layers, std::size_t heads,
              std::size_t ff_hidden, Rng& rng)
      : table(vocab, max_len, d, rng) {
    layers.reserve(n_layers);
    for (std::size_t i = 0; i < n_layers; ++i) layers.emplace_back(d, heads, ff_hidden, rng);
  }

  Tensor<Real> forward(Runtime<Real>& rt, const std::vector<std::int32_t>& ids) const {
    auto x = table.embed(rt.g, ids);
    for (const auto& layer : layers) x = layer.forward(rt, x);
    return x;
  }

  void collect(const std::string& prefix, ParamMap<Real>& out) const {
    table.collect(prefix + ".embed", out);
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].collect(prefix + ".layer" + std::to_string(i), out);
  }
};

}  // namespace m4ser
