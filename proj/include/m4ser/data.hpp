#pragma once

// Synthetic corpus generation, manifest and feature-file IO, and batching.
//
// Manifest: UTF-8 text, one TAB-separated record per line:
//   id <TAB> feature-path <TAB> asr ids (space-sep) <TAB> gt ids <TAB> emotion
// The feature path resolves relative to the manifest's directory. A vocab
// sidecar (vocab.txt next to the manifest) holds one token string per line;
// the line number is the id, with ids 0/1/2 reserved for <pad>/<bos>/<eos>.
//
// Feature file: magic "M4FT", u32 version (1), u32 rows, u32 cols, then
// row-major 32-bit little-endian floats.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "m4ser/align.hpp"
#include "m4ser/common.hpp"
#include "m4ser/tensor.hpp"

namespace m4ser {

struct FeatureMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<float> data;
};

struct Utterance {
  std::string id;
  FeatureMatrix speech;
  TokenSeq asr_tokens;
  TokenSeq gt_tokens;
  int emotion = 0;
};

enum class CueMode { both, split };

struct SynthConfig {
  std::size_t classes = 4;
  std::size_t feat_dim = 16;
  std::size_t vocab = 64;       // includes the three reserved ids
  double speech_cue = 1.0;      // weight of the class-specific acoustic component
  double text_cue = 1.0;        // probability a token comes from the class pool
  CueMode cue_mode = CueMode::both;
  double target_wer = 0.0;
  std::size_t min_frames = 8, max_frames = 24;
  std::size_t min_tokens = 4, max_tokens = 10;
  double noise_level = 0.1;
  std::uint64_t seed = 1;

  void validate() const {
    if (classes < 2) fail("SynthConfig: need at least two classes");
    if (vocab < 3 + classes)
      fail("SynthConfig: vocab " + std::to_string(vocab) + " leaves fewer content ids than classes");
    if (target_wer < 0.0 || target_wer >= 1.0) fail("SynthConfig: target WER must lie in [0, 1)");
    if (min_frames < 1 || min_tokens < 1) fail("SynthConfig: length minimums must be at least 1");
    if (max_frames < min_frames || max_tokens < min_tokens) fail("SynthConfig: length ranges inverted");
    if (speech_cue < 0.0 || speech_cue > 1.0 || text_cue < 0.0 || text_cue > 1.0)
      fail("SynthConfig: cue strengths must lie in [0, 1]");
    if (noise_level < 0.0) fail("SynthConfig: noise level must be non-negative");
  }
};

namespace detail {

// Smooth random trajectory: integrated noise passed through a short moving
// average, one independent channel per feature dimension.
inline std::vector<float> smooth_trajectory(std::size_t rows, std::size_t cols, Rng& rng) {
  std::vector<double> walk(rows * cols);
  for (std::size_t j = 0; j < cols; ++j) {
    double acc = rng.normal();
    for (std::size_t i = 0; i < rows; ++i) {
      acc += 0.4 * rng.normal();
      walk[i * cols + j] = acc;
    }
  }
  std::vector<float> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      double s = 0;
      int n = 0;
      for (std::size_t k = (i >= 2 ? i - 2 : 0); k <= std::min(rows - 1, i + 2); ++k, ++n)
        s += walk[k * cols + j];
      out[i * cols + j] = static_cast<float>(s / n);
    }
  return out;
}

inline TokenSeq corrupt_tokens(const TokenSeq& gt, double p_sub, double p_del, double p_ins,
                               std::int32_t lo, std::int32_t hi, Rng& rng) {
  TokenSeq out;
  auto random_token = [&]() { return static_cast<std::int32_t>(lo + rng.index(hi - lo)); };
  for (auto tok : gt) {
    const double u = rng.uniform();
    if (u < p_del) {
      // dropped
    } else if (u < p_del + p_sub) {
      auto r = random_token();
      out.push_back(r == tok ? (lo + (r - lo + 1) % (hi - lo)) : r);
    } else {
      out.push_back(tok);
    }
    if (rng.uniform() < p_ins) out.push_back(random_token());
  }
  return out;
}

}  // namespace detail

inline double corpus_wer(const std::vector<Utterance>& utts) {
  std::size_t edits = 0, ref_len = 0;
  for (const auto& u : utts) {
    edits += levenshtein_distance(u.asr_tokens, u.gt_tokens);
    ref_len += u.gt_tokens.size();
  }
  if (ref_len == 0) fail("corpus_wer: empty reference corpus");
  return static_cast<double>(edits) / static_cast<double>(ref_len);
}

// Per class, a smooth acoustic prototype and a content-token pool. Under the
// split cue mode, classes c and c+1 share a prototype (index c/2) while text
// pools alternate (index c%2), so neither modality alone can separate all
// classes. ASR corruption rates are calibrated against the measured corpus
// WER and re-rolled until the target is met within 0.02.
inline std::vector<Utterance> generate_synthetic(const SynthConfig& cfg, std::size_t count) {
  cfg.validate();
  if (count < 1) fail("generate_synthetic: count must be at least 1");
  Rng rng(mix_seed(cfg.seed, 0xda7a));

  const std::size_t proto_rows = cfg.max_frames * 2;
  std::vector<std::vector<float>> protos;
  const std::size_t n_protos = cfg.cue_mode == CueMode::split ? (cfg.classes + 1) / 2 : cfg.classes;
  for (std::size_t p = 0; p < n_protos; ++p)
    protos.push_back(detail::smooth_trajectory(proto_rows, cfg.feat_dim, rng));
  auto background = detail::smooth_trajectory(proto_rows, cfg.feat_dim, rng);

  const std::int32_t content_lo = kFirstContentId;
  const std::int32_t content_hi = static_cast<std::int32_t>(cfg.vocab);
  const std::size_t n_pools = cfg.cue_mode == CueMode::split ? 2 : cfg.classes;
  const std::size_t content_count = static_cast<std::size_t>(content_hi - content_lo);
  std::vector<std::vector<std::int32_t>> pools(n_pools);
  {
    // disjoint class pools over the lower content ids, remainder is shared
    const std::size_t pool_size = std::max<std::size_t>(1, content_count / (2 * n_pools));
    for (std::size_t c = 0; c < n_pools; ++c)
      for (std::size_t k = 0; k < pool_size; ++k)
        pools[c].push_back(content_lo + static_cast<std::int32_t>(c * pool_size + k));
  }
  const std::int32_t shared_lo =
      content_lo + static_cast<std::int32_t>(pools.size() * pools[0].size());

  std::vector<Utterance> utts(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto& u = utts[i];
    const std::size_t cls = i % cfg.classes;
    u.id = "synth" + std::to_string(i);
    u.emotion = static_cast<int>(cls);

    const std::size_t proto_idx = cfg.cue_mode == CueMode::split ? cls / 2 : cls;
    const std::size_t rows = cfg.min_frames + rng.index(cfg.max_frames - cfg.min_frames + 1);
    const std::size_t offset = rng.index(proto_rows - rows + 1);
    u.speech.rows = rows;
    u.speech.cols = cfg.feat_dim;
    u.speech.data.resize(rows * cfg.feat_dim);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cfg.feat_dim; ++c) {
        const std::size_t src = (offset + r) * cfg.feat_dim + c;
        const double base = cfg.speech_cue * protos[proto_idx][src] +
                            (1.0 - cfg.speech_cue) * background[src];
        u.speech.data[r * cfg.feat_dim + c] =
            static_cast<float>(base + cfg.noise_level * rng.normal());
      }

    const std::size_t pool_idx = cfg.cue_mode == CueMode::split ? cls % 2 : cls;
    const std::size_t n_tok = cfg.min_tokens + rng.index(cfg.max_tokens - cfg.min_tokens + 1);
    u.gt_tokens.resize(n_tok);
    for (auto& tok : u.gt_tokens) {
      if (shared_lo < content_hi && rng.uniform() >= cfg.text_cue)
        tok = shared_lo + static_cast<std::int32_t>(rng.index(content_hi - shared_lo));
      else
        tok = pools[pool_idx][rng.index(pools[pool_idx].size())];
    }
  }

  double rate = cfg.target_wer / 3.0;
  for (int attempt = 0; attempt < 8; ++attempt) {
    Rng corrupt_rng(mix_seed(cfg.seed, 0xc0de + static_cast<std::uint64_t>(attempt)));
    for (auto& u : utts) {
      u.asr_tokens = detail::corrupt_tokens(u.gt_tokens, rate, rate, rate, content_lo, content_hi,
                                            corrupt_rng);
      if (u.asr_tokens.empty()) u.asr_tokens.push_back(u.gt_tokens[0]);
    }
    const double measured = corpus_wer(utts);
    if (std::abs(measured - cfg.target_wer) <= 0.02) break;
    if (measured <= 0.0) {
      if (cfg.target_wer == 0.0) break;
      rate = std::min(0.9 / 3.0, rate > 0 ? rate * 2 : cfg.target_wer / 3.0);
    } else {
      rate = std::min(0.9 / 3.0, rate * cfg.target_wer / measured);
    }
  }
  return utts;
}

// ---- feature-file IO ----

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) fail("feature file: truncated reading " + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

constexpr std::uint32_t kFeatureVersion = 1;

inline void write_features(const std::filesystem::path& path, const FeatureMatrix& m) {
  if (m.data.size() != m.rows * m.cols) fail("write_features: data size does not match header");
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("write_features: cannot open " + path.string());
  os.write("M4FT", 4);
  detail::put_u32(os, kFeatureVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(m.rows));
  detail::put_u32(os, static_cast<std::uint32_t>(m.cols));
  for (float v : m.data) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    detail::put_u32(os, bits);
  }
  if (!os) fail("write_features: write failed for " + path.string());
}

inline FeatureMatrix read_features(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("read_features: cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "M4FT", 4) != 0)
    fail("read_features: bad magic in " + path.string());
  const auto version = detail::get_u32(is, "version");
  if (version != kFeatureVersion)
    fail("read_features: unsupported version " + std::to_string(version) + " in " + path.string());
  FeatureMatrix m;
  m.rows = detail::get_u32(is, "rows");
  m.cols = detail::get_u32(is, "cols");
  m.data.resize(m.rows * m.cols);
  for (auto& v : m.data) {
    const std::uint32_t bits = detail::get_u32(is, "payload");
    std::memcpy(&v, &bits, 4);
    if (!std::isfinite(v)) fail("read_features: non-finite value in " + path.string());
  }
  char extra;
  if (is.read(&extra, 1)) fail("read_features: trailing bytes in " + path.string());
  return m;
}

// ---- manifest IO ----

namespace detail {

inline std::string join_ids(const TokenSeq& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(ids[i]);
  }
  return out;
}

inline TokenSeq parse_ids(const std::string& text, std::size_t line_no, const char* field) {
  TokenSeq out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) {
    try {
      std::size_t used = 0;
      const long v = std::stol(tok, &used);
      if (used != tok.size() || v < 0) throw std::invalid_argument(tok);
      out.push_back(static_cast<std::int32_t>(v));
    } catch (const std::exception&) {
      fail("manifest line " + std::to_string(line_no) + ": bad " + std::string(field) + " id '" + tok +
           "'");
    }
  }
  return out;
}

}  // namespace detail

// Writes manifest.tsv, vocab.txt and one feature file per utterance under
// dir/feats; returns the manifest path.
inline std::filesystem::path save_manifest(const std::filesystem::path& dir,
                                           const std::vector<Utterance>& utts, std::size_t vocab) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "feats");
  const fs::path manifest = dir / "manifest.tsv";
  std::ofstream os(manifest);
  if (!os) fail("save_manifest: cannot open " + manifest.string());
  for (const auto& u : utts) {
    const std::string rel = "feats/" + u.id + ".m4ft";
    write_features(dir / rel, u.speech);
    os << u.id << '\t' << rel << '\t' << detail::join_ids(u.asr_tokens) << '\t'
       << detail::join_ids(u.gt_tokens) << '\t' << u.emotion << '\n';
  }
  if (!os) fail("save_manifest: write failed for " + manifest.string());

  std::ofstream vs(dir / "vocab.txt");
  if (!vs) fail("save_manifest: cannot open vocab sidecar");
  vs << "<pad>\n<bos>\n<eos>\n";
  for (std::size_t i = 3; i < vocab; ++i) vs << "tok" << i << '\n';
  return manifest;
}

inline std::vector<Utterance> load_manifest(const std::filesystem::path& manifest,
                                            std::size_t num_classes) {
  std::ifstream is(manifest);
  if (!is) fail("load_manifest: cannot open " + manifest.string());
  const auto base = manifest.parent_path();
  std::vector<Utterance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 5)
      fail("manifest line " + std::to_string(line_no) + ": expected 5 TAB-separated fields, got " +
           std::to_string(fields.size()));
    Utterance u;
    u.id = fields[0];
    if (u.id.empty()) fail("manifest line " + std::to_string(line_no) + ": empty id");
    const auto feat_path = base / fields[1];
    if (!std::filesystem::exists(feat_path))
      fail("manifest line " + std::to_string(line_no) + ": missing feature file " + feat_path.string());
    u.speech = read_features(feat_path);
    u.asr_tokens = detail::parse_ids(fields[2], line_no, "asr");
    u.gt_tokens = detail::parse_ids(fields[3], line_no, "gt");
    if (u.gt_tokens.empty()) fail("manifest line " + std::to_string(line_no) + ": empty gt field");
    if (u.asr_tokens.empty()) fail("manifest line " + std::to_string(line_no) + ": empty asr field");
    try {
      std::size_t used = 0;
      u.emotion = std::stoi(fields[4], &used);
      if (used != fields[4].size()) throw std::invalid_argument(fields[4]);
    } catch (const std::exception&) {
      fail("manifest line " + std::to_string(line_no) + ": bad emotion field '" + fields[4] + "'");
    }
    if (u.emotion < 0 || static_cast<std::size_t>(u.emotion) >= num_classes)
      fail("manifest line " + std::to_string(line_no) + ": emotion " + std::to_string(u.emotion) +
           " outside [0, " + std::to_string(num_classes) + ")");
    out.push_back(std::move(u));
  }
  return out;
}

// ---- batching ----

struct Batch {
  std::vector<std::size_t> indices;  // into the source dataset
  std::size_t feat_dim = 0, max_frames = 0, max_asr = 0, max_gt = 0;
  std::vector<float> speech;               // [B * max_frames * feat_dim]
  std::vector<std::uint8_t> frame_mask;    // [B * max_frames]
  std::vector<std::int32_t> asr_tokens;    // [B * max_asr], pad id 0
  std::vector<std::uint8_t> asr_mask;
  std::vector<std::int32_t> gt_tokens;     // [B * max_gt]
  std::vector<std::uint8_t> gt_mask;
  std::vector<std::int32_t> labels;        // [B]
  std::vector<EditScript> scripts;         // per item
  std::vector<std::vector<std::size_t>> positives;  // P(i) per anchor, indices within batch

  std::size_t size() const { return indices.size(); }

  std::size_t frames(std::size_t i) const {
    std::size_t n = 0;
    for (std::size_t f = 0; f < max_frames; ++f) n += frame_mask[i * max_frames + f] ? 1 : 0;
    return n;
  }

  TokenSeq asr_of(std::size_t i) const {
    TokenSeq out;
    for (std::size_t t = 0; t < max_asr; ++t)
      if (asr_mask[i * max_asr + t]) out.push_back(asr_tokens[i * max_asr + t]);
    return out;
  }

  TokenSeq gt_of(std::size_t i) const {
    TokenSeq out;
    for (std::size_t t = 0; t < max_gt; ++t)
      if (gt_mask[i * max_gt + t]) out.push_back(gt_tokens[i * max_gt + t]);
    return out;
  }

  // True-length feature tensor for one item; padded cells are never read.
  template <class Real>
  Tensor<Real> speech_tensor(std::size_t i) const {
    const std::size_t rows = frames(i);
    std::vector<Real> v(rows * feat_dim);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < feat_dim; ++c)
        v[r * feat_dim + c] = static_cast<Real>(speech[(i * max_frames + r) * feat_dim + c]);
    return Tensor<Real>::leaf({rows, feat_dim}, std::move(v));
  }
};

// Edit scripts are derived once per utterance and reused across epochs.
struct PreparedDataset {
  const std::vector<Utterance>* utts = nullptr;
  std::vector<EditScript> scripts;
};

inline PreparedDataset prepare_dataset(const std::vector<Utterance>& utts) {
  PreparedDataset out;
  out.utts = &utts;
  out.scripts.reserve(utts.size());
  for (const auto& u : utts) out.scripts.push_back(derive_edit_script(u.asr_tokens, u.gt_tokens));
  return out;
}

struct BatchOptions {
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  bool shuffle = true;
  bool drop_small = true;       // drop batches of size < 2 (contrastive loss needs pairs)
  bool poison_padding = false;  // fill padded feature cells with NaN (test harness)
};

inline std::vector<Batch> make_batches(const PreparedDataset& ds, const BatchOptions& opt) {
  if (opt.batch_size < 2) fail("make_batches: batch size must be at least 2");
  const auto& utts = *ds.utts;
  std::vector<std::size_t> order(utts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (opt.shuffle) {
    Rng rng(mix_seed(opt.seed, 0xba7c));
    rng.shuffle(order);
  }

  std::vector<Batch> out;
  for (std::size_t begin = 0; begin < order.size(); begin += opt.batch_size) {
    const std::size_t end = std::min(order.size(), begin + opt.batch_size);
    const std::size_t b = end - begin;
    if (b < 2 && opt.drop_small) {
      std::cerr << "[data] dropping final batch of size " << b
                << " (contrastive loss needs at least two samples)\n";
      continue;
    }
    Batch batch;
    batch.indices.assign(order.begin() + begin, order.begin() + end);
    for (std::size_t i : batch.indices) {
      const auto& u = utts[i];
      batch.feat_dim = u.speech.cols;
      batch.max_frames = std::max(batch.max_frames, u.speech.rows);
      batch.max_asr = std::max(batch.max_asr, u.asr_tokens.size());
      batch.max_gt = std::max(batch.max_gt, u.gt_tokens.size());
    }
    const float pad_value = opt.poison_padding ? std::numeric_limits<float>::quiet_NaN() : 0.0f;
    batch.speech.assign(b * batch.max_frames * batch.feat_dim, pad_value);
    batch.frame_mask.assign(b * batch.max_frames, 0);
    batch.asr_tokens.assign(b * batch.max_asr, kPadId);
    batch.asr_mask.assign(b * batch.max_asr, 0);
    batch.gt_tokens.assign(b * batch.max_gt, kPadId);
    batch.gt_mask.assign(b * batch.max_gt, 0);
    for (std::size_t k = 0; k < b; ++k) {
      const auto& u = utts[batch.indices[k]];
      if (u.speech.cols != batch.feat_dim)
        fail("make_batches: feature dim mismatch at utterance " + u.id);
      for (std::size_t r = 0; r < u.speech.rows; ++r) {
        batch.frame_mask[k * batch.max_frames + r] = 1;
        std::copy_n(u.speech.data.data() + r * batch.feat_dim, batch.feat_dim,
                    batch.speech.data() + (k * batch.max_frames + r) * batch.feat_dim);
      }
      for (std::size_t t = 0; t < u.asr_tokens.size(); ++t) {
        batch.asr_tokens[k * batch.max_asr + t] = u.asr_tokens[t];
        batch.asr_mask[k * batch.max_asr + t] = 1;
      }
      for (std::size_t t = 0; t < u.gt_tokens.size(); ++t) {
        batch.gt_tokens[k * batch.max_gt + t] = u.gt_tokens[t];
        batch.gt_mask[k * batch.max_gt + t] = 1;
      }
      batch.labels.push_back(u.emotion);
      batch.scripts.push_back(ds.scripts[batch.indices[k]]);
    }
    batch.positives.resize(b);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t p = 0; p < b; ++p)
        if (p != i && batch.labels[p] == batch.labels[i]) batch.positives[i].push_back(p);
    out.push_back(std::move(batch));
  }
  return out;
}

}  // namespace m4ser
