#pragma once

// Flat `key = value` run configuration covering the model, the loss weights,
// the training loop, synthetic-data generation and evaluation choices. '#'
// starts a comment, blank lines are skipped, unknown keys are errors. The
// effective_config snapshot round-trips through the parser, so every run can
// be reproduced from the file it wrote.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "m4ser/eval.hpp"
#include "m4ser/train.hpp"

namespace m4ser {

enum class Precision { f32, f64 };

inline const char* precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  fail("precision must be f32 or f64, got '" + s + "'");
}

inline const char* cue_mode_name(CueMode m) { return m == CueMode::both ? "both" : "split"; }

inline CueMode parse_cue_mode(const std::string& s) {
  if (s == "both") return CueMode::both;
  if (s == "split") return CueMode::split;
  fail("cue_mode must be both or split, got '" + s + "'");
}

inline const char* aed_reduction_name(AedReduction r) {
  return r == AedReduction::mean ? "mean" : "sum";
}

inline AedReduction parse_aed_reduction(const std::string& s) {
  if (s == "mean") return AedReduction::mean;
  if (s == "sum") return AedReduction::sum;
  fail("aed_reduction must be mean or sum, got '" + s + "'");
}

struct RunConfig {
  TrainConfig train;
  SynthConfig synth;
  std::size_t synth_count = 192;
  double val_fraction = 0.25;
  Precision precision = Precision::f64;
  DtwMetric dtw_metric = DtwMetric::cosine;

  RunConfig() {
    synth.classes = train.model.num_classes;
    synth.feat_dim = train.model.feat_dim;
    synth.vocab = train.model.d_vocab;
    synth.seed = train.seed;
  }

  void validate() const {
    train.validate();
    synth.validate();
    if (synth_count < 2) fail("RunConfig: synth_count must be at least 2");
    if (val_fraction < 0.0 || val_fraction >= 1.0) fail("RunConfig: val_fraction must lie in [0, 1)");
    if (synth.classes != train.model.num_classes)
      fail("RunConfig: the generator emits " + std::to_string(synth.classes) +
           " classes but the model expects " + std::to_string(train.model.num_classes));
    if (synth.feat_dim != train.model.feat_dim)
      fail("RunConfig: generator feat_dim " + std::to_string(synth.feat_dim) +
           " does not match the model's " + std::to_string(train.model.feat_dim));
    if (synth.vocab > train.model.d_vocab)
      fail("RunConfig: generator vocab " + std::to_string(synth.vocab) +
           " exceeds the model's " + std::to_string(train.model.d_vocab));
  }
};

namespace detail {

inline std::string cfg_trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::uint64_t cfg_u64(const std::string& key, const std::string& raw) {
  std::size_t used = 0;
  std::uint64_t x = 0;
  try {
    x = std::stoull(raw, &used);
  } catch (const std::exception&) {
    used = std::string::npos;
  }
  if (used != raw.size() || raw.empty() || raw[0] == '-')
    fail("config: " + key + " expects a non-negative integer, got '" + raw + "'");
  return x;
}

inline std::size_t cfg_size(const std::string& key, const std::string& raw) {
  return static_cast<std::size_t>(cfg_u64(key, raw));
}

inline double cfg_double(const std::string& key, const std::string& raw) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(raw, &used);
  } catch (const std::exception&) {
    used = std::string::npos;
  }
  if (used != raw.size() || raw.empty()) fail("config: " + key + " expects a number, got '" + raw + "'");
  return x;
}

inline bool cfg_bool(const std::string& key, const std::string& raw) {
  if (raw == "true" || raw == "1") return true;
  if (raw == "false" || raw == "0") return false;
  fail("config: " + key + " expects true or false, got '" + raw + "'");
}

}  // namespace detail

// Applies one key to the config; every synchronized pair (classes, feature
// width, vocabulary, seed) is set on both sides so the generator and the
// model stay consistent.
inline void apply_config_entry(RunConfig& c, const std::string& key, const std::string& value) {
  using detail::cfg_bool;
  using detail::cfg_double;
  using detail::cfg_size;
  using detail::cfg_u64;
  auto& m = c.train.model;
  auto& w = c.train.weights;
  auto& s = c.synth;

  if (key == "batch_size") c.train.batch_size = cfg_size(key, value);
  else if (key == "epochs") c.train.epochs = cfg_size(key, value);
  else if (key == "learning_rate") c.train.learning_rate = cfg_double(key, value);
  else if (key == "grad_clip") c.train.grad_clip = cfg_double(key, value);
  else if (key == "seed") c.train.seed = s.seed = cfg_u64(key, value);
  else if (key == "aed_reduction") c.train.aed_reduction = parse_aed_reduction(value);
  else if (key == "lcl_include_self") c.train.lcl_include_self = cfg_bool(key, value);
  else if (key == "selection_metric") c.train.selection_metric = parse_selection_metric(value);
  else if (key == "d") m.d = cfg_size(key, value);
  else if (key == "d_vocab") m.d_vocab = s.vocab = cfg_size(key, value);
  else if (key == "attention_layers") m.attention_layers = cfg_size(key, value);
  else if (key == "attention_heads") m.attention_heads = cfg_size(key, value);
  else if (key == "ff_mult") m.ff_mult = cfg_size(key, value);
  else if (key == "num_classes") m.num_classes = s.classes = cfg_size(key, value);
  else if (key == "feat_dim") m.feat_dim = s.feat_dim = cfg_size(key, value);
  else if (key == "conv_stride") m.conv_stride = cfg_size(key, value);
  else if (key == "max_len") m.max_len = cfg_size(key, value);
  else if (key == "disc_hidden") m.disc_hidden = cfg_size(key, value);
  else if (key == "max_correction_len") m.max_correction_len = cfg_size(key, value);
  else if (key == "dropout") m.dropout = cfg_double(key, value);
  else if (key == "modality") m.modality = parse_modality(value);
  else if (key == "alpha") w.alpha = cfg_double(key, value);
  else if (key == "beta") w.beta = cfg_double(key, value);
  else if (key == "gamma") w.gamma = cfg_double(key, value);
  else if (key == "lambda") w.lambda = cfg_double(key, value);
  else if (key == "tau") w.tau = cfg_double(key, value);
  else if (key == "synth_count") c.synth_count = cfg_size(key, value);
  else if (key == "val_fraction") c.val_fraction = cfg_double(key, value);
  else if (key == "precision") c.precision = parse_precision(value);
  else if (key == "dtw_metric") c.dtw_metric = parse_dtw_metric(value);
  else if (key == "target_wer") s.target_wer = cfg_double(key, value);
  else if (key == "speech_cue") s.speech_cue = cfg_double(key, value);
  else if (key == "text_cue") s.text_cue = cfg_double(key, value);
  else if (key == "cue_mode") s.cue_mode = parse_cue_mode(value);
  else if (key == "min_frames") s.min_frames = cfg_size(key, value);
  else if (key == "max_frames") s.max_frames = cfg_size(key, value);
  else if (key == "min_tokens") s.min_tokens = cfg_size(key, value);
  else if (key == "max_tokens") s.max_tokens = cfg_size(key, value);
  else if (key == "noise_level") s.noise_level = cfg_double(key, value);
  else fail("config: unknown key '" + key + "'");
}

inline RunConfig parse_config_text(const std::string& text, RunConfig base = {},
                                   const std::string& where = "config") {
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::cfg_trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(where + " line " + std::to_string(line_no) + ": expected key = value, got '" + line + "'");
    const auto key = detail::cfg_trim(line.substr(0, eq));
    const auto value = detail::cfg_trim(line.substr(eq + 1));
    if (key.empty()) fail(where + " line " + std::to_string(line_no) + ": empty key");
    try {
      apply_config_entry(base, key, value);
    } catch (const Error& e) {
      fail(where + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

inline RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream is(path);
  if (!is) fail("config: cannot open " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return parse_config_text(os.str(), base, path.string());
}

// `--set key=value` overrides, applied after the file.
inline void apply_overrides(RunConfig& c, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) fail("--set expects key=value, got '" + kv + "'");
    const auto key = detail::cfg_trim(kv.substr(0, eq));
    const auto value = detail::cfg_trim(kv.substr(eq + 1));
    apply_config_entry(c, key, value);
  }
}

inline std::string effective_config(const RunConfig& c) {
  std::ostringstream os;
  os.precision(17);
  const auto& m = c.train.model;
  const auto& w = c.train.weights;
  const auto& s = c.synth;
  os << "# model\n"
     << "d = " << m.d << "\n"
     << "d_vocab = " << m.d_vocab << "\n"
     << "attention_layers = " << m.attention_layers << "\n"
     << "attention_heads = " << m.attention_heads << "\n"
     << "ff_mult = " << m.ff_mult << "\n"
     << "num_classes = " << m.num_classes << "\n"
     << "feat_dim = " << m.feat_dim << "\n"
     << "conv_stride = " << m.conv_stride << "\n"
     << "max_len = " << m.max_len << "\n"
     << "disc_hidden = " << m.disc_hidden << "\n"
     << "max_correction_len = " << m.max_correction_len << "\n"
     << "dropout = " << m.dropout << "\n"
     << "modality = " << modality_name(m.modality) << "\n"
     << "# loss weights\n"
     << "alpha = " << w.alpha << "\n"
     << "beta = " << w.beta << "\n"
     << "gamma = " << w.gamma << "\n"
     << "lambda = " << w.lambda << "\n"
     << "tau = " << w.tau << "\n"
     << "# training\n"
     << "batch_size = " << c.train.batch_size << "\n"
     << "epochs = " << c.train.epochs << "\n"
     << "learning_rate = " << c.train.learning_rate << "\n"
     << "grad_clip = " << c.train.grad_clip << "\n"
     << "seed = " << c.train.seed << "\n"
     << "aed_reduction = " << aed_reduction_name(c.train.aed_reduction) << "\n"
     << "lcl_include_self = " << (c.train.lcl_include_self ? "true" : "false") << "\n"
     << "selection_metric = " << selection_metric_name(c.train.selection_metric) << "\n"
     << "precision = " << precision_name(c.precision) << "\n"
     << "# data\n"
     << "synth_count = " << c.synth_count << "\n"
     << "val_fraction = " << c.val_fraction << "\n"
     << "target_wer = " << s.target_wer << "\n"
     << "speech_cue = " << s.speech_cue << "\n"
     << "text_cue = " << s.text_cue << "\n"
     << "cue_mode = " << cue_mode_name(s.cue_mode) << "\n"
     << "min_frames = " << s.min_frames << "\n"
     << "max_frames = " << s.max_frames << "\n"
     << "min_tokens = " << s.min_tokens << "\n"
     << "max_tokens = " << s.max_tokens << "\n"
     << "noise_level = " << s.noise_level << "\n"
     << "# evaluation\n"
     << "dtw_metric = " << dtw_metric_name(c.dtw_metric) << "\n";
  return os.str();
}

}  // namespace m4ser
