#pragma once

// Joint adversarial training. Every step runs two phases on one tape: the
// discriminator first ascends l_d + l_g on gradient-detached frame copies,
// then the remaining parameters descend the combined objective through the
// freshly updated discriminator, whose own weights stay frozen in that phase
// because the main optimizer never touches them. Two Adam instances keep the
// groups' moments apart. Checkpoints restore parameters, moments, the epoch
// counter and the dropout stream bitwise.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "m4ser/data.hpp"
#include "m4ser/eval.hpp"
#include "m4ser/model.hpp"
#include "m4ser/objectives.hpp"

namespace m4ser {

enum class SelectionMetric { wa, wf1 };

inline const char* selection_metric_name(SelectionMetric m) {
  return m == SelectionMetric::wa ? "wa" : "wf1";
}

inline SelectionMetric parse_selection_metric(const std::string& s) {
  if (s == "wa") return SelectionMetric::wa;
  if (s == "wf1") return SelectionMetric::wf1;
  fail("selection_metric must be wa or wf1, got '" + s + "'");
}

struct TrainConfig {
  ModelConfig model;
  LossWeights weights;
  std::size_t batch_size = 16;
  std::size_t epochs = 100;
  double learning_rate = 5e-4;
  double grad_clip = 5.0;
  std::uint64_t seed = 1;
  AedReduction aed_reduction = AedReduction::mean;
  bool lcl_include_self = false;
  SelectionMetric selection_metric = SelectionMetric::wa;

  void validate() const {
    model.validate();
    weights.validate();
    if (batch_size < 2) fail("TrainConfig: batch size must be at least 2");
    if (learning_rate <= 0) fail("TrainConfig: learning rate must be positive");
    if (grad_clip <= 0) fail("TrainConfig: gradient clip must be positive");
    if (model.modality != Modality::both && (weights.alpha != 0 || weights.gamma != 0))
      fail("TrainConfig: single-modality runs need alpha = 0 and gamma = 0 (no text to detect "
           "against, no modality pair to discriminate)");
  }
};

// Adam with bias correction and global-norm clipping, moments keyed by
// parameter name so state survives checkpoints.
template <class Real>
struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t t = 0;
  std::map<std::string, std::vector<Real>> m, v;

  void step(const ParamMap<Real>& params, double lr, double clip) {
    ++t;
    std::vector<std::vector<Real>> grads;
    grads.reserve(params.items.size());
    double norm2 = 0;
    for (const auto& [name, p] : params.items) {
      grads.push_back(p.grad_or_zeros());
      for (Real gv : grads.back()) norm2 += static_cast<double>(gv) * static_cast<double>(gv);
    }
    const double norm = std::sqrt(norm2);
    const double scale = (clip > 0 && norm > clip) ? clip / norm : 1.0;

    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t k = 0; k < params.items.size(); ++k) {
      const auto& name = params.items[k].first;
      auto handle = params.items[k].second;  // shares storage with the model
      auto& value = handle.value_mut();
      auto& mk = m[name];
      auto& vk = v[name];
      if (mk.empty()) mk.assign(value.size(), Real(0));
      if (vk.empty()) vk.assign(value.size(), Real(0));
      if (mk.size() != value.size() || vk.size() != value.size())
        fail("Adam: stored moments for " + name + " do not match the parameter size");
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double gi = static_cast<double>(grads[k][i]) * scale;
        mk[i] = static_cast<Real>(beta1 * mk[i] + (1 - beta1) * gi);
        vk[i] = static_cast<Real>(beta2 * vk[i] + (1 - beta2) * gi * gi);
        const double mhat = mk[i] / c1;
        const double vhat = vk[i] / c2;
        value[i] -= static_cast<Real>(lr * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }
};

// Parameter-group hashes around the two phases, for decoupling audits.
struct StepAudit {
  std::uint64_t main_before = 0, main_after_disc = 0, main_after = 0;
  std::uint64_t disc_before = 0, disc_after_disc = 0, disc_after = 0;
  double max_main_grad_during_disc = 0;
};

template <class Real>
struct Trainer {
  M4serModel<Real>& model;
  TrainConfig cfg;
  Adam<Real> opt_main, opt_disc;
  Rng rng;                  // dropout stream, saved in checkpoints
  std::size_t epoch = 0;    // completed epochs

  Trainer(M4serModel<Real>& model_, const TrainConfig& cfg_)
      : model(model_), cfg(validated(cfg_)), rng(mix_seed(cfg_.seed, 0x52a9)) {}

  static TrainConfig validated(TrainConfig c) {
    c.validate();
    return c;
  }

  LossBundle step(const Batch& batch, std::size_t batch_index = 0, StepAudit* audit = nullptr) {
    Graph<Real> g;
    Runtime<Real> rt{g, rng, true, cfg.model.dropout};
    auto fwd = model.forward_batch(rt, batch);
    const auto main_p = model.main_params();
    const auto disc_p = model.disc_params();
    if (audit) {
      audit->main_before = main_p.value_hash();
      audit->disc_before = disc_p.value_hash();
    }

    LossBundle out;
    const bool adversarial = cfg.model.modality == Modality::both;
    Tensor<Real> l_adv;
    if (adversarial) {
      auto d_s = model.disc.score(g, fwd.speech_specific.detach());
      auto d_t = model.disc.score(g, fwd.text_specific.detach());
      auto d_i = model.disc.score(g, fwd.invariant.detach());
      auto gan = gan_losses(g, d_s, d_t, d_i);
      g.backward(g.scalar_mul(gan.l_gan, Real(-1)));  // ascent as negated descent
      if (audit)
        for (const auto& [name, p] : main_p.items)
          for (Real gv : p.grad_or_zeros())
            audit->max_main_grad_during_disc =
                std::max(audit->max_main_grad_during_disc, std::abs(static_cast<double>(gv)));
      opt_disc.step(disc_p, cfg.learning_rate, cfg.grad_clip);
      g.zero_grads();
      out.l_d = gan.l_d.item();

      l_adv = generator_loss(g, model.disc.score(g, fwd.invariant));
    } else {
      l_adv = Tensor<Real>::zeros({});
    }
    if (audit) {
      audit->main_after_disc = main_p.value_hash();
      audit->disc_after_disc = disc_p.value_hash();
    }

    auto l_er = er_loss(g, fwd.probs, batch.labels);
    auto l_aed = adversarial ? aed_loss(g, fwd.aed_logits, fwd.aed_labels, cfg.aed_reduction)
                             : Tensor<Real>::zeros({});
    auto l_aec =
        adversarial ? aec_loss(g, fwd.aec_logits, fwd.aec_targets) : Tensor<Real>::zeros({});
    auto l_lcl = lcl_loss(g, fwd.pooled, batch.labels, cfg.weights.tau, cfg.lcl_include_self);
    Tensor<Real> total;
    try {
      total = total_loss(g, l_er, l_aed, l_aec, l_adv, l_lcl, cfg.weights);
    } catch (const Error& e) {
      fail(std::string(e.what()) + " (batch " + std::to_string(batch_index) + ")");
    }
    g.backward(total);
    opt_main.step(main_p, cfg.learning_rate, cfg.grad_clip);
    g.zero_grads();
    if (audit) {
      audit->main_after = main_p.value_hash();
      audit->disc_after = disc_p.value_hash();
    }

    out.l_er = l_er.item();
    out.l_aed = l_aed.item();
    out.l_aec = l_aec.item();
    out.l_g = adversarial ? l_adv.item() : 0.0;
    out.l_gan = out.l_d + out.l_g;
    out.l_lcl = l_lcl.item();
    out.total = total.item();
    return out;
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  LossBundle mean;
  double val_wa = -1, val_ua = -1, val_acc = -1, val_wf1 = -1;  // negative = no split
};

struct FitResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0 when no validation split was given
  double best_metric = -1;
};

// ---- checkpoint IO ----

namespace detail {

inline void ck_u32(std::ostream& os, std::uint32_t x) { put_u32(os, x); }

inline void ck_u64(std::ostream& os, std::uint64_t x) {
  put_u32(os, static_cast<std::uint32_t>(x));
  put_u32(os, static_cast<std::uint32_t>(x >> 32));
}

inline std::uint32_t ck_read_u32(std::istream& is, const char* what) {
  const auto at = is.tellg();
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    fail("checkpoint: truncated reading " + std::string(what) + " at offset " +
         std::to_string(static_cast<long long>(at)));
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t ck_read_u64(std::istream& is, const char* what) {
  const std::uint64_t lo = ck_read_u32(is, what);
  const std::uint64_t hi = ck_read_u32(is, what);
  return lo | (hi << 32);
}

inline std::string ck_read_string(std::istream& is, const char* what) {
  const auto n = ck_read_u32(is, what);
  std::string s(n, '\0');
  const auto at = is.tellg();
  if (n && !is.read(s.data(), n))
    fail("checkpoint: truncated reading " + std::string(what) + " at offset " +
         std::to_string(static_cast<long long>(at)));
  return s;
}

template <class Real>
void ck_real_block(std::ostream& os, const std::vector<Real>& xs) {
  for (Real x : xs) {
    if constexpr (sizeof(Real) == 4) {
      std::uint32_t bits;
      std::memcpy(&bits, &x, 4);
      ck_u32(os, bits);
    } else {
      std::uint64_t bits;
      std::memcpy(&bits, &x, 8);
      ck_u64(os, bits);
    }
  }
}

template <class Real>
std::vector<Real> ck_read_real_block(std::istream& is, std::size_t n, const char* what) {
  std::vector<Real> xs(n);
  for (auto& x : xs) {
    if constexpr (sizeof(Real) == 4) {
      const std::uint32_t bits = ck_read_u32(is, what);
      std::memcpy(&x, &bits, 4);
    } else {
      const std::uint64_t bits = ck_read_u64(is, what);
      std::memcpy(&x, &bits, 8);
    }
  }
  return xs;
}

template <class Real>
void ck_adam(std::ostream& os, const Adam<Real>& opt) {
  ck_u64(os, opt.t);
  ck_u32(os, static_cast<std::uint32_t>(opt.m.size()));
  for (const auto& [name, mk] : opt.m) {
    const auto it = opt.v.find(name);
    if (it == opt.v.end()) fail("checkpoint: optimizer entry " + name + " lacks a second moment");
    ck_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    ck_u64(os, mk.size());
    ck_real_block(os, mk);
    ck_real_block(os, it->second);
  }
}

template <class Real>
void ck_read_adam(std::istream& is, Adam<Real>& opt) {
  opt.t = ck_read_u64(is, "optimizer step count");
  opt.m.clear();
  opt.v.clear();
  const auto n = ck_read_u32(is, "optimizer entry count");
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto name = ck_read_string(is, "optimizer entry name");
    const auto len = ck_read_u64(is, "optimizer entry length");
    opt.m[name] = ck_read_real_block<Real>(is, len, "optimizer first moment");
    opt.v[name] = ck_read_real_block<Real>(is, len, "optimizer second moment");
  }
}

}  // namespace detail

constexpr std::uint32_t kCheckpointVersion = 1;

template <class Real>
void save_checkpoint(const std::filesystem::path& path, const Trainer<Real>& trainer,
                     const std::string& config_text = "") {
  namespace fs = std::filesystem;
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) fail("save_checkpoint: cannot open " + tmp.string());
    os.write("M4SR", 4);
    detail::ck_u32(os, kCheckpointVersion);
    detail::ck_u64(os, trainer.epoch);
    const auto rng_state = trainer.rng.state();
    detail::ck_u32(os, static_cast<std::uint32_t>(rng_state.size()));
    os.write(rng_state.data(), static_cast<std::streamsize>(rng_state.size()));
    detail::ck_u32(os, static_cast<std::uint32_t>(config_text.size()));
    os.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
    os.put(sizeof(Real) == 4 ? '\0' : '\1');

    const auto params = trainer.model.params();
    detail::ck_u32(os, static_cast<std::uint32_t>(params.items.size()));
    for (const auto& [name, p] : params.items) {
      detail::ck_u32(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::ck_u32(os, static_cast<std::uint32_t>(p.shape().size()));
      for (auto dim : p.shape()) detail::ck_u64(os, dim);
      detail::ck_real_block(os, p.value());
    }
    detail::ck_adam(os, trainer.opt_main);
    detail::ck_adam(os, trainer.opt_disc);
    if (!os) fail("save_checkpoint: write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

// Header fields only, enough to rebuild the right model before a full load.
struct CheckpointInfo {
  std::uint64_t epoch = 0;
  std::string config_text;
  char dtype = '\1';  // '\0' f32, '\1' f64
};

inline CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("read_checkpoint_info: cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "M4SR", 4) != 0)
    fail("read_checkpoint_info: bad magic in " + path.string());
  const auto version = detail::ck_read_u32(is, "version");
  if (version != kCheckpointVersion)
    fail("read_checkpoint_info: unsupported version " + std::to_string(version));
  CheckpointInfo info;
  info.epoch = detail::ck_read_u64(is, "epoch");
  detail::ck_read_string(is, "rng state");
  info.config_text = detail::ck_read_string(is, "config snapshot");
  if (!is.get(info.dtype)) fail("checkpoint: truncated reading dtype");
  return info;
}

// Loads a checkpoint into the trainer. The whole file is staged and validated
// before anything is written back, so a corrupt file changes no state. With
// strict off, parameters missing from the file keep their current values and
// unknown records are ignored (the inference-path exclusion check feeds the
// model a checkpoint with the detection and correction heads stripped).
template <class Real>
std::string load_checkpoint(const std::filesystem::path& path, Trainer<Real>& trainer,
                            bool strict = true) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("load_checkpoint: cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "M4SR", 4) != 0)
    fail("load_checkpoint: bad magic in " + path.string());
  const auto version = detail::ck_read_u32(is, "version");
  if (version != kCheckpointVersion)
    fail("load_checkpoint: unsupported version " + std::to_string(version));
  const auto epoch = detail::ck_read_u64(is, "epoch");
  const auto rng_state = detail::ck_read_string(is, "rng state");
  const auto config_text = detail::ck_read_string(is, "config snapshot");
  char dtype;
  if (!is.get(dtype)) fail("checkpoint: truncated reading dtype");
  const char expect = sizeof(Real) == 4 ? '\0' : '\1';
  if (dtype != expect)
    fail(std::string("load_checkpoint: dtype ") + (dtype == '\0' ? "f32" : "f64") +
         " does not match the model's " + (expect == '\0' ? "f32" : "f64"));

  std::map<std::string, std::pair<Shape, std::vector<Real>>> staged;
  const auto n_params = detail::ck_read_u32(is, "parameter count");
  for (std::uint32_t i = 0; i < n_params; ++i) {
    const auto name = detail::ck_read_string(is, "parameter name");
    const auto rank = detail::ck_read_u32(is, "parameter rank");
    Shape shape(rank);
    for (auto& dim : shape) dim = detail::ck_read_u64(is, "parameter dim");
    auto data = detail::ck_read_real_block<Real>(is, numel(shape), "parameter data");
    if (!staged.emplace(name, std::make_pair(std::move(shape), std::move(data))).second)
      fail("load_checkpoint: duplicate parameter " + name);
  }
  Adam<Real> staged_main, staged_disc;
  detail::ck_read_adam(is, staged_main);
  detail::ck_read_adam(is, staged_disc);
  char extra;
  if (is.read(&extra, 1)) fail("load_checkpoint: trailing bytes in " + path.string());

  const auto params = trainer.model.params();
  std::size_t used = 0;
  for (const auto& [name, p] : params.items) {
    const auto it = staged.find(name);
    if (it == staged.end()) {
      if (strict) fail("load_checkpoint: parameter " + name + " missing from " + path.string());
      continue;
    }
    if (it->second.first != p.shape())
      fail("load_checkpoint: parameter " + name + " has shape " + shape_str(it->second.first) +
           " but the model expects " + shape_str(p.shape()));
    ++used;
  }
  if (strict && used != staged.size())
    fail("load_checkpoint: file holds " + std::to_string(staged.size() - used) +
         " parameters unknown to the model");

  for (const auto& [name, p] : params.items) {
    const auto it = staged.find(name);
    if (it == staged.end()) continue;
    auto handle = p;
    handle.value_mut() = it->second.second;
  }
  trainer.opt_main = std::move(staged_main);
  trainer.opt_disc = std::move(staged_disc);
  trainer.epoch = epoch;
  trainer.rng.set_state(rng_state);
  return config_text;
}

// ---- the epoch loop ----

namespace detail {

inline double selection_value(const MetricsReport& r, SelectionMetric m) {
  return m == SelectionMetric::wa ? r.wa : r.wf1;
}

}  // namespace detail

// Runs the remaining epochs (resume-aware), evaluating on the validation
// split after each one. The best-validation parameters are restored into the
// model before returning; when an output directory is given, every epoch
// appends to history.tsv and refreshes last.m4sr / best.m4sr.
template <class Real>
FitResult run_training(Trainer<Real>& trainer, const std::vector<Utterance>& train_utts,
                       const std::vector<Utterance>& val_utts,
                       const std::filesystem::path& out_dir = {},
                       const std::string& config_text = "") {
  if (train_utts.empty()) fail("run_training: empty training set");
  const auto& cfg = trainer.cfg;
  const auto ds = prepare_dataset(train_utts);

  namespace fs = std::filesystem;
  std::ofstream history;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    const auto hist_path = out_dir / "history.tsv";
    const bool fresh = !fs::exists(hist_path) || fs::file_size(hist_path) == 0;
    history.open(hist_path, std::ios::app);
    if (!history) fail("run_training: cannot open " + hist_path.string());
    if (fresh)
      history << "epoch\tl_er\tl_aed\tl_aec\tl_d\tl_g\tl_gan\tl_lcl\ttotal\tval_wa\tval_ua\tval_"
                 "acc\tval_wf1\n";
  }

  FitResult result;
  std::vector<std::vector<Real>> best_values;
  std::size_t step_index = 0;
  for (std::size_t e = trainer.epoch + 1; e <= cfg.epochs; ++e) {
    BatchOptions opt;
    opt.batch_size = cfg.batch_size;
    opt.seed = mix_seed(cfg.seed, e);
    const auto batches = make_batches(ds, opt);
    if (batches.empty()) fail("run_training: no usable batches (dataset smaller than two samples?)");

    EpochRecord rec;
    rec.epoch = e;
    for (const auto& batch : batches) {
      const auto b = trainer.step(batch, step_index++);
      rec.mean.l_er += b.l_er;
      rec.mean.l_aed += b.l_aed;
      rec.mean.l_aec += b.l_aec;
      rec.mean.l_d += b.l_d;
      rec.mean.l_g += b.l_g;
      rec.mean.l_gan += b.l_gan;
      rec.mean.l_lcl += b.l_lcl;
      rec.mean.total += b.total;
    }
    const auto n = static_cast<double>(batches.size());
    rec.mean.l_er /= n;
    rec.mean.l_aed /= n;
    rec.mean.l_aec /= n;
    rec.mean.l_d /= n;
    rec.mean.l_g /= n;
    rec.mean.l_gan /= n;
    rec.mean.l_lcl /= n;
    rec.mean.total /= n;
    trainer.epoch = e;

    if (!val_utts.empty()) {
      std::vector<int> labels;
      for (const auto& u : val_utts) labels.push_back(u.emotion);
      const auto report =
          classification_metrics(predict_all(trainer.model, val_utts), labels, cfg.model.num_classes);
      rec.val_wa = report.wa;
      rec.val_ua = report.ua;
      rec.val_acc = report.acc;
      rec.val_wf1 = report.wf1;
      const double metric = detail::selection_value(report, cfg.selection_metric);
      if (metric > result.best_metric) {
        result.best_metric = metric;
        result.best_epoch = e;
        best_values.clear();
        for (const auto& [name, p] : trainer.model.params().items) best_values.push_back(p.value());
        if (!out_dir.empty()) save_checkpoint(out_dir / "best.m4sr", trainer, config_text);
      }
    }
    result.history.push_back(rec);

    if (history.is_open()) {
      history << rec.epoch << '\t' << rec.mean.l_er << '\t' << rec.mean.l_aed << '\t'
              << rec.mean.l_aec << '\t' << rec.mean.l_d << '\t' << rec.mean.l_g << '\t'
              << rec.mean.l_gan << '\t' << rec.mean.l_lcl << '\t' << rec.mean.total << '\t'
              << rec.val_wa << '\t' << rec.val_ua << '\t' << rec.val_acc << '\t' << rec.val_wf1
              << '\n';
      history.flush();
    }
    if (!out_dir.empty()) save_checkpoint(out_dir / "last.m4sr", trainer, config_text);
  }

  if (!best_values.empty()) {
    const auto params = trainer.model.params();
    for (std::size_t k = 0; k < params.items.size(); ++k) {
      auto handle = params.items[k].second;
      handle.value_mut() = best_values[k];
    }
  }
  return result;
}

template <class Real>
FitResult fit(M4serModel<Real>& model, const std::vector<Utterance>& train_utts,
              const std::vector<Utterance>& val_utts, const TrainConfig& cfg,
              const std::filesystem::path& out_dir = {}) {
  Trainer<Real> trainer(model, cfg);
  return run_training(trainer, train_utts, val_utts, out_dir);
}

}  // namespace m4ser
