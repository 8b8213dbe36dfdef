#pragma once

// Inference and reported metrics: the accuracy family with its confusion
// matrix, dynamic-time-warping distance between representation sequences,
// pairwise-cosine cluster statistics, adversarial-equilibrium measurements,
// and detection-gated transcript correction.

#include <algorithm>
#include <cmath>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "m4ser/model.hpp"

namespace m4ser {

template <class Real>
int predict(const M4serModel<Real>& model, const Utterance& u) {
  return argmax_index(model.infer_probs(u.speech, u.asr_tokens));
}

template <class Real>
std::vector<int> predict_all(const M4serModel<Real>& model, const std::vector<Utterance>& utts) {
  std::vector<int> out;
  out.reserve(utts.size());
  for (const auto& u : utts) out.push_back(predict(model, u));
  return out;
}

struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::size_t> counts;  // row = true label, column = predicted

  explicit ConfusionMatrix(std::size_t classes_ = 0) : classes(classes_), counts(classes_ * classes_, 0) {}

  std::size_t& at(std::size_t truth, std::size_t pred) { return counts[truth * classes + pred]; }
  std::size_t at(std::size_t truth, std::size_t pred) const { return counts[truth * classes + pred]; }

  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }

  std::size_t row_sum(std::size_t truth) const {
    std::size_t n = 0;
    for (std::size_t p = 0; p < classes; ++p) n += at(truth, p);
    return n;
  }

  std::size_t col_sum(std::size_t pred) const {
    std::size_t n = 0;
    for (std::size_t t = 0; t < classes; ++t) n += at(t, pred);
    return n;
  }
};

struct ClassStats {
  double precision = 0, recall = 0, f1 = 0;
  std::size_t support = 0;
};

struct MetricsReport {
  ConfusionMatrix confusion;
  std::vector<ClassStats> per_class;
  double wa = 0, ua = 0, acc = 0, wf1 = 0;
  double corrected_wer = -1;  // negative means "not measured"
};

// WA is the overall fraction correct (equal to ACC); UA averages per-class
// recall over the classes that actually appear; W-F1 weights per-class F1 by
// support. Classes absent from the labels are excluded from UA with a notice.
inline MetricsReport classification_metrics(const std::vector<int>& preds,
                                            const std::vector<int>& labels, std::size_t classes) {
  if (preds.empty()) fail("classification_metrics: empty input");
  if (preds.size() != labels.size())
    fail("classification_metrics: " + std::to_string(preds.size()) + " predictions for " +
         std::to_string(labels.size()) + " labels");
  if (classes < 2) fail("classification_metrics: need at least two classes");

  MetricsReport r;
  r.confusion = ConfusionMatrix(classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      fail("classification_metrics: label " + std::to_string(labels[i]) + " outside [0, " +
           std::to_string(classes) + ")");
    if (preds[i] < 0 || static_cast<std::size_t>(preds[i]) >= classes)
      fail("classification_metrics: prediction " + std::to_string(preds[i]) + " outside [0, " +
           std::to_string(classes) + ")");
    r.confusion.at(static_cast<std::size_t>(labels[i]), static_cast<std::size_t>(preds[i]))++;
  }

  const auto total = static_cast<double>(r.confusion.total());
  std::size_t diag = 0;
  for (std::size_t c = 0; c < classes; ++c) diag += r.confusion.at(c, c);
  r.wa = static_cast<double>(diag) / total;
  r.acc = r.wa;

  r.per_class.resize(classes);
  double recall_sum = 0, wf1_sum = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    auto& s = r.per_class[c];
    s.support = r.confusion.row_sum(c);
    const std::size_t hit = r.confusion.at(c, c);
    const std::size_t predicted = r.confusion.col_sum(c);
    s.precision = predicted == 0 ? 0.0 : static_cast<double>(hit) / predicted;
    s.recall = s.support == 0 ? 0.0 : static_cast<double>(hit) / s.support;
    s.f1 = (s.precision + s.recall) == 0 ? 0.0 : 2 * s.precision * s.recall / (s.precision + s.recall);
    if (s.support == 0) {
      std::cerr << "[eval] class " << c << " absent from labels; excluded from UA\n";
      continue;
    }
    ++present;
    recall_sum += s.recall;
    wf1_sum += (s.support / total) * s.f1;
  }
  r.ua = recall_sum / present;
  r.wf1 = wf1_sum;
  return r;
}

enum class DtwMetric { cosine, euclidean };

inline const char* dtw_metric_name(DtwMetric m) {
  return m == DtwMetric::cosine ? "cosine" : "euclidean";
}

inline DtwMetric parse_dtw_metric(const std::string& s) {
  if (s == "cosine") return DtwMetric::cosine;
  if (s == "euclidean") return DtwMetric::euclidean;
  fail("dtw_metric must be cosine or euclidean, got '" + s + "'");
}

namespace detail {

template <class Real>
double dtw_local_cost(const Real* a, const Real* b, std::size_t d, DtwMetric metric) {
  if (metric == DtwMetric::euclidean) {
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = static_cast<double>(a[k]) - static_cast<double>(b[k]);
      s += diff * diff;
    }
    return std::sqrt(s);
  }
  double dot = 0, na = 0, nb = 0;
  for (std::size_t k = 0; k < d; ++k) {
    dot += static_cast<double>(a[k]) * static_cast<double>(b[k]);
    na += static_cast<double>(a[k]) * static_cast<double>(a[k]);
    nb += static_cast<double>(b[k]) * static_cast<double>(b[k]);
  }
  if (na == 0 || nb == 0) fail("dtw_distance: zero-norm row");
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

// Classic dynamic-time-warping over a per-pair local cost, reported as total
// path cost divided by path length. Ties on cost prefer the shorter path, so
// the result is well defined.
template <class Real>
double dtw_distance(const Tensor<Real>& a, const Tensor<Real>& b,
                    DtwMetric metric = DtwMetric::cosine) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1])
    fail("dtw_distance: inputs must be rank-2 with matching widths, got " + shape_str(a.shape()) +
         " and " + shape_str(b.shape()));
  const std::size_t p = a.shape()[0], q = b.shape()[0], d = a.shape()[1];

  struct Cell {
    double cost = 0;
    std::size_t len = 0;
  };
  std::vector<Cell> dp(p * q);
  auto better = [](const Cell& x, const Cell& y) {
    return x.cost < y.cost || (x.cost == y.cost && x.len < y.len);
  };
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) {
      const double c = detail::dtw_local_cost(a.value().data() + i * d, b.value().data() + j * d, d, metric);
      Cell best;
      if (i == 0 && j == 0) {
        best = Cell{0, 0};
      } else {
        bool seeded = false;
        auto consider = [&](const Cell& prev) {
          if (!seeded || better(prev, best)) best = prev;
          seeded = true;
        };
        if (i > 0) consider(dp[(i - 1) * q + j]);
        if (j > 0) consider(dp[i * q + j - 1]);
        if (i > 0 && j > 0) consider(dp[(i - 1) * q + j - 1]);
      }
      dp[i * q + j] = Cell{best.cost + c, best.len + 1};
    }
  const auto& last = dp[(p - 1) * q + q - 1];
  return last.cost / static_cast<double>(last.len);
}

struct ClusterStats {
  double intra = 0, inter = 0, score = 0;
};

// Mean pairwise cosine within classes minus across classes; positive scores
// mean same-label vectors sit closer than different-label ones.
template <class Real>
ClusterStats cluster_separation(const std::vector<std::vector<Real>>& pooled,
                                const std::vector<int>& labels) {
  if (pooled.size() != labels.size())
    fail("cluster_separation: " + std::to_string(pooled.size()) + " vectors for " +
         std::to_string(labels.size()) + " labels");
  std::vector<std::size_t> counts;
  for (int l : labels) {
    if (l < 0) fail("cluster_separation: negative label");
    if (static_cast<std::size_t>(l) >= counts.size()) counts.resize(l + 1, 0);
    counts[static_cast<std::size_t>(l)]++;
  }
  std::size_t present = 0;
  for (auto c : counts) {
    if (c == 1) fail("cluster_separation: every present class needs at least two samples");
    if (c > 0) ++present;
  }
  if (present < 2) fail("cluster_separation: need at least two classes present");

  auto cos = [&](const std::vector<Real>& x, const std::vector<Real>& y) {
    double dot = 0, nx = 0, ny = 0;
    for (std::size_t k = 0; k < x.size(); ++k) {
      dot += static_cast<double>(x[k]) * static_cast<double>(y[k]);
      nx += static_cast<double>(x[k]) * static_cast<double>(x[k]);
      ny += static_cast<double>(y[k]) * static_cast<double>(y[k]);
    }
    if (nx == 0 || ny == 0) fail("cluster_separation: zero-norm vector");
    return dot / (std::sqrt(nx) * std::sqrt(ny));
  };

  double intra = 0, inter = 0;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < pooled.size(); ++i)
    for (std::size_t j = i + 1; j < pooled.size(); ++j) {
      const double c = cos(pooled[i], pooled[j]);
      if (labels[i] == labels[j]) {
        intra += c;
        ++n_intra;
      } else {
        inter += c;
        ++n_inter;
      }
    }
  ClusterStats s;
  s.intra = intra / n_intra;
  s.inter = inter / n_inter;
  s.score = s.intra - s.inter;
  return s;
}

// Pooled eval-mode representation of every utterance, for cluster statistics.
template <class Real>
std::vector<std::vector<Real>> pooled_vectors(const M4serModel<Real>& model,
                                              const std::vector<Utterance>& utts) {
  std::vector<std::vector<Real>> out;
  out.reserve(utts.size());
  for (const auto& u : utts) {
    Graph<Real> g(false);
    Rng rng(0);
    Runtime<Real> rt{g, rng, false, 0.0};
    Tensor<Real> feats;
    if (model.cfg.modality != Modality::text) feats = feature_tensor<Real>(u.speech);
    out.push_back(model.forward_item(rt, feats, u.asr_tokens).pooled.value());
  }
  return out;
}

// Eval-mode adversarial equilibrium measurements over a corpus: discriminator
// scores on the invariant frames (0.5 at equilibrium), the generator and
// discriminator losses those scores imply, and the discriminator's accuracy
// at separating the two modality-specific frame populations.
struct GanReport {
  double mean_inv_score = 0;
  double l_g = 0, l_d = 0;
  double disc_accuracy = 0;
  std::size_t frames = 0;
};

template <class Real>
GanReport gan_report(const M4serModel<Real>& model, const std::vector<Utterance>& utts) {
  if (model.cfg.modality != Modality::both) fail("gan_report: needs the two-modality model");
  if (utts.empty()) fail("gan_report: empty corpus");
  double inv_sum = 0, log_d = 0, log_1md = 0, ld_s = 0, ld_t = 0;
  std::size_t n_inv = 0, n_s = 0, n_t = 0, correct = 0;
  for (const auto& u : utts) {
    Graph<Real> g(false);
    Rng rng(0);
    Runtime<Real> rt{g, rng, false, 0.0};
    auto item = model.forward_item(rt, feature_tensor<Real>(u.speech), u.asr_tokens);
    const auto inv = model.disc.score(g, item.fusion.invariant).value();
    const auto ds = model.disc.score(g, item.fusion.speech_specific).value();
    const auto dt = model.disc.score(g, item.fusion.text_specific).value();
    for (auto v : inv) {
      inv_sum += v;
      log_d += std::log(v);
      log_1md += std::log(1 - v);
      ++n_inv;
    }
    for (auto v : ds) {
      ld_s += std::log(v);
      correct += v > 0.5 ? 1 : 0;
      ++n_s;
    }
    for (auto v : dt) {
      ld_t += std::log(1 - v);
      correct += v < 0.5 ? 1 : 0;
      ++n_t;
    }
  }
  GanReport r;
  r.frames = n_inv;
  r.mean_inv_score = inv_sum / n_inv;
  r.l_g = -(log_d + log_1md) / n_inv;
  r.l_d = ld_s / n_s + ld_t / n_t;
  r.disc_accuracy = static_cast<double>(correct) / (n_s + n_t);
  return r;
}

// Detection-gated transcript correction over a corpus: tokens the detector
// calls K are copied, D dropped, C replaced by the decoder's greedy span.
// With gating off, every token is treated as C.
struct CorrectionResult {
  double input_wer = 0, corrected_wer = 0;
  std::vector<TokenSeq> corrected;
};

template <class Real>
CorrectionResult correct_corpus(const M4serModel<Real>& model, const std::vector<Utterance>& utts,
                                bool gated = true) {
  if (model.cfg.modality != Modality::both) fail("correct_corpus: needs the two-modality model");
  if (utts.empty()) fail("correct_corpus: empty corpus");
  CorrectionResult out;
  std::size_t edits = 0, ref_len = 0;
  for (const auto& u : utts) {
    Graph<Real> g(false);
    Rng rng(0);
    Runtime<Real> rt{g, rng, false, 0.0};
    auto h_t = model.text.forward(rt, u.asr_tokens);
    std::vector<EditLabel> labels(u.asr_tokens.size(), EditLabel::Change);
    if (gated) {
      const auto probs = model.aed.probs(g, h_t);
      for (std::size_t i = 0; i < labels.size(); ++i) {
        std::vector<Real> row{probs.at(i, 0), probs.at(i, 1), probs.at(i, 2)};
        labels[i] = static_cast<EditLabel>(argmax_index(row));
      }
    }
    auto corrected =
        greedy_correct(rt, model.aec, u.asr_tokens, h_t, labels, model.cfg.max_correction_len);
    edits += levenshtein_distance(corrected, u.gt_tokens);
    ref_len += u.gt_tokens.size();
    out.corrected.push_back(std::move(corrected));
  }
  out.input_wer = corpus_wer(utts);
  out.corrected_wer = static_cast<double>(edits) / static_cast<double>(ref_len);
  return out;
}

inline nlohmann::json metrics_json(const MetricsReport& r) {
  nlohmann::json j;
  j["wa"] = r.wa;
  j["ua"] = r.ua;
  j["acc"] = r.acc;
  j["wf1"] = r.wf1;
  if (r.corrected_wer >= 0) j["corrected_wer"] = r.corrected_wer;
  j["classes"] = nlohmann::json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& s = r.per_class[c];
    j["classes"].push_back({{"class", c},
                            {"precision", s.precision},
                            {"recall", s.recall},
                            {"f1", s.f1},
                            {"support", s.support}});
  }
  j["confusion"] = nlohmann::json::array();
  for (std::size_t t = 0; t < r.confusion.classes; ++t) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t p = 0; p < r.confusion.classes; ++p) row.push_back(r.confusion.at(t, p));
    j["confusion"].push_back(row);
  }
  return j;
}

}  // namespace m4ser
