// Acceptance suite: one PASS/FAIL line per criterion with the measured
// values. Exits nonzero when any criterion fails. Every run is seeded, so
// reported numbers are reproducible bit for bit on the same build.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "m4ser/config.hpp"
#include "m4ser/diagnostics.hpp"

namespace fs = std::filesystem;
using namespace m4ser;

namespace {

struct Outcome {
  bool ok = false;
  std::string detail;
};

int g_failures = 0;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* pattern, ...) {
  char buf[512];
  va_list args;
  va_start(args, pattern);
  std::vsnprintf(buf, sizeof buf, pattern, args);
  va_end(args);
  return buf;
}

void report(int idx, const char* name, const Outcome& r) {
  std::printf("%s  C%-2d %-26s %s\n", r.ok ? "PASS" : "FAIL", idx, name, r.detail.c_str());
  std::fflush(stdout);
  if (!r.ok) ++g_failures;
}

fs::path fresh_dir(const std::string& tag) {
  const auto dir = fs::temp_directory_path() / ("m4ser_accept_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ModelConfig micro_model() {
  ModelConfig m;
  m.d = 8;
  m.d_vocab = 16;
  m.attention_layers = 1;
  m.attention_heads = 2;
  m.ff_mult = 2;
  m.num_classes = 4;
  m.feat_dim = 4;
  m.conv_stride = 2;
  m.max_len = 64;
  m.dropout = 0.0;
  return m;
}

SynthConfig micro_synth(std::uint64_t seed) {
  SynthConfig s;
  s.classes = 4;
  s.feat_dim = 4;
  s.vocab = 16;
  s.target_wer = 0.25;
  s.min_frames = 3;
  s.max_frames = 9;
  s.min_tokens = 2;
  s.max_tokens = 6;
  s.seed = seed;
  return s;
}

Batch one_batch(const PreparedDataset& ds, std::size_t n) {
  BatchOptions opt;
  opt.batch_size = n;
  opt.shuffle = false;
  auto batches = make_batches(ds, opt);
  if (batches.size() != 1) fail("one_batch: expected a single batch");
  return batches[0];
}

// ---- 1: finite differences through every loss term on a 2-sample batch ----

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();

  // Both samples share a class so the contrastive term has positives; the
  // seed scan keeps at least one Change task in the batch for the decoder.
  std::vector<Utterance> pair;
  for (std::uint64_t seed = 17; seed < 40; ++seed) {
    const auto utts = generate_synthetic(micro_synth(seed), 8);
    pair = {utts[0], utts[4]};
    bool has_change = false;
    for (const auto& u : pair)
      for (const auto label : derive_edit_script(u.asr_tokens, u.gt_tokens).labels)
        has_change |= label == EditLabel::Change;
    if (has_change && pair[0].emotion == pair[1].emotion) break;
    pair.clear();
  }
  if (pair.empty()) return {false, "no 2-sample batch with a Change task found"};

  const std::vector<Utterance> two(pair);
  const auto ds = prepare_dataset(two);
  const auto batch = one_batch(ds, 2);

  TrainConfig cfg;
  cfg.model = micro_model();
  cfg.batch_size = 2;
  Rng rng(1);
  M4serModel<double> model(cfg.model, rng);

  const auto reports = gradcheck_model(model, batch, cfg, /*coords_per_param=*/0, /*eps=*/1e-5);
  double worst = 0.0;
  std::string worst_term = "none";
  std::size_t coords = 0;
  for (const auto& r : reports) {
    if (r.coords == 0) return {false, fmt("term %s is constant on this batch", r.term.c_str())};
    coords += r.coords;
    if (r.max_rel > worst) {
      worst = r.max_rel;
      worst_term = r.term;
    }
  }
  const double dt = seconds_since(t0);
  const bool ok = reports.size() == 7 && worst < 1e-4 && dt < 60.0;
  return {ok, fmt("max_rel %.2e (%s) over %zu terms, %zu coords (%.1f s, cap 60)", worst,
                  worst_term.c_str(), reports.size(), coords, dt)};
}

// ---- 2: alignment against exhaustive enumeration ----

std::size_t lcs_brute(const TokenSeq& a, const TokenSeq& b, std::size_t i, std::size_t j) {
  if (i == a.size() || j == b.size()) return 0;
  if (a[i] == b[j]) return 1 + lcs_brute(a, b, i + 1, j + 1);
  return std::max(lcs_brute(a, b, i + 1, j), lcs_brute(a, b, i, j + 1));
}

Outcome alignment_oracle() {
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<TokenSeq> seqs{TokenSeq{}};
  for (std::size_t len = 1; len <= 6; ++len) {
    std::size_t total = 1;
    for (std::size_t k = 0; k < len; ++k) total *= 3;
    for (std::size_t code = 0; code < total; ++code) {
      TokenSeq s(len);
      std::size_t c = code;
      for (std::size_t k = 0; k < len; ++k) {
        s[k] = kFirstContentId + static_cast<std::int32_t>(c % 3);
        c /= 3;
      }
      seqs.push_back(std::move(s));
    }
  }

  std::size_t pairs = 0, bad = 0;
  for (const auto& a : seqs)
    for (const auto& b : seqs) {
      ++pairs;
      const auto anchors = lcs_align(a, b);
      bool good = anchors.size() == lcs_brute(a, b, 0, 0);
      for (std::size_t k = 0; k < anchors.size() && good; ++k) {
        good = a[anchors[k].first] == b[anchors[k].second];
        if (k > 0)
          good = good && anchors[k].first > anchors[k - 1].first &&
                 anchors[k].second > anchors[k - 1].second;
      }
      if (a.empty() && !b.empty()) {
        try {
          derive_edit_script(a, b);
          good = false;
        } catch (const Error&) {
        }
      } else {
        const auto script = derive_edit_script(a, b);
        good = good && script.labels.size() == a.size() && apply_edit_script(a, script) == b;
      }
      if (!good) ++bad;
    }

  Rng rng(29);
  std::size_t exact = 0;
  const std::size_t trials = 1000;
  for (std::size_t t = 0; t < trials; ++t) {
    TokenSeq gt(1 + rng.index(10));
    for (auto& tok : gt) tok = kFirstContentId + static_cast<std::int32_t>(rng.index(8));
    TokenSeq hyp;
    for (const auto tok : gt) {
      const double r = rng.uniform();
      if (r < 0.15) continue;
      hyp.push_back(r < 0.30 ? kFirstContentId + static_cast<std::int32_t>(rng.index(8)) : tok);
      if (rng.uniform() < 0.15)
        hyp.push_back(kFirstContentId + static_cast<std::int32_t>(rng.index(8)));
    }
    if (hyp.empty()) hyp.push_back(kFirstContentId + static_cast<std::int32_t>(rng.index(8)));
    if (apply_edit_script(hyp, derive_edit_script(hyp, gt)) == gt) ++exact;
  }

  const double dt = seconds_since(t0);
  const bool ok = bad == 0 && exact == trials && dt < 30.0;
  return {ok, fmt("%zu pairs, %zu mismatches; %zu/%zu corrupted pairs reconstructed (%.1f s, cap 30)",
                  pairs, bad, exact, trials, dt)};
}

// ---- 3: adversarial equilibrium on the default corpus ----

Outcome adversarial_equilibrium() {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg;
  cfg.train.epochs = 50;
  const auto utts = generate_synthetic(cfg.synth, cfg.synth_count);
  Rng rng(cfg.train.seed);
  M4serModel<double> model(cfg.train.model, rng);
  fit(model, utts, {}, cfg.train);
  const auto g = gan_report(model, utts);
  const double dt = seconds_since(t0);
  const bool ok = std::abs(g.mean_inv_score - 0.5) <= 0.05 && std::abs(g.l_g - 1.386) <= 0.05 &&
                  g.disc_accuracy >= 0.85 && dt < 1200.0;
  return {ok, fmt("inv score %.4f (0.5±0.05), l_g %.4f (1.386±0.05), spec-vs-spec acc %.4f (>=0.85) "
                  "(%.0f s, cap 1200)",
                  g.mean_inv_score, g.l_g, g.disc_accuracy, dt)};
}

// ---- 4: overfit a 64-sample set ----

Outcome overfit_small_set() {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg;
  cfg.synth_count = 64;
  cfg.train.epochs = 200;
  const auto utts = generate_synthetic(cfg.synth, cfg.synth_count);
  Rng rng(cfg.train.seed);
  M4serModel<double> model(cfg.train.model, rng);
  fit(model, utts, {}, cfg.train);
  std::vector<int> labels;
  for (const auto& u : utts) labels.push_back(u.emotion);
  const double wa = classification_metrics(predict_all(model, utts), labels, 4).wa;
  double l_er = 0.0;
  for (const auto& u : utts)
    l_er += -std::log(std::max(model.infer_probs(u.speech, u.asr_tokens)[u.emotion], 1e-300));
  l_er /= static_cast<double>(utts.size());
  const double dt = seconds_since(t0);
  const bool ok = wa >= 0.95 && l_er < 0.1 && dt < 600.0;
  return {ok, fmt("train WA %.4f (>=0.95), l_er %.5f (<0.1) (%.0f s, cap 600)", wa, l_er, dt)};
}

// ---- 5: the fused model beats both single-modality ablations ----

double train_and_score(Modality mod, const std::vector<Utterance>& train,
                       const std::vector<Utterance>& test, std::size_t epochs, std::uint64_t seed,
                       double lambda = 0.1, std::size_t batch = 0) {
  RunConfig cfg;
  cfg.train.epochs = epochs;
  cfg.train.seed = seed;
  cfg.train.model.modality = mod;
  cfg.train.weights.lambda = lambda;
  if (batch != 0) cfg.train.batch_size = batch;
  if (mod != Modality::both) {
    cfg.train.weights.alpha = 0.0;
    cfg.train.weights.gamma = 0.0;
  }
  Rng rng(seed);
  M4serModel<double> model(cfg.train.model, rng);
  fit(model, train, {}, cfg.train);
  std::vector<int> labels;
  for (const auto& u : test) labels.push_back(u.emotion);
  return classification_metrics(predict_all(model, test), labels, 4).wa;
}

Outcome multimodal_advantage() {
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  double worst_margin = 1.0;
  std::string per_seed;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    RunConfig cfg;
    cfg.synth.cue_mode = CueMode::split;
    cfg.synth.seed = seed * 1000 + 7;
    const auto utts = generate_synthetic(cfg.synth, 700);
    const std::vector<Utterance> train(utts.begin(), utts.begin() + 500);
    const std::vector<Utterance> test(utts.begin() + 500, utts.end());
    const double wa_both = train_and_score(Modality::both, train, test, 15, seed);
    const double wa_speech = train_and_score(Modality::speech, train, test, 15, seed);
    const double wa_text = train_and_score(Modality::text, train, test, 15, seed);
    const double margin = wa_both - std::max(wa_speech, wa_text);
    worst_margin = std::min(worst_margin, margin);
    ok = ok && margin >= 0.05;
    per_seed += fmt("%s%.3f/%.3f/%.3f", per_seed.empty() ? "" : " ", wa_both, wa_speech, wa_text);
  }
  const double dt = seconds_since(t0);
  ok = ok && dt < 2700.0;
  return {ok, fmt("both/speech/text WA per seed: %s; worst margin %.1f pts (>=5) (%.0f s, cap 2700)",
                  per_seed.c_str(), 100 * worst_margin, dt)};
}

// ---- 6: the contrastive term tightens test-set geometry ----

Outcome contrastive_geometry() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> dsep, dwa;
  std::string per_seed;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    SynthConfig sc;
    sc.cue_mode = CueMode::split;
    sc.target_wer = 0.75;
    sc.min_tokens = 2;
    sc.max_tokens = 6;
    sc.seed = seed * 1000 + 11;
    const auto utts = generate_synthetic(sc, 700);
    const std::vector<Utterance> train(utts.begin(), utts.begin() + 500);
    const std::vector<Utterance> test(utts.begin() + 500, utts.end());
    std::vector<int> labels;
    for (const auto& u : test) labels.push_back(u.emotion);

    double sep[2], wa[2];
    for (int arm = 0; arm < 2; ++arm) {
      const double lambda = arm == 0 ? 0.1 : 0.0;
      RunConfig cfg;
      cfg.train.epochs = 30;
      cfg.train.batch_size = 16;
      cfg.train.seed = seed;
      cfg.train.weights.lambda = lambda;
      Rng rng(seed);
      M4serModel<double> model(cfg.train.model, rng);
      fit(model, train, {}, cfg.train);
      sep[arm] = cluster_separation(pooled_vectors(model, test), labels).score;
      wa[arm] = classification_metrics(predict_all(model, test), labels, 4).wa;
    }
    dsep.push_back(sep[0] - sep[1]);
    dwa.push_back(wa[0] - wa[1]);
    per_seed += fmt("%s%+.4f/%+.4f", per_seed.empty() ? "" : " ", sep[0] - sep[1], wa[0] - wa[1]);
  }
  std::sort(dsep.begin(), dsep.end());
  std::sort(dwa.begin(), dwa.end());
  const double dt = seconds_since(t0);
  const bool ok = dsep[1] >= 0.05 && dwa[1] >= -0.01;
  return {ok, fmt("dsep/dwa per seed: %s; median dsep %+.4f (>=0.05), median dwa %+.4f (>=-0.01) "
                  "(%.0f s)",
                  per_seed.c_str(), dsep[1], dwa[1], dt)};
}

// ---- 7: detection-gated correction beats blanket correction ----

Outcome gated_correction() {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg;
  cfg.synth.target_wer = 0.2;
  cfg.synth.seed = 1013;
  cfg.train.epochs = 40;
  const auto utts = generate_synthetic(cfg.synth, 500);
  Rng rng(cfg.train.seed);
  M4serModel<double> model(cfg.train.model, rng);
  fit(model, utts, {}, cfg.train);
  const auto gated = correct_corpus(model, utts, true);
  const auto ungated = correct_corpus(model, utts, false);
  const double dt = seconds_since(t0);
  const bool wer_in_band = gated.input_wer >= 0.17 && gated.input_wer <= 0.23;
  const bool ok = wer_in_band && gated.corrected_wer <= gated.input_wer &&
                  ungated.corrected_wer >= gated.corrected_wer;
  return {ok, fmt("input WER %.4f (0.20±0.03), gated %.4f (<=input), ungated %.4f (>=gated) "
                  "(%.0f s)",
                  gated.input_wer, gated.corrected_wer, ungated.corrected_wer, dt)};
}

// ---- 8: detection/correction parameters never touch inference ----

std::uint32_t peel_u32(const std::string& b, std::size_t& at) {
  std::uint32_t x = 0;
  for (int i = 0; i < 4; ++i)
    x |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[at++])) << (8 * i);
  return x;
}

std::uint64_t peel_u64(const std::string& b, std::size_t& at) {
  const std::uint64_t lo = peel_u32(b, at);
  const std::uint64_t hi = peel_u32(b, at);
  return lo | (hi << 32);
}

void emit_u32(std::string& b, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

// Drops every parameter and optimizer record whose name starts with one of
// the prefixes, fixing up the counts.
std::string strip_params(const std::string& bytes, const std::vector<std::string>& prefixes) {
  const auto drop = [&](const std::string& name) {
    for (const auto& p : prefixes)
      if (name.rfind(p, 0) == 0) return true;
    return false;
  };
  std::size_t at = 4;
  peel_u32(bytes, at);
  peel_u64(bytes, at);
  at += peel_u32(bytes, at);
  at += peel_u32(bytes, at);
  at += 1;
  std::string out = bytes.substr(0, at);

  const auto n_params = peel_u32(bytes, at);
  std::string kept;
  std::uint32_t n_kept = 0;
  for (std::uint32_t i = 0; i < n_params; ++i) {
    const std::size_t start = at;
    const auto name_len = peel_u32(bytes, at);
    const std::string name = bytes.substr(at, name_len);
    at += name_len;
    const auto rank = peel_u32(bytes, at);
    std::uint64_t count = 1;
    for (std::uint32_t r = 0; r < rank; ++r) count *= peel_u64(bytes, at);
    at += count * 8;
    if (drop(name)) continue;
    kept += bytes.substr(start, at - start);
    ++n_kept;
  }
  emit_u32(out, n_kept);
  out += kept;

  for (int block = 0; block < 2; ++block) {
    const std::size_t t_at = at;
    peel_u64(bytes, at);
    out += bytes.substr(t_at, 8);
    const auto n_entries = peel_u32(bytes, at);
    std::string opt_kept;
    std::uint32_t opt_n = 0;
    for (std::uint32_t i = 0; i < n_entries; ++i) {
      const std::size_t start = at;
      const auto name_len = peel_u32(bytes, at);
      const std::string name = bytes.substr(at, name_len);
      at += name_len;
      const auto len = peel_u64(bytes, at);
      at += len * 16;
      if (drop(name)) continue;
      opt_kept += bytes.substr(start, at - start);
      ++opt_n;
    }
    emit_u32(out, opt_n);
    out += opt_kept;
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Outcome inference_path_exclusion() {
  const auto dir = fresh_dir("c8");
  const auto utts = generate_synthetic(micro_synth(17), 24);
  TrainConfig cfg;
  cfg.model = micro_model();
  cfg.batch_size = 8;
  cfg.epochs = 5;
  Rng rng(1);
  M4serModel<double> model(cfg.model, rng);
  Trainer<double> trainer(model, cfg);
  run_training(trainer, utts, {});

  const auto probs_of = [&utts](const M4serModel<double>& m) {
    std::vector<std::vector<double>> rows;
    for (const auto& u : utts) rows.push_back(m.infer_probs(u.speech, u.asr_tokens));
    return rows;
  };
  const auto bit_equal = [](const std::vector<std::vector<double>>& a,
                            const std::vector<std::vector<double>>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].size() != b[i].size()) return false;
      if (std::memcmp(a[i].data(), b[i].data(), a[i].size() * sizeof(double)) != 0) return false;
    }
    return true;
  };

  const auto present = probs_of(model);
  const auto preds_present = predict_all(model, utts);

  save_checkpoint(dir / "full.m4sr", trainer);

  for (const auto& [name, t] : model.params().items)
    if (name.rfind("aed.", 0) == 0 || name.rfind("aec.", 0) == 0) {
      auto handle = t;
      std::fill(handle.value_mut().begin(), handle.value_mut().end(), 0.0);
    }
  const auto zeroed = probs_of(model);
  const auto preds_zeroed = predict_all(model, utts);

  const auto stripped = strip_params(slurp(dir / "full.m4sr"), {"aed.", "aec."});
  std::ofstream(dir / "stripped.m4sr", std::ios::binary) << stripped;
  Rng rng2(999);
  M4serModel<double> model2(cfg.model, rng2);
  Trainer<double> trainer2(model2, cfg);
  load_checkpoint(dir / "stripped.m4sr", trainer2, /*strict=*/false);
  const auto absent = probs_of(model2);
  const auto preds_absent = predict_all(model2, utts);

  const bool ok = bit_equal(present, zeroed) && bit_equal(present, absent) &&
                  preds_present == preds_zeroed && preds_present == preds_absent;
  return {ok, fmt("probabilities bit-identical across present/zeroed/absent on %zu utterances: %s",
                  utts.size(), ok ? "yes" : "NO")};
}

// ---- 9: same seed, same bytes ----

Outcome determinism() {
  TrainConfig cfg;
  cfg.model = micro_model();
  cfg.batch_size = 8;
  cfg.epochs = 1;
  cfg.seed = 21;
  const auto utts = generate_synthetic(micro_synth(17), 32);
  const auto ds = prepare_dataset(utts);
  BatchOptions opt;
  opt.batch_size = 8;
  opt.seed = 5;
  const auto batches = make_batches(ds, opt);

  double max_dev = 0.0;
  {
    Rng ra(3), rb(3);
    M4serModel<double> ma(cfg.model, ra), mb(cfg.model, rb);
    Trainer<double> ta(ma, cfg), tb(mb, cfg);
    for (std::size_t s = 0; s < 5; ++s) {
      const auto a = ta.step(batches[s % batches.size()], s);
      const auto b = tb.step(batches[s % batches.size()], s);
      for (const double dev :
           {std::abs(a.l_er - b.l_er), std::abs(a.l_aed - b.l_aed), std::abs(a.l_aec - b.l_aec),
            std::abs(a.l_d - b.l_d), std::abs(a.l_g - b.l_g), std::abs(a.l_gan - b.l_gan),
            std::abs(a.l_lcl - b.l_lcl), std::abs(a.total - b.total)})
        max_dev = std::max(max_dev, dev);
    }
  }

  RunConfig rc;
  rc.synth_count = 48;
  const auto corpus = generate_synthetic(rc.synth, rc.synth_count);
  const auto dir_a = fresh_dir("c9a");
  const auto dir_b = fresh_dir("c9b");
  save_manifest(dir_a, corpus, rc.synth.vocab);
  save_manifest(dir_b, corpus, rc.synth.vocab);
  bool bytes_equal = true;
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(dir_a)) {
    if (!entry.is_regular_file()) continue;
    ++files;
    const auto rel = fs::relative(entry.path(), dir_a);
    bytes_equal = bytes_equal && fs::exists(dir_b / rel) && slurp(entry.path()) == slurp(dir_b / rel);
  }

  const bool ok = max_dev <= 1e-12 && bytes_equal && files > 0;
  return {ok, fmt("max loss deviation over 5 steps %.1e (<=1e-12); %zu corpus files byte-identical: %s",
                  max_dev, files, bytes_equal ? "yes" : "NO")};
}

// ---- 10: metric implementations against hand-computed oracles ----

struct PathBest {
  double cost = 0.0;
  std::size_t len = 0;
  bool set = false;
};

void walk_paths(const std::vector<double>& grid, std::size_t p, std::size_t q, std::size_t i,
                std::size_t j, double cost, std::size_t len, PathBest& best) {
  cost += grid[i * q + j];
  ++len;
  if (i + 1 == p && j + 1 == q) {
    if (!best.set || cost < best.cost || (cost == best.cost && len < best.len)) {
      best = {cost, len, true};
    }
    return;
  }
  if (i + 1 < p) walk_paths(grid, p, q, i + 1, j, cost, len, best);
  if (j + 1 < q) walk_paths(grid, p, q, i, j + 1, cost, len, best);
  if (i + 1 < p && j + 1 < q) walk_paths(grid, p, q, i + 1, j + 1, cost, len, best);
}

double brute_force_dtw(const Tensor<double>& a, const Tensor<double>& b, DtwMetric metric) {
  const std::size_t p = a.shape()[0], q = b.shape()[0], d = a.shape()[1];
  std::vector<double> grid(p * q);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j)
      grid[i * q + j] =
          detail::dtw_local_cost(a.value().data() + i * d, b.value().data() + j * d, d, metric);
  PathBest best;
  walk_paths(grid, p, q, 0, 0, 0.0, 0, best);
  return best.cost / static_cast<double>(best.len);
}

Tensor<double> random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor<double>::leaf({rows, cols}, std::move(v));
}

Outcome metrics_oracles() {
  const auto hand = classification_metrics({0, 0, 0, 0}, {0, 0, 0, 1}, 2);
  bool ok = hand.wa == 0.75 && hand.ua == 0.5;
  const auto perfect = classification_metrics({1, 0, 2}, {1, 0, 2}, 3);
  ok = ok && perfect.wa == 1.0 && perfect.ua == 1.0 && perfect.wf1 == 1.0;

  Rng rng(7);
  double worst = 0.0;
  std::size_t trials = 0;
  for (std::size_t rows_a = 2; rows_a <= 5; ++rows_a)
    for (std::size_t rows_b = 2; rows_b <= 5; ++rows_b)
      for (const auto metric : {DtwMetric::cosine, DtwMetric::euclidean})
        for (int t = 0; t < 5; ++t) {
          const auto a = random_matrix(rows_a, 3, rng);
          const auto b = random_matrix(rows_b, 3, rng);
          worst = std::max(worst,
                           std::abs(dtw_distance(a, b, metric) - brute_force_dtw(a, b, metric)));
          ++trials;
        }
  ok = ok && worst <= 1e-12;
  return {ok, fmt("hand case WA %.2f/UA %.2f exact; dtw vs brute force max |diff| %.1e over %zu "
                  "trials (<=1e-12)",
                  hand.wa, hand.ua, worst, trials)};
}

// ---- 11: fusion dimension law over the (m, n) grid ----

Outcome shape_audit() {
  const std::size_t d = 8;
  Rng rng(3);
  FusionModule<double> fusion(d, 2, 2 * d, rng);
  std::size_t cells = 0, failures = 0;
  const auto expect = [&failures](bool cond) { failures += cond ? 0 : 1; };
  for (const std::size_t m : {1, 3, 8, 32})
    for (const std::size_t n : {1, 2, 7, 16}) {
      ++cells;
      Graph<double> g(false);
      Runtime<double> rt{g, rng, false, 0.0};
      const auto speech = random_matrix(m, d, rng);
      const auto text = random_matrix(n, d, rng);
      const auto out = fusion.forward(rt, speech, text);
      expect(out.speech_by_token.shape() == (Shape{n, d}));
      expect(out.speech_specific.shape() == (Shape{m, d}));
      expect(out.text_specific.shape() == (Shape{m, d}));
      expect(out.joint_raw.shape() == (Shape{m, 2 * d}));
      expect(out.joint.shape() == (Shape{m, d}));
      expect(out.speech_shared.shape() == (Shape{m, d}));
      expect(out.text_shared.shape() == (Shape{m, d}));
      expect(out.speech_gated.shape() == (Shape{m, d}));
      expect(out.text_gated.shape() == (Shape{m, d}));
      expect(out.invariant.shape() == (Shape{m, d}));
      expect(out.fused.shape() == (Shape{3 * m, d}));
      expect(out.pooled.shape() == (Shape{d}));
      expect(out.frame_valid.size() == m);
      bool blocks = true;
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < d; ++c) {
          blocks = blocks && out.fused.at(r, c) == out.speech_specific.at(r, c);
          blocks = blocks && out.fused.at(m + r, c) == out.text_specific.at(r, c);
          blocks = blocks && out.fused.at(2 * m + r, c) == out.invariant.at(r, c);
        }
      expect(blocks);
    }
  const bool ok = failures == 0 && cells == 16;
  return {ok, fmt("%zu grid cells, %zu dimension-law failures (must be 0)", cells, failures)};
}

Outcome guarded(Outcome (*fn)()) {
  try {
    return fn();
  } catch (const std::exception& e) {
    return {false, fmt("exception: %s", e.what())};
  }
}

}  // namespace

int main() {
  std::printf("acceptance suite: 11 criteria\n");
  report(1, "gradient-correctness", guarded(gradient_correctness));
  report(2, "alignment-oracle", guarded(alignment_oracle));
  report(3, "adversarial-equilibrium", guarded(adversarial_equilibrium));
  report(4, "overfit-small-set", guarded(overfit_small_set));
  report(5, "multimodal-advantage", guarded(multimodal_advantage));
  report(6, "contrastive-geometry", guarded(contrastive_geometry));
  report(7, "gated-correction", guarded(gated_correction));
  report(8, "inference-path-exclusion", guarded(inference_path_exclusion));
  report(9, "determinism", guarded(determinism));
  report(10, "metrics-oracles", guarded(metrics_oracles));
  report(11, "shape-audit", guarded(shape_audit));
  std::printf("acceptance: %d/11 criteria passed\n", 11 - g_failures);
  return g_failures == 0 ? 0 : 1;
}
