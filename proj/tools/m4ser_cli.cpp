// Command-line front end: synthetic corpus generation, training with
// checkpoints, evaluation, detection-gated correction and a gradient
// self-check. Results go to stdout, diagnostics to stderr; exit code 0 on
// success, 1 on validation or runtime failure, 2 on usage errors.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "m4ser/config.hpp"
#include "m4ser/diagnostics.hpp"
#include "m4ser/eval.hpp"
#include "m4ser/train.hpp"

namespace fs = std::filesystem;
using namespace m4ser;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
};

RunConfig resolve_config(const CommonArgs& args, const std::string& checkpoint_text = "") {
  RunConfig cfg;
  if (!args.config_path.empty())
    cfg = load_config_file(args.config_path);
  else if (!checkpoint_text.empty())
    cfg = parse_config_text(checkpoint_text, {}, "checkpoint config");
  apply_overrides(cfg, args.sets);
  cfg.validate();
  return cfg;
}

void write_effective(const fs::path& out_dir, const RunConfig& cfg) {
  fs::create_directories(out_dir);
  std::ofstream os(out_dir / "config.effective");
  if (!os) fail("cannot write " + (out_dir / "config.effective").string());
  os << effective_config(cfg);
}

// Deterministic shuffled split; the tail of the permutation becomes the
// validation set.
std::pair<std::vector<Utterance>, std::vector<Utterance>> split_corpus(
    std::vector<Utterance> utts, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(utts.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, 0x5b17));
  rng.shuffle(order);
  const auto n_val = static_cast<std::size_t>(val_fraction * static_cast<double>(utts.size()));
  std::vector<Utterance> train_set, val_set;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i + n_val < order.size() ? train_set : val_set).push_back(std::move(utts[order[i]]));
  return {std::move(train_set), std::move(val_set)};
}

std::vector<Utterance> load_corpus(const std::string& data_dir, const RunConfig& cfg) {
  return load_manifest(fs::path(data_dir) / "manifest.tsv", cfg.train.model.num_classes);
}

int cmd_gen_data(const CommonArgs& common, const std::string& out_dir) {
  const auto cfg = resolve_config(common);
  const auto utts = generate_synthetic(cfg.synth, cfg.synth_count);
  save_manifest(out_dir, utts, cfg.synth.vocab);
  write_effective(out_dir, cfg);
  std::cout << "wrote " << utts.size() << " utterances to " << out_dir << " (corpus WER "
            << corpus_wer(utts) << ")\n";
  return 0;
}

template <class Real>
int run_train(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir,
              const std::string& resume) {
  auto [train_set, val_set] = split_corpus(load_corpus(data_dir, cfg), cfg.val_fraction,
                                           cfg.train.seed);
  std::cerr << "[train] " << train_set.size() << " train / " << val_set.size()
            << " validation utterances\n";

  Rng rng(cfg.train.seed);
  M4serModel<Real> model(cfg.train.model, rng);
  Trainer<Real> trainer(model, cfg.train);
  if (!resume.empty()) {
    load_checkpoint(resume, trainer);
    std::cerr << "[train] resumed from " << resume << " at epoch " << trainer.epoch << "\n";
  }

  const auto result = run_training(trainer, train_set, val_set, out_dir, effective_config(cfg));
  for (const auto& rec : result.history)
    std::cerr << "[train] epoch " << rec.epoch << " total " << rec.mean.total << " val_wa "
              << rec.val_wa << "\n";

  nlohmann::json j;
  j["epochs"] = trainer.epoch;
  j["train_utterances"] = train_set.size();
  j["val_utterances"] = val_set.size();
  if (!val_set.empty()) {
    std::vector<int> labels;
    for (const auto& u : val_set) labels.push_back(u.emotion);
    const auto report = classification_metrics(predict_all(model, val_set), labels,
                                               cfg.train.model.num_classes);
    j["validation"] = metrics_json(report);
    j["best_epoch"] = result.best_epoch;
    j["best_metric"] = result.best_metric;
    std::cout << "trained " << trainer.epoch << " epochs; best epoch " << result.best_epoch
              << "; val wa " << report.wa << " ua " << report.ua << " wf1 " << report.wf1 << "\n";
  } else {
    std::cout << "trained " << trainer.epoch << " epochs (no validation split)\n";
  }
  std::ofstream os(fs::path(out_dir) / "metrics.json");
  os << j.dump(2) << "\n";
  return 0;
}

int cmd_train(const CommonArgs& common, const std::string& data_dir, const std::string& out_dir,
              const std::string& resume) {
  RunConfig cfg;
  if (!resume.empty() && common.config_path.empty()) {
    const auto info = read_checkpoint_info(resume);
    cfg = resolve_config(common, info.config_text);
  } else {
    cfg = resolve_config(common);
  }
  write_effective(out_dir, cfg);
  return cfg.precision == Precision::f32 ? run_train<float>(cfg, data_dir, out_dir, resume)
                                         : run_train<double>(cfg, data_dir, out_dir, resume);
}

template <class Real>
int run_eval(const RunConfig& cfg, const std::string& data_dir, const std::string& checkpoint,
             const std::string& out_dir, bool lax) {
  const auto utts = load_corpus(data_dir, cfg);
  Rng rng(cfg.train.seed);
  M4serModel<Real> model(cfg.train.model, rng);
  Trainer<Real> trainer(model, cfg.train);
  load_checkpoint(checkpoint, trainer, !lax);

  std::vector<int> labels;
  for (const auto& u : utts) labels.push_back(u.emotion);
  const auto preds = predict_all(model, utts);
  const auto report = classification_metrics(preds, labels, cfg.train.model.num_classes);

  fs::create_directories(out_dir);
  std::ofstream ps(fs::path(out_dir) / "predictions.tsv");
  ps << "id\tlabel\tprediction\n";
  for (std::size_t i = 0; i < utts.size(); ++i)
    ps << utts[i].id << '\t' << labels[i] << '\t' << preds[i] << '\n';
  std::ofstream os(fs::path(out_dir) / "metrics.json");
  os << metrics_json(report).dump(2) << "\n";

  std::cout << "n=" << utts.size() << " wa=" << report.wa << " ua=" << report.ua
            << " acc=" << report.acc << " wf1=" << report.wf1 << "\n";
  return 0;
}

template <class Real>
int run_correct(const RunConfig& cfg, const std::string& data_dir, const std::string& checkpoint,
                const std::string& out_dir, bool lax, bool ungated_file) {
  const auto utts = load_corpus(data_dir, cfg);
  Rng rng(cfg.train.seed);
  M4serModel<Real> model(cfg.train.model, rng);
  Trainer<Real> trainer(model, cfg.train);
  load_checkpoint(checkpoint, trainer, !lax);

  const auto gated = correct_corpus(model, utts, true);
  const auto ungated = correct_corpus(model, utts, false);
  const auto& chosen = ungated_file ? ungated : gated;

  fs::create_directories(out_dir);
  std::ofstream cs(fs::path(out_dir) / "corrections.tsv");
  cs << "id\tcorrected_tokens\n";
  for (std::size_t i = 0; i < utts.size(); ++i) {
    cs << utts[i].id << '\t';
    for (std::size_t k = 0; k < chosen.corrected[i].size(); ++k)
      cs << (k ? " " : "") << chosen.corrected[i][k];
    cs << '\n';
  }
  nlohmann::json j;
  j["input_wer"] = gated.input_wer;
  j["gated_wer"] = gated.corrected_wer;
  j["ungated_wer"] = ungated.corrected_wer;
  j["written"] = ungated_file ? "ungated" : "gated";
  std::ofstream os(fs::path(out_dir) / "correction.json");
  os << j.dump(2) << "\n";

  std::cout << "input_wer=" << gated.input_wer << " gated_wer=" << gated.corrected_wer
            << " ungated_wer=" << ungated.corrected_wer << "\n";
  return 0;
}

int cmd_gradcheck(const CommonArgs& common, std::size_t samples, std::size_t coords, double eps,
                  double tolerance) {
  auto cfg = resolve_config(common);
  if (cfg.precision != Precision::f64)
    fail("gradcheck needs precision = f64; central differences drown in f32 rounding");

  auto synth = cfg.synth;
  const auto utts = generate_synthetic(synth, std::max<std::size_t>(samples, 2));
  const auto ds = prepare_dataset(utts);
  BatchOptions opt;
  opt.batch_size = utts.size();
  opt.shuffle = false;
  const auto batches = make_batches(ds, opt);

  Rng rng(cfg.train.seed);
  M4serModel<double> model(cfg.train.model, rng);
  const auto reports = gradcheck_model(model, batches.at(0), cfg.train, coords, eps);

  bool over = false;
  for (const auto& r : reports) over = over || (r.coords > 0 && r.max_excess >= tolerance);
  std::vector<FdReport> refined;
  if (over) refined = gradcheck_model(model, batches.at(0), cfg.train, coords, eps / 10.0);

  bool ok = true;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    if (r.coords == 0) {
      std::cout << "SKIP " << r.term
                << "  constant on this batch (try more --samples or --set target_wer=0.25)\n";
      continue;
    }
    bool pass = r.max_excess < tolerance;
    std::string note;
    if (!pass) {
      // artifacts from kinks, curvature and roundoff move with eps; a wrong
      // gradient holds its disagreement at any eps
      const double again = refined[i].max_excess;
      pass = again < tolerance || again < r.max_excess / 3.0;
      std::ostringstream n;
      n << "  (recheck at eps=" << eps / 10.0 << ": excess " << again
        << (pass ? ", artifact)" : ", held)");
      note = n.str();
    }
    ok = ok && pass;
    std::cout << (pass ? "PASS " : "FAIL ") << r.term << "  max_rel=" << r.max_rel
              << "  excess=" << r.max_excess << "  coords=" << r.coords << note << "\n";
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal speech emotion recognition: data, training, evaluation, correction"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string data_dir, out_dir, checkpoint, resume;
  bool lax = false, ungated_file = false;
  std::size_t gc_samples = 5, gc_coords = 3;
  double gc_eps = 1e-5, gc_tol = 1e-4;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "key = value configuration file");
    sub->add_option("--set", common.sets, "override, key=value (repeatable)");
  };

  auto* gen = app.add_subcommand("gen-data", "write a synthetic corpus as a manifest directory");
  add_common(gen);
  gen->add_option("--out", out_dir, "output directory")->required();

  auto* train = app.add_subcommand("train", "train on a manifest directory");
  add_common(train);
  train->add_option("--data", data_dir, "manifest directory")->required();
  train->add_option("--out", out_dir, "run directory for checkpoints and history")->required();
  train->add_option("--resume", resume, "checkpoint to continue from");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest directory");
  add_common(eval);
  eval->add_option("--data", data_dir, "manifest directory")->required();
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--out", out_dir, "output directory")->required();
  eval->add_flag("--lax", lax, "skip parameters missing from the checkpoint");

  auto* correct = app.add_subcommand("correct", "decode corrected transcripts for a corpus");
  add_common(correct);
  correct->add_option("--data", data_dir, "manifest directory")->required();
  correct->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  correct->add_option("--out", out_dir, "output directory")->required();
  correct->add_flag("--lax", lax, "skip parameters missing from the checkpoint");
  correct->add_flag("--ungated", ungated_file, "write the everything-is-an-error variant");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every loss term");
  add_common(gradcheck);
  gradcheck->add_option("--samples", gc_samples, "micro-batch size");
  gradcheck->add_option("--coords", gc_coords, "coordinates probed per parameter (0 = all)");
  gradcheck->add_option("--eps", gc_eps, "central-difference step");
  gradcheck->add_option("--tolerance", gc_tol, "bound on error beyond measured non-smoothness");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(common, out_dir);
    if (train->parsed()) return cmd_train(common, data_dir, out_dir, resume);
    if (eval->parsed() || correct->parsed()) {
      const auto info = read_checkpoint_info(checkpoint);
      auto cfg = resolve_config(common, info.config_text);
      const bool f32 = info.dtype == '\0';
      if ((cfg.precision == Precision::f32) != f32) {
        std::cerr << "[config] checkpoint stores " << (f32 ? "f32" : "f64")
                  << " parameters; following it\n";
        cfg.precision = f32 ? Precision::f32 : Precision::f64;
      }
      write_effective(out_dir, cfg);
      if (eval->parsed())
        return f32 ? run_eval<float>(cfg, data_dir, checkpoint, out_dir, lax)
                   : run_eval<double>(cfg, data_dir, checkpoint, out_dir, lax);
      return f32 ? run_correct<float>(cfg, data_dir, checkpoint, out_dir, lax, ungated_file)
                 : run_correct<double>(cfg, data_dir, checkpoint, out_dir, lax, ungated_file);
    }
    if (gradcheck->parsed()) return cmd_gradcheck(common, gc_samples, gc_coords, gc_eps, gc_tol);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
