#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "m4ser/eval.hpp"
#include "m4ser/model.hpp"
#include "m4ser/train.hpp"

using namespace m4ser;
namespace fs = std::filesystem;

namespace {

ModelConfig micro_model() {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.d_vocab = 16;
  cfg.attention_layers = 1;
  cfg.attention_heads = 2;
  cfg.ff_mult = 2;
  cfg.num_classes = 4;
  cfg.feat_dim = 4;
  cfg.conv_stride = 2;
  cfg.max_len = 64;
  cfg.dropout = 0.0;
  return cfg;
}

TrainConfig micro_train() {
  TrainConfig cfg;
  cfg.model = micro_model();
  cfg.batch_size = 8;
  cfg.epochs = 2;
  cfg.learning_rate = 1e-3;
  cfg.seed = 21;
  return cfg;
}

SynthConfig micro_synth(std::uint64_t seed = 17) {
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
  REQUIRE(batches.size() == 1);
  return batches[0];
}

fs::path fresh_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("m4ser_train_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("adam drives a quadratic to its minimum and clips large gradients", "[train]") {
  auto x = Tensor<double>::leaf({2}, {30.0, 40.0}, true);
  ParamMap<double> params;
  params.add("x", x);
  Adam<double> opt;

  {
    Graph<double> g;
    g.backward(g.mean_axis0(g.mul(x, x)));
    opt.step(params, 1e-3, 5.0);
    // gradient (30, 40) has norm 50, so clipping rescales it to (3, 4)
    REQUIRE(opt.m["x"][0] == Catch::Approx(0.1 * 3.0).epsilon(1e-12));
    REQUIRE(opt.m["x"][1] == Catch::Approx(0.1 * 4.0).epsilon(1e-12));
    g.zero_grads();
  }

  x.value_mut() = {2.0, -3.0};
  opt = Adam<double>();
  for (int it = 0; it < 400; ++it) {
    Graph<double> g;
    g.backward(g.mean_axis0(g.mul(x, x)));
    opt.step(params, 5e-2, 5.0);
    g.zero_grads();
  }
  REQUIRE(std::abs(x.value()[0]) < 0.05);
  REQUIRE(std::abs(x.value()[1]) < 0.05);
}

TEST_CASE("the two phases never touch each other's parameters", "[train]") {
  const auto utts = generate_synthetic(micro_synth(), 8);
  const auto ds = prepare_dataset(utts);
  const auto batch = one_batch(ds, 8);

  for (double gamma : {0.0, 0.01}) {
    Rng rng(5);
    M4serModel<double> model(micro_model(), rng);
    auto cfg = micro_train();
    cfg.weights.gamma = gamma;
    Trainer<double> trainer(model, cfg);

    StepAudit audit;
    trainer.step(batch, 0, &audit);
    REQUIRE(audit.main_after_disc == audit.main_before);
    REQUIRE(audit.disc_after_disc != audit.disc_before);
    REQUIRE(audit.disc_after == audit.disc_after_disc);
    REQUIRE(audit.main_after != audit.main_after_disc);
    REQUIRE(audit.max_main_grad_during_disc == 0.0);
  }
}

TEST_CASE("the discriminator phase improves its own objective on the step's inputs", "[train]") {
  const auto utts = generate_synthetic(micro_synth(23), 8);
  const auto ds = prepare_dataset(utts);
  const auto batch = one_batch(ds, 8);

  Rng rng(7);
  M4serModel<double> model(micro_model(), rng);
  Trainer<double> trainer(model, micro_train());

  // dropout is zero, so an eval forward sees the same representations the
  // step's discriminator phase trained on
  auto captured_reps = [&]() {
    Graph<double> g(false);
    Rng step_rng(0);
    Runtime<double> rt{g, step_rng, false, 0.0};
    auto fwd = model.forward_batch(rt, batch);
    return std::array<Tensor<double>, 3>{fwd.speech_specific.detach(), fwd.text_specific.detach(),
                                         fwd.invariant.detach()};
  };
  auto l_d_on = [&](const std::array<Tensor<double>, 3>& reps) {
    Graph<double> g(false);
    const auto ds_v = model.disc.score(g, reps[0]).value();
    const auto dt_v = model.disc.score(g, reps[1]).value();
    double s = 0, t = 0;
    for (double v : ds_v) s += std::log(v);
    for (double v : dt_v) t += std::log(1 - v);
    return s / ds_v.size() + t / dt_v.size();
  };

  const auto reps = captured_reps();
  const double before = l_d_on(reps);
  trainer.step(batch);
  REQUIRE(l_d_on(reps) > before);
}

TEST_CASE("training steps are deterministic across identical runs", "[train]") {
  const auto utts = generate_synthetic(micro_synth(31), 16);
  const auto ds = prepare_dataset(utts);
  const auto batch_a = one_batch(ds, 16);

  auto run = [&]() {
    Rng rng(9);
    M4serModel<double> model(micro_model(), rng);
    Trainer<double> trainer(model, micro_train());
    std::vector<LossBundle> bundles;
    for (int s = 0; s < 5; ++s) bundles.push_back(trainer.step(batch_a, s));
    return bundles;
  };
  const auto a = run();
  const auto b = run();
  for (std::size_t s = 0; s < a.size(); ++s) {
    REQUIRE(std::abs(a[s].l_er - b[s].l_er) <= 1e-12);
    REQUIRE(std::abs(a[s].l_aed - b[s].l_aed) <= 1e-12);
    REQUIRE(std::abs(a[s].l_aec - b[s].l_aec) <= 1e-12);
    REQUIRE(std::abs(a[s].l_d - b[s].l_d) <= 1e-12);
    REQUIRE(std::abs(a[s].l_g - b[s].l_g) <= 1e-12);
    REQUIRE(std::abs(a[s].l_lcl - b[s].l_lcl) <= 1e-12);
    REQUIRE(std::abs(a[s].total - b[s].total) <= 1e-12);
  }
}

TEST_CASE("single-modality steps run without auxiliary or adversarial terms", "[train]") {
  const auto utts = generate_synthetic(micro_synth(41), 8);
  const auto ds = prepare_dataset(utts);
  const auto batch = one_batch(ds, 8);

  auto cfg = micro_train();
  cfg.model.modality = Modality::speech;
  cfg.weights.alpha = 0;
  cfg.weights.gamma = 0;
  Rng rng(3);
  M4serModel<double> model(cfg.model, rng);
  Trainer<double> trainer(model, cfg);

  const auto disc_before = model.disc_params().value_hash();
  const auto bundle = trainer.step(batch);
  REQUIRE(bundle.l_aed == 0.0);
  REQUIRE(bundle.l_aec == 0.0);
  REQUIRE(bundle.l_d == 0.0);
  REQUIRE(bundle.l_g == 0.0);
  REQUIRE(bundle.total ==
          Catch::Approx(bundle.l_er + cfg.weights.lambda * bundle.l_lcl).margin(1e-12));
  REQUIRE(model.disc_params().value_hash() == disc_before);

  cfg.weights.gamma = 0.01;
  REQUIRE_THROWS_AS(Trainer<double>(model, cfg), Error);
}

TEST_CASE("a poisoned parameter aborts the step naming the loss term and batch", "[train]") {
  const auto utts = generate_synthetic(micro_synth(43), 8);
  const auto ds = prepare_dataset(utts);
  const auto batch = one_batch(ds, 8);

  Rng rng(3);
  M4serModel<double> model(micro_model(), rng);
  Trainer<double> trainer(model, micro_train());
  model.emotion.proj.w.value_mut()[0] = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_WITH(trainer.step(batch, 7),
                      Catch::Matchers::ContainsSubstring("l_er") &&
                          Catch::Matchers::ContainsSubstring("batch 7"));
}

TEST_CASE("checkpoints roundtrip parameters, moments, epoch and rng bitwise", "[train]") {
  const auto dir = fresh_dir("roundtrip");
  const auto utts = generate_synthetic(micro_synth(51), 8);
  const auto ds = prepare_dataset(utts);
  const auto batch = one_batch(ds, 8);

  Rng rng(13);
  M4serModel<double> model(micro_model(), rng);
  Trainer<double> trainer(model, micro_train());
  for (int s = 0; s < 3; ++s) trainer.step(batch, s);
  trainer.epoch = 5;
  const auto path = dir / "ck.m4sr";
  save_checkpoint(path, trainer, "k = v\n");

  Rng rng2(999);
  M4serModel<double> model2(micro_model(), rng2);
  Trainer<double> trainer2(model2, micro_train());
  REQUIRE(model2.params().value_hash() != model.params().value_hash());
  const auto config_text = load_checkpoint(path, trainer2);
  REQUIRE(config_text == "k = v\n");
  REQUIRE(model2.params().value_hash() == model.params().value_hash());
  REQUIRE(trainer2.epoch == 5);
  REQUIRE(trainer2.rng.state() == trainer.rng.state());
  REQUIRE(trainer2.opt_main.t == trainer.opt_main.t);
  REQUIRE(trainer2.opt_main.m == trainer.opt_main.m);
  REQUIRE(trainer2.opt_main.v == trainer.opt_main.v);
  REQUIRE(trainer2.opt_disc.m == trainer.opt_disc.m);
}

TEST_CASE("checkpoint loading rejects corrupt files without touching state", "[train]") {
  const auto dir = fresh_dir("reject");
  Rng rng(13);
  M4serModel<double> model(micro_model(), rng);
  Trainer<double> trainer(model, micro_train());
  const auto path = dir / "ck.m4sr";
  save_checkpoint(path, trainer);

  auto slurp = [&]() {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
  };
  auto dump = [&](const fs::path& p, const std::string& bytes) {
    std::ofstream os(p, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  };
  const std::string good = slurp();

  Rng rng2(29);
  M4serModel<double> model2(micro_model(), rng2);
  Trainer<double> trainer2(model2, micro_train());
  const auto hash_before = model2.params().value_hash();

  SECTION("bad magic") {
    dump(dir / "a.m4sr", "XXXX" + good.substr(4));
    REQUIRE_THROWS_WITH(load_checkpoint(dir / "a.m4sr", trainer2),
                        Catch::Matchers::ContainsSubstring("magic"));
  }
  SECTION("unsupported version") {
    auto bad = good;
    bad[4] = 9;
    dump(dir / "b.m4sr", bad);
    REQUIRE_THROWS_WITH(load_checkpoint(dir / "b.m4sr", trainer2),
                        Catch::Matchers::ContainsSubstring("version"));
  }
  SECTION("truncation reports the offset") {
    dump(dir / "c.m4sr", good.substr(0, good.size() / 2));
    REQUIRE_THROWS_WITH(load_checkpoint(dir / "c.m4sr", trainer2),
                        Catch::Matchers::ContainsSubstring("truncated") &&
                            Catch::Matchers::ContainsSubstring("offset"));
  }
  SECTION("trailing bytes") {
    dump(dir / "d.m4sr", good + "Z");
    REQUIRE_THROWS_WITH(load_checkpoint(dir / "d.m4sr", trainer2),
                        Catch::Matchers::ContainsSubstring("trailing"));
  }
  SECTION("dtype mismatch") {
    Rng rng3(1);
    M4serModel<float> model3(micro_model(), rng3);
    Trainer<float> trainer3(model3, micro_train());
    REQUIRE_THROWS_WITH(load_checkpoint(path, trainer3),
                        Catch::Matchers::ContainsSubstring("dtype"));
  }
  REQUIRE(model2.params().value_hash() == hash_before);
}

namespace {

// byte-level checkpoint surgery: drop every parameter and optimizer record
// whose name starts with the prefix, fixing up the counts
std::uint32_t peel_u32(const std::string& b, std::size_t& at) {
  std::uint32_t x = 0;
  for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[at++])) << (8 * i);
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

std::string strip_checkpoint_prefix(const std::string& bytes, const std::string& prefix) {
  std::size_t at = 4;                       // magic
  peel_u32(bytes, at);                      // version
  peel_u64(bytes, at);                      // epoch
  at += peel_u32(bytes, at);                // rng state
  at += peel_u32(bytes, at);                // config text
  at += 1;                                  // dtype
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
    if (name.rfind(prefix, 0) == 0) continue;
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
      if (name.rfind(prefix, 0) == 0) continue;
      opt_kept += bytes.substr(start, at - start);
      ++opt_n;
    }
    emit_u32(out, opt_n);
    out += opt_kept;
  }
  return out;
}

std::string append_fake_param(const std::string& bytes) {
  std::size_t at = 4;
  peel_u32(bytes, at);
  peel_u64(bytes, at);
  at += peel_u32(bytes, at);
  at += peel_u32(bytes, at);
  at += 1;
  const std::size_t count_at = at;
  const auto n_params = peel_u32(bytes, at);
  for (std::uint32_t i = 0; i < n_params; ++i) {
    at += peel_u32(bytes, at);
    const auto rank = peel_u32(bytes, at);
    std::uint64_t count = 1;
    for (std::uint32_t r = 0; r < rank; ++r) count *= peel_u64(bytes, at);
    at += count * 8;
  }
  std::string out = bytes.substr(0, count_at);
  emit_u32(out, n_params + 1);
  out += bytes.substr(count_at + 4, at - count_at - 4);
  const std::string name = "ghost.w";
  emit_u32(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  emit_u32(out, 1);                        // rank
  emit_u32(out, 1);                        // dim lo
  emit_u32(out, 0);                        // dim hi
  out += std::string(8, '\0');             // one f64 value
  out += bytes.substr(at);
  return out;
}

}  // namespace

TEST_CASE("strict loading flags missing or unknown parameters, lax loading skips them",
          "[train]") {
  const auto dir = fresh_dir("strict");
  Rng rng(13);
  M4serModel<double> model(micro_model(), rng);
  Trainer<double> trainer(model, micro_train());
  const auto path = dir / "ck.m4sr";
  save_checkpoint(path, trainer);

  auto slurp = [&](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
  };
  auto dump = [&](const fs::path& p, const std::string& bytes) {
    std::ofstream os(p, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  };
  const std::string good = slurp(path);

  auto stripped = strip_checkpoint_prefix(good, "aed.");
  stripped = strip_checkpoint_prefix(stripped, "aec.");
  REQUIRE(stripped.size() < good.size());
  dump(dir / "stripped.m4sr", stripped);
  dump(dir / "ghost.m4sr", append_fake_param(good));

  SECTION("strict rejects a file missing model parameters") {
    Rng rng2(77);
    M4serModel<double> model2(micro_model(), rng2);
    Trainer<double> trainer2(model2, micro_train());
    REQUIRE_THROWS_WITH(load_checkpoint(dir / "stripped.m4sr", trainer2),
                        Catch::Matchers::ContainsSubstring("missing"));
  }
  SECTION("strict rejects a file with parameters the model lacks") {
    Rng rng2(77);
    M4serModel<double> model2(micro_model(), rng2);
    Trainer<double> trainer2(model2, micro_train());
    REQUIRE_THROWS_WITH(load_checkpoint(dir / "ghost.m4sr", trainer2),
                        Catch::Matchers::ContainsSubstring("unknown"));
  }
  SECTION("lax loading keeps current values for stripped records") {
    Rng rng2(77);
    M4serModel<double> model2(micro_model(), rng2);
    Trainer<double> trainer2(model2, micro_train());
    ParamMap<double> fresh_aed;
    for (const auto& [name, p] : model2.params().items)
      if (name.rfind("aed.", 0) == 0 || name.rfind("aec.", 0) == 0) fresh_aed.add(name, p);
    const auto fresh_hash = fresh_aed.value_hash();

    load_checkpoint(dir / "stripped.m4sr", trainer2, false);
    ParamMap<double> loaded_rest, saved_rest;
    for (const auto& [name, p] : model2.params().items)
      if (name.rfind("aed.", 0) != 0 && name.rfind("aec.", 0) != 0) loaded_rest.add(name, p);
    for (const auto& [name, p] : model.params().items)
      if (name.rfind("aed.", 0) != 0 && name.rfind("aec.", 0) != 0) saved_rest.add(name, p);
    REQUIRE(loaded_rest.value_hash() == saved_rest.value_hash());
    REQUIRE(fresh_aed.value_hash() == fresh_hash);
    REQUIRE(load_checkpoint(dir / "ghost.m4sr", trainer2, false) == "");
  }
}

TEST_CASE("epoch zero returns an untouched model and empty history", "[train]") {
  const auto utts = generate_synthetic(micro_synth(61), 12);
  auto cfg = micro_train();
  cfg.epochs = 0;
  Rng rng(3);
  M4serModel<double> model(cfg.model, rng);
  const auto hash = model.params().value_hash();
  const auto result = fit(model, utts, {}, cfg);
  REQUIRE(result.history.empty());
  REQUIRE(result.best_epoch == 0);
  REQUIRE(model.params().value_hash() == hash);
}

TEST_CASE("fit records every epoch and writes training artifacts", "[train]") {
  const auto dir = fresh_dir("artifacts");
  const auto utts = generate_synthetic(micro_synth(71), 24);
  const std::vector<Utterance> train_set(utts.begin(), utts.begin() + 16);
  const std::vector<Utterance> val_set(utts.begin() + 16, utts.end());

  auto cfg = micro_train();
  cfg.epochs = 3;
  cfg.batch_size = 8;
  Rng rng(3);
  M4serModel<double> model(cfg.model, rng);
  Trainer<double> trainer(model, cfg);
  const auto result = run_training(trainer, train_set, val_set, dir, "probe = 1\n");

  REQUIRE(result.history.size() == 3);
  for (std::size_t e = 0; e < 3; ++e) {
    REQUIRE(result.history[e].epoch == e + 1);
    REQUIRE(result.history[e].val_wa >= 0.0);
    REQUIRE(result.history[e].val_wa <= 1.0);
    REQUIRE(result.history[e].val_wf1 >= 0.0);
    REQUIRE(std::isfinite(result.history[e].mean.total));
  }
  REQUIRE(result.best_epoch >= 1);
  REQUIRE(result.best_epoch <= 3);
  REQUIRE(fs::exists(dir / "last.m4sr"));
  REQUIRE(fs::exists(dir / "best.m4sr"));

  std::ifstream hist(dir / "history.tsv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(hist, line)) lines.push_back(line);
  REQUIRE(lines.size() == 4);
  REQUIRE(lines[0].rfind("epoch\t", 0) == 0);

  // the best checkpoint's parameters are restored into the model
  Rng rng2(5);
  M4serModel<double> model2(cfg.model, rng2);
  Trainer<double> trainer2(model2, cfg);
  load_checkpoint(dir / "best.m4sr", trainer2);
  REQUIRE(model2.params().value_hash() == model.params().value_hash());
}

TEST_CASE("resuming from a checkpoint matches the uninterrupted run", "[train]") {
  const auto dir = fresh_dir("resume");
  const auto utts = generate_synthetic(micro_synth(81), 16);

  auto cfg = micro_train();
  cfg.epochs = 4;
  cfg.batch_size = 8;

  Rng rng_a(3);
  M4serModel<double> model_a(cfg.model, rng_a);
  Trainer<double> trainer_a(model_a, cfg);
  const auto full = run_training(trainer_a, utts, {});

  auto cfg_half = cfg;
  cfg_half.epochs = 2;
  Rng rng_b(3);
  M4serModel<double> model_b(cfg.model, rng_b);
  Trainer<double> trainer_b(model_b, cfg_half);
  run_training(trainer_b, utts, {}, dir);

  Rng rng_c(999);
  M4serModel<double> model_c(cfg.model, rng_c);
  Trainer<double> trainer_c(model_c, cfg);
  load_checkpoint(dir / "last.m4sr", trainer_c);
  REQUIRE(trainer_c.epoch == 2);
  const auto resumed = run_training(trainer_c, utts, {});

  REQUIRE(full.history.size() == 4);
  REQUIRE(resumed.history.size() == 2);
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& x = full.history[2 + k].mean;
    const auto& y = resumed.history[k].mean;
    REQUIRE(std::abs(x.l_er - y.l_er) <= 1e-12);
    REQUIRE(std::abs(x.l_aed - y.l_aed) <= 1e-12);
    REQUIRE(std::abs(x.l_aec - y.l_aec) <= 1e-12);
    REQUIRE(std::abs(x.l_d - y.l_d) <= 1e-12);
    REQUIRE(std::abs(x.l_g - y.l_g) <= 1e-12);
    REQUIRE(std::abs(x.l_lcl - y.l_lcl) <= 1e-12);
    REQUIRE(std::abs(x.total - y.total) <= 1e-12);
  }
  REQUIRE(model_c.params().value_hash() == model_a.params().value_hash());
}

TEST_CASE("loss trajectories fall and the adversary hovers near equilibrium", "[train]") {
  const std::size_t runs = 10, epochs = 50;
  std::size_t er_down = 0, aed_down = 0, aec_down = 0, lcl_down = 0;
  double inv_sum = 0, ld_sum = 0;

  for (std::size_t r = 0; r < runs; ++r) {
    const auto utts = generate_synthetic(micro_synth(100 + r), 32);
    auto cfg = micro_train();
    cfg.epochs = epochs;
    cfg.batch_size = 16;
    cfg.seed = 100 + r;

    Rng rng(200 + r);
    M4serModel<float> model(cfg.model, rng);
    const auto result = fit(model, utts, {}, cfg);
    const auto gan = gan_report(model, utts);
    inv_sum += gan.mean_inv_score;
    ld_sum += gan.l_d;
    REQUIRE(gan.mean_inv_score > 0.1);
    REQUIRE(gan.mean_inv_score < 0.9);

    const auto& first = result.history.front().mean;
    const auto& last = result.history.back().mean;
    er_down += last.l_er < first.l_er ? 1 : 0;
    aed_down += last.l_aed < first.l_aed ? 1 : 0;
    aec_down += last.l_aec < first.l_aec ? 1 : 0;
    lcl_down += last.l_lcl < first.l_lcl ? 1 : 0;
  }

  REQUIRE(er_down >= 9);
  REQUIRE(aed_down >= 9);
  REQUIRE(aec_down >= 9);
  REQUIRE(lcl_down >= 9);

  // the discriminator objective settles at -2 ln 2 and the invariant frames
  // score one half when neither side can improve
  REQUIRE(std::abs(inv_sum / runs - 0.5) < 0.15);
  REQUIRE(std::abs(ld_sum / runs + 2 * std::log(2.0)) < 0.25);
}
