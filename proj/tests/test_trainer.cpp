#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>

#include "milore/corpus.hpp"
#include "milore/errors.hpp"
#include "milore/hash.hpp"
#include "milore/probe.hpp"
#include "milore/trainer.hpp"
#include "test_support.hpp"

using namespace milore;
using testing::random_tensor;

namespace {

EncoderConfig tiny_encoder(std::size_t d_model = 16) {
  EncoderConfig c;
  c.layers = 1;
  c.d_feat = 4;
  c.d_model = d_model;
  c.heads = 2;
  c.d_ffn = 2 * d_model;
  c.codebook_size = 4;
  c.max_frames = 32;
  c.mask = MaskConfig{2, 0.15};
  return c;
}

// Sticky four-state HMM; targets are the generating states.
struct Toy {
  std::vector<Utterance> utterances;
  TargetSequence targets;
};

Toy toy_language(std::size_t count, std::uint64_t seed, const std::string& name = "aa") {
  SyntheticLanguage lang;
  lang.name = name;
  lang.states = 4;
  lang.d_feat = 4;
  lang.hours = 1.0;
  lang.min_duration_s = 0.3;
  lang.max_duration_s = 0.6;
  lang.noise = 0.3;
  lang.stickiness = 0.9;
  lang.emission_seed = 3;
  lang.transition_seed = 4;
  auto gen = generate_language(make_language_spec(lang), seed);
  Toy t;
  for (std::size_t i = 0; i < count; ++i) {
    t.targets.push_back(gen.utterances[i].states);
    t.utterances.push_back(std::move(gen.utterances[i]));
  }
  return t;
}

std::map<std::string, std::string> hashes_of(const std::vector<NamedTensor>& params) {
  std::map<std::string, std::string> out;
  for (const auto& p : params) out[p.name] = tensor_hash(p.tensor);
  return out;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("milore_test_trainer_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("lr_at: warmup, peak, decay and past the end") {
  const ScheduleConfig s{400, 100, 1.5e-3};
  CHECK(lr_at(0, s) == 0.0);
  CHECK(lr_at(100, s) == doctest::Approx(1.5e-3).epsilon(1e-15));
  CHECK(std::abs(lr_at(250, s) - 7.5e-4) < 1e-18);
  CHECK(std::abs(lr_at(50, s) - 7.5e-4) < 1e-18);
  CHECK(lr_at(400, s) == 0.0);
  CHECK(lr_at(401, s) == 0.0);
  CHECK_THROWS_AS((ScheduleConfig{10, 20, 1e-3}.validate()), ConfigError);
  CHECK_THROWS_AS((ScheduleConfig{10, 2, 0.0}.validate()), ConfigError);
}

TEST_CASE("Adam: first step is lr * g / (|g| + eps); frozen tensors get no moments") {
  Tensor w = Tensor::from({2}, {1.0, -2.0}, true);
  Tensor frozen = Tensor::from({1}, {3.0});
  backward(sum(mul(w, Tensor::from({2}, {0.5, -0.25}))));
  Adam opt;
  const double norm = opt.step({{"w", w}, {"frozen", frozen}}, 0.1);
  CHECK(norm == doctest::Approx(std::sqrt(0.25 + 0.0625)));
  CHECK(std::abs(w.data()[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-6))) < 1e-15);
  CHECK(std::abs(w.data()[1] - (-2.0 + 0.1 * 0.25 / (0.25 + 1e-6))) < 1e-15);
  CHECK(frozen.data()[0] == 3.0);
  CHECK(opt.moments().size() == 1);
  CHECK(opt.moments().count("w") == 1);
}

TEST_CASE("overfitting 50 utterances for 300 steps halves the loss") {
  Toy toy = toy_language(50, 1);
  TrainingData data = make_training_data(toy.utterances, toy.targets, 2);
  TrainState st = init_base_state(tiny_encoder(), TrainConfig{8, 32, 3}, ScheduleConfig{300, 30, 5e-3});
  const double before = evaluate_loss(st, toy.utterances, toy.targets, 77);
  train_all(st, data);
  const double after = evaluate_loss(st, toy.utterances, toy.targets, 77);
  CHECK(st.step == 300);
  CHECK(st.loss_curve.size() == 300);
  CHECK(after < 0.5 * before);
}

TEST_CASE("zero steps: the checkpoint equals the initialization") {
  const auto dir = scratch_dir("zero");
  TrainState st = init_base_state(tiny_encoder(), TrainConfig{4, 16, 5}, ScheduleConfig{10, 1, 1e-3});
  save_checkpoint(dir, st);
  TrainState back = load_checkpoint(dir);
  TrainState fresh = init_base_state(tiny_encoder(), TrainConfig{4, 16, 5}, ScheduleConfig{10, 1, 1e-3});
  CHECK(hashes_of(back.named_parameters()) == hashes_of(fresh.named_parameters()));
  CHECK(back.step == 0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("fixed seed twice gives identical losses; a different seed does not") {
  Toy toy = toy_language(20, 6);
  auto run = [&](std::uint64_t seed) {
    TrainingData data = make_training_data(toy.utterances, toy.targets, seed);
    TrainState st = init_base_state(tiny_encoder(), TrainConfig{4, 16, seed}, ScheduleConfig{20, 2, 3e-3});
    train_all(st, data);
    return st.loss_curve;
  };
  const auto a = run(7);
  CHECK(a == run(7));
  CHECK(a != run(8));
}

TEST_CASE("continual state at step 0 reproduces the frozen base exactly") {
  Toy toy = toy_language(30, 9);
  TrainingData data = make_training_data(toy.utterances, toy.targets, 10);
  TrainState base = init_base_state(tiny_encoder(), TrainConfig{6, 24, 11}, ScheduleConfig{40, 4, 3e-3});
  train_all(base, data);
  TrainState cont = init_continual_state(base, TrainMode::MiLore, MiLoreConfig{2, 4, 1.0}, 4, TrainConfig{6, 24, 12},
                                         ScheduleConfig{20, 2, 3e-3});
  const FrameBatch batch = make_batch({toy.utterances[0].frames, toy.utterances[1].frames});
  const auto a = base.encoder.encode(batch);
  const auto b = cont.encoder.encode(batch);
  for (std::size_t l = 0; l < a.size(); ++l) CHECK(testing::max_abs_diff(a[l].data(), b[l].data()) == 0.0);

  cont.head = base.head;
  CHECK(evaluate_loss(cont, toy.utterances, toy.targets, 5) == evaluate_loss(base, toy.utterances, toy.targets, 5));
}

TEST_CASE("continual training leaves the backbone bit-identical and moments cover only the trainable set") {
  Toy toy = toy_language(30, 13);
  TrainingData data = make_training_data(toy.utterances, toy.targets, 14);
  TrainState base = init_base_state(tiny_encoder(), TrainConfig{6, 24, 15}, ScheduleConfig{10, 1, 3e-3});
  train_all(base, data);
  TrainState cont = init_continual_state(base, TrainMode::MiLore, MiLoreConfig{2, 4, 1.0}, 4, TrainConfig{6, 24, 16},
                                         ScheduleConfig{30, 3, 5e-3});
  const auto before = hashes_of(cont.encoder.backbone_parameters());
  CHECK(before == hashes_of(base.encoder.backbone_parameters()));
  const auto adapters_before = hashes_of(cont.encoder.adapter_parameters());
  train_all(cont, data);
  CHECK(hashes_of(cont.encoder.backbone_parameters()) == before);
  CHECK(hashes_of(cont.encoder.adapter_parameters()) != adapters_before);

  std::set<std::string> keys, trainable;
  for (const auto& [k, _] : cont.optimizer.moments()) keys.insert(k);
  for (const auto& p : cont.trainable_parameters()) trainable.insert(p.name);
  CHECK(keys == trainable);
  for (const auto& p : cont.encoder.backbone_parameters()) CHECK(keys.count(p.name) == 0);
  CHECK(trainable.count("head.projection") + trainable.count("head") == 1);
}

TEST_CASE("mismatched expert shapes and modes are configuration errors") {
  TrainState base = init_base_state(tiny_encoder(), TrainConfig{4, 16, 1}, ScheduleConfig{10, 1, 1e-3});
  TrainState adapted = init_continual_state(base, TrainMode::MiLore, MiLoreConfig{2, 4, 1.0}, 4,
                                            TrainConfig{4, 16, 2}, ScheduleConfig{10, 1, 1e-3});
  CHECK_THROWS_AS(init_continual_state(adapted, TrainMode::MiLore, MiLoreConfig{3, 4, 1.0}, 4, TrainConfig{4, 16, 2},
                                       ScheduleConfig{10, 1, 1e-3}),
                  ConfigError);
  CHECK_THROWS_AS(init_continual_state(adapted, TrainMode::MiLore, MiLoreConfig{2, 2, 1.0}, 4, TrainConfig{4, 16, 2},
                                       ScheduleConfig{10, 1, 1e-3}),
                  ConfigError);
  CHECK_NOTHROW(init_continual_state(adapted, TrainMode::MiLore, MiLoreConfig{2, 4, 1.0}, 4, TrainConfig{4, 16, 2},
                                     ScheduleConfig{10, 1, 1e-3}));
  CHECK_THROWS_AS(init_continual_state(adapted, TrainMode::FullFinetune, MiLoreConfig{}, 4, TrainConfig{4, 16, 2},
                                       ScheduleConfig{10, 1, 1e-3}),
                  ConfigError);
  CHECK_THROWS_AS(init_continual_state(base, TrainMode::Base, MiLoreConfig{}, 4, TrainConfig{4, 16, 2},
                                       ScheduleConfig{10, 1, 1e-3}),
                  ConfigError);
  CHECK(train_mode_from_string(to_string(TrainMode::FullFinetune)) == TrainMode::FullFinetune);
  CHECK_THROWS_AS(train_mode_from_string("sideways"), ConfigError);
}

TEST_CASE("save, load, then 10 steps equals 10 steps without the round trip") {
  const auto dir = scratch_dir("resume");
  Toy toy = toy_language(24, 17);
  TrainingData data = make_training_data(toy.utterances, toy.targets, 18);
  TrainState base = init_base_state(tiny_encoder(), TrainConfig{4, 20, 19}, ScheduleConfig{40, 4, 3e-3});
  train(base, data, 10);
  TrainState cont = init_continual_state(base, TrainMode::MiLore, MiLoreConfig{2, 4, 1.0}, 4, TrainConfig{4, 20, 20},
                                         ScheduleConfig{40, 4, 3e-3});
  train(cont, data, 7);
  for (TrainState* st : {&base, &cont}) {
    save_checkpoint(dir, *st);
    TrainState resumed = load_checkpoint(dir);
    CHECK(resumed.step == st->step);
    CHECK(resumed.mode == st->mode);
    train(*st, data, 10);
    train(resumed, data, 10);
    CHECK(resumed.loss_curve == st->loss_curve);
    CHECK(hashes_of(resumed.named_parameters()) == hashes_of(st->named_parameters()));
    std::filesystem::remove_all(dir);
  }
}

TEST_CASE("tampered checkpoint files fail the integrity check") {
  const auto dir = scratch_dir("tamper");
  TrainState st = init_base_state(tiny_encoder(), TrainConfig{4, 16, 1}, ScheduleConfig{10, 1, 1e-3});
  save_checkpoint(dir, st);
  const std::string h1 = checkpoint_hash(dir);
  save_checkpoint(dir, st);
  CHECK(checkpoint_hash(dir) == h1);
  {
    std::fstream f(dir / "params.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-3, std::ios::end);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(load_checkpoint(dir), IntegrityError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("a non-finite loss aborts the step before any update") {
  Toy toy = toy_language(10, 21);
  TrainingData data = make_training_data(toy.utterances, toy.targets, 22);
  TrainState st = init_base_state(tiny_encoder(), TrainConfig{4, 16, 23}, ScheduleConfig{10, 1, 1e-3});
  train(st, data, 2);
  auto w = st.head.projection.mutable_data();
  w[0] = std::numeric_limits<double>::quiet_NaN();
  const auto before = hashes_of(st.named_parameters());
  CHECK_THROWS_AS(train_step(st, data), DivergenceError);
  CHECK(hashes_of(st.named_parameters()) == before);
  CHECK(st.step == 2);
}

TEST_CASE("expert/rank grid at a fixed budget: equal expert counts, differing router sizes") {
  Toy toy = toy_language(12, 25);
  TrainingData data = make_training_data(toy.utterances, toy.targets, 26);
  TrainState base = init_base_state(tiny_encoder(), TrainConfig{4, 16, 27}, ScheduleConfig{5, 1, 1e-3});
  train_all(base, data);
  std::set<std::size_t> expert_counts;
  for (auto [r, n] : std::vector<std::pair<std::size_t, std::size_t>>{{12, 2}, {8, 3}, {6, 4}, {4, 6}}) {
    TrainState cont = init_continual_state(base, TrainMode::MiLore, MiLoreConfig{n, r, 1.0}, 4,
                                           TrainConfig{4, 16, 28}, ScheduleConfig{3, 1, 1e-3});
    train_all(cont, data);
    CHECK(cont.step == 3);
    std::size_t experts = 0, routers = 0;
    for (const auto& p : cont.encoder.adapter_parameters()) {
      (p.name.find("router") != std::string::npos ? routers : experts) += p.tensor.numel();
    }
    expert_counts.insert(experts);
    CHECK(routers == n * (16 + 32));
  }
  CHECK(expert_counts.size() == 1);
}

TEST_CASE("probe: separable features score above 0.95") {
  Rng rng(30);
  std::vector<double> v;
  std::vector<int> labels;
  for (std::size_t i = 0; i < 600; ++i) {
    const int z = static_cast<int>(i % 3);
    labels.push_back(z);
    for (std::size_t j = 0; j < 5; ++j) v.push_back((static_cast<int>(j) == z ? 4.0 : 0.0) + standard_normal(rng));
  }
  Tensor x = Tensor::from({600, 5}, v);
  ProbeConfig cfg;
  LinearProbe probe = fit_linear_probe(x, labels, 3, cfg);
  const auto pred = probe.predict(x);
  std::size_t right = 0;
  for (std::size_t i = 0; i < 600; ++i) right += pred[i] == labels[i];
  CHECK(static_cast<double>(right) / 600.0 > 0.95);
}

TEST_CASE("probe: random labels stay within 3 sigma of chance") {
  const std::size_t k = 4, n = 2000;
  Tensor train_x = random_tensor({n, 6}, 31), test_x = random_tensor({n, 6}, 32);
  Rng rng(33);
  std::vector<int> train_y(n), test_y(n);
  for (auto& y : train_y) y = static_cast<int>(uniform_index(rng, k));
  for (auto& y : test_y) y = static_cast<int>(uniform_index(rng, k));
  LinearProbe probe = fit_linear_probe(train_x, train_y, k, ProbeConfig{});
  const auto pred = probe.predict(test_x);
  std::size_t right = 0;
  for (std::size_t i = 0; i < n; ++i) right += pred[i] == test_y[i];
  const double p = 1.0 / k, sigma = std::sqrt(p * (1 - p) / n);
  CHECK(std::abs(static_cast<double>(right) / n - p) < 3 * sigma);
}

TEST_CASE("probe: identical checkpoints give identical results; bad layer is a config error") {
  const auto dir = scratch_dir("probe");
  Toy a = toy_language(16, 34, "aa"), b = toy_language(16, 35, "bb");
  std::vector<Utterance> heldout = a.utterances;
  heldout.insert(heldout.end(), b.utterances.begin(), b.utterances.end());
  TargetSequence labels = a.targets;
  labels.insert(labels.end(), b.targets.begin(), b.targets.end());
  TrainState st = init_base_state(tiny_encoder(), TrainConfig{4, 16, 36}, ScheduleConfig{10, 1, 1e-3});
  save_checkpoint(dir, st);
  TrainState back = load_checkpoint(dir);
  for (auto task : {ProbeTask::LanguageId, ProbeTask::ClusterAccuracy}) {
    ProbeConfig cfg;
    cfg.task = task;
    cfg.layer = 1;
    cfg.iterations = 50;
    const ProbeResult r1 = probe_evaluate(st.encoder, heldout, cfg, &labels);
    const ProbeResult r2 = probe_evaluate(back.encoder, heldout, cfg, &labels);
    CHECK(r1 == r2);
    CHECK(r1.accuracy >= 0.0);
    CHECK(r1.accuracy <= 1.0);
    CHECK(r1.per_language.size() == 2);
    cfg.layer = 2;
    CHECK_THROWS_AS(probe_evaluate(st.encoder, heldout, cfg, &labels), ConfigError);
  }
  std::filesystem::remove_all(dir);
}
