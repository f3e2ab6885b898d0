#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "milore/errors.hpp"
#include "milore/objective.hpp"
#include "milore/trainer.hpp"
#include "test_support.hpp"

using namespace milore;
using testing::random_tensor;

namespace {

MaskSet mask_of(std::vector<std::vector<std::size_t>> idx) {
  MaskSet m;
  m.indices = std::move(idx);
  return m;
}

TargetSequence random_targets(std::size_t b, std::size_t t, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  TargetSequence z(b, std::vector<int>(t));
  for (auto& row : z) {
    for (auto& v : row) v = static_cast<int>(uniform_index(rng, k));
  }
  return z;
}

// -log softmax(W h)[z], computed one frame at a time.
double frame_nll(const Tensor& hidden, std::size_t row, const Tensor& w, int z) {
  const std::size_t d = w.dim(1), k = w.dim(0);
  std::vector<double> logits(k, 0.0);
  double mx = -1e300;
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t j = 0; j < d; ++j) logits[c] += w.at(c, j) * hidden.data()[row * d + j];
    mx = std::max(mx, logits[c]);
  }
  double s = 0.0;
  for (double l : logits) s += std::exp(l - mx);
  return -(logits[z] - mx - std::log(s));
}

}  // namespace

TEST_CASE("uniform logits give ln K for any targets") {
  PredictionHead head{Tensor::zeros({8, 5}, true)};
  Tensor hidden = random_tensor({2, 6, 5}, 1);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const double loss =
        masked_prediction_loss(hidden, random_targets(2, 6, 8, s), mask_of({{0, 3, 5}, {1, 2}}), head).item();
    CHECK(std::abs(loss - std::log(8.0)) < 1e-12);
  }
  CHECK(std::abs(std::log(8.0) - 2.0794) < 1e-4);
}

TEST_CASE("a +40 margin on the correct class gives a vanishing loss") {
  const std::size_t k = 6;
  std::vector<double> w(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i) w[i * k + i] = 40.0;
  PredictionHead head{Tensor::from({k, k}, w)};
  TargetSequence z = random_targets(1, 10, k, 4);
  std::vector<double> h(10 * k, 0.0);
  for (std::size_t t = 0; t < 10; ++t) h[t * k + static_cast<std::size_t>(z[0][t])] = 1.0;
  const double loss =
      masked_prediction_loss(Tensor::from({1, 10, k}, h), z, mask_of({{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}}), head).item();
  CHECK(loss >= 0.0);
  CHECK(loss < 1e-12);
}

TEST_CASE("B=1, T=3, masked {0,2}, K=3 matches a hand-summed loss") {
  Tensor hidden = random_tensor({1, 3, 4}, 10);
  PredictionHead head{random_tensor({3, 4}, 11, -2, 2)};
  TargetSequence z{{2, 0, 1}};
  const double loss = masked_prediction_loss(hidden, z, mask_of({{0, 2}}), head).item();
  const double hand = (frame_nll(hidden, 0, head.projection, 2) + frame_nll(hidden, 2, head.projection, 1)) / 2.0;
  CHECK(std::abs(loss - hand) < 1e-12);
}

TEST_CASE("pooled mean over all masked frames in the batch") {
  Tensor hidden = random_tensor({3, 5, 4}, 20);
  PredictionHead head{random_tensor({7, 4}, 21)};
  TargetSequence z = random_targets(3, 5, 7, 22);
  MaskSet m = mask_of({{0, 4}, {}, {1, 2, 3}});
  double sum = 0.0;
  for (std::size_t b = 0; b < 3; ++b) {
    for (auto t : m.indices[b]) sum += frame_nll(hidden, b * 5 + t, head.projection, z[b][t]);
  }
  CHECK(std::abs(masked_prediction_loss(hidden, z, m, head).item() - sum / 5.0) < 1e-12);
}

TEST_CASE("no masked frame is an explicit error") {
  PredictionHead head{Tensor::zeros({4, 3})};
  Tensor hidden = random_tensor({2, 3, 3}, 1);
  CHECK_THROWS_AS(masked_prediction_loss(hidden, random_targets(2, 3, 4, 1), mask_of({{}, {}}), head), EmptyMaskError);
  CHECK_THROWS_AS(joint_continual_loss(SubsetLoss{}, SubsetLoss{}), EmptyMaskError);
  CHECK_THROWS_AS(masked_prediction_loss(hidden, random_targets(2, 3, 4, 1), mask_of({{3}, {}}), head), IndexError);
  CHECK_THROWS_AS(masked_prediction_loss(hidden, random_targets(1, 3, 4, 1), mask_of({{1}}), head), ShapeError);
}

TEST_CASE("invariant to padding content and unmasked targets") {
  EncoderConfig c;
  c.layers = 2;
  c.d_feat = 5;
  c.d_model = 8;
  c.heads = 2;
  c.d_ffn = 16;
  c.codebook_size = 6;
  c.max_frames = 16;
  Encoder enc(c, 3);
  Rng rng(4);
  PredictionHead head = PredictionHead::create(6, 8, rng);
  FrameBatch batch = make_batch({random_tensor({9, 5}, 30), random_tensor({5, 5}, 31)});
  MaskSet m = mask_of({{1, 2, 7}, {0, 3}});
  TargetSequence z = random_targets(2, 9, 6, 5);
  const double before = masked_prediction_loss(enc.encode(batch, &m).back(), z, m, head).item();

  auto f = batch.features.mutable_data();
  for (std::size_t i = (9 + 5) * 5; i < 18 * 5; ++i) f[i] = 123.0;
  for (std::size_t t : {0u, 3u, 4u, 5u, 6u, 8u}) z[0][t] = (z[0][t] + 1) % 6;
  for (std::size_t t : {1u, 2u, 4u, 6u}) z[1][t] = (z[1][t] + 2) % 6;
  const double after = masked_prediction_loss(enc.encode(batch, &m).back(), z, m, head).item();
  CHECK(before == after);
}

TEST_CASE("joint loss: new-only, empty replay and a 50/50 mix") {
  Tensor hidden = random_tensor({4, 6, 5}, 40);
  PredictionHead head{random_tensor({5, 5}, 41, -2, 2)};
  TargetSequence z = random_targets(4, 6, 5, 42);
  MaskSet new_m = mask_of({{0, 1, 2}, {3, 4, 5}, {}, {}});
  MaskSet rep_m = mask_of({{}, {}, {0, 2, 4}, {1, 3, 5}});
  MaskSet all_m = mask_of({{0, 1, 2}, {3, 4, 5}, {0, 2, 4}, {1, 3, 5}});

  const SubsetLoss new_part = masked_prediction_subset(hidden, z, new_m, head);
  CHECK(joint_continual_loss(new_part, SubsetLoss{}).item() == masked_prediction_loss(hidden, z, new_m, head).item());

  const SubsetLoss rep_part = masked_prediction_subset(hidden, z, rep_m, head);
  REQUIRE(new_part.masked_frames == rep_part.masked_frames);
  const double joint = joint_continual_loss(new_part, rep_part).item();
  const double lo = std::min(new_part.loss.item(), rep_part.loss.item());
  const double hi = std::max(new_part.loss.item(), rep_part.loss.item());
  CHECK(joint >= lo);
  CHECK(joint <= hi);
  CHECK(std::abs(joint - masked_prediction_loss(hidden, z, all_m, head).item()) < 1e-12);
}

TEST_CASE("gradients of head and trainable encoder parameters match finite differences") {
  EncoderConfig c;
  c.layers = 2;
  c.d_feat = 4;
  c.d_model = 8;
  c.heads = 2;
  c.d_ffn = 8;
  c.codebook_size = 5;
  c.max_frames = 8;
  Encoder enc(c, 7);
  enc.attach_milore(MiLoreConfig{2, 2, 1.0}, 8);
  std::uint64_t s = 60;
  for (auto& p : enc.adapter_parameters()) {
    Tensor r = random_tensor(p.tensor.shape(), ++s, -0.5, 0.5);
    auto d = p.tensor.mutable_data();
    std::copy(r.data().begin(), r.data().end(), d.begin());
  }
  Rng rng(9);
  PredictionHead head = PredictionHead::create(5, 8, rng);
  FrameBatch batch = make_batch({random_tensor({5, 4}, 70), random_tensor({3, 4}, 71)});
  MaskSet m = mask_of({{0, 2, 3}, {1}});
  TargetSequence z = random_targets(2, 5, 5, 72);
  auto loss = [&] { return masked_prediction_loss(enc.encode(batch, &m).back(), z, m, head); };

  std::vector<NamedTensor> params = enc.adapter_parameters();
  params.push_back({"head", head.projection});
  for (auto& p : params) {
    CAPTURE(p.name);
    auto r = testing::check_gradient(p.tensor, loss);
    CHECK(r.checked > 0);
    CHECK(r.max_rel < 1e-5);
  }
}

TEST_CASE("loss decreases over the first 50 steps on a 200-utterance overfit set") {
  EncoderConfig c;
  c.layers = 1;
  c.d_feat = 4;
  c.d_model = 16;
  c.heads = 2;
  c.d_ffn = 32;
  c.codebook_size = 4;
  c.max_frames = 12;
  c.mask = MaskConfig{2, 0.2};
  std::vector<Utterance> utts;
  TargetSequence targets;
  Rng rng(11);
  for (std::size_t i = 0; i < 200; ++i) {
    const std::size_t len = 8 + i % 5;
    std::vector<double> v(len * 4);
    const int label = static_cast<int>(uniform_index(rng, 4));
    std::vector<int> z(len, label);
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t j = 0; j < 4; ++j) {
        v[t * 4 + j] = (static_cast<int>(j) == label ? 2.0 : 0.0) + 0.3 * standard_normal(rng);
      }
    }
    utts.push_back({"u" + std::to_string(i), "xx", Tensor::from({len, 4}, v), 0.1 * len, {}});
    targets.push_back(z);
  }
  TrainingData data = make_training_data(utts, targets, 12);
  TrainState st = init_base_state(c, TrainConfig{200, 12, 13}, ScheduleConfig{100, 0, 2e-3});
  double prev = evaluate_loss(st, utts, targets, 99);
  for (std::size_t k = 0; k < 50; ++k) {
    train_step(st, data);
    const double now = evaluate_loss(st, utts, targets, 99);
    CAPTURE(k);
    CHECK(now < prev);
    prev = now;
  }
}
