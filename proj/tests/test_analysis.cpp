#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "milore/analysis.hpp"
#include "milore/errors.hpp"
#include "test_support.hpp"

using namespace milore;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("milore_test_analysis_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

std::size_t line_count(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

EncoderConfig toy_config() {
  EncoderConfig c;
  c.layers = 2;
  c.d_feat = 16;
  c.d_model = 16;
  c.heads = 2;
  c.d_ffn = 64;
  c.codebook_size = 32;
  c.max_frames = 128;
  c.milore = MiLoreConfig{2, 4, 1.0};
  return c;
}

// One-state languages with means far apart along distinct axes.
std::vector<Utterance> two_languages(std::size_t per_language, std::size_t d, std::uint64_t seed) {
  std::vector<Utterance> out;
  Rng rng(seed);
  for (std::size_t g = 0; g < 2; ++g) {
    const std::string lang = g == 0 ? "aa" : "bb";
    for (std::size_t i = 0; i < per_language; ++i) {
      const std::size_t len = 6 + (i % 4);
      std::vector<double> v(len * d);
      for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t j = 0; j < d; ++j) v[t * d + j] = (j == g ? 5.0 : 0.0) + 0.1 * standard_normal(rng);
      }
      out.push_back({lang + "-" + std::to_string(i), lang, Tensor::from({len, d}, v), len / 50.0, {}});
    }
  }
  return out;
}

Encoder adapted_encoder(std::size_t layers, std::uint64_t seed) {
  EncoderConfig c;
  c.layers = layers;
  c.d_feat = 4;
  c.d_model = 8;
  c.heads = 2;
  c.d_ffn = 16;
  c.codebook_size = 4;
  c.max_frames = 16;
  Encoder e(c, seed);
  e.attach_milore(MiLoreConfig{2, 2, 1.0}, seed + 1);
  return e;
}

}  // namespace

TEST_CASE("parameter layout of the toy config matches a hand enumeration") {
  const std::size_t d = 16, f = 64, r = 4, n = 2, k = 32, frames = 128;
  const std::size_t frontend = d * d + d;
  const std::size_t block = 2 * (2 * d) + 4 * (d * d + d) + (d * f + f) + (f * d + d);
  const std::size_t adapters = (n * (r * d + f * r) + n * d) + (n * (r * f + d * r) + n * f);
  const std::size_t head = k * d;
  const std::size_t total = frontend + frames * d + d + 2 * block + 2 * adapters + head;
  const std::size_t trainable = 2 * adapters + head;
  CHECK(total == 12288);
  CHECK(trainable == 3392);

  ParamReport rep = parameter_layout(toy_config(), k, TrainMode::MiLore);
  CHECK(rep.total == total);
  CHECK(rep.trainable == trainable);
  CHECK(rep.fraction() == static_cast<double>(trainable) / static_cast<double>(total));
  CHECK_NOTHROW(rep.audit());

  ParamReport broken = rep;
  broken.total += 1;
  CHECK_THROWS_AS(broken.audit(), IntegrityError);
}

TEST_CASE("shape-only layout agrees with a materialized state") {
  EncoderConfig base = toy_config();
  base.milore.reset();
  TrainState st = init_base_state(base, TrainConfig{}, ScheduleConfig{10, 1, 1e-3});
  ParamReport counted = count_parameters(st);
  CHECK(counted == parameter_layout(base, 32, TrainMode::Base));
  CHECK(counted.fraction() == 1.0);
  TrainState cont = init_continual_state(st, TrainMode::MiLore, MiLoreConfig{2, 4, 1.0}, 32, TrainConfig{},
                                         ScheduleConfig{10, 1, 1e-3});
  CHECK(count_parameters(cont) == parameter_layout(toy_config(), 32, TrainMode::MiLore));
}

TEST_CASE("counting a checkpoint directory; corruption is an integrity error") {
  const auto dir = scratch_dir("count");
  EncoderConfig base = toy_config();
  base.milore.reset();
  TrainState st = init_base_state(base, TrainConfig{}, ScheduleConfig{10, 1, 1e-3});
  save_checkpoint(dir, st);
  CHECK(count_parameters(dir) == count_parameters(st));
  std::ofstream(dir / "params.bin", std::ios::app) << "x";
  CHECK_THROWS_AS(count_parameters(dir), IntegrityError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("a large-model-shaped config lands in the [1.8%, 2.6%] band") {
  EncoderConfig c;
  c.layers = 24;
  c.d_feat = 512;
  c.d_model = 1024;
  c.heads = 16;
  c.d_ffn = 4096;
  c.max_frames = 512;
  c.milore = MiLoreConfig{2, 12, 1.0};
  ParamReport rep = parameter_layout(c, 500, TrainMode::MiLore);
  CHECK(rep.fraction() >= 0.018);
  CHECK(rep.fraction() <= 0.026);
}

TEST_CASE("zero routers give 1/N in every cell") {
  Encoder enc = adapted_encoder(3, 5);
  const auto utts = two_languages(5, 4, 6);
  ActivationProfile p = expert_activation_profile(enc, utts);
  REQUIRE(p.layers == 3);
  REQUIRE(p.languages == std::vector<std::string>{"aa", "bb"});
  for (std::size_t l = 0; l < 3; ++l) {
    for (const auto& lang : p.languages) {
      CHECK(std::abs(p.mean(l, lang, 0) - 0.5) < 1e-15);
      CHECK(std::abs(p.mean(l, lang, 1) - 0.5) < 1e-15);
    }
  }
  std::size_t frames_aa = 0;
  for (const auto& u : utts) frames_aa += u.language == "aa" ? u.length() : 0;
  CHECK(p.cells[0][0].frames == frames_aa);
}

TEST_CASE("a hand-set router sends one language to expert 1") {
  Encoder enc = adapted_encoder(1, 7);
  auto& blk = enc.blocks()[0];
  // Without the attention residual branch the FFN sees LN(block input).
  for (Tensor* t : {&blk.attn.output.weight, &blk.attn.output.bias}) {
    auto w = t->mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
  }
  const auto utts = two_languages(6, 4, 8);
  const std::size_t d = 8;
  std::vector<double> sum_a(d, 0.0), sum_b(d, 0.0);
  std::size_t n_a = 0, n_b = 0;
  std::vector<std::vector<double>> normed_a;
  for (const auto& u : utts) {
    const auto x = enc.encode(make_batch({u.frames}))[0];
    for (std::size_t t = 0; t < u.length(); ++t) {
      std::vector<double> row(x.data().begin() + t * d, x.data().begin() + (t + 1) * d);
      double mu = 0.0, var = 0.0;
      for (double v : row) mu += v / d;
      for (double v : row) var += (v - mu) * (v - mu) / d;
      for (auto& v : row) v = (v - mu) / std::sqrt(var + 1e-5);
      auto& sum = u.language == "aa" ? sum_a : sum_b;
      for (std::size_t j = 0; j < d; ++j) sum[j] += row[j];
      (u.language == "aa" ? n_a : n_b) += 1;
      if (u.language == "aa") normed_a.push_back(row);
    }
  }
  std::vector<double> dir(d), mid(d);
  for (std::size_t j = 0; j < d; ++j) {
    dir[j] = sum_a[j] / n_a - sum_b[j] / n_b;
    mid[j] = 0.5 * (sum_a[j] / n_a + sum_b[j] / n_b);
  }
  double min_margin = 1e300;
  for (const auto& row : normed_a) {
    double m = 0.0;
    for (std::size_t j = 0; j < d; ++j) m += dir[j] * (row[j] - mid[j]);
    min_margin = std::min(min_margin, m);
  }
  REQUIRE(min_margin > 0.0);
  const double alpha = 10.0 / (2.0 * min_margin);
  auto gamma = blk.ffn_norm.gamma.mutable_data();
  auto beta = blk.ffn_norm.beta.mutable_data();
  auto& router = std::get<MiLoreModule>(blk.ffn_up).router().weight;
  auto w = router.mutable_data();
  for (std::size_t j = 0; j < d; ++j) {
    gamma[j] = 1.0;
    beta[j] = -mid[j];
    w[j] = alpha * dir[j];
    w[d + j] = -alpha * dir[j];
  }
  ActivationProfile p = expert_activation_profile(enc, utts);
  CHECK(p.mean(0, "aa", 0) > 0.99);
  CHECK(p.mean(0, "bb", 0) < 0.5);
}

TEST_CASE("profiles: identical manifests, order invariance and simplex cells") {
  Encoder enc = adapted_encoder(2, 9);
  std::uint64_t s = 40;
  for (auto& p : enc.adapter_parameters()) {
    Tensor r = testing::random_tensor(p.tensor.shape(), ++s);
    auto dst = p.tensor.mutable_data();
    std::copy(r.data().begin(), r.data().end(), dst.begin());
  }
  auto utts = two_languages(6, 4, 10);
  std::vector<Utterance> twin;
  for (const auto& u : utts) {
    if (u.language != "aa") continue;
    twin.push_back(u);
    Utterance c = u;
    c.language = "cc";
    c.id = "cc" + u.id;
    twin.push_back(c);
  }
  ActivationProfile tp = expert_activation_profile(enc, twin);
  for (std::size_t l = 0; l < 2; ++l) CHECK(tp.cells[l][0] == tp.cells[l][1]);

  ActivationProfile a = expert_activation_profile(enc, utts);
  std::reverse(utts.begin(), utts.end());
  std::rotate(utts.begin(), utts.begin() + 3, utts.end());
  CHECK(expert_activation_profile(enc, utts) == a);
  for (const auto& layer : a.cells) {
    for (const auto& cell : layer) {
      double total = 0.0;
      for (double m : cell.mean_weight) {
        CHECK(m >= 0.0);
        CHECK(m <= 1.0);
        total += m;
      }
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
  }
  ActivationProfile down = expert_activation_profile(enc, utts, RouterSite::Down);
  CHECK_FALSE(down == a);
}

TEST_CASE("profiles need MiLorE modules") {
  EncoderConfig c;
  c.layers = 1;
  c.d_feat = 4;
  c.d_model = 8;
  c.heads = 2;
  c.d_ffn = 16;
  c.max_frames = 16;
  Encoder dense(c, 1);
  CHECK_THROWS_AS(expert_activation_profile(dense, two_languages(2, 4, 1)), ConfigError);
}

TEST_CASE("reports: empty tables, JSON round trip, a six-row grid and unwritable paths") {
  const auto dir = scratch_dir("report");
  auto written = emit_report(Report{}, dir / "empty");
  CHECK(!written.empty());
  for (const auto& p : written) CHECK(std::filesystem::exists(p));
  CHECK(line_count(dir / "empty" / "params.csv") == 1);
  CHECK(line_count(dir / "empty" / "ablation.csv") == 1);
  CHECK(read_report_json(dir / "empty") == Report{});

  Report full;
  full.params = parameter_layout(toy_config(), 32, TrainMode::MiLore);
  Encoder enc = adapted_encoder(2, 11);
  full.activation = expert_activation_profile(enc, two_languages(3, 4, 12));
  full.probes.push_back(ProbeResult{ProbeTask::LanguageId, 2, 0.1 + 1e-17, {{"aa", 1.0 / 3.0}, {"bb", 0.7}},
                                    {{"aa", 11}, {"bb", 13}}});
  const std::vector<std::pair<std::size_t, std::size_t>> grid{{12, 2}, {8, 3}, {6, 4}, {4, 6}, {3, 8}, {2, 12}};
  for (auto [r, n] : grid) {
    full.ablation.push_back(AblationRow{r, n, 1000 + n, 50000, {{"probe_aa", 1.0 / (r + 0.3)}, {"loss", 2.0 / 3.0}}});
  }
  emit_report(full, dir / "full");
  CHECK(read_report_json(dir / "full") == full);
  CHECK(line_count(dir / "full" / "ablation.csv") == 7);
  std::ifstream in(dir / "full" / "ablation.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header.rfind("lora_rank,experts,trainable_params,total_params,trainable_fraction", 0) == 0);
  CHECK(line_count(dir / "full" / "activation.csv") == 1 + 2 * 2 * 2);

  std::filesystem::create_directories(dir);
  std::ofstream(dir / "plain_file") << "x";
  CHECK_THROWS_AS(emit_report(full, dir / "plain_file" / "sub"), IoError);
  std::filesystem::remove_all(dir);
}
