#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "milore/corpus.hpp"
#include "milore/errors.hpp"
#include "test_support.hpp"

using namespace milore;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("milore_test_corpus_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

Manifest uniform_manifest(const std::string& lang, std::size_t count, double seconds) {
  Manifest m;
  for (std::size_t i = 0; i < count; ++i) {
    m.records.push_back({lang + "-" + std::to_string(i), lang + "/" + std::to_string(i) + ".bin", lang,
                         static_cast<std::size_t>(seconds * 50), seconds});
  }
  return m;
}

// Records of `chunk` seconds plus one remainder record summing to `hours`.
Manifest manifest_with_hours(const std::string& lang, double hours, double chunk) {
  Manifest m;
  double left = hours * 3600.0;
  std::size_t i = 0;
  while (left > 1e-9) {
    const double s = std::min(chunk, left);
    m.records.push_back({lang + "-" + std::to_string(i++), "", lang, static_cast<std::size_t>(s * 50), s});
    left -= s;
  }
  return m;
}

std::map<std::string, double> language_share(const std::vector<ManifestRecord>& stream) {
  std::map<std::string, double> h;
  double total = 0.0;
  for (const auto& r : stream) {
    h[r.language] += r.duration_s;
    total += r.duration_s;
  }
  for (auto& [_, v] : h) v /= total;
  return h;
}

LanguageSpec single_state(const std::string& name, std::vector<double> mean, double sd) {
  LanguageSpec s;
  s.name = name;
  s.state_means = {std::move(mean)};
  s.state_stddevs = {std::vector<double>(s.state_means[0].size(), sd)};
  s.transitions = {{1.0}};
  s.target_hours = 0.005;
  return s;
}

}  // namespace

TEST_CASE("one state with zero noise emits its mean on every frame") {
  LanguageSpec s = single_state("aa", {1.5, -2.0, 0.25}, 0.0);
  auto gen = generate_language(s, 3);
  REQUIRE(!gen.utterances.empty());
  for (const auto& u : gen.utterances) {
    for (std::size_t t = 0; t < u.length(); ++t) {
      for (std::size_t j = 0; j < 3; ++j) CHECK(u.frames.at(t, j) == s.state_means[0][j]);
    }
  }
}

TEST_CASE("languages 10 sigma apart are separable by a nearest-mean oracle") {
  LanguageSpec a, b;
  a.name = "aa";
  b.name = "bb";
  const double sigma = 0.7;
  a.state_means = {{0, 0, 0, 0}, {0, 1, 0, 0}, {1, 0, 0, 0}};
  // b is a shifted by 10 sigma + 1 along axis 0, so every cross pair is at least 10 sigma apart.
  b.state_means = a.state_means;
  for (auto& m : b.state_means) m[0] += 10 * sigma + 1.0;
  for (auto* s : {&a, &b}) {
    s->state_stddevs.assign(3, std::vector<double>(4, sigma));
    s->transitions = {{0.8, 0.1, 0.1}, {0.1, 0.8, 0.1}, {0.1, 0.1, 0.8}};
    s->target_hours = 0.01;
  }
  std::size_t right = 0, total = 0;
  for (const auto* s : {&a, &b}) {
    for (const auto& u : generate_language(*s, 5).utterances) {
      for (std::size_t t = 0; t < u.length(); ++t) {
        double best = 1e300;
        std::string lang;
        for (const auto* cand : {&a, &b}) {
          for (const auto& mu : cand->state_means) {
            double d = 0.0;
            for (std::size_t j = 0; j < 4; ++j) d += (u.frames.at(t, j) - mu[j]) * (u.frames.at(t, j) - mu[j]);
            if (d < best) {
              best = d;
              lang = cand->name;
            }
          }
        }
        right += lang == u.language;
        ++total;
      }
    }
  }
  CHECK(static_cast<double>(right) / static_cast<double>(total) > 0.99);
}

TEST_CASE("0.1 hours at 50 fps is about 18,000 frames") {
  SyntheticLanguage lang;
  lang.name = "xx";
  lang.hours = 0.1;
  lang.states = 4;
  lang.d_feat = 3;
  const LanguageSpec spec = make_language_spec(lang);
  auto gen = generate_language(spec, 7);
  const double longest = spec.max_duration_s * spec.frames_per_second;
  CHECK(gen.manifest.total_frames() >= 18000);
  CHECK(static_cast<double>(gen.manifest.total_frames()) <= 18000 + longest);
  for (const auto& u : gen.utterances) {
    CHECK(u.duration_s == doctest::Approx(u.length() / 50.0));
    CHECK(u.states.size() == u.length());
  }
  CHECK(gen.manifest == manifest_of(gen.utterances));
}

TEST_CASE("generation is deterministic per seed") {
  SyntheticLanguage lang;
  lang.name = "xx";
  lang.hours = 0.01;
  lang.d_feat = 4;
  const LanguageSpec spec = make_language_spec(lang);
  auto a = generate_language(spec, 11), b = generate_language(spec, 11), c = generate_language(spec, 12);
  REQUIRE(a.utterances.size() == b.utterances.size());
  for (std::size_t i = 0; i < a.utterances.size(); ++i) {
    CHECK(testing::max_abs_diff(a.utterances[i].frames.data(), b.utterances[i].frames.data()) == 0.0);
  }
  CHECK(a.manifest == b.manifest);
  CHECK_FALSE(a.manifest == c.manifest);
}

TEST_CASE("transition matrices must be row-stochastic") {
  LanguageSpec s = single_state("aa", {0.0, 0.0}, 1.0);
  s.state_means.push_back({1.0, 1.0});
  s.state_stddevs.push_back({1.0, 1.0});
  s.transitions = {{0.5, 0.4}, {0.5, 0.5}};
  CHECK_THROWS_AS(generate_language(s, 1), ConfigError);
  s.transitions = {{1.2, -0.2}, {0.5, 0.5}};
  CHECK_THROWS_AS(generate_language(s, 1), ConfigError);
  s.transitions = {{0.5, 0.5}, {0.5, 0.5}};
  CHECK_NOTHROW(generate_language(s, 1));
  s.target_hours = 0.0;
  CHECK_THROWS_AS(generate_language(s, 1), ConfigError);
}

TEST_CASE("transition shapes") {
  SyntheticLanguage lang;
  lang.name = "xx";
  lang.states = 5;
  lang.d_feat = 3;
  lang.stickiness = 0.6;
  lang.transition = TransitionShape::Forward;
  auto fwd = make_language_spec(lang);
  lang.transition = TransitionShape::Backward;
  auto bwd = make_language_spec(lang);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(fwd.transitions[i][i] == doctest::Approx(0.6));
    CHECK(fwd.transitions[i][(i + 1) % 5] == doctest::Approx(0.4));
    CHECK(bwd.transitions[i][(i + 4) % 5] == doctest::Approx(0.4));
  }
  CHECK(fwd.state_means == bwd.state_means);

  lang.transition = TransitionShape::Mirrored;
  lang.mirror_stickiness = 0.1;
  lang.hours = 0.02;
  auto mir = make_language_spec(lang);
  REQUIRE(mir.states() == 10);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(mir.state_means[i] == mir.state_means[i + 5]);
    CHECK(mir.transitions[i][i] == doctest::Approx(0.6));
    CHECK(mir.transitions[i][(i + 1) % 5] == doctest::Approx(0.4));
    CHECK(mir.transitions[5 + i][5 + i] == doctest::Approx(0.1));
    CHECK(mir.transitions[5 + i][5 + (i + 4) % 5] == doctest::Approx(0.9));
  }
  std::set<bool> directions;
  for (const auto& u : generate_language(mir, 2).utterances) {
    const bool backward = u.states.front() >= 5;
    directions.insert(backward);
    for (int s : u.states) CHECK((s >= 5) == backward);
  }
  CHECK(directions.size() == 2);
}

TEST_CASE("duration filter: inclusive [2, 30] seconds and idempotent") {
  Manifest m;
  for (double s : {1.5, 2.0, 2.5, 30.0, 31.0, 1.999, 30.001}) {
    m.records.push_back({"u" + std::to_string(m.records.size()), "", "aa", static_cast<std::size_t>(s * 50), s});
  }
  Manifest f = filter_by_duration(m);
  std::vector<double> kept;
  for (const auto& r : f.records) kept.push_back(r.duration_s);
  CHECK(kept == std::vector<double>{2.0, 2.5, 30.0});
  CHECK(f.total_hours().at("aa") == doctest::Approx(34.5 / 3600.0));
  CHECK(filter_by_duration(f) == f);
}

TEST_CASE("replay mix: 900 new + 100 replay utterances gives exactly 10% replay") {
  auto stream = replay_mix({uniform_manifest("new", 900, 5.0)}, uniform_manifest("old", 100, 5.0), 3);
  REQUIRE(stream.size() == 1000);
  const auto share = language_share(stream);
  CHECK(share.at("old") == doctest::Approx(0.10).epsilon(1e-12));
}

TEST_CASE("replay mix: hour-proportional shares for the three-language totals") {
  const Manifest cmn = manifest_with_hours("cmn", 341.867, 30.0);
  const Manifest yue = manifest_with_hours("yue", 105.072, 30.0);
  const Manifest eng = manifest_with_hours("eng", 100.555, 30.0);
  ReplayStream stream({cmn, yue}, eng, 5);
  const auto ep = stream.epoch(0);
  const auto share = language_share(ep);
  const double total = 341.867 + 105.072 + 100.555;
  const double quantum = 30.0 / 3600.0 / total;
  CHECK(std::abs(share.at("cmn") - 341.867 / total) <= quantum);
  CHECK(std::abs(share.at("yue") - 105.072 / total) <= quantum);
  CHECK(std::abs(share.at("eng") - 100.555 / total) <= quantum);
  CHECK(std::abs(share.at("cmn") - 0.6245) < 1e-4);
  CHECK(std::abs(share.at("yue") - 0.1919) < 1e-4);
  CHECK(std::abs(share.at("eng") - 0.1837) < 1e-4);

  // Proportional draws keep every prefix close to the same mix.
  const std::vector<ManifestRecord> half(ep.begin(), ep.begin() + static_cast<long>(ep.size() / 2));
  const auto prefix = language_share(half);
  CHECK(std::abs(prefix.at("cmn") - 341.867 / total) < 0.01);
  CHECK(std::abs(prefix.at("eng") - 100.555 / total) < 0.01);
}

TEST_CASE("replay mix: disabled replay, empty replay and the fraction override") {
  const Manifest fresh = uniform_manifest("new", 200, 4.0);
  const Manifest old = uniform_manifest("old", 300, 4.0);
  MixOptions off;
  off.replay_enabled = false;
  auto stream = replay_mix({fresh}, old, 1, off);
  CHECK(stream.size() == 200);
  for (const auto& r : stream) CHECK(r.language == "new");
  CHECK(replay_mix({fresh}, Manifest{}, 1, off).size() == 200);
  CHECK_THROWS_AS(replay_mix({fresh}, Manifest{}, 1), ConfigError);

  MixOptions tenth;
  tenth.replay_fraction = 0.1;
  ReplayStream sub({fresh}, old, 2, tenth);
  CHECK(sub.replay_hours() / (sub.replay_hours() + sub.new_hours()) == doctest::Approx(0.1).epsilon(0.02));
  MixOptions bad;
  bad.replay_fraction = 1.0;
  CHECK_THROWS_AS(ReplayStream({fresh}, old, 2, bad), ConfigError);
}

TEST_CASE("replay mix: every admitted utterance once per epoch; deterministic per seed") {
  ReplayStream s({uniform_manifest("a", 50, 3.0), uniform_manifest("b", 30, 7.0)}, uniform_manifest("c", 20, 5.0), 9);
  std::multiset<std::string> admitted;
  for (const auto& r : s.admitted()) admitted.insert(r.id);
  CHECK(admitted.size() == 100);
  for (std::size_t e = 0; e < 4; ++e) {
    std::multiset<std::string> seen;
    for (const auto& r : s.epoch(e)) seen.insert(r.id);
    CHECK(seen == admitted);
  }
  CHECK(s.epoch(0) == s.epoch(0));
  CHECK(s.epoch(0) != s.epoch(1));
  ReplayStream same({uniform_manifest("a", 50, 3.0), uniform_manifest("b", 30, 7.0)}, uniform_manifest("c", 20, 5.0), 9);
  CHECK(same.epoch(2) == s.epoch(2));
}

TEST_CASE("manifest file: round trip, integrity and empty") {
  const auto dir = scratch_dir("manifest");
  Manifest m = uniform_manifest("aa", 5, 2.37);
  auto extra = uniform_manifest("bb", 3, 11.1);
  m.records.insert(m.records.end(), extra.records.begin(), extra.records.end());
  write_manifest(dir / "m.tsv", m);
  CHECK(read_manifest(dir / "m.tsv") == m);

  std::ifstream in(dir / "m.tsv");
  std::stringstream buf;
  buf << in.rdbuf();
  std::string text = buf.str();
  const auto pos = text.find("#total bb ");
  REQUIRE(pos != std::string::npos);
  text = text.substr(0, pos) + "#total bb 9.5\n";
  std::ofstream(dir / "bad.tsv") << text;
  CHECK_THROWS_AS(read_manifest(dir / "bad.tsv"), IntegrityError);

  write_manifest(dir / "empty.tsv", Manifest{});
  Manifest e = read_manifest(dir / "empty.tsv");
  CHECK(e.empty());
  CHECK(e.hours() == 0.0);
  CHECK(e.total_frames() == 0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("utterance payloads: round trip and loading through a manifest") {
  const auto dir = scratch_dir("payload");
  SyntheticLanguage lang;
  lang.name = "xx";
  lang.hours = 0.003;
  lang.d_feat = 5;
  auto gen = generate_language(make_language_spec(lang), 4);
  Manifest m = gen.manifest;
  for (std::size_t i = 0; i < gen.utterances.size(); ++i) {
    m.records[i].path = gen.utterances[i].id + ".bin";
    write_utterance(dir / m.records[i].path, gen.utterances[i].frames);
  }
  auto loaded = load_utterances(m, dir);
  REQUIRE(loaded.size() == gen.utterances.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].id == gen.utterances[i].id);
    CHECK(testing::max_abs_diff(loaded[i].frames.data(), gen.utterances[i].frames.data()) == 0.0);
  }
  std::ofstream(dir / "junk.bin") << "not a payload";
  CHECK_THROWS_AS(read_utterance(dir / "junk.bin"), IntegrityError);

  Manifest two;
  two.records = {m.records.back(), m.records.front()};
  auto picked = select_utterances(gen.utterances, two);
  REQUIRE(picked.size() == 2);
  CHECK(picked[0].id == m.records.back().id);
  CHECK(picked[1].id == m.records.front().id);
  std::filesystem::remove_all(dir);
}
