#include "milore/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "milore/binary_io.hpp"
#include "milore/errors.hpp"

namespace milore {

namespace {

constexpr std::uint32_t kUtteranceMagic = 0x54554c4d;  // "MLUT"
constexpr std::uint32_t kUtteranceVersion = 1;
constexpr const char* kManifestHeader = "id\tpath\tlang\tframes\tduration_s";

bool close_enough(double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(a)); }

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, sep)) out.push_back(field);
  return out;
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IntegrityError("malformed " + what + " '" + s + "'");
  }
}

}  // namespace

void LanguageSpec::validate() const {
  const std::size_t n = states();
  if (n == 0) throw ConfigError("language " + name + " has no states");
  if (!(target_hours > 0.0)) throw ConfigError("language " + name + " needs positive target hours");
  if (!(frames_per_second > 0.0)) throw ConfigError("frames per second must be positive");
  if (!(min_duration_s > 0.0) || max_duration_s < min_duration_s) {
    throw ConfigError("language " + name + " has an invalid duration range");
  }
  const std::size_t d = feature_dim();
  if (state_stddevs.size() != n || transitions.size() != n) {
    throw ConfigError("language " + name + ": per-state parameters disagree on the state count");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (state_means[i].size() != d || state_stddevs[i].size() != d) {
      throw ConfigError("language " + name + ": state " + std::to_string(i) + " has the wrong feature width");
    }
    for (double s : state_stddevs[i]) {
      if (!(s >= 0.0) || !std::isfinite(s)) throw ConfigError("language " + name + ": covariance must be positive semi-definite");
    }
    if (transitions[i].size() != n) throw ConfigError("language " + name + ": transition matrix is not square");
    double row = 0.0;
    for (double p : transitions[i]) {
      if (p < 0.0) throw ConfigError("language " + name + ": negative transition probability");
      row += p;
    }
    if (std::abs(row - 1.0) > 1e-9) {
      throw ConfigError("language " + name + ": transition row " + std::to_string(i) + " sums to " +
                        fmt::format("{}", row) + ", not 1");
    }
  }
}

LanguageSpec make_language_spec(const SyntheticLanguage& lang) {
  LanguageSpec spec;
  spec.name = lang.name;
  spec.target_hours = lang.hours;
  spec.min_duration_s = lang.min_duration_s;
  spec.max_duration_s = lang.max_duration_s;
  spec.frames_per_second = lang.frames_per_second;
  const std::size_t n = lang.states, d = lang.d_feat;

  Rng emit(derive_seed(lang.emission_seed, "emission"));
  std::vector<double> centre(d);
  double norm = 0.0;
  for (auto& c : centre) {
    c = standard_normal(emit);
    norm += c * c;
  }
  norm = std::sqrt(norm);
  for (auto& c : centre) c *= lang.cloud_offset / norm;
  const double per_dim = lang.spread / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> mu(d);
    for (std::size_t j = 0; j < d; ++j) mu[j] = centre[j] + per_dim * standard_normal(emit);
    spec.state_means.push_back(std::move(mu));
    spec.state_stddevs.emplace_back(d, lang.noise);
  }

  if (lang.transition == TransitionShape::Mirrored) {
    const double s = lang.stickiness;
    const double r = lang.mirror_stickiness.value_or(s);
    spec.transitions.assign(2 * n, std::vector<double>(2 * n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      spec.state_means.push_back(spec.state_means[i]);
      spec.state_stddevs.push_back(spec.state_stddevs[i]);
      spec.transitions[i][i] = s;
      spec.transitions[i][(i + 1) % n] += 1.0 - s;
      spec.transitions[n + i][n + i] = r;
      spec.transitions[n + i][n + (i + n - 1) % n] += 1.0 - r;
    }
    return spec;
  }
  spec.transitions.assign(n, std::vector<double>(n, 0.0));
  if (n == 1) {
    spec.transitions[0][0] = 1.0;
    return spec;
  }
  const double s = lang.stickiness;
  Rng trans(derive_seed(lang.transition_seed, "transition"));
  for (std::size_t i = 0; i < n; ++i) {
    auto& row = spec.transitions[i];
    switch (lang.transition) {
      case TransitionShape::Forward:
        row[i] = s;
        row[(i + 1) % n] += 1.0 - s;
        break;
      case TransitionShape::Backward:
        row[i] = s;
        row[(i + n - 1) % n] += 1.0 - s;
        break;
      case TransitionShape::Random: {
        std::vector<double> w(n, 0.0);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          if (j == i) continue;
          w[j] = uniform(trans, 0.05, 1.0);
          total += w[j];
        }
        for (std::size_t j = 0; j < n; ++j) row[j] = j == i ? s : (1.0 - s) * w[j] / total;
        break;
      }
      case TransitionShape::Mirrored:
        break;
    }
    // Renormalize away rounding so rows sum to one.
    const double sum_row = std::accumulate(row.begin(), row.end(), 0.0);
    for (auto& p : row) p /= sum_row;
  }
  return spec;
}

GeneratedLanguage generate_language(const LanguageSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t n = spec.states(), d = spec.feature_dim();
  const double target_frames = spec.target_hours * 3600.0 * spec.frames_per_second;
  Rng rng(seed);
  GeneratedLanguage out;
  std::size_t total = 0;
  while (static_cast<double>(total) < target_frames) {
    const double seconds = uniform(rng, spec.min_duration_s, spec.max_duration_s);
    const auto frames = static_cast<std::size_t>(std::max(1.0, std::round(seconds * spec.frames_per_second)));
    std::vector<double> data(frames * d);
    std::vector<int> states(frames);
    std::size_t state = uniform_index(rng, n);
    for (std::size_t t = 0; t < frames; ++t) {
      if (t > 0) {
        const double u = uniform(rng, 0.0, 1.0);
        double acc = 0.0;
        std::size_t next = n - 1;
        for (std::size_t j = 0; j < n; ++j) {
          acc += spec.transitions[state][j];
          if (u < acc) {
            next = j;
            break;
          }
        }
        state = next;
      }
      states[t] = static_cast<int>(state);
      for (std::size_t j = 0; j < d; ++j) {
        const double sd = spec.state_stddevs[state][j];
        data[t * d + j] = spec.state_means[state][j] + (sd > 0.0 ? sd * standard_normal(rng) : 0.0);
      }
    }
    Utterance u;
    u.id = fmt::format("{}-{:06d}", spec.name, out.utterances.size());
    u.language = spec.name;
    u.frames = Tensor::from({frames, d}, std::move(data));
    u.duration_s = static_cast<double>(frames) / spec.frames_per_second;
    u.states = std::move(states);
    out.utterances.push_back(std::move(u));
    total += frames;
  }
  out.manifest = manifest_of(out.utterances);
  return out;
}

Manifest manifest_of(const std::vector<Utterance>& utterances) {
  Manifest m;
  for (const auto& u : utterances) {
    m.records.push_back({u.id, u.language + "/" + u.id + ".utt", u.language, u.length(), u.duration_s});
  }
  return m;
}

std::map<std::string, double> Manifest::total_hours() const {
  std::map<std::string, double> totals;
  for (const auto& r : records) totals[r.language] += r.duration_s / 3600.0;
  return totals;
}

double Manifest::hours() const {
  double h = 0.0;
  for (const auto& r : records) h += r.duration_s / 3600.0;
  return h;
}

std::size_t Manifest::total_frames() const {
  std::size_t n = 0;
  for (const auto& r : records) n += r.frames;
  return n;
}

Manifest filter_by_duration(const Manifest& manifest, double min_s, double max_s) {
  Manifest out;
  std::copy_if(manifest.records.begin(), manifest.records.end(), std::back_inserter(out.records),
               [&](const ManifestRecord& r) { return r.duration_s >= min_s && r.duration_s <= max_s; });
  return out;
}

std::vector<Utterance> select_utterances(const std::vector<Utterance>& pool, const Manifest& manifest) {
  std::map<std::string, const Utterance*> by_id;
  for (const auto& u : pool) by_id[u.id] = &u;
  std::vector<Utterance> out;
  out.reserve(manifest.records.size());
  for (const auto& r : manifest.records) {
    auto it = by_id.find(r.id);
    if (it == by_id.end()) throw IntegrityError("manifest references unknown utterance " + r.id);
    out.push_back(*it->second);
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  auto out = io::open_for_write(path);
  out << kManifestHeader << '\n';
  for (const auto& r : manifest.records) {
    out << fmt::format("{}\t{}\t{}\t{}\t{}\n", r.id, r.path, r.language, r.frames, r.duration_s);
  }
  for (const auto& [lang, hours] : manifest.total_hours()) out << fmt::format("#total {} {}\n", lang, hours);
  if (!out) throw IoError("failed writing " + path.string());
}

Manifest read_manifest(const std::filesystem::path& path) {
  auto in = io::open_for_read(path);
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) {
    throw IntegrityError(path.string() + ": missing manifest header");
  }
  Manifest m;
  std::map<std::string, double> stored;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line.rfind("#total", 0) == 0) {
      std::istringstream ss(line.substr(6));
      std::string lang, hours;
      if (!(ss >> lang >> hours)) throw IntegrityError(fmt::format("{}:{}: malformed total line", path.string(), lineno));
      stored[lang] = parse_double(hours, "total");
      continue;
    }
    if (line.front() == '#') continue;
    auto f = split(line, '\t');
    if (f.size() != 5) throw IntegrityError(fmt::format("{}:{}: expected 5 fields, got {}", path.string(), lineno, f.size()));
    ManifestRecord r{f[0], f[1], f[2], 0, parse_double(f[4], "duration")};
    try {
      r.frames = std::stoull(f[3]);
    } catch (const std::exception&) {
      throw IntegrityError(fmt::format("{}:{}: malformed frame count", path.string(), lineno));
    }
    m.records.push_back(std::move(r));
  }
  const auto computed = m.total_hours();
  for (const auto& [lang, hours] : computed) {
    auto it = stored.find(lang);
    if (it == stored.end()) throw IntegrityError(path.string() + ": no stored total for language " + lang);
    if (!close_enough(it->second, hours)) {
      throw IntegrityError(fmt::format("{}: stored total {} h for {} does not match records ({} h)", path.string(),
                                       it->second, lang, hours));
    }
  }
  for (const auto& [lang, hours] : stored) {
    if (!computed.contains(lang) && hours != 0.0) {
      throw IntegrityError(path.string() + ": stored total for " + lang + " has no records");
    }
  }
  return m;
}

void write_utterance(const std::filesystem::path& path, const Tensor& frames) {
  if (frames.rank() != 2) throw ShapeError("utterance payload must be [T x d_feat]");
  auto out = io::open_for_write(path);
  io::write_pod(out, kUtteranceMagic);
  io::write_pod(out, kUtteranceVersion);
  io::write_pod<std::uint64_t>(out, frames.dim(0));
  io::write_pod<std::uint64_t>(out, frames.dim(1));
  io::write_doubles(out, frames.data().data(), frames.numel());
  if (!out) throw IoError("failed writing " + path.string());
}

Tensor read_utterance(const std::filesystem::path& path) {
  auto in = io::open_for_read(path);
  if (io::read_pod<std::uint32_t>(in) != kUtteranceMagic) throw IntegrityError(path.string() + ": bad utterance magic");
  if (io::read_pod<std::uint32_t>(in) != kUtteranceVersion) throw IntegrityError(path.string() + ": unsupported version");
  const auto t = io::read_pod<std::uint64_t>(in);
  const auto d = io::read_pod<std::uint64_t>(in);
  if (t == 0 || d == 0) throw IntegrityError(path.string() + ": empty utterance");
  return Tensor::from({t, d}, io::read_doubles(in, t * d));
}

std::vector<Utterance> load_utterances(const Manifest& manifest, const std::filesystem::path& root) {
  std::vector<Utterance> out;
  out.reserve(manifest.records.size());
  for (const auto& r : manifest.records) {
    std::filesystem::path p(r.path);
    if (p.is_relative()) p = root / p;
    Utterance u{r.id, r.language, read_utterance(p), r.duration_s, {}};
    if (u.length() != r.frames) throw IntegrityError("utterance " + r.id + " frame count differs from its manifest");
    out.push_back(std::move(u));
  }
  return out;
}

ReplayStream::ReplayStream(std::vector<Manifest> new_manifests, Manifest replay, std::uint64_t seed, MixOptions options)
    : seed_(seed) {
  for (auto& m : new_manifests) sources_.push_back(std::move(m.records));
  new_sources_ = sources_.size();
  if (options.replay_enabled) {
    if (replay.empty()) throw ConfigError("replay is enabled but the replay manifest is empty");
    auto records = std::move(replay.records);
    if (options.replay_fraction) {
      const double f = *options.replay_fraction;
      if (!(f > 0.0 && f < 1.0)) throw ConfigError("replay fraction must lie in (0, 1)");
      const double target = f / (1.0 - f) * new_hours();
      Rng rng(derive_seed(seed, "replay-subsample"));
      std::shuffle(records.begin(), records.end(), rng);
      std::vector<ManifestRecord> kept;
      double hours = 0.0;
      for (auto& r : records) {
        const double h = r.duration_s / 3600.0;
        if (hours + 0.5 * h > target) continue;
        hours += h;
        kept.push_back(std::move(r));
      }
      if (kept.size() == records.size()) spdlog::warn("replay manifest too small for fraction {}; using all of it", f);
      std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
      records = std::move(kept);
    }
    sources_.push_back(std::move(records));
  }
  for (const auto& s : sources_) admitted_.insert(admitted_.end(), s.begin(), s.end());
}

double ReplayStream::new_hours() const {
  double h = 0.0;
  for (std::size_t i = 0; i < new_sources_; ++i) {
    for (const auto& r : sources_[i]) h += r.duration_s / 3600.0;
  }
  return h;
}

double ReplayStream::replay_hours() const {
  double total = 0.0;
  for (const auto& r : admitted_) total += r.duration_s / 3600.0;
  return total - new_hours();
}

std::vector<ManifestRecord> ReplayStream::epoch(std::size_t index) const {
  Rng rng(derive_seed(seed_, index));
  std::vector<std::vector<ManifestRecord>> pools = sources_;
  std::vector<double> remaining(pools.size(), 0.0);
  for (std::size_t s = 0; s < pools.size(); ++s) {
    std::shuffle(pools[s].begin(), pools[s].end(), rng);
    for (const auto& r : pools[s]) remaining[s] += r.duration_s;
  }
  std::vector<std::size_t> next(pools.size(), 0);
  std::vector<ManifestRecord> out;
  out.reserve(admitted_.size());
  while (out.size() < admitted_.size()) {
    double total = 0.0;
    for (std::size_t s = 0; s < pools.size(); ++s) {
      if (next[s] < pools[s].size()) total += remaining[s];
    }
    const double u = uniform(rng, 0.0, total);
    double acc = 0.0;
    std::size_t pick = pools.size();
    for (std::size_t s = 0; s < pools.size(); ++s) {
      if (next[s] >= pools[s].size()) continue;
      pick = s;
      acc += remaining[s];
      if (u < acc) break;
    }
    const auto& r = pools[pick][next[pick]++];
    remaining[pick] -= r.duration_s;
    out.push_back(r);
  }
  return out;
}

std::vector<ManifestRecord> replay_mix(const std::vector<Manifest>& new_manifests, const Manifest& replay,
                                       std::uint64_t seed, MixOptions options) {
  return ReplayStream(new_manifests, replay, seed, options).epoch(0);
}

}  // namespace milore
