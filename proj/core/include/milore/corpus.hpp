#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "milore/rng.hpp"
#include "milore/tensor.hpp"

namespace milore {

// Hidden-Markov frame source standing in for one language. Emissions are
// Gaussian with diagonal covariance per state.
struct LanguageSpec {
  std::string name;
  std::vector<std::vector<double>> state_means;    // [states][d_feat]
  std::vector<std::vector<double>> state_stddevs;  // [states][d_feat], >= 0
  std::vector<std::vector<double>> transitions;    // row-stochastic [states][states]
  double target_hours = 0.1;
  double min_duration_s = 2.0;
  double max_duration_s = 12.0;
  double frames_per_second = 50.0;

  std::size_t states() const { return state_means.size(); }
  std::size_t feature_dim() const { return state_means.empty() ? 0 : state_means.front().size(); }
  void validate() const;
};

// Mirrored doubles the hidden states: one copy cycles forward, the other
// backward, both emitting through the same means. Each utterance keeps the
// direction it starts in.
enum class TransitionShape { Forward, Backward, Random, Mirrored };

// Parameters for building a LanguageSpec. Languages that share
// `emission_seed` (and spread/offset) share their state-mean cloud.
struct SyntheticLanguage {
  std::string name;
  std::size_t states = 8;
  std::size_t d_feat = 16;
  double hours = 0.1;
  double min_duration_s = 2.0;
  double max_duration_s = 12.0;
  double frames_per_second = 50.0;
  std::uint64_t emission_seed = 0;
  double cloud_offset = 6.0;  // distance of the cloud centre from the origin
  double spread = 2.0;        // scale of state means around the centre
  double noise = 0.5;         // emission standard deviation
  TransitionShape transition = TransitionShape::Random;
  double stickiness = 0.8;  // self-transition probability
  std::optional<double> mirror_stickiness;  // backward copy of a mirrored chain; unset = stickiness
  std::uint64_t transition_seed = 0;
};

LanguageSpec make_language_spec(const SyntheticLanguage& lang);

struct Utterance {
  std::string id;
  std::string language;
  Tensor frames;  // [T x d_feat]
  double duration_s = 0.0;
  std::vector<int> states;  // generating HMM state per frame (empty when loaded from disk)

  std::size_t length() const { return frames.dim(0); }
};

struct ManifestRecord {
  std::string id;
  std::string path;
  std::string language;
  std::size_t frames = 0;
  double duration_s = 0.0;

  bool operator==(const ManifestRecord&) const = default;
};

struct Manifest {
  std::vector<ManifestRecord> records;

  // Hours per language, summed in record order.
  std::map<std::string, double> total_hours() const;
  double hours() const;
  std::size_t total_frames() const;
  bool empty() const { return records.empty(); }

  bool operator==(const Manifest&) const = default;
};

struct GeneratedLanguage {
  std::vector<Utterance> utterances;
  Manifest manifest;
};

// Rolls the HMM until the target hours are reached. Durations are uniform on
// [min_duration_s, max_duration_s]. Throws ConfigError for a non-stochastic
// transition matrix.
GeneratedLanguage generate_language(const LanguageSpec& spec, std::uint64_t seed);

// Keeps records with min_s <= duration <= max_s.
Manifest filter_by_duration(const Manifest& manifest, double min_s = 2.0, double max_s = 30.0);

// Utterances whose ids appear in the manifest, in manifest order.
std::vector<Utterance> select_utterances(const std::vector<Utterance>& pool, const Manifest& manifest);

Manifest manifest_of(const std::vector<Utterance>& utterances);

// Tab-separated manifest: header `id path lang frames duration_s`, one record
// per line, then `#total <lang> <hours>` lines. Reading recomputes the totals
// and throws IntegrityError when they disagree with the stored ones.
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);

// Binary payload: magic "MLUT", u32 version, u64 T, u64 d_feat, row-major doubles.
void write_utterance(const std::filesystem::path& path, const Tensor& frames);
Tensor read_utterance(const std::filesystem::path& path);

// Loads every utterance of a manifest; relative paths resolve against `root`.
std::vector<Utterance> load_utterances(const Manifest& manifest, const std::filesystem::path& root);

struct MixOptions {
  bool replay_enabled = true;
  // Target share of replay hours in the stream; subsamples the replay
  // manifest (never repeats it). Unset = use the whole replay manifest.
  std::optional<double> replay_fraction;
};

// One epoch-structured stream over new-language and replay utterances. Each
// epoch contains every admitted utterance exactly once; at each position the
// source is drawn with probability proportional to its remaining hours.
class ReplayStream {
 public:
  ReplayStream(std::vector<Manifest> new_manifests, Manifest replay, std::uint64_t seed, MixOptions options = {});

  const std::vector<ManifestRecord>& admitted() const { return admitted_; }
  std::vector<ManifestRecord> epoch(std::size_t index) const;
  double replay_hours() const;
  double new_hours() const;

 private:
  std::vector<std::vector<ManifestRecord>> sources_;  // new manifests first, replay last
  std::size_t new_sources_ = 0;
  std::vector<ManifestRecord> admitted_;
  std::uint64_t seed_;
};

std::vector<ManifestRecord> replay_mix(const std::vector<Manifest>& new_manifests, const Manifest& replay,
                                       std::uint64_t seed, MixOptions options = {});

}  // namespace milore
