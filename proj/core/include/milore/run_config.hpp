#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "milore/corpus.hpp"
#include "milore/encoder.hpp"
#include "milore/probe.hpp"
#include "milore/targets.hpp"
#include "milore/trainer.hpp"

namespace milore {

struct LanguageConfig {
  SyntheticLanguage spec;
  double heldout_hours = 0.02;
};

struct CorpusConfig {
  std::vector<LanguageConfig> languages;
  std::string base_language;
  std::vector<std::string> new_languages;
  double min_duration_s = 2.0;
  double max_duration_s = 30.0;

  const LanguageConfig& language(const std::string& name) const;
};

struct StageConfig {
  ScheduleConfig schedule;
  TrainConfig train;
};

struct ContinualConfig {
  StageConfig stage;
  TrainMode mode = TrainMode::MiLore;
  bool replay = true;
  std::optional<double> replay_fraction;
  std::size_t reference_layer = 1;  // encoder layer whose features define the continual codebook
  std::size_t clusters = 0;         // continual codebook size; 0 = kmeans.clusters
  std::optional<std::filesystem::path> base_checkpoint;
};

struct ProbeSettings {
  std::optional<std::size_t> layer;  // unset = last encoder layer
  bool masked = true;
  std::size_t iterations = 200;
  double learning_rate = 0.05;
  std::size_t max_train_frames = 6000;
};

struct SweepConfig {
  std::vector<std::pair<std::size_t, std::size_t>> grid;  // (rank, experts)
};

struct RunConfig {
  std::string name = "run";
  std::uint64_t seed = 0;
  std::filesystem::path output = "runs/default";
  CorpusConfig corpus;
  EncoderConfig encoder;
  KMeansConfig kmeans;
  StageConfig pretrain;
  ContinualConfig continual;
  MiLoreConfig milore;
  ProbeSettings probe;
  SweepConfig sweep;
  std::size_t head_classes = 0;  // prediction head size used by count-params; 0 = kmeans clusters

  // Cross-section checks; throws ConfigError.
  void validate() const;
};

// Sectioned text format, one `key: type = value` entry per line:
//
//   [encoder]
//   layers: int = 4
//
// Types are int, float, bool, string, path and strings (comma separated).
// Unknown sections or keys and type mismatches throw ConfigError with the
// offending line number. When MILORE_OUTPUT_ROOT is set, a relative
// run.output resolves against it and an absolute one keeps only its last
// component.
RunConfig parse_run_config(const std::string& text, const std::string& origin = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace milore
