#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "milore/analysis.hpp"
#include "milore/corpus.hpp"
#include "milore/probe.hpp"
#include "milore/run_config.hpp"
#include "milore/targets.hpp"
#include "milore/trainer.hpp"

namespace milore {

struct LanguageSplit {
  std::string name;
  std::vector<Utterance> train;
  std::vector<Utterance> heldout;
};

struct CorpusData {
  std::vector<LanguageSplit> languages;

  const LanguageSplit& language(const std::string& name) const;
  std::vector<Utterance> train_of(const std::vector<std::string>& names) const;
  std::vector<Utterance> heldout_of(const std::vector<std::string>& names) const;
  std::vector<std::string> names() const;
};

// In-memory stages. Each draws its randomness from the run seed through a
// named stream, so a stage's output depends only on the config and its inputs.
CorpusData generate_corpus(const RunConfig& cfg);
// k-means on raw frames of the base language.
Codebook fit_base_codebook(const RunConfig& cfg, const CorpusData& data);
TrainState run_pretrain(const RunConfig& cfg, const CorpusData& data, const Codebook& codebook);
// k-means on the frozen base encoder's reference-layer features over the new
// languages plus the base language.
Codebook fit_continual_codebook(const RunConfig& cfg, const Encoder& base, const CorpusData& data);
TrainState run_continual(const RunConfig& cfg, const TrainState& base, const CorpusData& data, const Codebook& codebook);
// Cluster-accuracy (labels from the base codebook) and language-id probes on held-out data.
std::vector<ProbeResult> run_probes(const RunConfig& cfg, const Encoder& encoder, const CorpusData& data,
                                    const Codebook& base_codebook);
ActivationProfile run_activation(const Encoder& encoder, const CorpusData& data);
// One continual run and probe per (rank, experts) grid point.
std::vector<AblationRow> run_sweep(const RunConfig& cfg, const TrainState& base, const CorpusData& data,
                                   const Codebook& base_codebook, const Codebook& continual_codebook);

// On-disk layout under cfg.output.
struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path train_manifest() const { return data() / "train.tsv"; }
  std::filesystem::path heldout_manifest() const { return data() / "heldout.tsv"; }
  std::filesystem::path base_codebook() const { return root / "kmeans" / "base.codebook"; }
  std::filesystem::path pretrain() const { return root / "pretrain"; }
  std::filesystem::path continual() const { return root / "continual"; }
  std::filesystem::path continual_codebook() const { return continual() / "continual.codebook"; }
  std::filesystem::path continual_checkpoint() const { return continual() / "checkpoint"; }
  std::filesystem::path probe() const { return root / "probe"; }
  std::filesystem::path activation() const { return root / "activation"; }
  std::filesystem::path params() const { return root / "params"; }
  std::filesystem::path sweep() const { return root / "sweep"; }
};

// Disk-backed subcommands. Each reads its inputs from earlier stages and
// writes its artifacts under RunPaths; they return the written paths.
std::vector<std::filesystem::path> stage_gen_data(const RunConfig& cfg);
std::vector<std::filesystem::path> stage_kmeans(const RunConfig& cfg);
std::vector<std::filesystem::path> stage_pretrain(const RunConfig& cfg);
std::vector<std::filesystem::path> stage_continual(const RunConfig& cfg);
std::vector<std::filesystem::path> stage_probe(const RunConfig& cfg);
std::vector<std::filesystem::path> stage_activation(const RunConfig& cfg);
std::vector<std::filesystem::path> stage_sweep(const RunConfig& cfg);
// Shape-only count for the configured encoder in the continual mode; needs no
// earlier stage.
ParamReport config_parameter_report(const RunConfig& cfg);
std::vector<std::filesystem::path> stage_count_params(const RunConfig& cfg);

CorpusData load_corpus(const RunPaths& paths);

// Artifacts a subcommand would write, for --dry-run.
std::vector<std::filesystem::path> planned_artifacts(const RunConfig& cfg, const std::string& subcommand);

}  // namespace milore
