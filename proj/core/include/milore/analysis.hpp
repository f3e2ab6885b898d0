#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "milore/corpus.hpp"
#include "milore/encoder.hpp"
#include "milore/probe.hpp"
#include "milore/trainer.hpp"

namespace milore {

struct ParamRow {
  std::string name;
  Shape shape;
  std::size_t count = 0;
  bool trainable = false;

  bool operator==(const ParamRow&) const = default;
};

struct ParamReport {
  std::vector<ParamRow> rows;
  std::size_t total = 0;
  std::size_t trainable = 0;

  double fraction() const;
  // Throws IntegrityError when the totals disagree with the rows.
  void audit() const;

  bool operator==(const ParamReport&) const = default;
};

// Shape-only enumeration of every tensor a state with this configuration
// holds, in checkpoint order, with the prediction head last. Nothing is allocated.
ParamReport parameter_layout(const EncoderConfig& config, std::size_t head_classes, TrainMode mode);

ParamReport count_parameters(const TrainState& state);
// Loads and verifies a checkpoint directory first.
ParamReport count_parameters(const std::filesystem::path& checkpoint_dir);

enum class RouterSite { Up, Down };

struct ActivationCell {
  std::vector<double> mean_weight;  // per expert
  std::size_t frames = 0;

  bool operator==(const ActivationCell&) const = default;
};

// cells[layer][language index]; languages sorted by name.
struct ActivationProfile {
  std::size_t layers = 0;
  std::size_t experts = 0;
  std::vector<std::string> languages;
  std::vector<std::vector<ActivationCell>> cells;

  double mean(std::size_t layer, const std::string& language, std::size_t expert) const;

  bool operator==(const ActivationProfile&) const = default;
};

// Frame-weighted mean routing weight per layer, language and expert over
// non-padding frames. Utterances are visited in id order, so the result does
// not depend on their order in the input.
ActivationProfile expert_activation_profile(const Encoder& encoder, const std::vector<Utterance>& utterances,
                                            RouterSite site = RouterSite::Up);

struct AblationRow {
  std::size_t rank = 0;
  std::size_t experts = 0;
  std::size_t trainable = 0;
  std::size_t total = 0;
  std::map<std::string, double> metrics;

  bool operator==(const AblationRow&) const = default;
};

struct Report {
  std::optional<ParamReport> params;
  std::optional<ActivationProfile> activation;
  std::vector<ProbeResult> probes;
  std::vector<AblationRow> ablation;

  bool operator==(const Report&) const = default;
};

enum class ReportFormat { Csv, Json, Both };

// Writes params/activation/probes/ablation tables into `dir`. Missing
// sections produce header-only CSVs and empty JSON arrays. Returns the
// written paths.
std::vector<std::filesystem::path> emit_report(const Report& report, const std::filesystem::path& dir,
                                               ReportFormat format = ReportFormat::Both);
// Reads back report.json written by emit_report.
Report read_report_json(const std::filesystem::path& dir);

std::string format_shape(const Shape& shape);

}  // namespace milore
