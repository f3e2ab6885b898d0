#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "milore/corpus.hpp"
#include "milore/encoder.hpp"
#include "milore/objective.hpp"
#include "milore/tensor.hpp"

namespace milore {

enum class ProbeTask { LanguageId, ClusterAccuracy };
std::string to_string(ProbeTask task);
ProbeTask probe_task_from_string(const std::string& name);

struct ProbeConfig {
  ProbeTask task = ProbeTask::ClusterAccuracy;
  std::size_t layer = 0;
  // When set, the encoder sees masked inputs and only masked frames are probed.
  std::optional<MaskConfig> mask;
  std::uint64_t seed = 0;
  std::size_t iterations = 200;
  double learning_rate = 0.05;
  double l2 = 1e-4;
  std::size_t max_train_frames = 6000;
};

struct ProbeResult {
  ProbeTask task = ProbeTask::ClusterAccuracy;
  std::size_t layer = 0;
  double accuracy = 0.0;
  std::map<std::string, double> per_language;
  std::map<std::string, std::size_t> frames;  // evaluated frames per language

  bool operator==(const ProbeResult&) const = default;
};

// Multinomial logistic regression on standardized features.
struct LinearProbe {
  Tensor weight;  // [K x d]
  Tensor bias;    // [K]
  std::vector<double> mean;
  std::vector<double> inv_std;

  std::vector<int> predict(const Tensor& features) const;
};

LinearProbe fit_linear_probe(const Tensor& features, const std::vector<int>& labels, std::size_t classes,
                             const ProbeConfig& config);

// Frame features of one layer, one [T x d_model] or [masked x d_model] tensor
// per utterance.
std::vector<Tensor> probe_features(const Encoder& encoder, const std::vector<Utterance>& utterances,
                                   const ProbeConfig& config, std::vector<std::vector<std::size_t>>* frames_used);

// Fits on even-indexed utterances of each language and scores on the odd
// ones. Language id fits one probe over all languages; cluster accuracy fits
// one probe per language and needs `cluster_labels` (one sequence per utterance).
ProbeResult probe_evaluate(const Encoder& encoder, const std::vector<Utterance>& heldout, const ProbeConfig& config,
                           const TargetSequence* cluster_labels = nullptr);

}  // namespace milore
