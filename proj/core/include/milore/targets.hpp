#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "milore/corpus.hpp"
#include "milore/encoder.hpp"
#include "milore/objective.hpp"
#include "milore/tensor.hpp"

namespace milore {

struct Codebook {
  Tensor centroids;                         // [K x d]
  std::optional<std::size_t> source_layer;  // unset = raw input features
  std::uint64_t seed = 0;                   // seed of the selected fit
  double inertia = 0.0;                     // held-out inertia of the selected fit
  std::vector<std::uint64_t> seeds;
  std::vector<double> seed_inertias;

  std::size_t clusters() const { return centroids.dim(0); }
  std::size_t dim() const { return centroids.dim(1); }
};

struct KMeansConfig {
  std::size_t clusters = 100;
  std::size_t batch_size = 10000;  // frames per minibatch
  std::vector<std::uint64_t> seeds = default_seeds(20);
  std::size_t max_iterations = 100;  // minibatches per seed
  double validation_fraction = 0.1;
  double budget_hours = 50.0;  // per language
  double frames_per_second = 50.0;
  bool track_training_inertia = false;  // record full training-set inertia after every minibatch

  std::size_t budget_frames() const;
  void validate() const;
  static std::vector<std::uint64_t> default_seeds(std::size_t n);
};

// Sum over points of the squared distance to the nearest centroid.
double inertia(const Tensor& points, const Tensor& centroids);

// k-means++ seeding: first centroid uniform, then each next one drawn with
// probability proportional to the squared distance to the nearest chosen one.
Tensor kmeanspp_init(const Tensor& points, std::size_t clusters, std::uint64_t seed);

struct KMeansFitReport {
  std::vector<double> validation_inertias;             // one per seed
  std::vector<std::vector<double>> training_inertias;  // per seed, after each minibatch
  std::size_t reseeded_clusters = 0;
};

// Minibatch k-means (per-centroid learning rate 1/n_c) run once per seed; the
// fit with the lowest inertia on a held-out validation slice is returned.
Codebook minibatch_kmeans_fit(const Tensor& frames, const KMeansConfig& config, KMeansFitReport* report = nullptr);

// Nearest centroid under squared Euclidean distance; ties go to the lowest index.
std::vector<int> assign_labels(const Codebook& codebook, const Tensor& frames);

// Hidden states of one layer for each utterance, [T x d_model] each. Long
// utterances are processed in windows of the positional-table length.
std::vector<Tensor> layer_features(const Encoder& encoder, std::size_t layer, const std::vector<Tensor>& utterances);

// Labels every frame of every utterance with the codebook, reading features
// from the codebook's source layer (or the raw frames).
TargetSequence label_utterances(const Codebook& codebook, const Encoder* encoder, const std::vector<Utterance>& utterances);

struct ReferenceFrames {
  Tensor frames;  // [M x d]
  std::map<std::string, std::size_t> per_language;
  bool budget_exceeds_corpus = false;
};

// Frozen-encoder features at `layer` for a seeded random sample of each
// language, capped at `budget_frames` per language.
ReferenceFrames extract_reference_features(const Encoder& encoder, std::size_t layer,
                                           const std::vector<Utterance>& utterances, std::size_t budget_frames,
                                           std::uint64_t seed);

// Binary: magic "MLCB", u32 version, u64 K, u64 d, u64 layer (all ones = raw
// features), u64 seed, then K*d row-major doubles. A JSON sidecar
// `<path>.json` carries the fit metadata.
void save_codebook(const std::filesystem::path& path, const Codebook& codebook);
Codebook load_codebook(const std::filesystem::path& path);

}  // namespace milore
