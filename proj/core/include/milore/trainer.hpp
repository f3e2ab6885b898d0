#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "milore/corpus.hpp"
#include "milore/encoder.hpp"
#include "milore/objective.hpp"
#include "milore/rng.hpp"
#include "milore/tensor.hpp"

namespace milore {

struct ScheduleConfig {
  std::size_t total_steps = 2000;
  std::size_t warmup_steps = 200;
  double peak_lr = 1.5e-3;

  void validate() const;
};

// Linear warmup 0 -> peak over warmup_steps, then linear decay to 0 at
// total_steps. Steps past the end return 0 with a warning.
double lr_at(std::size_t step, const ScheduleConfig& schedule);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double clip_norm = 1.0;  // global gradient norm; <= 0 disables clipping
};

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

// Adam with bias correction. Moments are created lazily, keyed by parameter
// name, and only for tensors that require grad.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // Applies one update with rate `lr`. Returns the global grad norm before clipping.
  double step(const std::vector<NamedTensor>& parameters, double lr);

  const AdamConfig& config() const { return config_; }
  const std::map<std::string, AdamMoments>& moments() const { return moments_; }
  std::size_t steps() const { return steps_; }

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  AdamConfig config_;
  std::map<std::string, AdamMoments> moments_;
  std::size_t steps_ = 0;
};

struct TrainConfig {
  std::size_t batch_size = 8;
  std::size_t crop_frames = 64;  // random crop applied to longer utterances
  std::uint64_t seed = 0;
};

enum class TrainMode { Base, MiLore, FullFinetune };
std::string to_string(TrainMode mode);
TrainMode train_mode_from_string(const std::string& name);

// Utterances with frame targets. `replay` marks utterances drawn from the
// previously learned distribution; their masked frames form the replay part
// of the joint loss.
struct TrainingData {
  std::vector<Utterance> utterances;
  TargetSequence targets;
  std::vector<char> replay;
  // Visiting order for an epoch; defaults to a seeded shuffle.
  std::function<std::vector<std::size_t>(std::size_t epoch)> epoch_order;

  void validate(std::size_t classes) const;
};

TrainingData make_training_data(std::vector<Utterance> utterances, TargetSequence targets, std::uint64_t seed);

// Orders the mixed new+replay corpus by a ReplayStream. Utterances whose ids
// are not admitted by the stream are dropped.
TrainingData make_continual_data(std::vector<Utterance> new_utterances, TargetSequence new_targets,
                                 std::vector<Utterance> replay_utterances, TargetSequence replay_targets,
                                 std::uint64_t seed, MixOptions options = {});

struct TrainState {
  Encoder encoder;
  PredictionHead head;
  Adam optimizer;
  ScheduleConfig schedule;
  TrainConfig config;
  TrainMode mode = TrainMode::Base;
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t cursor = 0;
  Rng rng;
  std::vector<double> loss_curve;

  std::vector<NamedTensor> named_parameters() const;
  std::vector<NamedTensor> trainable_parameters() const;
};

// Fresh base-stage state: every parameter trainable.
TrainState init_base_state(const EncoderConfig& encoder, const TrainConfig& config, const ScheduleConfig& schedule,
                           AdamConfig adam = {});

// Continual-stage state built from a base checkpoint. MiLore mode attaches
// zero-delta MiLorE modules and freezes the backbone; FullFinetune keeps the
// dense model and trains everything. The head and optimizer start fresh.
TrainState init_continual_state(const TrainState& base, TrainMode mode, const MiLoreConfig& milore,
                                std::size_t classes, const TrainConfig& config, const ScheduleConfig& schedule,
                                AdamConfig adam = {});

// One optimizer step on the next minibatch. Throws DivergenceError before
// touching any parameter when the loss is not finite.
double train_step(TrainState& state, const TrainingData& data);

// Runs `steps` more steps.
void train(TrainState& state, const TrainingData& data, std::size_t steps);
// Runs until the schedule's last step.
void train_all(TrainState& state, const TrainingData& data);

// Loss on a fixed batch, without updating anything.
double evaluate_loss(const TrainState& state, const std::vector<Utterance>& utterances, const TargetSequence& targets,
                     std::uint64_t mask_seed);

// Checkpoint directory: config.json, params.bin, optimizer.bin, state.json and
// hashes.json (SHA-256 of each file and of every tensor).
void save_checkpoint(const std::filesystem::path& dir, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& dir);

// Tensor archive: magic "MLTA", u32 version, u64 count, then per tensor
// name, rank, extents, requires_grad flag and row-major doubles.
void write_tensor_archive(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensor_archive(const std::filesystem::path& path);

std::string checkpoint_hash(const std::filesystem::path& dir);

}  // namespace milore
