#include "milore/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "milore/binary_io.hpp"
#include "milore/errors.hpp"
#include "milore/hash.hpp"
#include "milore/ops.hpp"

namespace milore {

using nlohmann::json;

namespace {

constexpr std::uint32_t kArchiveMagic = 0x41544c4d;    // "MLTA"
constexpr std::uint32_t kOptimizerMagic = 0x504f4c4d;  // "MLOP"
constexpr std::uint32_t kFormatVersion = 1;
constexpr const char* kHeadName = "head.projection";

json encoder_to_json(const EncoderConfig& c) {
  json j{{"layers", c.layers},         {"d_feat", c.d_feat},
         {"d_model", c.d_model},       {"heads", c.heads},
         {"d_ffn", c.d_ffn},           {"codebook_size", c.codebook_size},
         {"max_frames", c.max_frames}, {"mask", {{"span", c.mask.span}, {"start_prob", c.mask.start_prob}}}};
  if (c.milore) {
    j["milore"] = {{"experts", c.milore->experts}, {"rank", c.milore->rank}, {"scale", c.milore->scale}};
  } else {
    j["milore"] = nullptr;
  }
  return j;
}

EncoderConfig encoder_from_json(const json& j) {
  EncoderConfig c;
  c.layers = j.at("layers");
  c.d_feat = j.at("d_feat");
  c.d_model = j.at("d_model");
  c.heads = j.at("heads");
  c.d_ffn = j.at("d_ffn");
  c.codebook_size = j.at("codebook_size");
  c.max_frames = j.at("max_frames");
  c.mask.span = j.at("mask").at("span");
  c.mask.start_prob = j.at("mask").at("start_prob");
  if (!j.at("milore").is_null()) {
    const auto& m = j.at("milore");
    c.milore = MiLoreConfig{m.at("experts"), m.at("rank"), m.at("scale")};
  }
  return c;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  auto out = io::open_for_write(path);
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<NamedTensor> with_head(std::vector<NamedTensor> params, const PredictionHead& head) {
  params.push_back({kHeadName, head.projection});
  return params;
}

struct Minibatch {
  std::vector<Tensor> frames;
  TargetSequence targets;
  std::vector<char> replay;
};

Minibatch next_minibatch(TrainState& s, const TrainingData& data) {
  Minibatch mb;
  const std::size_t crop = std::min(s.config.crop_frames, s.encoder.config().max_frames);
  auto order = data.epoch_order(s.epoch);
  if (order.empty()) throw ConfigError("training data is empty");
  while (mb.frames.size() < s.config.batch_size) {
    if (s.cursor >= order.size()) {
      ++s.epoch;
      s.cursor = 0;
      order = data.epoch_order(s.epoch);
    }
    const std::size_t i = order[s.cursor++];
    const auto& u = data.utterances[i];
    const std::size_t len = u.length();
    const std::size_t n = std::min(len, crop);
    const std::size_t start = len > n ? uniform_index(s.rng, len - n + 1) : 0;
    const std::size_t d = u.frames.dim(1);
    std::vector<double> w(u.frames.data().begin() + static_cast<long>(start * d),
                          u.frames.data().begin() + static_cast<long>((start + n) * d));
    mb.frames.push_back(Tensor::from({n, d}, std::move(w)));
    mb.targets.emplace_back(data.targets[i].begin() + static_cast<long>(start),
                            data.targets[i].begin() + static_cast<long>(start + n));
    mb.replay.push_back(data.replay.empty() ? 0 : data.replay[i]);
  }
  return mb;
}

}  // namespace

void ScheduleConfig::validate() const {
  if (warmup_steps > total_steps) {
    throw ConfigError("warmup steps (" + std::to_string(warmup_steps) + ") exceed total steps (" +
                      std::to_string(total_steps) + ")");
  }
  if (!(peak_lr > 0.0)) throw ConfigError("peak learning rate must be positive");
}

double lr_at(std::size_t step, const ScheduleConfig& s) {
  if (step > s.total_steps) {
    spdlog::warn("step {} is past the schedule end ({}); learning rate is 0", step, s.total_steps);
    return 0.0;
  }
  if (step < s.warmup_steps) return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (s.total_steps == s.warmup_steps) return s.peak_lr;
  return s.peak_lr * static_cast<double>(s.total_steps - step) / static_cast<double>(s.total_steps - s.warmup_steps);
}

double Adam::step(const std::vector<NamedTensor>& parameters, double lr) {
  double sq = 0.0;
  for (const auto& p : parameters) {
    if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double clip = (config_.clip_norm > 0.0 && norm > config_.clip_norm) ? config_.clip_norm / norm : 1.0;
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (const auto& p : parameters) {
    if (!p.tensor.requires_grad()) continue;
    auto& mom = moments_[p.name];
    const std::size_t n = p.tensor.numel();
    if (mom.m.empty()) {
      mom.m.assign(n, 0.0);
      mom.v.assign(n, 0.0);
    } else if (mom.m.size() != n) {
      throw ShapeError("optimizer moments for " + p.name + " do not match the parameter size");
    }
    if (!p.tensor.has_grad()) continue;
    const auto g = p.tensor.grad();
    Tensor param = p.tensor;
    auto w = param.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g[i] * clip;
      mom.m[i] = config_.beta1 * mom.m[i] + (1.0 - config_.beta1) * gi;
      mom.v[i] = config_.beta2 * mom.v[i] + (1.0 - config_.beta2) * gi * gi;
      w[i] -= lr * (mom.m[i] / c1) / (std::sqrt(mom.v[i] / c2) + config_.eps);
    }
  }
  return norm;
}

void Adam::save(const std::filesystem::path& path) const {
  auto out = io::open_for_write(path);
  io::write_pod(out, kOptimizerMagic);
  io::write_pod(out, kFormatVersion);
  io::write_pod<std::uint64_t>(out, steps_);
  io::write_pod<std::uint64_t>(out, moments_.size());
  for (const auto& [name, mom] : moments_) {
    io::write_string(out, name);
    io::write_pod<std::uint64_t>(out, mom.m.size());
    io::write_doubles(out, mom.m.data(), mom.m.size());
    io::write_doubles(out, mom.v.data(), mom.v.size());
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void Adam::load(const std::filesystem::path& path) {
  auto in = io::open_for_read(path);
  if (io::read_pod<std::uint32_t>(in) != kOptimizerMagic) throw IntegrityError(path.string() + ": bad optimizer magic");
  if (io::read_pod<std::uint32_t>(in) != kFormatVersion) throw IntegrityError(path.string() + ": unsupported version");
  steps_ = io::read_pod<std::uint64_t>(in);
  const auto count = io::read_pod<std::uint64_t>(in);
  moments_.clear();
  for (std::uint64_t i = 0; i < count; ++i) {
    auto name = io::read_string(in);
    const auto n = io::read_pod<std::uint64_t>(in);
    if (n > (std::uint64_t{1} << 34)) throw IntegrityError(path.string() + ": implausible moment size");
    AdamMoments mom;
    mom.m = io::read_doubles(in, n);
    mom.v = io::read_doubles(in, n);
    moments_.emplace(std::move(name), std::move(mom));
  }
}

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::Base:
      return "base";
    case TrainMode::MiLore:
      return "milore";
    case TrainMode::FullFinetune:
      return "full-finetune";
  }
  return "base";
}

TrainMode train_mode_from_string(const std::string& name) {
  if (name == "base") return TrainMode::Base;
  if (name == "milore") return TrainMode::MiLore;
  if (name == "full-finetune") return TrainMode::FullFinetune;
  throw ConfigError("unknown training mode '" + name + "' (expected base, milore or full-finetune)");
}

void TrainingData::validate(std::size_t classes) const {
  if (utterances.empty()) throw ConfigError("training data is empty");
  if (targets.size() != utterances.size()) throw ShapeError("one target sequence per utterance is required");
  if (!replay.empty() && replay.size() != utterances.size()) throw ShapeError("replay flags do not match utterances");
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    if (targets[i].size() != utterances[i].length()) {
      throw ShapeError("utterance " + utterances[i].id + " has " + std::to_string(utterances[i].length()) +
                       " frames but " + std::to_string(targets[i].size()) + " targets");
    }
    for (int z : targets[i]) {
      if (z < 0 || static_cast<std::size_t>(z) >= classes) {
        throw IndexError("target " + std::to_string(z) + " outside [0, " + std::to_string(classes) + ")");
      }
    }
  }
  if (!epoch_order) throw ConfigError("training data has no epoch order");
}

TrainingData make_training_data(std::vector<Utterance> utterances, TargetSequence targets, std::uint64_t seed) {
  TrainingData data;
  const std::size_t n = utterances.size();
  data.utterances = std::move(utterances);
  data.targets = std::move(targets);
  data.replay.assign(n, 0);
  const std::uint64_t order_seed = derive_seed(seed, "order");
  data.epoch_order = [n, order_seed](std::size_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(order_seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  };
  return data;
}

TrainingData make_continual_data(std::vector<Utterance> new_utterances, TargetSequence new_targets,
                                 std::vector<Utterance> replay_utterances, TargetSequence replay_targets,
                                 std::uint64_t seed, MixOptions options) {
  if (new_targets.size() != new_utterances.size() || replay_targets.size() != replay_utterances.size()) {
    throw ShapeError("one target sequence per utterance is required");
  }
  std::map<std::string, Manifest> by_language;
  for (const auto& u : new_utterances) {
    by_language[u.language].records.push_back({u.id, "", u.language, u.length(), u.duration_s});
  }
  std::vector<Manifest> new_manifests;
  for (auto& [lang, m] : by_language) new_manifests.push_back(std::move(m));
  Manifest replay = manifest_of(replay_utterances);
  if (!options.replay_enabled) replay = {};
  auto stream = std::make_shared<ReplayStream>(std::move(new_manifests), std::move(replay), derive_seed(seed, "mix"),
                                               options);

  std::unordered_map<std::string, std::pair<bool, std::size_t>> source;
  for (std::size_t i = 0; i < new_utterances.size(); ++i) source[new_utterances[i].id] = {false, i};
  for (std::size_t i = 0; i < replay_utterances.size(); ++i) {
    if (!source.emplace(replay_utterances[i].id, std::pair{true, i}).second) {
      throw ConfigError("utterance id " + replay_utterances[i].id + " appears in both new and replay data");
    }
  }
  TrainingData data;
  auto index = std::make_shared<std::unordered_map<std::string, std::size_t>>();
  for (const auto& r : stream->admitted()) {
    const auto [is_replay, i] = source.at(r.id);
    (*index)[r.id] = data.utterances.size();
    data.utterances.push_back(is_replay ? replay_utterances[i] : new_utterances[i]);
    data.targets.push_back(is_replay ? replay_targets[i] : new_targets[i]);
    data.replay.push_back(is_replay ? 1 : 0);
  }
  data.epoch_order = [stream, index](std::size_t epoch) {
    std::vector<std::size_t> order;
    for (const auto& r : stream->epoch(epoch)) order.push_back(index->at(r.id));
    return order;
  };
  return data;
}

std::vector<NamedTensor> TrainState::named_parameters() const { return with_head(encoder.named_parameters(), head); }

std::vector<NamedTensor> TrainState::trainable_parameters() const {
  std::vector<NamedTensor> out;
  for (auto& p : named_parameters()) {
    if (p.tensor.requires_grad()) out.push_back(std::move(p));
  }
  return out;
}

TrainState init_base_state(const EncoderConfig& encoder, const TrainConfig& config, const ScheduleConfig& schedule,
                           AdamConfig adam) {
  encoder.validate();
  schedule.validate();
  if (encoder.milore) throw ConfigError("the base stage trains a dense encoder; remove the milore section");
  if (config.batch_size == 0 || config.crop_frames < 2) throw ConfigError("batch size and crop length must be positive");
  Rng head_rng(derive_seed(config.seed, "head"));
  TrainState s{Encoder(encoder, derive_seed(config.seed, "init")),
               PredictionHead::create(encoder.codebook_size, encoder.d_model, head_rng),
               Adam(adam),
               schedule,
               config,
               TrainMode::Base,
               0,
               0,
               0,
               Rng(derive_seed(config.seed, "crop")),
               {}};
  return s;
}

TrainState init_continual_state(const TrainState& base, TrainMode mode, const MiLoreConfig& milore,
                                std::size_t classes, const TrainConfig& config, const ScheduleConfig& schedule,
                                AdamConfig adam) {
  schedule.validate();
  if (mode == TrainMode::Base) throw ConfigError("continual training needs mode milore or full-finetune");
  if (config.batch_size == 0 || config.crop_frames < 2) throw ConfigError("batch size and crop length must be positive");
  Encoder encoder = base.encoder.clone();
  if (mode == TrainMode::MiLore) {
    encoder.attach_milore(milore, derive_seed(config.seed, "milore"));
  } else {
    if (encoder.has_milore()) throw ConfigError("full fine-tuning expects a dense base checkpoint");
    encoder.set_backbone_trainable(true);
  }
  Rng head_rng(derive_seed(config.seed, "head"));
  TrainState s{std::move(encoder),
               PredictionHead::create(classes, base.encoder.config().d_model, head_rng),
               Adam(adam),
               schedule,
               config,
               mode,
               0,
               0,
               0,
               Rng(derive_seed(config.seed, "crop")),
               {}};
  return s;
}

double train_step(TrainState& s, const TrainingData& data) {
  auto mb = next_minibatch(s, data);
  const FrameBatch batch = make_batch(mb.frames);
  const MaskSet masks = apply_span_mask(batch, s.encoder.config().mask, derive_seed(derive_seed(s.config.seed, "mask"), s.step));
  const auto states = s.encoder.encode(batch, &masks);
  const Tensor& hidden = states.back();

  MaskSet new_masks, replay_masks;
  new_masks.indices.resize(masks.indices.size());
  replay_masks.indices.resize(masks.indices.size());
  for (std::size_t b = 0; b < masks.indices.size(); ++b) {
    (mb.replay[b] ? replay_masks : new_masks).indices[b] = masks.indices[b];
  }
  SubsetLoss new_part, replay_part;
  if (new_masks.total() > 0) new_part = masked_prediction_subset(hidden, mb.targets, new_masks, s.head);
  if (replay_masks.total() > 0) replay_part = masked_prediction_subset(hidden, mb.targets, replay_masks, s.head);
  const Tensor loss = joint_continual_loss(new_part, replay_part);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    throw DivergenceError("loss became non-finite at step " + std::to_string(s.step));
  }
  auto params = s.trainable_parameters();
  for (auto& p : params) p.tensor.zero_grad();
  backward(loss);
  s.optimizer.step(params, lr_at(s.step + 1, s.schedule));
  ++s.step;
  s.loss_curve.push_back(value);
  return value;
}

void train(TrainState& s, const TrainingData& data, std::size_t steps) {
  data.validate(s.head.classes());
  const std::size_t target = s.step + steps;
  while (s.step < target) train_step(s, data);
}

void train_all(TrainState& s, const TrainingData& data) {
  if (s.step < s.schedule.total_steps) train(s, data, s.schedule.total_steps - s.step);
}

double evaluate_loss(const TrainState& s, const std::vector<Utterance>& utterances, const TargetSequence& targets,
                     std::uint64_t mask_seed) {
  NoGradGuard no_grad;
  std::vector<Tensor> frames;
  for (const auto& u : utterances) frames.push_back(u.frames);
  const FrameBatch batch = make_batch(frames);
  const MaskSet masks = apply_span_mask(batch, s.encoder.config().mask, mask_seed);
  const auto states = s.encoder.encode(batch, &masks);
  return masked_prediction_loss(states.back(), targets, masks, s.head).item();
}

void write_tensor_archive(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  auto out = io::open_for_write(path);
  io::write_pod(out, kArchiveMagic);
  io::write_pod(out, kFormatVersion);
  io::write_pod<std::uint64_t>(out, tensors.size());
  for (const auto& t : tensors) {
    io::write_string(out, t.name);
    io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.tensor.rank()));
    for (auto e : t.tensor.shape()) io::write_pod<std::uint64_t>(out, e);
    io::write_pod<std::uint8_t>(out, t.tensor.requires_grad() ? 1 : 0);
    io::write_doubles(out, t.tensor.data().data(), t.tensor.numel());
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<NamedTensor> read_tensor_archive(const std::filesystem::path& path) {
  auto in = io::open_for_read(path);
  if (io::read_pod<std::uint32_t>(in) != kArchiveMagic) throw IntegrityError(path.string() + ": bad archive magic");
  if (io::read_pod<std::uint32_t>(in) != kFormatVersion) throw IntegrityError(path.string() + ": unsupported version");
  const auto count = io::read_pod<std::uint64_t>(in);
  std::vector<NamedTensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    auto name = io::read_string(in);
    const auto rank = io::read_pod<std::uint32_t>(in);
    if (rank == 0 || rank > 8) throw IntegrityError(path.string() + ": implausible rank for " + name);
    Shape shape(rank);
    for (auto& e : shape) e = io::read_pod<std::uint64_t>(in);
    const bool grad = io::read_pod<std::uint8_t>(in) != 0;
    const std::size_t n = shape_numel(shape);
    if (n == 0 || n > (std::size_t{1} << 34)) throw IntegrityError(path.string() + ": implausible extent for " + name);
    out.push_back({std::move(name), Tensor::from(shape, io::read_doubles(in, n), grad)});
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IntegrityError(path.string() + ": trailing bytes");
  return out;
}

void save_checkpoint(const std::filesystem::path& dir, const TrainState& s) {
  std::filesystem::create_directories(dir);
  const json config{{"encoder", encoder_to_json(s.encoder.config())},
                    {"classes", s.head.classes()},
                    {"mode", to_string(s.mode)},
                    {"train", {{"batch_size", s.config.batch_size}, {"crop_frames", s.config.crop_frames}, {"seed", s.config.seed}}},
                    {"schedule",
                     {{"total_steps", s.schedule.total_steps},
                      {"warmup_steps", s.schedule.warmup_steps},
                      {"peak_lr", s.schedule.peak_lr}}},
                    {"adam",
                     {{"beta1", s.optimizer.config().beta1},
                      {"beta2", s.optimizer.config().beta2},
                      {"eps", s.optimizer.config().eps},
                      {"clip_norm", s.optimizer.config().clip_norm}}}};
  write_text(dir / "config.json", config.dump(2) + "\n");

  const auto params = s.named_parameters();
  write_tensor_archive(dir / "params.bin", params);
  s.optimizer.save(dir / "optimizer.bin");

  std::ostringstream rng_text;
  rng_text << s.rng;
  const json state{{"step", s.step},
                   {"epoch", s.epoch},
                   {"cursor", s.cursor},
                   {"rng", rng_text.str()},
                   {"loss_curve", s.loss_curve}};
  write_text(dir / "state.json", state.dump(2) + "\n");

  json hashes;
  for (const char* f : {"config.json", "params.bin", "optimizer.bin", "state.json"}) {
    hashes["files"][f] = sha256_file(dir / f);
  }
  for (const auto& p : params) hashes["tensors"][p.name] = tensor_hash(p.tensor);
  write_text(dir / "hashes.json", hashes.dump(2) + "\n");
}

TrainState load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("checkpoint directory " + dir.string() + " does not exist");
  json hashes, config, state;
  try {
    hashes = json::parse(io::read_text(dir / "hashes.json"));
    for (const auto& [file, digest] : hashes.at("files").items()) {
      if (sha256_file(dir / file) != digest.get<std::string>()) {
        throw IntegrityError(dir.string() + ": " + file + " does not match its recorded hash");
      }
    }
    config = json::parse(io::read_text(dir / "config.json"));
    state = json::parse(io::read_text(dir / "state.json"));
  } catch (const json::exception& e) {
    throw IntegrityError(dir.string() + ": malformed checkpoint metadata (" + e.what() + ")");
  }

  try {
    const EncoderConfig enc = encoder_from_json(config.at("encoder"));
    const auto& tr = config.at("train");
    const auto& sc = config.at("schedule");
    const auto& ad = config.at("adam");
    TrainState s{Encoder(enc, 0),
                 PredictionHead{Tensor::zeros({config.at("classes").get<std::size_t>(), enc.d_model})},
                 Adam(AdamConfig{ad.at("beta1"), ad.at("beta2"), ad.at("eps"), ad.at("clip_norm")}),
                 ScheduleConfig{sc.at("total_steps"), sc.at("warmup_steps"), sc.at("peak_lr")},
                 TrainConfig{tr.at("batch_size"), tr.at("crop_frames"), tr.at("seed")},
                 train_mode_from_string(config.at("mode")),
                 state.at("step"),
                 state.at("epoch"),
                 state.at("cursor"),
                 Rng(),
                 state.at("loss_curve").get<std::vector<double>>()};
    std::istringstream rng_text(state.at("rng").get<std::string>());
    rng_text >> s.rng;
    if (!rng_text) throw IntegrityError(dir.string() + ": unreadable rng state");

    const auto params = read_tensor_archive(dir / "params.bin");
    const auto& tensor_hashes = hashes.at("tensors");
    for (const auto& p : params) {
      if (!tensor_hashes.contains(p.name) || tensor_hashes.at(p.name).get<std::string>() != tensor_hash(p.tensor)) {
        throw IntegrityError(dir.string() + ": tensor " + p.name + " does not match its recorded hash");
      }
    }
    s.encoder.load_parameters(params);
    auto head = std::find_if(params.begin(), params.end(), [](const auto& p) { return p.name == kHeadName; });
    if (head == params.end()) throw IntegrityError(dir.string() + ": prediction head missing");
    if (head->tensor.shape() != s.head.projection.shape()) throw IntegrityError(dir.string() + ": head shape mismatch");
    s.head.projection = head->tensor;
    s.optimizer.load(dir / "optimizer.bin");
    return s;
  } catch (const json::exception& e) {
    throw IntegrityError(dir.string() + ": malformed checkpoint metadata (" + e.what() + ")");
  }
}

std::string checkpoint_hash(const std::filesystem::path& dir) { return sha256_file(dir / "hashes.json"); }

}  // namespace milore
