#include "milore/pipeline.hpp"

#include <algorithm>
#include <fstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "milore/binary_io.hpp"
#include "milore/errors.hpp"

namespace milore {

namespace {

std::vector<Utterance> filtered(std::vector<Utterance> utts, const CorpusConfig& corpus) {
  return select_utterances(utts, filter_by_duration(manifest_of(utts), corpus.min_duration_s, corpus.max_duration_s));
}

KMeansConfig kmeans_with_seeds(const RunConfig& cfg, std::string_view stream) {
  KMeansConfig k = cfg.kmeans;
  const std::uint64_t base = derive_seed(cfg.seed, stream);
  for (std::size_t i = 0; i < k.seeds.size(); ++i) k.seeds[i] = derive_seed(base, k.seeds[i]);
  return k;
}

Tensor stack_frames(const std::vector<Utterance>& utts, std::size_t budget) {
  std::vector<double> rows;
  std::size_t taken = 0, d = 0;
  for (const auto& u : utts) {
    if (taken >= budget) break;
    d = u.frames.dim(1);
    const std::size_t n = std::min(u.length(), budget - taken);
    rows.insert(rows.end(), u.frames.data().begin(), u.frames.data().begin() + static_cast<long>(n * d));
    taken += n;
  }
  if (taken == 0) throw ConfigError("no frames available for clustering");
  return Tensor::from({taken, d}, std::move(rows));
}

EncoderConfig encoder_config(const RunConfig& cfg, std::size_t classes) {
  EncoderConfig e = cfg.encoder;
  e.milore.reset();
  e.codebook_size = classes;
  return e;
}

std::size_t probe_layer(const RunConfig& cfg, const Encoder& encoder) {
  return cfg.probe.layer.value_or(encoder.config().layers);
}

void write_loss_curve(const std::filesystem::path& path, const std::vector<double>& curve) {
  auto out = io::open_for_write(path);
  out << "step,loss\n";
  for (std::size_t i = 0; i < curve.size(); ++i) out << i + 1 << ',' << fmt::format("{}", curve[i]) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<std::filesystem::path> files_under(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

TrainState load_base(const RunConfig& cfg, const RunPaths& paths) {
  return load_checkpoint(cfg.continual.base_checkpoint.value_or(paths.pretrain()));
}

void require(const std::filesystem::path& p, const std::string& stage) {
  if (!std::filesystem::exists(p)) throw IoError(p.string() + " is missing; run `" + stage + "` first");
}

}  // namespace

const LanguageSplit& CorpusData::language(const std::string& name) const {
  for (const auto& l : languages) {
    if (l.name == name) return l;
  }
  throw ConfigError("corpus has no language " + name);
}

std::vector<Utterance> CorpusData::train_of(const std::vector<std::string>& names) const {
  std::vector<Utterance> out;
  for (const auto& n : names) {
    const auto& l = language(n);
    out.insert(out.end(), l.train.begin(), l.train.end());
  }
  return out;
}

std::vector<Utterance> CorpusData::heldout_of(const std::vector<std::string>& names) const {
  std::vector<Utterance> out;
  for (const auto& n : names) {
    const auto& l = language(n);
    out.insert(out.end(), l.heldout.begin(), l.heldout.end());
  }
  return out;
}

std::vector<std::string> CorpusData::names() const {
  std::vector<std::string> out;
  for (const auto& l : languages) out.push_back(l.name);
  return out;
}

CorpusData generate_corpus(const RunConfig& cfg) {
  cfg.validate();
  const std::uint64_t data_seed = derive_seed(cfg.seed, "data");
  CorpusData data;
  for (const auto& lc : cfg.corpus.languages) {
    const LanguageSpec spec = make_language_spec(lc.spec);
    LanguageSplit split;
    split.name = lc.spec.name;
    split.train = filtered(generate_language(spec, derive_seed(data_seed, lc.spec.name)).utterances, cfg.corpus);
    LanguageSpec held = spec;
    held.target_hours = lc.heldout_hours;
    auto heldout = generate_language(held, derive_seed(data_seed, lc.spec.name + "/heldout")).utterances;
    for (std::size_t i = 0; i < heldout.size(); ++i) heldout[i].id = fmt::format("{}-h{:06d}", lc.spec.name, i);
    split.heldout = filtered(std::move(heldout), cfg.corpus);
    if (split.train.empty() || split.heldout.size() < 2) {
      throw ConfigError("language " + split.name + " has too little data after duration filtering");
    }
    data.languages.push_back(std::move(split));
  }
  return data;
}

Codebook fit_base_codebook(const RunConfig& cfg, const CorpusData& data) {
  const auto& train = data.language(cfg.corpus.base_language).train;
  const auto k = kmeans_with_seeds(cfg, "kmeans");
  return minibatch_kmeans_fit(stack_frames(train, k.budget_frames()), k);
}

TrainState run_pretrain(const RunConfig& cfg, const CorpusData& data, const Codebook& codebook) {
  const auto& train = data.language(cfg.corpus.base_language).train;
  TrainConfig tc = cfg.pretrain.train;
  tc.seed = derive_seed(cfg.seed, "pretrain");
  TrainState state = init_base_state(encoder_config(cfg, codebook.clusters()), tc, cfg.pretrain.schedule);
  const auto targets = label_utterances(codebook, nullptr, train);
  train_all(state, make_training_data(train, targets, tc.seed));
  return state;
}

Codebook fit_continual_codebook(const RunConfig& cfg, const Encoder& base, const CorpusData& data) {
  std::vector<std::string> names = cfg.corpus.new_languages;
  names.push_back(cfg.corpus.base_language);
  auto k = kmeans_with_seeds(cfg, "continual-kmeans");
  if (cfg.continual.clusters > 0) k.clusters = cfg.continual.clusters;
  const auto ref = extract_reference_features(base, cfg.continual.reference_layer, data.train_of(names),
                                              k.budget_frames(), derive_seed(cfg.seed, "reference"));
  Codebook cb = minibatch_kmeans_fit(ref.frames, k);
  cb.source_layer = cfg.continual.reference_layer;
  return cb;
}

TrainState run_continual(const RunConfig& cfg, const TrainState& base, const CorpusData& data, const Codebook& codebook) {
  TrainConfig tc = cfg.continual.stage.train;
  tc.seed = derive_seed(cfg.seed, "continual");
  auto new_utts = data.train_of(cfg.corpus.new_languages);
  auto replay_utts = data.language(cfg.corpus.base_language).train;
  auto new_targets = label_utterances(codebook, &base.encoder, new_utts);
  TargetSequence replay_targets;
  MixOptions mix{cfg.continual.replay, cfg.continual.replay_fraction};
  if (cfg.continual.replay) {
    replay_targets = label_utterances(codebook, &base.encoder, replay_utts);
  } else {
    replay_utts.clear();
  }
  TrainState state =
      init_continual_state(base, cfg.continual.mode, cfg.milore, codebook.clusters(), tc, cfg.continual.stage.schedule);
  train_all(state, make_continual_data(std::move(new_utts), std::move(new_targets), std::move(replay_utts),
                                       std::move(replay_targets), tc.seed, mix));
  return state;
}

std::vector<ProbeResult> run_probes(const RunConfig& cfg, const Encoder& encoder, const CorpusData& data,
                                    const Codebook& base_codebook) {
  const auto heldout = data.heldout_of(data.names());
  ProbeConfig pc;
  pc.layer = probe_layer(cfg, encoder);
  pc.seed = derive_seed(cfg.seed, "probe");
  pc.iterations = cfg.probe.iterations;
  pc.learning_rate = cfg.probe.learning_rate;
  pc.max_train_frames = cfg.probe.max_train_frames;

  pc.task = ProbeTask::ClusterAccuracy;
  if (cfg.probe.masked) pc.mask = cfg.encoder.mask;
  const auto labels = label_utterances(base_codebook, nullptr, heldout);
  std::vector<ProbeResult> out{probe_evaluate(encoder, heldout, pc, &labels)};

  pc.task = ProbeTask::LanguageId;
  pc.mask.reset();
  out.push_back(probe_evaluate(encoder, heldout, pc));
  return out;
}

ActivationProfile run_activation(const Encoder& encoder, const CorpusData& data) {
  return expert_activation_profile(encoder, data.heldout_of(data.names()));
}

std::vector<AblationRow> run_sweep(const RunConfig& cfg, const TrainState& base, const CorpusData& data,
                                   const Codebook& base_codebook, const Codebook& continual_codebook) {
  if (cfg.sweep.grid.empty()) throw ConfigError("sweep.grid is empty");
  std::vector<AblationRow> rows;
  for (const auto& [rank, experts] : cfg.sweep.grid) {
    RunConfig point = cfg;
    point.milore.rank = rank;
    point.milore.experts = experts;
    point.continual.mode = TrainMode::MiLore;
    spdlog::info("sweep point rank={} experts={}", rank, experts);
    const TrainState state = run_continual(point, base, data, continual_codebook);
    const auto report = count_parameters(state);
    AblationRow row{rank, experts, report.trainable, report.total, {}};
    for (const auto& probe : run_probes(point, state.encoder, data, base_codebook)) {
      const std::string prefix = probe.task == ProbeTask::LanguageId ? "lid_" : "cluster_acc_";
      for (const auto& [lang, acc] : probe.per_language) row.metrics[prefix + lang] = acc;
      row.metrics[prefix + "all"] = probe.accuracy;
    }
    row.metrics["final_loss"] = state.loss_curve.empty() ? 0.0 : state.loss_curve.back();
    rows.push_back(std::move(row));
  }
  return rows;
}

CorpusData load_corpus(const RunPaths& paths) {
  require(paths.train_manifest(), "gen-data");
  require(paths.heldout_manifest(), "gen-data");
  CorpusData data;
  auto add = [&](const Manifest& m, bool heldout) {
    for (auto& u : load_utterances(m, paths.data())) {
      auto it = std::find_if(data.languages.begin(), data.languages.end(),
                             [&](const LanguageSplit& l) { return l.name == u.language; });
      if (it == data.languages.end()) {
        data.languages.push_back({u.language, {}, {}});
        it = std::prev(data.languages.end());
      }
      (heldout ? it->heldout : it->train).push_back(std::move(u));
    }
  };
  add(read_manifest(paths.train_manifest()), false);
  add(read_manifest(paths.heldout_manifest()), true);
  return data;
}

std::vector<std::filesystem::path> stage_gen_data(const RunConfig& cfg) {
  const RunPaths paths{cfg.output};
  const CorpusData data = generate_corpus(cfg);
  Manifest train, heldout;
  for (const auto& l : data.languages) {
    for (const auto& [utts, manifest] : {std::pair{&l.train, &train}, std::pair{&l.heldout, &heldout}}) {
      const Manifest m = manifest_of(*utts);
      for (std::size_t i = 0; i < utts->size(); ++i) write_utterance(paths.data() / m.records[i].path, (*utts)[i].frames);
      manifest->records.insert(manifest->records.end(), m.records.begin(), m.records.end());
    }
  }
  write_manifest(paths.train_manifest(), train);
  write_manifest(paths.heldout_manifest(), heldout);
  for (const auto& [lang, hours] : train.total_hours()) spdlog::info("{}: {:.4f} h train", lang, hours);
  return files_under(paths.data());
}

std::vector<std::filesystem::path> stage_kmeans(const RunConfig& cfg) {
  const RunPaths paths{cfg.output};
  const Codebook cb = fit_base_codebook(cfg, load_corpus(paths));
  save_codebook(paths.base_codebook(), cb);
  spdlog::info("base codebook: K={} inertia={:.6g} (seed {})", cb.clusters(), cb.inertia, cb.seed);
  return {paths.base_codebook(), paths.base_codebook().string() + ".json"};
}

std::vector<std::filesystem::path> stage_pretrain(const RunConfig& cfg) {
  const RunPaths paths{cfg.output};
  require(paths.base_codebook(), "kmeans");
  const CorpusData data = load_corpus(paths);
  const Codebook cb = load_codebook(paths.base_codebook());
  const auto& train = data.language(cfg.corpus.base_language).train;
  TrainConfig tc = cfg.pretrain.train;
  tc.seed = derive_seed(cfg.seed, "pretrain");
  TrainState state = init_base_state(encoder_config(cfg, cb.clusters()), tc, cfg.pretrain.schedule);
  const auto td = make_training_data(train, label_utterances(cb, nullptr, train), tc.seed);
  try {
    train_all(state, td);
  } catch (const DivergenceError&) {
    save_checkpoint(paths.pretrain(), state);
    write_loss_curve(paths.pretrain() / "loss.csv", state.loss_curve);
    spdlog::error("training diverged; last finite state saved to {}", paths.pretrain().string());
    throw;
  }
  save_checkpoint(paths.pretrain(), state);
  write_loss_curve(paths.pretrain() / "loss.csv", state.loss_curve);
  return files_under(paths.pretrain());
}

std::vector<std::filesystem::path> stage_continual(const RunConfig& cfg) {
  const RunPaths paths{cfg.output};
  const CorpusData data = load_corpus(paths);
  const TrainState base = load_base(cfg, paths);
  const Codebook cb = fit_continual_codebook(cfg, base.encoder, data);
  save_codebook(paths.continual_codebook(), cb);
  const TrainState state = run_continual(cfg, base, data, cb);
  save_checkpoint(paths.continual_checkpoint(), state);
  write_loss_curve(paths.continual() / "loss.csv", state.loss_curve);
  return files_under(paths.continual());
}

std::vector<std::filesystem::path> stage_probe(const RunConfig& cfg) {
  const RunPaths paths{cfg.output};
  require(paths.base_codebook(), "kmeans");
  require(paths.continual_checkpoint(), "continual");
  const CorpusData data = load_corpus(paths);
  const Codebook cb = load_codebook(paths.base_codebook());
  std::vector<std::filesystem::path> written;
  for (const auto& [label, dir] : {std::pair{"base", cfg.continual.base_checkpoint.value_or(paths.pretrain())},
                                   std::pair{"continual", paths.continual_checkpoint()}}) {
    const TrainState state = load_checkpoint(dir);
    Report report;
    report.probes = run_probes(cfg, state.encoder, data, cb);
    for (const auto& p : report.probes) {
      for (const auto& [lang, acc] : p.per_language) {
        spdlog::info("{} {} layer {} {}: {:.4f}", label, to_string(p.task), p.layer, lang, acc);
      }
    }
    auto files = emit_report(report, paths.probe() / label);
    written.insert(written.end(), files.begin(), files.end());
  }
  return written;
}

std::vector<std::filesystem::path> stage_activation(const RunConfig& cfg) {
  const RunPaths paths{cfg.output};
  require(paths.continual_checkpoint(), "continual");
  const TrainState state = load_checkpoint(paths.continual_checkpoint());
  Report report;
  report.activation = run_activation(state.encoder, load_corpus(paths));
  return emit_report(report, paths.activation());
}

std::vector<std::filesystem::path> stage_sweep(const RunConfig& cfg) {
  const RunPaths paths{cfg.output};
  require(paths.base_codebook(), "kmeans");
  const CorpusData data = load_corpus(paths);
  const TrainState base = load_base(cfg, paths);
  const Codebook base_cb = load_codebook(paths.base_codebook());
  const Codebook cont_cb = fit_continual_codebook(cfg, base.encoder, data);
  Report report;
  report.ablation = run_sweep(cfg, base, data, base_cb, cont_cb);
  return emit_report(report, paths.sweep());
}

ParamReport config_parameter_report(const RunConfig& cfg) {
  const std::size_t classes = cfg.head_classes > 0 ? cfg.head_classes : cfg.kmeans.clusters;
  EncoderConfig e = encoder_config(cfg, classes);
  if (cfg.continual.mode == TrainMode::MiLore) e.milore = cfg.milore;
  return parameter_layout(e, classes, cfg.continual.mode);
}

std::vector<std::filesystem::path> stage_count_params(const RunConfig& cfg) {
  Report report;
  report.params = config_parameter_report(cfg);
  return emit_report(report, RunPaths{cfg.output}.params());
}

std::vector<std::filesystem::path> planned_artifacts(const RunConfig& cfg, const std::string& subcommand) {
  const RunPaths p{cfg.output};
  auto checkpoint = [](const std::filesystem::path& d) {
    return std::vector<std::filesystem::path>{d / "config.json", d / "params.bin", d / "optimizer.bin",
                                              d / "state.json", d / "hashes.json"};
  };
  auto report = [](const std::filesystem::path& d) {
    return std::vector<std::filesystem::path>{d / "params.csv", d / "activation.csv", d / "probes.csv",
                                              d / "ablation.csv", d / "report.json"};
  };
  std::vector<std::filesystem::path> out;
  if (subcommand == "gen-data") {
    out = {p.train_manifest(), p.heldout_manifest()};
    for (const auto& l : cfg.corpus.languages) out.push_back(p.data() / l.spec.name / "<id>.utt");
  } else if (subcommand == "kmeans") {
    out = {p.base_codebook(), p.base_codebook().string() + ".json"};
  } else if (subcommand == "pretrain") {
    out = checkpoint(p.pretrain());
    out.push_back(p.pretrain() / "loss.csv");
  } else if (subcommand == "continual") {
    out = {p.continual_codebook(), p.continual_codebook().string() + ".json", p.continual() / "loss.csv"};
    for (auto& f : checkpoint(p.continual_checkpoint())) out.push_back(f);
  } else if (subcommand == "probe") {
    out = report(p.probe() / "base");
    for (auto& f : report(p.probe() / "continual")) out.push_back(f);
  } else if (subcommand == "activation") {
    out = report(p.activation());
  } else if (subcommand == "count-params") {
    out = report(p.params());
  } else if (subcommand == "sweep") {
    out = report(p.sweep());
  } else {
    throw ConfigError("unknown subcommand " + subcommand);
  }
  return out;
}

}  // namespace milore
