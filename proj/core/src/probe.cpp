#include "milore/probe.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "milore/errors.hpp"
#include "milore/ops.hpp"
#include "milore/rng.hpp"
#include "milore/trainer.hpp"

namespace milore {

std::string to_string(ProbeTask task) {
  return task == ProbeTask::LanguageId ? "language-id" : "cluster-accuracy";
}

ProbeTask probe_task_from_string(const std::string& name) {
  if (name == "language-id") return ProbeTask::LanguageId;
  if (name == "cluster-accuracy") return ProbeTask::ClusterAccuracy;
  throw ConfigError("unknown probe task '" + name + "' (expected language-id or cluster-accuracy)");
}

std::vector<int> LinearProbe::predict(const Tensor& features) const {
  const std::size_t n = features.dim(0), d = features.dim(1), k = weight.dim(0);
  if (d != mean.size()) throw ShapeError("probe features have width " + std::to_string(d));
  std::vector<int> out(n);
  const auto w = weight.data();
  const auto b = bias.data();
  const auto x = features.data();
  std::vector<double> z(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) z[j] = (x[i * d + j] - mean[j]) * inv_std[j];
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      double s = b[c];
      for (std::size_t j = 0; j < d; ++j) s += w[c * d + j] * z[j];
      if (s > best) {
        best = s;
        out[i] = static_cast<int>(c);
      }
    }
  }
  return out;
}

LinearProbe fit_linear_probe(const Tensor& features, const std::vector<int>& labels, std::size_t classes,
                             const ProbeConfig& config) {
  if (features.rank() != 2) throw ShapeError("probe features must be [N x d]");
  const std::size_t n = features.dim(0), d = features.dim(1);
  if (labels.size() != n) throw ShapeError("one probe label per frame is required");
  if (classes == 0) throw ConfigError("probe needs at least one class");

  // Deterministic subsample of the training frames.
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  if (config.max_train_frames > 0 && n > config.max_train_frames) {
    Rng rng(derive_seed(config.seed, "probe-subsample"));
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(config.max_train_frames);
    std::sort(rows.begin(), rows.end());
  }
  const std::size_t m = rows.size();

  LinearProbe probe;
  probe.mean.assign(d, 0.0);
  probe.inv_std.assign(d, 0.0);
  const auto x = features.data();
  for (auto r : rows) {
    for (std::size_t j = 0; j < d; ++j) probe.mean[j] += x[r * d + j];
  }
  for (auto& v : probe.mean) v /= static_cast<double>(m);
  for (auto r : rows) {
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x[r * d + j] - probe.mean[j];
      probe.inv_std[j] += c * c;
    }
  }
  for (auto& v : probe.inv_std) v = 1.0 / std::sqrt(v / static_cast<double>(m) + 1e-8);

  std::vector<double> z(m * d);
  std::vector<int> y(m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < d; ++j) z[i * d + j] = (x[rows[i] * d + j] - probe.mean[j]) * probe.inv_std[j];
    y[i] = labels[rows[i]];
    if (y[i] < 0 || static_cast<std::size_t>(y[i]) >= classes) throw IndexError("probe label out of range");
  }
  const Tensor input = Tensor::from({m, d}, std::move(z));
  std::vector<std::size_t> all(m);
  std::iota(all.begin(), all.end(), 0);

  probe.weight = Tensor::zeros({classes, d}, true);
  probe.bias = Tensor::zeros({classes}, true);
  Adam adam(AdamConfig{0.9, 0.999, 1e-8, 0.0});
  const std::vector<NamedTensor> params{{"weight", probe.weight}, {"bias", probe.bias}};
  for (std::size_t it = 0; it < config.iterations; ++it) {
    Tensor loss = cross_entropy_with_logits(linear(input, probe.weight, probe.bias), y, all);
    if (config.l2 > 0.0) loss = add(loss, scale(sum(mul(probe.weight, probe.weight)), config.l2));
    probe.weight.zero_grad();
    probe.bias.zero_grad();
    backward(loss);
    adam.step(params, config.learning_rate);
  }
  probe.weight.set_requires_grad(false);
  probe.bias.set_requires_grad(false);
  return probe;
}

std::vector<Tensor> probe_features(const Encoder& encoder, const std::vector<Utterance>& utterances,
                                   const ProbeConfig& config, std::vector<std::vector<std::size_t>>* frames_used) {
  const auto& cfg = encoder.config();
  if (config.layer > cfg.layers) {
    throw ConfigError("probe layer " + std::to_string(config.layer) + " out of range [0, " +
                      std::to_string(cfg.layers) + "]");
  }
  NoGradGuard no_grad;
  const std::size_t window = cfg.max_frames, dm = cfg.d_model;
  std::vector<Tensor> out;
  if (frames_used) frames_used->clear();
  constexpr std::size_t kChunk = 16;
  const std::uint64_t mask_seed = derive_seed(config.seed, "probe-mask");

  // Windows are processed a chunk at a time; masks are drawn per window.
  struct Piece {
    std::size_t utterance, start, length;
  };
  std::vector<Piece> pieces;
  for (std::size_t u = 0; u < utterances.size(); ++u) {
    for (std::size_t s = 0; s < utterances[u].length(); s += window) {
      pieces.push_back({u, s, std::min(window, utterances[u].length() - s)});
    }
  }
  std::vector<std::vector<double>> rows(utterances.size());
  std::vector<std::vector<std::size_t>> used(utterances.size());
  for (std::size_t p0 = 0; p0 < pieces.size(); p0 += kChunk) {
    const std::size_t p1 = std::min(pieces.size(), p0 + kChunk);
    std::vector<Tensor> windows;
    for (std::size_t p = p0; p < p1; ++p) {
      const auto& pc = pieces[p];
      const auto& src = utterances[pc.utterance].frames;
      const std::size_t df = src.dim(1);
      windows.push_back(Tensor::from({pc.length, df},
                                     std::vector<double>(src.data().begin() + static_cast<long>(pc.start * df),
                                                         src.data().begin() + static_cast<long>((pc.start + pc.length) * df))));
    }
    const FrameBatch batch = make_batch(windows);
    std::optional<MaskSet> masks;
    if (config.mask) masks = apply_span_mask(batch, *config.mask, derive_seed(mask_seed, p0));
    const auto states = encoder.encode(batch, masks ? &*masks : nullptr);
    const auto h = states[config.layer].data();
    const std::size_t t = batch.frames();
    for (std::size_t p = p0; p < p1; ++p) {
      const auto& pc = pieces[p];
      const std::size_t b = p - p0;
      std::vector<std::size_t> picked;
      if (masks) {
        picked = masks->indices[b];
      } else {
        picked.resize(pc.length);
        std::iota(picked.begin(), picked.end(), 0);
      }
      for (auto f : picked) {
        rows[pc.utterance].insert(rows[pc.utterance].end(), h.begin() + static_cast<long>((b * t + f) * dm),
                                  h.begin() + static_cast<long>((b * t + f + 1) * dm));
        used[pc.utterance].push_back(pc.start + f);
      }
    }
  }
  for (std::size_t u = 0; u < utterances.size(); ++u) {
    const std::size_t n = used[u].size();
    out.push_back(n == 0 ? Tensor() : Tensor::from({n, dm}, std::move(rows[u])));
  }
  if (frames_used) *frames_used = std::move(used);
  return out;
}

namespace {

// Fits on even-indexed utterances of `group` and scores the odd ones.
// Returns (correct, total) per language.
std::map<std::string, std::pair<std::size_t, std::size_t>> fit_and_score(
    const std::vector<std::size_t>& group, const std::vector<Utterance>& heldout, const std::vector<Tensor>& feats,
    const std::vector<std::vector<std::size_t>>& used, const std::function<int(std::size_t, std::size_t)>& label_of,
    std::size_t classes, std::size_t dm, const ProbeConfig& config) {
  std::map<std::string, std::size_t> seen;
  std::vector<std::size_t> train, test;
  for (auto u : group) (seen[heldout[u].language]++ % 2 == 0 ? train : test).push_back(u);

  std::vector<double> train_x;
  std::vector<int> train_y;
  for (auto u : train) {
    if (!feats[u].defined()) continue;
    train_x.insert(train_x.end(), feats[u].data().begin(), feats[u].data().end());
    for (auto f : used[u]) train_y.push_back(label_of(u, f));
  }
  if (train_y.empty()) throw ConfigError("probe has no training frames; need at least one utterance per language");
  const auto probe = fit_linear_probe(Tensor::from({train_y.size(), dm}, std::move(train_x)), train_y, classes, config);

  std::map<std::string, std::pair<std::size_t, std::size_t>> score;
  for (auto u : test) {
    if (!feats[u].defined()) continue;
    const auto pred = probe.predict(feats[u]);
    auto& [correct, total] = score[heldout[u].language];
    for (std::size_t i = 0; i < pred.size(); ++i) {
      correct += pred[i] == label_of(u, used[u][i]) ? 1 : 0;
      ++total;
    }
  }
  return score;
}

}  // namespace

ProbeResult probe_evaluate(const Encoder& encoder, const std::vector<Utterance>& heldout, const ProbeConfig& config,
                           const TargetSequence* cluster_labels) {
  if (heldout.empty()) throw ConfigError("probe needs held-out utterances");
  if (config.task == ProbeTask::ClusterAccuracy) {
    if (!cluster_labels) throw ConfigError("cluster-accuracy probe needs cluster labels");
    if (cluster_labels->size() != heldout.size()) throw ShapeError("one label sequence per held-out utterance is required");
  }
  std::vector<std::string> languages;
  for (const auto& u : heldout) languages.push_back(u.language);
  std::sort(languages.begin(), languages.end());
  languages.erase(std::unique(languages.begin(), languages.end()), languages.end());

  std::vector<std::vector<std::size_t>> used;
  const auto feats = probe_features(encoder, heldout, config, &used);
  const std::size_t dm = encoder.config().d_model;

  std::function<int(std::size_t, std::size_t)> label_of;
  std::size_t classes = 0;
  if (config.task == ProbeTask::LanguageId) {
    classes = languages.size();
    label_of = [&](std::size_t u, std::size_t) {
      return static_cast<int>(std::lower_bound(languages.begin(), languages.end(), heldout[u].language) -
                              languages.begin());
    };
  } else {
    for (const auto& seq : *cluster_labels) {
      for (int z : seq) classes = std::max(classes, static_cast<std::size_t>(z) + 1);
    }
    label_of = [&](std::size_t u, std::size_t f) { return (*cluster_labels)[u].at(f); };
  }

  // Language id uses one probe over all languages; cluster accuracy fits one per language.
  std::vector<std::vector<std::size_t>> groups;
  if (config.task == ProbeTask::LanguageId) {
    groups.emplace_back(heldout.size());
    std::iota(groups.back().begin(), groups.back().end(), 0);
  } else {
    groups.resize(languages.size());
    for (std::size_t u = 0; u < heldout.size(); ++u) {
      const auto g = std::lower_bound(languages.begin(), languages.end(), heldout[u].language) - languages.begin();
      groups[static_cast<std::size_t>(g)].push_back(u);
    }
  }

  ProbeResult result;
  result.task = config.task;
  result.layer = config.layer;
  std::size_t total_correct = 0, total = 0;
  for (const auto& group : groups) {
    for (const auto& [lang, score] : fit_and_score(group, heldout, feats, used, label_of, classes, dm, config)) {
      result.per_language[lang] = static_cast<double>(score.first) / static_cast<double>(score.second);
      result.frames[lang] = score.second;
      total_correct += score.first;
      total += score.second;
    }
  }
  if (total == 0) throw ConfigError("probe has no evaluation frames; need at least two utterances per language");
  result.accuracy = static_cast<double>(total_correct) / static_cast<double>(total);
  return result;
}

}  // namespace milore
