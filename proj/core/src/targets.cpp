#include "milore/targets.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "milore/binary_io.hpp"
#include "milore/errors.hpp"
#include "milore/rng.hpp"

namespace milore {

namespace {

constexpr std::uint32_t kCodebookMagic = 0x42434c4d;  // "MLCB"
constexpr std::uint32_t kCodebookVersion = 1;
constexpr std::uint64_t kRawLayer = ~std::uint64_t{0};

double squared_distance(const double* a, const double* b, std::size_t d) {
  double acc = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double diff = a[j] - b[j];
    acc += diff * diff;
  }
  return acc;
}

// Index and squared distance of the nearest centroid; ties keep the lowest index.
std::pair<std::size_t, double> nearest(const double* x, const double* centroids, std::size_t k, std::size_t d) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    const double dist = squared_distance(x, centroids + c * d, d);
    if (dist < best_d) {
      best_d = dist;
      best = c;
    }
  }
  return {best, best_d};
}

void require_points(const Tensor& points, const char* what) {
  if (!points.defined() || points.rank() != 2) throw ShapeError(std::string(what) + ": expected a [M x d] matrix");
}

double inertia_of(const std::vector<double>& data, const std::vector<std::size_t>& rows, const std::vector<double>& c,
                  std::size_t k, std::size_t d) {
  double total = 0.0;
  for (auto r : rows) total += nearest(data.data() + r * d, c.data(), k, d).second;
  return total;
}

}  // namespace

std::size_t KMeansConfig::budget_frames() const {
  return static_cast<std::size_t>(std::llround(budget_hours * 3600.0 * frames_per_second));
}

void KMeansConfig::validate() const {
  if (clusters == 0) throw ConfigError("k-means needs at least one cluster");
  if (batch_size < clusters) {
    throw ConfigError("minibatch size " + std::to_string(batch_size) + " is smaller than K=" + std::to_string(clusters));
  }
  if (seeds.empty()) throw ConfigError("k-means needs at least one seed");
  if (max_iterations == 0) throw ConfigError("k-means needs at least one iteration");
  if (validation_fraction < 0.0 || validation_fraction >= 1.0) throw ConfigError("validation fraction must lie in [0, 1)");
}

std::vector<std::uint64_t> KMeansConfig::default_seeds(std::size_t n) {
  std::vector<std::uint64_t> s(n);
  std::iota(s.begin(), s.end(), 0);
  return s;
}

double inertia(const Tensor& points, const Tensor& centroids) {
  require_points(points, "inertia");
  require_points(centroids, "inertia");
  const std::size_t d = points.dim(1);
  if (centroids.dim(1) != d) throw ShapeError("inertia: centroid width differs from point width");
  double total = 0.0;
  for (std::size_t i = 0; i < points.dim(0); ++i) {
    total += nearest(points.data().data() + i * d, centroids.data().data(), centroids.dim(0), d).second;
  }
  return total;
}

Tensor kmeanspp_init(const Tensor& points, std::size_t clusters, std::uint64_t seed) {
  require_points(points, "kmeanspp_init");
  const std::size_t m = points.dim(0), d = points.dim(1);
  if (clusters == 0) throw ConfigError("kmeanspp_init: K must be at least 1");
  if (m < clusters) {
    throw ConfigError("kmeanspp_init: " + std::to_string(m) + " points cannot seed " + std::to_string(clusters) +
                      " centroids");
  }
  const double* x = points.data().data();
  Rng rng(seed);
  std::vector<std::size_t> chosen{uniform_index(rng, m)};
  std::vector<char> taken(m, 0);
  taken[chosen[0]] = 1;
  std::vector<double> dist(m);
  for (std::size_t i = 0; i < m; ++i) dist[i] = squared_distance(x + i * d, x + chosen[0] * d, d);
  while (chosen.size() < clusters) {
    const double total = std::accumulate(dist.begin(), dist.end(), 0.0);
    std::size_t pick = m;
    if (total > 0.0) {
      const double u = uniform(rng, 0.0, total);
      double acc = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        if (dist[i] <= 0.0) continue;
        pick = i;
        acc += dist[i];
        if (u < acc) break;
      }
    } else {
      // Every remaining point coincides with a chosen centroid.
      std::vector<std::size_t> free;
      for (std::size_t i = 0; i < m; ++i) {
        if (!taken[i]) free.push_back(i);
      }
      pick = free[uniform_index(rng, free.size())];
    }
    chosen.push_back(pick);
    taken[pick] = 1;
    for (std::size_t i = 0; i < m; ++i) dist[i] = std::min(dist[i], squared_distance(x + i * d, x + pick * d, d));
  }
  std::vector<double> out(clusters * d);
  for (std::size_t c = 0; c < clusters; ++c) std::copy_n(x + chosen[c] * d, d, out.begin() + static_cast<long>(c * d));
  return Tensor::from({clusters, d}, std::move(out));
}

Codebook minibatch_kmeans_fit(const Tensor& frames, const KMeansConfig& config, KMeansFitReport* report) {
  config.validate();
  require_points(frames, "minibatch_kmeans_fit");
  const std::size_t m = frames.dim(0), d = frames.dim(1), k = config.clusters;
  if (m < k) {
    throw ConfigError("minibatch_kmeans_fit: " + std::to_string(m) + " frames cannot support K=" + std::to_string(k));
  }
  const std::vector<double> data(frames.data().begin(), frames.data().end());

  // Held-out slice shared by all seeds so their inertias are comparable.
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(config.seeds.front(), "kmeans-split"));
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n_val = static_cast<std::size_t>(std::floor(config.validation_fraction * static_cast<double>(m)));
  std::vector<std::size_t> train, validation;
  if (n_val == 0 || m - n_val < k) {
    train = order;
    validation = order;
  } else {
    validation.assign(order.begin(), order.begin() + static_cast<long>(n_val));
    train.assign(order.begin() + static_cast<long>(n_val), order.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(validation.begin(), validation.end());

  KMeansFitReport local;
  KMeansFitReport& rep = report ? *report : local;
  rep = {};
  Codebook best;
  best.inertia = std::numeric_limits<double>::infinity();
  std::vector<double> best_centroids;

  for (auto seed : config.seeds) {
    Rng rng(derive_seed(seed, "kmeans"));
    // k-means++ on a random subsample of up to 3 minibatches.
    std::vector<std::size_t> pool = train;
    std::shuffle(pool.begin(), pool.end(), rng);
    const std::size_t init_size = std::min(pool.size(), std::max(3 * config.batch_size, k));
    std::vector<double> init_points(init_size * d);
    for (std::size_t i = 0; i < init_size; ++i) {
      std::copy_n(data.data() + pool[i] * d, d, init_points.begin() + static_cast<long>(i * d));
    }
    auto init = kmeanspp_init(Tensor::from({init_size, d}, std::move(init_points)), k, rng());
    std::vector<double> centroids(init.data().begin(), init.data().end());
    std::vector<double> counts(k, 0.0);
    std::vector<double> batch_sum(k * d);
    std::vector<double> batch_count(k);
    std::vector<std::size_t> batch(std::min(config.batch_size, train.size()));
    std::vector<double> pass_inertias;

    for (std::size_t it = 0; it < config.max_iterations; ++it) {
      if (config.batch_size >= train.size()) {
        batch = train;
      } else {
        // Partial Fisher-Yates draw without replacement.
        for (std::size_t i = 0; i < batch.size(); ++i) {
          const std::size_t j = i + uniform_index(rng, pool.size() - i);
          std::swap(pool[i], pool[j]);
          batch[i] = pool[i];
        }
      }
      std::fill(batch_sum.begin(), batch_sum.end(), 0.0);
      std::fill(batch_count.begin(), batch_count.end(), 0.0);
      for (auto r : batch) {
        const double* x = data.data() + r * d;
        const auto c = nearest(x, centroids.data(), k, d).first;
        batch_count[c] += 1.0;
        for (std::size_t j = 0; j < d; ++j) batch_sum[c * d + j] += x[j];
      }
      // c <- c + (1/n_c)(x - c) applied over the batch's points in aggregate.
      for (std::size_t c = 0; c < k; ++c) {
        if (batch_count[c] == 0.0) continue;
        counts[c] += batch_count[c];
        for (std::size_t j = 0; j < d; ++j) {
          double& v = centroids[c * d + j];
          v += (batch_sum[c * d + j] - batch_count[c] * v) / counts[c];
        }
      }
      if (config.track_training_inertia) pass_inertias.push_back(inertia_of(data, train, centroids, k, d));
    }

    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0.0) continue;
      std::size_t far = train.front();
      double far_d = -1.0;
      for (auto r : train) {
        const double dist = nearest(data.data() + r * d, centroids.data(), k, d).second;
        if (dist > far_d) {
          far_d = dist;
          far = r;
        }
      }
      spdlog::warn("k-means seed {}: cluster {} is empty; re-seeding from the farthest point", seed, c);
      std::copy_n(data.data() + far * d, d, centroids.begin() + static_cast<long>(c * d));
      counts[c] = 1.0;
      ++rep.reseeded_clusters;
    }

    const double val = inertia_of(data, validation, centroids, k, d);
    rep.validation_inertias.push_back(val);
    rep.training_inertias.push_back(std::move(pass_inertias));
    if (val < best.inertia) {
      best.inertia = val;
      best.seed = seed;
      best_centroids = centroids;
    }
  }
  best.centroids = Tensor::from({k, d}, std::move(best_centroids));
  best.seeds = config.seeds;
  best.seed_inertias = rep.validation_inertias;
  return best;
}

std::vector<int> assign_labels(const Codebook& codebook, const Tensor& frames) {
  require_points(frames, "assign_labels");
  const std::size_t d = codebook.dim();
  if (frames.dim(1) != d) {
    throw ShapeError("assign_labels: frames " + to_string(frames.shape()) + " do not match centroids " +
                     to_string(codebook.centroids.shape()));
  }
  std::vector<int> labels(frames.dim(0));
  const double* c = codebook.centroids.data().data();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    labels[i] = static_cast<int>(nearest(frames.data().data() + i * d, c, codebook.clusters(), d).first);
  }
  return labels;
}

std::vector<Tensor> layer_features(const Encoder& encoder, std::size_t layer, const std::vector<Tensor>& utterances) {
  const auto& cfg = encoder.config();
  if (layer > cfg.layers) {
    throw ConfigError("layer " + std::to_string(layer) + " out of range [0, " + std::to_string(cfg.layers) + "]");
  }
  NoGradGuard no_grad;
  const std::size_t window = cfg.max_frames, dm = cfg.d_model;
  struct Piece {
    std::size_t utterance, start, length;
  };
  std::vector<Piece> pieces;
  for (std::size_t u = 0; u < utterances.size(); ++u) {
    for (std::size_t s = 0; s < utterances[u].dim(0); s += window) {
      pieces.push_back({u, s, std::min(window, utterances[u].dim(0) - s)});
    }
  }
  std::vector<std::vector<double>> out(utterances.size());
  for (std::size_t u = 0; u < utterances.size(); ++u) out[u].resize(utterances[u].dim(0) * dm);

  constexpr std::size_t kChunk = 16;
  for (std::size_t p0 = 0; p0 < pieces.size(); p0 += kChunk) {
    const std::size_t p1 = std::min(pieces.size(), p0 + kChunk);
    std::vector<Tensor> windows;
    for (std::size_t p = p0; p < p1; ++p) {
      const auto& pc = pieces[p];
      const auto& src = utterances[pc.utterance];
      const std::size_t df = src.dim(1);
      std::vector<double> w(src.data().begin() + static_cast<long>(pc.start * df),
                            src.data().begin() + static_cast<long>((pc.start + pc.length) * df));
      windows.push_back(Tensor::from({pc.length, df}, std::move(w)));
    }
    const FrameBatch batch = make_batch(windows);
    const auto states = encoder.encode(batch);
    const auto h = states[layer].data();
    const std::size_t t = batch.frames();
    for (std::size_t p = p0; p < p1; ++p) {
      const auto& pc = pieces[p];
      const std::size_t b = p - p0;
      std::copy_n(h.begin() + static_cast<long>(b * t * dm), pc.length * dm,
                  out[pc.utterance].begin() + static_cast<long>(pc.start * dm));
    }
  }
  std::vector<Tensor> result;
  result.reserve(utterances.size());
  for (std::size_t u = 0; u < utterances.size(); ++u) {
    result.push_back(Tensor::from({utterances[u].dim(0), dm}, std::move(out[u])));
  }
  return result;
}

TargetSequence label_utterances(const Codebook& codebook, const Encoder* encoder,
                                const std::vector<Utterance>& utterances) {
  std::vector<Tensor> frames;
  frames.reserve(utterances.size());
  for (const auto& u : utterances) frames.push_back(u.frames);
  if (codebook.source_layer) {
    if (!encoder) throw ConfigError("codebook was fit on encoder layer features; an encoder is required");
    frames = layer_features(*encoder, *codebook.source_layer, frames);
  }
  TargetSequence out;
  out.reserve(frames.size());
  for (const auto& f : frames) out.push_back(assign_labels(codebook, f));
  return out;
}

ReferenceFrames extract_reference_features(const Encoder& encoder, std::size_t layer,
                                           const std::vector<Utterance>& utterances, std::size_t budget_frames,
                                           std::uint64_t seed) {
  if (layer > encoder.config().layers) {
    throw ConfigError("layer " + std::to_string(layer) + " out of range [0, " +
                      std::to_string(encoder.config().layers) + "]");
  }
  std::map<std::string, std::vector<std::size_t>> by_language;
  for (std::size_t i = 0; i < utterances.size(); ++i) by_language[utterances[i].language].push_back(i);

  ReferenceFrames result;
  std::vector<Tensor> selected;
  std::vector<std::size_t> keep;  // frames taken from each selected utterance
  for (auto& [lang, idx] : by_language) {
    Rng rng(derive_seed(seed, lang));
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t taken = 0;
    for (auto i : idx) {
      if (taken >= budget_frames) break;
      const std::size_t n = std::min(utterances[i].length(), budget_frames - taken);
      selected.push_back(utterances[i].frames);
      keep.push_back(n);
      taken += n;
    }
    if (taken < budget_frames) {
      spdlog::warn("budget of {} frames exceeds the {} frames available for {}; using the whole corpus", budget_frames,
                   taken, lang);
      result.budget_exceeds_corpus = true;
    }
    result.per_language[lang] = taken;
  }
  const auto features = layer_features(encoder, layer, selected);
  const std::size_t d = encoder.config().d_model;
  std::vector<double> rows;
  for (std::size_t i = 0; i < features.size(); ++i) {
    rows.insert(rows.end(), features[i].data().begin(), features[i].data().begin() + static_cast<long>(keep[i] * d));
  }
  if (rows.empty()) throw ConfigError("extract_reference_features: no frames selected");
  const std::size_t n = rows.size() / d;
  result.frames = Tensor::from({n, d}, std::move(rows));
  return result;
}

void save_codebook(const std::filesystem::path& path, const Codebook& codebook) {
  auto out = io::open_for_write(path);
  io::write_pod(out, kCodebookMagic);
  io::write_pod(out, kCodebookVersion);
  io::write_pod<std::uint64_t>(out, codebook.clusters());
  io::write_pod<std::uint64_t>(out, codebook.dim());
  io::write_pod<std::uint64_t>(out, codebook.source_layer ? *codebook.source_layer : kRawLayer);
  io::write_pod<std::uint64_t>(out, codebook.seed);
  io::write_doubles(out, codebook.centroids.data().data(), codebook.centroids.numel());
  if (!out) throw IoError("failed writing " + path.string());

  nlohmann::json meta;
  meta["clusters"] = codebook.clusters();
  meta["dim"] = codebook.dim();
  meta["source_layer"] = codebook.source_layer ? nlohmann::json(*codebook.source_layer) : nlohmann::json(nullptr);
  meta["seed"] = codebook.seed;
  meta["inertia"] = codebook.inertia;
  meta["seeds"] = codebook.seeds;
  meta["seed_inertias"] = codebook.seed_inertias;
  auto side = io::open_for_write(path.string() + ".json");
  side << meta.dump(2) << '\n';
}

Codebook load_codebook(const std::filesystem::path& path) {
  auto in = io::open_for_read(path);
  if (io::read_pod<std::uint32_t>(in) != kCodebookMagic) throw IntegrityError(path.string() + ": bad codebook magic");
  if (io::read_pod<std::uint32_t>(in) != kCodebookVersion) throw IntegrityError(path.string() + ": unsupported version");
  const auto k = io::read_pod<std::uint64_t>(in);
  const auto d = io::read_pod<std::uint64_t>(in);
  const auto layer = io::read_pod<std::uint64_t>(in);
  Codebook cb;
  cb.seed = io::read_pod<std::uint64_t>(in);
  if (k == 0 || d == 0) throw IntegrityError(path.string() + ": empty codebook");
  cb.centroids = Tensor::from({k, d}, io::read_doubles(in, k * d));
  for (double v : cb.centroids.data()) {
    if (!std::isfinite(v)) throw IntegrityError(path.string() + ": non-finite centroid");
  }
  if (layer != kRawLayer) cb.source_layer = layer;
  const std::filesystem::path side = path.string() + ".json";
  if (std::filesystem::exists(side)) {
    const auto meta = nlohmann::json::parse(io::read_text(side));
    cb.inertia = meta.value("inertia", 0.0);
    cb.seeds = meta.value("seeds", std::vector<std::uint64_t>{});
    cb.seed_inertias = meta.value("seed_inertias", std::vector<double>{});
  }
  return cb;
}

}  // namespace milore
