#include "milore/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <spdlog/spdlog.h>

#include "milore/errors.hpp"
#include "milore/ops.hpp"
#include "milore/rng.hpp"

namespace milore {

void EncoderConfig::validate() const {
  if (d_feat == 0 || d_model == 0 || d_ffn == 0 || heads == 0 || max_frames == 0) {
    throw ConfigError("encoder extents must be positive");
  }
  if (d_model % heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (codebook_size == 0) throw ConfigError("codebook size must be at least 1");
  if (mask.span == 0) throw ConfigError("mask span must be at least 1");
  if (!(mask.start_prob > 0.0 && mask.start_prob < 1.0)) throw ConfigError("mask start probability must lie in (0, 1)");
  if (milore) {
    if (milore->experts == 0) throw ConfigError("a MiLorE module needs at least one expert");
    const std::size_t limit = std::min(d_model, d_ffn);
    if (milore->rank == 0 || milore->rank > limit) {
      throw ConfigError("LoRA rank " + std::to_string(milore->rank) + " must lie in [1, " + std::to_string(limit) + "]");
    }
  }
}

FrameBatch make_batch(const std::vector<Tensor>& utterances, const std::vector<std::string>& languages) {
  if (utterances.empty()) throw ShapeError("make_batch: no utterances");
  const std::size_t d = utterances.front().dim(1);
  std::size_t frames = 0;
  for (const auto& u : utterances) {
    if (u.rank() != 2 || u.dim(1) != d) throw ShapeError("make_batch: utterance " + to_string(u.shape()) + " has wrong width");
    frames = std::max(frames, u.dim(0));
  }
  std::vector<double> data(utterances.size() * frames * d, 0.0);
  FrameBatch batch;
  for (std::size_t b = 0; b < utterances.size(); ++b) {
    const auto src = utterances[b].data();
    std::copy(src.begin(), src.end(), data.begin() + static_cast<long>(b * frames * d));
    batch.lengths.push_back(utterances[b].dim(0));
  }
  batch.features = Tensor::from({utterances.size(), frames, d}, std::move(data));
  batch.languages = languages;
  if (batch.languages.empty()) batch.languages.assign(utterances.size(), "");
  return batch;
}

std::size_t MaskSet::total() const {
  std::size_t n = 0;
  for (const auto& m : indices) n += m.size();
  return n;
}

LayerNormParams LayerNormParams::create(std::size_t d) {
  return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
}

namespace {

Tensor project(const FeedForwardProjection& proj, const Tensor& x, std::vector<Tensor>* routes) {
  return std::visit(
      [&](const auto& p) -> Tensor {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, MiLoreModule>) {
          Tensor routing;
          Tensor out = p.forward(x, &routing);
          if (routes) routes->push_back(routing);
          return out;
        } else {
          return p.forward(x);
        }
      },
      proj);
}

const Linear& base_of(const FeedForwardProjection& proj) {
  if (const auto* m = std::get_if<MiLoreModule>(&proj)) return m->base();
  return std::get<Linear>(proj);
}

void append_linear(std::vector<NamedTensor>& out, const std::string& prefix, const Linear& l) {
  out.push_back({prefix + ".weight", l.weight});
  out.push_back({prefix + ".bias", l.bias});
}

void append_adapters(std::vector<NamedTensor>& out, const std::string& prefix, const FeedForwardProjection& proj) {
  const auto* m = std::get_if<MiLoreModule>(&proj);
  if (!m) return;
  for (std::size_t i = 0; i < m->experts().size(); ++i) {
    const std::string p = prefix + ".experts." + std::to_string(i);
    out.push_back({p + ".lora_a", m->experts()[i].down});
    out.push_back({p + ".lora_b", m->experts()[i].up});
  }
  out.push_back({prefix + ".router.weight", m->router().weight});
}

}  // namespace

Encoder::Encoder(EncoderConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const auto milore_cfg = config_.milore;
  config_.milore.reset();
  Rng rng(derive_seed(seed, "init"));
  const std::size_t d = config_.d_model;
  frontend_ = Linear::create(config_.d_feat, d, rng);
  // Sinusoidal starting point; the table is trained like any other parameter.
  std::vector<double> pos(config_.max_frames * d);
  for (std::size_t t = 0; t < config_.max_frames; ++t) {
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      pos[t * d + i] = i % 2 == 0 ? std::sin(static_cast<double>(t) * rate) : std::cos(static_cast<double>(t) * rate);
    }
  }
  positional_ = Tensor::from({config_.max_frames, d}, std::move(pos), true);
  std::vector<double> emb(d);
  for (auto& v : emb) v = uniform(rng, 0.0, 1.0);
  mask_embedding_ = Tensor::from({d}, std::move(emb), true);
  blocks_.reserve(config_.layers);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    EncoderBlock block{LayerNormParams::create(d),
                       {Linear::create(d, d, rng), Linear::create(d, d, rng), Linear::create(d, d, rng),
                        Linear::create(d, d, rng)},
                       LayerNormParams::create(d),
                       Linear::create(d, config_.d_ffn, rng),
                       Linear::create(config_.d_ffn, d, rng)};
    blocks_.push_back(std::move(block));
  }
  if (milore_cfg) attach_milore(*milore_cfg, derive_seed(seed, "milore"));
}

Tensor Encoder::frontend(const Tensor& raw) const {
  if (raw.rank() != 3 || raw.dim(2) != config_.d_feat) {
    throw ShapeError("frontend: expected [B x T x " + std::to_string(config_.d_feat) + "], got " + to_string(raw.shape()));
  }
  const std::size_t b = raw.dim(0), t = raw.dim(1);
  Tensor flat = frontend_.forward(reshape(raw, {b * t, config_.d_feat}));
  return reshape(flat, {b, t, config_.d_model});
}

Tensor Encoder::block_forward(const EncoderBlock& block, const Tensor& x, std::size_t batch, std::size_t frames,
                              const std::vector<std::size_t>& lengths, RoutingTrace* trace) const {
  Tensor a = layer_norm(x, block.attn_norm.gamma, block.attn_norm.beta);
  Tensor att = self_attention(block.attn.query.forward(a), block.attn.key.forward(a), block.attn.value.forward(a), batch,
                              frames, config_.heads, lengths);
  Tensor h = add(x, block.attn.output.forward(att));
  Tensor f = layer_norm(h, block.ffn_norm.gamma, block.ffn_norm.beta);
  Tensor u = gelu(project(block.ffn_up, f, trace ? &trace->up : nullptr));
  return add(h, project(block.ffn_down, u, trace ? &trace->down : nullptr));
}

std::vector<Tensor> Encoder::encode(const FrameBatch& batch, const MaskSet* masks, RoutingTrace* trace) const {
  const std::size_t b = batch.batch(), t = batch.frames(), d = config_.d_model;
  if (batch.lengths.size() != b) throw ShapeError("encode: one length per utterance required");
  if (t > config_.max_frames) {
    throw ShapeError("encode: " + std::to_string(t) + " frames exceed the positional table of " +
                     std::to_string(config_.max_frames));
  }
  Tensor x = reshape(frontend(batch.features), {b * t, d});
  if (masks) {
    if (masks->indices.size() != b) throw ShapeError("encode: mask set does not match batch size");
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < b; ++i) {
      for (auto f : masks->indices[i]) {
        if (f >= batch.lengths[i]) throw IndexError("encode: masked frame beyond utterance length");
        rows.push_back(i * t + f);
      }
    }
    if (!rows.empty()) x = replace_rows(x, rows, mask_embedding_);
  }
  x = add_periodic_rows(x, positional_, t);
  std::vector<Tensor> states;
  states.reserve(blocks_.size() + 1);
  states.push_back(reshape(x, {b, t, d}));
  for (const auto& block : blocks_) {
    x = block_forward(block, x, b, t, batch.lengths, trace);
    states.push_back(reshape(x, {b, t, d}));
  }
  return states;
}

void Encoder::attach_milore(const MiLoreConfig& cfg, std::uint64_t seed) {
  if (config_.milore) {
    if (*config_.milore == cfg) return;
    throw ConfigError("encoder already carries MiLorE modules with " + std::to_string(config_.milore->experts) +
                      " experts of rank " + std::to_string(config_.milore->rank) + "; requested " +
                      std::to_string(cfg.experts) + " of rank " + std::to_string(cfg.rank));
  }
  EncoderConfig next = config_;
  next.milore = cfg;
  next.validate();
  Rng rng(seed);
  for (auto& block : blocks_) {
    block.ffn_up = MiLoreModule::wrap(std::get<Linear>(block.ffn_up), cfg.experts, cfg.rank, rng, cfg.scale);
    block.ffn_down = MiLoreModule::wrap(std::get<Linear>(block.ffn_down), cfg.experts, cfg.rank, rng, cfg.scale);
  }
  config_ = std::move(next);
  set_backbone_trainable(false);
}

void Encoder::set_backbone_trainable(bool trainable) {
  for (auto& p : backbone_parameters()) p.tensor.set_requires_grad(trainable);
}

std::vector<NamedTensor> Encoder::backbone_parameters() const {
  std::vector<NamedTensor> out;
  append_linear(out, "frontend", frontend_);
  out.push_back({"positional", positional_});
  out.push_back({"mask_embedding", mask_embedding_});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& blk = blocks_[l];
    const std::string p = "blocks." + std::to_string(l);
    out.push_back({p + ".attn_norm.gamma", blk.attn_norm.gamma});
    out.push_back({p + ".attn_norm.beta", blk.attn_norm.beta});
    append_linear(out, p + ".attn.query", blk.attn.query);
    append_linear(out, p + ".attn.key", blk.attn.key);
    append_linear(out, p + ".attn.value", blk.attn.value);
    append_linear(out, p + ".attn.output", blk.attn.output);
    out.push_back({p + ".ffn_norm.gamma", blk.ffn_norm.gamma});
    out.push_back({p + ".ffn_norm.beta", blk.ffn_norm.beta});
    append_linear(out, p + ".ffn.up", base_of(blk.ffn_up));
    append_linear(out, p + ".ffn.down", base_of(blk.ffn_down));
  }
  return out;
}

std::vector<NamedTensor> Encoder::adapter_parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const std::string p = "blocks." + std::to_string(l);
    append_adapters(out, p + ".ffn.up", blocks_[l].ffn_up);
    append_adapters(out, p + ".ffn.down", blocks_[l].ffn_down);
  }
  return out;
}

std::vector<NamedTensor> Encoder::named_parameters() const {
  auto out = backbone_parameters();
  auto extra = adapter_parameters();
  out.insert(out.end(), extra.begin(), extra.end());
  return out;
}

void Encoder::load_parameters(const std::vector<NamedTensor>& source) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& nt : source) by_name[nt.name] = &nt.tensor;
  for (auto& nt : named_parameters()) {
    auto it = by_name.find(nt.name);
    if (it == by_name.end()) throw IntegrityError("missing parameter " + nt.name);
    const Tensor& src = *it->second;
    if (src.shape() != nt.tensor.shape()) {
      throw ShapeError("parameter " + nt.name + " has shape " + to_string(src.shape()) + ", expected " +
                       to_string(nt.tensor.shape()));
    }
    auto dst = nt.tensor.mutable_data();
    std::copy(src.data().begin(), src.data().end(), dst.begin());
    nt.tensor.set_requires_grad(src.requires_grad());
  }
}

Encoder Encoder::clone() const {
  EncoderConfig base_cfg = config_;
  base_cfg.milore.reset();
  Encoder copy(base_cfg, 0);
  if (config_.milore) {
    Rng rng(0);
    for (auto& block : copy.blocks_) {
      block.ffn_up = MiLoreModule::wrap(std::get<Linear>(block.ffn_up), config_.milore->experts, config_.milore->rank,
                                        rng, config_.milore->scale);
      block.ffn_down = MiLoreModule::wrap(std::get<Linear>(block.ffn_down), config_.milore->experts,
                                          config_.milore->rank, rng, config_.milore->scale);
    }
    copy.config_.milore = config_.milore;
  }
  copy.load_parameters(named_parameters());
  return copy;
}

MaskSet apply_span_mask(const FrameBatch& batch, const MaskConfig& cfg, std::uint64_t seed,
                        std::vector<std::size_t>* skipped) {
  return apply_span_mask(batch.lengths, cfg, seed, skipped);
}

MaskSet apply_span_mask(const std::vector<std::size_t>& lengths, const MaskConfig& cfg, std::uint64_t seed,
                        std::vector<std::size_t>* skipped) {
  if (cfg.span == 0) throw ConfigError("mask span must be at least 1");
  if (!(cfg.start_prob > 0.0 && cfg.start_prob < 1.0)) throw ConfigError("mask start probability must lie in (0, 1)");
  MaskSet out;
  out.indices.resize(lengths.size());
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    const std::size_t len = lengths[b];
    if (len < 2) {
      spdlog::warn("utterance {} has {} frame(s); skipped by span masking", b, len);
      if (skipped) skipped->push_back(b);
      continue;
    }
    Rng rng(derive_seed(seed, b));
    std::vector<char> hit(len, 0);
    bool any = false;
    for (std::size_t t = 0; t < len; ++t) {
      if (uniform(rng, 0.0, 1.0) >= cfg.start_prob) continue;
      any = true;
      for (std::size_t j = t; j < std::min(len, t + cfg.span); ++j) hit[j] = 1;
    }
    if (!any) {
      const std::size_t t = uniform_index(rng, len);
      for (std::size_t j = t; j < std::min(len, t + cfg.span); ++j) hit[j] = 1;
    }
    for (std::size_t t = 0; t < len; ++t) {
      if (hit[t]) out.indices[b].push_back(t);
    }
  }
  return out;
}

}  // namespace milore
