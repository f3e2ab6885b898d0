#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "milore/milore_module.hpp"
#include "milore/tensor.hpp"

namespace milore {

struct MiLoreConfig {
  std::size_t experts = 2;
  std::size_t rank = 12;
  double scale = 1.0;

  bool operator==(const MiLoreConfig&) const = default;
};

struct MaskConfig {
  std::size_t span = 10;
  double start_prob = 0.08;
};

struct EncoderConfig {
  std::size_t layers = 2;
  std::size_t d_feat = 16;
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t d_ffn = 64;
  std::size_t codebook_size = 100;
  std::size_t max_frames = 128;  // rows of the learned positional table
  std::optional<MiLoreConfig> milore;
  MaskConfig mask;

  void validate() const;
};

// Padded batch of utterances. features is [batch x frames x d_feat]; rows at
// or beyond lengths[b] are padding.
struct FrameBatch {
  Tensor features;
  std::vector<std::size_t> lengths;
  std::vector<std::string> languages;

  std::size_t batch() const { return features.dim(0); }
  std::size_t frames() const { return features.dim(1); }
};

// Builds a zero-padded batch from per-utterance [T x d_feat] matrices.
FrameBatch make_batch(const std::vector<Tensor>& utterances, const std::vector<std::string>& languages = {});

// Masked frame indices per utterance.
struct MaskSet {
  std::vector<std::vector<std::size_t>> indices;

  std::size_t total() const;
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  static LayerNormParams create(std::size_t d);
};

struct AttentionParams {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
};

using FeedForwardProjection = std::variant<Linear, MiLoreModule>;

struct EncoderBlock {
  LayerNormParams attn_norm;
  AttentionParams attn;
  LayerNormParams ffn_norm;
  FeedForwardProjection ffn_up;
  FeedForwardProjection ffn_down;
};

// Routing weights seen by each block's MiLorE projections, [batch*frames x experts].
struct RoutingTrace {
  std::vector<Tensor> up;
  std::vector<Tensor> down;
};

// Pre-LayerNorm transformer encoder with an affine frontend, learned
// absolute positions and a learned mask embedding. Each block's two FFN
// projections are either dense or MiLorE modules wrapping the dense weights.
class Encoder {
 public:
  Encoder(EncoderConfig config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }

  // [B x T x d_feat] -> [B x T x d_model]
  Tensor frontend(const Tensor& raw) const;

  // Returns layers+1 tensors [B x T x d_model]: the embedding output followed by
  // each block's output. Frames listed in `masks` are replaced by the mask
  // embedding after the frontend.
  std::vector<Tensor> encode(const FrameBatch& batch, const MaskSet* masks = nullptr,
                             RoutingTrace* trace = nullptr) const;

  // Replaces both FFN projections of every block by MiLorE modules (B = 0,
  // W_r = 0) and freezes the backbone. Re-attaching the same shape is a no-op;
  // a different shape throws ConfigError.
  void attach_milore(const MiLoreConfig& cfg, std::uint64_t seed);
  bool has_milore() const { return config_.milore.has_value(); }
  void set_backbone_trainable(bool trainable);

  std::vector<NamedTensor> named_parameters() const;
  // Backbone = everything except LoRA experts and routers.
  std::vector<NamedTensor> backbone_parameters() const;
  std::vector<NamedTensor> adapter_parameters() const;

  // Copies values (and requires_grad flags) by name. Every parameter of this
  // encoder must be present with a matching shape.
  void load_parameters(const std::vector<NamedTensor>& source);
  Encoder clone() const;

  Linear& frontend_projection() { return frontend_; }
  const Linear& frontend_projection() const { return frontend_; }
  Tensor& positional() { return positional_; }
  Tensor& mask_embedding() { return mask_embedding_; }
  const Tensor& mask_embedding() const { return mask_embedding_; }
  std::vector<EncoderBlock>& blocks() { return blocks_; }
  const std::vector<EncoderBlock>& blocks() const { return blocks_; }

 private:
  Tensor block_forward(const EncoderBlock& block, const Tensor& x, std::size_t batch, std::size_t frames,
                       const std::vector<std::size_t>& lengths, RoutingTrace* trace) const;

  EncoderConfig config_;
  Linear frontend_;
  Tensor positional_;
  Tensor mask_embedding_;
  std::vector<EncoderBlock> blocks_;
};

// Deterministic span masking. Every frame starts a span with probability
// start_prob; spans have fixed length, clipped at the utterance end. An
// utterance that draws no start gets one uniformly placed span. Utterances
// shorter than two frames are left unmasked (listed in `skipped`).
MaskSet apply_span_mask(const FrameBatch& batch, const MaskConfig& cfg, std::uint64_t seed,
                        std::vector<std::size_t>* skipped = nullptr);
MaskSet apply_span_mask(const std::vector<std::size_t>& lengths, const MaskConfig& cfg, std::uint64_t seed,
                        std::vector<std::size_t>* skipped = nullptr);

}  // namespace milore
