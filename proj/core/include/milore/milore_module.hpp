#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "milore/rng.hpp"
#include "milore/tensor.hpp"

namespace milore {

// Dense affine map, weight stored [out x in].
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear create(std::size_t in, std::size_t out, Rng& rng);
  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }
  Tensor forward(const Tensor& x) const;
};

// Low-rank delta B*A. `down` is A [rank x d_in], `up` is B [d_out x rank].
struct LoraExpert {
  Tensor down;
  Tensor up;

  // A ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), B = 0.
  static LoraExpert create(std::size_t d_in, std::size_t d_out, std::size_t rank, Rng& rng);
  std::size_t rank() const { return down.dim(0); }
};

// (B*A)*h evaluated as B*(A*h); the d_out x d_in product is never formed.
Tensor expert_apply(const LoraExpert& expert, const Tensor& h);

struct SoftRouter {
  Tensor weight;  // [experts x d_in]

  static SoftRouter create(std::size_t d_in, std::size_t experts);
  std::size_t experts() const { return weight.dim(0); }
};

// Per-frame routing weights softmax(W_r h_t), shape [frames x experts].
Tensor route(const SoftRouter& router, const Tensor& h);

struct ParameterPartition {
  std::vector<NamedTensor> frozen;
  std::vector<NamedTensor> trainable;
};

// Frozen projection plus N LoRA experts mixed by a soft router:
//   o_t = W0 h_t + b0 + scale * sum_i p_i(t) B_i A_i h_t,  p(t) = softmax(W_r h_t)
class MiLoreModule {
 public:
  // Takes ownership of `base` (sharing its storage) and freezes it.
  // Throws ConfigError when experts == 0 or rank exceeds min(d_in, d_out).
  static MiLoreModule wrap(Linear base, std::size_t experts, std::size_t rank, Rng& rng, double scale = 1.0);
  // Assembles a module from existing tensors, e.g. after loading a checkpoint.
  MiLoreModule(Linear base, std::vector<LoraExpert> experts, SoftRouter router, double scale = 1.0);

  Tensor forward(const Tensor& h) const;
  // Same as forward() but also returns the routing weights used.
  Tensor forward(const Tensor& h, Tensor* routing) const;
  // Mixes experts with externally supplied weights [frames x experts].
  Tensor forward_with_routing(const Tensor& h, const Tensor& routing) const;
  Tensor route(const Tensor& h) const;

  const Linear& base() const { return base_; }
  const std::vector<LoraExpert>& experts() const { return experts_; }
  std::vector<LoraExpert>& experts() { return experts_; }
  const SoftRouter& router() const { return router_; }
  SoftRouter& router() { return router_; }
  double scale() const { return scale_; }
  std::size_t rank() const { return experts_.front().rank(); }
  std::size_t in_features() const { return base_.in_features(); }
  std::size_t out_features() const { return base_.out_features(); }

  // Names are relative; callers prefix the module path.
  ParameterPartition parameter_partition() const;

 private:
  Linear base_;
  std::vector<LoraExpert> experts_;
  SoftRouter router_;
  double scale_ = 1.0;
};

std::size_t count_elements(const std::vector<NamedTensor>& tensors);

}  // namespace milore
