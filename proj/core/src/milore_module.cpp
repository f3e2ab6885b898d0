#include "milore/milore_module.hpp"

#include <algorithm>
#include <cmath>

#include <spdlog/spdlog.h>

#include "milore/errors.hpp"
#include "milore/ops.hpp"

namespace milore {

Linear Linear::create(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<double> w(out * in);
  for (auto& v : w) v = uniform(rng, -bound, bound);
  return {Tensor::from({out, in}, std::move(w), true), Tensor::zeros({out}, true)};
}

Tensor Linear::forward(const Tensor& x) const { return linear(x, weight, bias); }

LoraExpert LoraExpert::create(std::size_t d_in, std::size_t d_out, std::size_t rank, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  std::vector<double> a(rank * d_in);
  for (auto& v : a) v = uniform(rng, -bound, bound);
  return {Tensor::from({rank, d_in}, std::move(a), true), Tensor::zeros({d_out, rank}, true)};
}

Tensor expert_apply(const LoraExpert& expert, const Tensor& h) {
  if (h.rank() != 2 || h.dim(1) != expert.down.dim(1)) {
    throw ShapeError("expert_apply: input " + to_string(h.shape()) + " does not match A " +
                     to_string(expert.down.shape()));
  }
  return matmul_nt(matmul_nt(h, expert.down), expert.up);
}

SoftRouter SoftRouter::create(std::size_t d_in, std::size_t experts) {
  return {Tensor::zeros({experts, d_in}, true)};
}

Tensor route(const SoftRouter& router, const Tensor& h) {
  if (h.rank() != 2 || h.dim(1) != router.weight.dim(1)) {
    throw ShapeError("route: input " + to_string(h.shape()) + " does not match router " +
                     to_string(router.weight.shape()));
  }
  return softmax(matmul_nt(h, router.weight), 1);
}

MiLoreModule MiLoreModule::wrap(Linear base, std::size_t experts, std::size_t rank, Rng& rng, double scale) {
  if (experts == 0) throw ConfigError("a MiLorE module needs at least one expert");
  const std::size_t d_in = base.in_features(), d_out = base.out_features();
  if (rank == 0 || rank > std::min(d_in, d_out)) {
    throw ConfigError("LoRA rank " + std::to_string(rank) + " must lie in [1, min(" + std::to_string(d_in) + ", " +
                      std::to_string(d_out) + ")]");
  }
  if (4 * rank > std::min(d_in, d_out)) {
    spdlog::warn("LoRA rank {} is not small relative to min({}, {})", rank, d_in, d_out);
  }
  base.weight.set_requires_grad(false);
  base.bias.set_requires_grad(false);
  std::vector<LoraExpert> list;
  list.reserve(experts);
  for (std::size_t i = 0; i < experts; ++i) list.push_back(LoraExpert::create(d_in, d_out, rank, rng));
  return MiLoreModule(std::move(base), std::move(list), SoftRouter::create(d_in, experts), scale);
}

MiLoreModule::MiLoreModule(Linear base, std::vector<LoraExpert> experts, SoftRouter router, double scale)
    : base_(std::move(base)), experts_(std::move(experts)), router_(std::move(router)), scale_(scale) {
  if (experts_.empty()) throw ConfigError("a MiLorE module needs at least one expert");
  if (router_.experts() != experts_.size()) throw ConfigError("router width differs from expert count");
  for (const auto& e : experts_) {
    if (e.down.dim(1) != in_features() || e.up.dim(0) != out_features() || e.up.dim(1) != e.rank()) {
      throw ShapeError("LoRA expert shapes A " + to_string(e.down.shape()) + ", B " + to_string(e.up.shape()) +
                       " do not fit base " + to_string(base_.weight.shape()));
    }
  }
}

Tensor MiLoreModule::route(const Tensor& h) const { return milore::route(router_, h); }

Tensor MiLoreModule::forward(const Tensor& h) const { return forward(h, nullptr); }

Tensor MiLoreModule::forward(const Tensor& h, Tensor* routing) const {
  Tensor p = route(h);
  if (routing) *routing = p;
  return forward_with_routing(h, p);
}

Tensor MiLoreModule::forward_with_routing(const Tensor& h, const Tensor& routing) const {
  if (h.rank() != 2 || h.dim(1) != in_features()) {
    throw ShapeError("milore_forward: input " + to_string(h.shape()) + " does not match W0 " +
                     to_string(base_.weight.shape()));
  }
  if (routing.rank() != 2 || routing.dim(0) != h.dim(0) || routing.dim(1) != experts_.size()) {
    throw ShapeError("milore_forward: routing " + to_string(routing.shape()) + " does not fit " +
                     std::to_string(h.dim(0)) + " frames and " + std::to_string(experts_.size()) + " experts");
  }
  Tensor out = base_.forward(h);
  Tensor mixed;
  for (std::size_t i = 0; i < experts_.size(); ++i) {
    Tensor term = scale_rows(expert_apply(experts_[i], h), routing, i);
    mixed = mixed.defined() ? add(mixed, term) : term;
  }
  if (scale_ != 1.0) mixed = milore::scale(mixed, scale_);
  return add(out, mixed);
}

ParameterPartition MiLoreModule::parameter_partition() const {
  ParameterPartition part;
  part.frozen.push_back({"base.weight", base_.weight});
  part.frozen.push_back({"base.bias", base_.bias});
  for (std::size_t i = 0; i < experts_.size(); ++i) {
    const std::string prefix = "experts." + std::to_string(i) + ".";
    part.trainable.push_back({prefix + "lora_a", experts_[i].down});
    part.trainable.push_back({prefix + "lora_b", experts_[i].up});
  }
  part.trainable.push_back({"router.weight", router_.weight});
  return part;
}

std::size_t count_elements(const std::vector<NamedTensor>& tensors) {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.tensor.numel();
  return n;
}

}  // namespace milore
