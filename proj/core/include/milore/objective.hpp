#pragma once

#include <cstddef>
#include <vector>

#include "milore/encoder.hpp"
#include "milore/rng.hpp"
#include "milore/tensor.hpp"

namespace milore {

// Linear map from a hidden state to logits over K cluster indices.
struct PredictionHead {
  Tensor projection;  // [K x d_model]

  static PredictionHead create(std::size_t classes, std::size_t d_model, Rng& rng);
  std::size_t classes() const { return projection.dim(0); }
  Tensor logits(const Tensor& hidden) const;
};

// Cluster index per frame, one vector per utterance.
using TargetSequence = std::vector<std::vector<int>>;

// -(1/|M|) * sum over masked frames t of log softmax(head * h_t)[z_t], with M
// pooled over the whole batch. Throws EmptyMaskError when no frame is masked.
Tensor masked_prediction_loss(const Tensor& hidden, const TargetSequence& targets, const MaskSet& masks,
                              const PredictionHead& head);

// A loss together with the number of masked frames it averages over.
struct SubsetLoss {
  Tensor loss;
  std::size_t masked_frames = 0;
};

SubsetLoss masked_prediction_subset(const Tensor& hidden, const TargetSequence& targets, const MaskSet& masks,
                                    const PredictionHead& head);

// Loss of the mixed new+replay stream expressed through its two parts: the
// frame-weighted mean of the per-part masked losses. Equals the loss of the
// pooled batch. An empty replay part returns the new-language loss unchanged.
Tensor joint_continual_loss(const SubsetLoss& new_part, const SubsetLoss& replay_part);

}  // namespace milore
