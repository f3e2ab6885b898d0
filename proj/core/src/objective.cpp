#include "milore/objective.hpp"

#include <cmath>

#include "milore/errors.hpp"
#include "milore/ops.hpp"

namespace milore {

PredictionHead PredictionHead::create(std::size_t classes, std::size_t d_model, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_model));
  std::vector<double> w(classes * d_model);
  for (auto& v : w) v = uniform(rng, -bound, bound);
  return {Tensor::from({classes, d_model}, std::move(w), true)};
}

Tensor PredictionHead::logits(const Tensor& hidden) const { return matmul_nt(hidden, projection); }

SubsetLoss masked_prediction_subset(const Tensor& hidden, const TargetSequence& targets, const MaskSet& masks,
                                    const PredictionHead& head) {
  if (hidden.rank() != 3) throw ShapeError("masked_prediction_loss: expected [B x T x d], got " + to_string(hidden.shape()));
  const std::size_t b = hidden.dim(0), t = hidden.dim(1), d = hidden.dim(2);
  if (targets.size() != b || masks.indices.size() != b) {
    throw ShapeError("masked_prediction_loss: targets/masks do not match a batch of " + std::to_string(b));
  }
  std::vector<std::size_t> rows;
  std::vector<int> labels(b * t, 0);
  for (std::size_t i = 0; i < b; ++i) {
    for (auto f : masks.indices[i]) {
      if (f >= targets[i].size() || f >= t) {
        throw IndexError("masked_prediction_loss: masked frame " + std::to_string(f) + " has no target");
      }
      rows.push_back(i * t + f);
      labels[i * t + f] = targets[i][f];
    }
  }
  if (rows.empty()) throw EmptyMaskError("masked_prediction_loss: batch has no masked frames; resample the masks");
  // Only masked rows reach the head.
  Tensor selected = gather_rows(reshape(hidden, {b * t, d}), rows);
  std::vector<int> selected_labels(rows.size());
  std::vector<std::size_t> all(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    selected_labels[i] = labels[rows[i]];
    all[i] = i;
  }
  return {cross_entropy_with_logits(head.logits(selected), selected_labels, all), rows.size()};
}

Tensor masked_prediction_loss(const Tensor& hidden, const TargetSequence& targets, const MaskSet& masks,
                              const PredictionHead& head) {
  return masked_prediction_subset(hidden, targets, masks, head).loss;
}

Tensor joint_continual_loss(const SubsetLoss& new_part, const SubsetLoss& replay_part) {
  if (replay_part.masked_frames == 0) {
    if (new_part.masked_frames == 0) throw EmptyMaskError("joint_continual_loss: no masked frames in either part");
    return new_part.loss;
  }
  if (new_part.masked_frames == 0) return replay_part.loss;
  const double total = static_cast<double>(new_part.masked_frames + replay_part.masked_frames);
  return add(scale(new_part.loss, static_cast<double>(new_part.masked_frames) / total),
             scale(replay_part.loss, static_cast<double>(replay_part.masked_frames) / total));
}

}  // namespace milore
