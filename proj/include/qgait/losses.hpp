#pragma once

// Task losses, logit distillation and inter-class distance calibration.
//
// All distances are Euclidean on the concatenated part embeddings (B x p*dim).

#include <cstddef>
#include <vector>

#include "qgait/tensor.hpp"

namespace qgait {

/// B x p x dim (or B x D) -> B x (p*dim), differentiable.
Tensor flatten_rows(const Tensor& X);

/// B x D -> B x B Euclidean distances. The gradient of a zero distance is 0.
Tensor pairwise_distances(const Tensor& X);

/// Batch-all triplet loss, averaged over triplets with a positive hinge.
Tensor triplet_loss(const Tensor& X, const std::vector<int>& labels, double margin);

/// Mean over rows of -log softmax(O)[label]; O is B x p x C (or B x C).
Tensor softmax_ce(const Tensor& O, const std::vector<int>& labels);

/// KL(q(O_H / T) || q(O_L / T)) averaged over rows; O_H is a constant.
Tensor kd_kl(const Tensor& O_H, const Tensor& O_L, double temperature);

struct PairProbability {
  std::size_t r, s;
  double q;
};

/// Softmax of -d(X_r, X_s) over candidates s with a different label.
std::vector<PairProbability> idc_probabilities(const Tensor& X, const std::vector<int>& labels);

/// Sum over eligible (r, s) of q_H log(q_H / q_L); anchors without a
/// different-label candidate contribute nothing.
/// X_H is a constant; the gradient flows to X_L only.
Tensor idc_loss(const Tensor& X_H, const Tensor& X_L, const std::vector<int>& labels);

/// Population variance over every entry.
double logits_variance(const Tensor& O);

}  // namespace qgait
