#pragma once
// Training objectives as standalone differentiable kernels. All losses are
// >= 0, mean-reduced over cells/steps, and clamp log arguments at 1e-12.

#include <vector>

#include "minidrive/tensor.hpp"

namespace md::losses {

constexpr double kLogClamp = 1e-12;

// Count of clamped log arguments since process start (observability hook).
long clamp_events();

// Multi-class focal loss over a probability grid: pred [C,H,W] softmaxed per
// cell, target per-cell class ids (row-major H*W), alpha/gamma per class.
Tensor focal_class(const Tensor& pred, const std::vector<int>& target_class,
                   const std::vector<double>& alpha, const std::vector<double>& gamma);

// Mean cross-entropy over a probability grid, same layout as focal_class.
Tensor cross_entropy_grid(const Tensor& pred, const std::vector<int>& target_class);

// Binary focal loss: pred [H,W] in (0,1), target binary grid of same shape.
Tensor binary_focal(const Tensor& pred, const Tensor& target, double alpha_t, double gamma);

// Teacher-forced sequence NLL from logits [T,V] and target ids.
Tensor sequence_nll(const Tensor& logits, const std::vector<int>& targets);

// (1/K) sum_k (|dx_k| + |dy_k|) between [K,2] waypoint tensors.
Tensor trajectory_l1(const Tensor& pred, const Tensor& ground_truth);

}  // namespace md::losses
