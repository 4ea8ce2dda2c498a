#pragma once

#include <torch/torch.h>

#include "promise/array3.hpp"

namespace promise {

struct LossWeights {
    double structural = 1.0;
    double boundary = 10.0;

    void validate() const;
};

struct BoundarySpec {
    int64_t kernel_size = 5; // odd, replicate padding

    void validate() const;
};

/// |M - avgpool_k(M)| with replicate padding. Accepts (D, H, W) or (B, C, D, H, W).
torch::Tensor boundary_map(const torch::Tensor &m, const BoundarySpec &spec = {});
FloatArray3 boundary_map(const FloatArray3 &m, const BoundarySpec &spec = {});

constexpr double kDiceSmooth = 1e-5;

torch::Tensor soft_dice_loss(const torch::Tensor &logits, const torch::Tensor &target);
torch::Tensor bce_loss(const torch::Tensor &logits, const torch::Tensor &target);
/// Soft Dice + mean binary cross-entropy.
torch::Tensor structural_loss(const torch::Tensor &logits, const torch::Tensor &target);

struct LossTerms {
    torch::Tensor total;
    torch::Tensor structural;
    torch::Tensor boundary; // MSE between boundary maps, before weighting
};

/// lambda1 * structural + lambda2 * MSE(B(sigmoid(logits)), B(target)).
/// With use_boundary = false the boundary term is reported but not added.
LossTerms total_loss(const torch::Tensor &logits, const torch::Tensor &target, const LossWeights &weights = {},
                     const BoundarySpec &spec = {}, bool use_boundary = true);

} // namespace promise
