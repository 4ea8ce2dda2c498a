#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "promise/array3.hpp"
#include "promise/vit3d.hpp"

namespace promise {

enum class PromptLabel : int64_t { background = 0, foreground = 1 };

struct PointPrompt {
    std::array<double, 3> position{0.0, 0.0, 0.0}; // (z, y, x), voxel units
    PromptLabel label = PromptLabel::foreground;

    bool operator==(const PointPrompt &) const = default;
};

/// Canonical prompt order: label, then z, y, x. Attention over prompts is order-free,
/// sorting makes the floating-point reduction order order-free as well.
bool canonical_less(const PointPrompt &a, const PointPrompt &b);

/// Training-time prompt simulation. A mask with foreground yields `n` foreground points
/// drawn from foreground voxels; otherwise `n` background points from background voxels.
/// Draws are without replacement when enough candidates exist.
std::vector<PointPrompt> simulate_prompts(const MaskArray3 &mask, int n, uint64_t seed);

struct PromptConfig {
    int64_t d_prompt = 256;
    int64_t n_queries = 4;
    int64_t n_heads = 8;
    int64_t n_train_points = 10;
};

struct PromptState {
    torch::Tensor global_queries;   // (n_queries, d)
    torch::Tensor point_embeddings; // (n_points, d)
    torch::Tensor output_queries;   // (n_queries, d)
};

/// Multi-head attention with separate query / key / value projections and an optional
/// key mask (true = attend).
class MultiHeadAttentionImpl : public torch::nn::Module {
public:
    MultiHeadAttentionImpl(int64_t dim, int64_t n_heads);
    torch::Tensor forward(const torch::Tensor &query, const torch::Tensor &key_value,
                          const std::optional<torch::Tensor> &key_mask = std::nullopt); // (N, d) inputs

    torch::nn::Linear q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};
    int64_t n_heads;
};
TORCH_MODULE(MultiHeadAttention);

class PromptEncoderImpl : public torch::nn::Module {
public:
    /// token_extent: model-input voxels covered by one token along (z, y, x).
    PromptEncoderImpl(int64_t embed_dim, PromptConfig cfg, std::array<int64_t, 3> token_extent);

    /// Image tokens projected to the prompt width: (B, D', H', W', d).
    torch::Tensor project(const TokenGrid &image_embedding);

    /// Trilinear sample of one projected grid (D', H', W', d) at model-input coordinates,
    /// plus the per-label embedding. Coordinates are clamped to the grid.
    torch::Tensor visual_sample(const torch::Tensor &projected, const std::vector<PointPrompt> &prompts);

    /// Self-attention over [queries ; points], then cross-attention from the queries to the
    /// image tokens. `attend` optionally masks individual points out of the self-attention.
    PromptState encode(const torch::Tensor &projected, const std::vector<PointPrompt> &prompts,
                       const std::optional<std::vector<bool>> &attend = std::nullopt);

    struct Output {
        torch::Tensor projected;          // (B, D', H', W', d)
        torch::Tensor prompt_map;         // (B, D', H', W', n_queries)
        std::vector<PromptState> states;
    };
    Output forward(const TokenGrid &image_embedding, const std::vector<std::vector<PointPrompt>> &prompts);

    /// Continuous token-grid coordinate of a model-input voxel coordinate along `axis`.
    double grid_coord(double model_coord, int axis) const;

    const PromptConfig &config() const { return cfg_; }

    torch::nn::Linear input_proj{nullptr};
    torch::nn::Embedding label_embed{nullptr};
    torch::Tensor global_queries;
    MultiHeadAttention self_attn{nullptr};
    torch::nn::LayerNorm norm1{nullptr};
    MultiHeadAttention cross_attn{nullptr};
    torch::nn::LayerNorm norm2{nullptr};

private:
    PromptConfig cfg_;
    std::array<int64_t, 3> token_extent_;
};
TORCH_MODULE(PromptEncoder);

/// Scaled dot product of every output query with every projected token:
/// (B, D', H', W', d) x (B, n_queries, d) -> (B, D', H', W', n_queries).
torch::Tensor prompt_to_map(const torch::Tensor &output_queries, const torch::Tensor &projected);

} // namespace promise
