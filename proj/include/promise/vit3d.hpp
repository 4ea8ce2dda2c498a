#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace promise {

struct EncoderConfig {
    int64_t n_blocks = 4;
    int64_t embed_dim = 96;
    int64_t n_heads = 4;
    int64_t mlp_ratio = 4;
    int64_t spatial_patch = 16;
    int64_t depth_patch = 16;
    double adapter_ratio = 0.25;
    std::vector<int64_t> tap_blocks{1, 2, 3, 4}; // 1-based, must include n_blocks
    bool use_adapters = true;
    bool use_second_adapter = true;
    int64_t pos_grid = 8;      // side of the (pretrained) 2D absolute position grid
    int64_t depth_pos_len = 8; // native length of the trainable depth position table
    std::optional<std::string> pretrained_path;

    void validate() const;
    int64_t adapter_dim() const;

    /// CI-scale encoder: 4 blocks, width 96.
    static EncoderConfig tiny();
    /// ViT-B geometry of the SAM image encoder (1024 px input, 16 px patches).
    static EncoderConfig vit_b();
};

/// Tokens laid out on their 3D grid, channels last: (batch, D', H', W', C).
struct TokenGrid {
    torch::Tensor tokens;

    std::array<int64_t, 3> grid_shape() const { return {tokens.size(1), tokens.size(2), tokens.size(3)}; }
    int64_t channels() const { return tokens.size(4); }
};

/// Multi-level encoder outputs, shallowest first; back() is the deepest feature.
using FeaturePyramid = std::vector<TokenGrid>;

struct ParameterPartition {
    std::set<std::string> frozen;
    std::set<std::string> trainable;

    bool is_frozen(const std::string &name) const { return frozen.count(name) != 0; }
};

/// Residual bottleneck adapter with a depth-wise 3D convolution over the token grid.
/// The up-projection starts at zero, so a fresh adapter is the identity.
class AdapterImpl : public torch::nn::Module {
public:
    AdapterImpl(int64_t dim, int64_t hidden);
    torch::Tensor forward(const torch::Tensor &x); // (B, D, H, W, C)

    torch::nn::LayerNorm norm{nullptr};
    torch::nn::Linear down{nullptr};
    torch::nn::Conv3d dwconv{nullptr};
    torch::nn::Linear up{nullptr};
};
TORCH_MODULE(Adapter);

class AttentionImpl : public torch::nn::Module {
public:
    AttentionImpl(int64_t dim, int64_t n_heads);
    torch::Tensor forward(const torch::Tensor &x); // (B, N, C)

    torch::nn::Linear qkv{nullptr};
    torch::nn::Linear proj{nullptr};
    int64_t n_heads;
    /// When set, the shape of the last attention matrix (B, heads, N, N) is recorded.
    bool probe = false;
    std::vector<int64_t> last_attention_shape;
};
TORCH_MODULE(Attention);

class MlpImpl : public torch::nn::Module {
public:
    MlpImpl(int64_t dim, int64_t hidden);
    torch::Tensor forward(const torch::Tensor &x);

    torch::nn::Linear lin1{nullptr};
    torch::nn::Linear lin2{nullptr};
};
TORCH_MODULE(Mlp);

class BlockImpl : public torch::nn::Module {
public:
    explicit BlockImpl(const EncoderConfig &cfg);
    torch::Tensor forward(const torch::Tensor &x); // (B, D, H, W, C)

    Adapter adapter1{nullptr};
    torch::nn::LayerNorm norm1{nullptr};
    Attention attn{nullptr};
    torch::nn::LayerNorm norm2{nullptr};
    Mlp mlp{nullptr};
    Adapter adapter2{nullptr};
};
TORCH_MODULE(Block);

/// Factorised 3D embedding: frozen per-slice 2D patch embedding followed by a trainable
/// depth-wise strided projection along depth (initialised to uniform averaging), plus
/// the frozen 2D positional table (bilinearly resized) and a trainable depth table.
class PatchEmbed3dImpl : public torch::nn::Module {
public:
    explicit PatchEmbed3dImpl(const EncoderConfig &cfg);
    TokenGrid forward(const torch::Tensor &image); // (B, 1, S, S, S) or (B, S, S, S)

    torch::Tensor positional(int64_t depth, int64_t height, int64_t width) const;

    torch::nn::Conv2d spatial{nullptr};
    torch::nn::Conv1d depth_proj{nullptr};
    torch::Tensor pos_embed; // (1, G, G, C), frozen
    torch::Tensor depth_pos; // (1, L, C), trainable, zero-initialised

private:
    int64_t spatial_patch_;
    int64_t depth_patch_;
};
TORCH_MODULE(PatchEmbed3d);

class Vit3dEncoderImpl : public torch::nn::Module {
public:
    explicit Vit3dEncoderImpl(EncoderConfig cfg);

    TokenGrid embed(const torch::Tensor &image);
    FeaturePyramid forward(const torch::Tensor &image);

    /// Architecture contract: pretrained projections frozen, everything else trainable.
    ParameterPartition partition() const;
    /// Sets requires_grad according to partition().
    void apply_freezing();

    const EncoderConfig &config() const { return cfg_; }

    PatchEmbed3d patch_embed{nullptr};
    torch::nn::ModuleList blocks{nullptr};

private:
    EncoderConfig cfg_;
};
TORCH_MODULE(Vit3dEncoder);

/// True for parameter names (relative to the encoder) that carry frozen pretrained weights.
bool is_frozen_encoder_parameter(const std::string &name);

/// Copies every parameter whose name and shape match from `src` into `dst`.
int64_t copy_matching_parameters(torch::nn::Module &dst, const torch::nn::Module &src);

int64_t count_parameters(const torch::nn::Module &m);

} // namespace promise
