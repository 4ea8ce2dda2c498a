#pragma once

#include <array>
#include <optional>
#include <string>

#include <torch/torch.h>

#include "promise/array3.hpp"
#include "promise/cnn_encoder.hpp"
#include "promise/vit3d.hpp"

namespace promise {

enum class UpsampleMode { trilinear, up_conv };

std::string to_string(UpsampleMode m);
UpsampleMode upsample_mode_from_string(const std::string &s);

struct DecoderConfig {
    int64_t refine_channels = 128;
    UpsampleMode upsample_mode = UpsampleMode::up_conv;

    void validate() const;
};

struct DecoderGeometry {
    int64_t embed_dim = 96;
    int64_t n_taps = 4;
    int64_t n_queries = 4;
    int64_t token_extent = 16; // model-input voxels per token along every axis
    std::optional<std::array<int64_t, 3>> cnn_channels; // unset: no CNN path
    FusionMode fusion = FusionMode::residual;
};

/// Upsampling by 2: transposed conv (k=2, s=2) in up_conv mode, parameter-free trilinear otherwise.
class Upsample2xImpl : public torch::nn::Module {
public:
    Upsample2xImpl(int64_t channels, UpsampleMode mode);
    torch::Tensor forward(const torch::Tensor &x);

    torch::nn::ConvTranspose3d deconv{nullptr};

private:
    UpsampleMode mode_;
};
TORCH_MODULE(Upsample2x);

class MaskDecoderImpl : public torch::nn::Module {
public:
    MaskDecoderImpl(DecoderConfig cfg, DecoderGeometry geom);

    /// pyramid: channels-last token grids; prompt_map: (B, D', H', W', n_queries);
    /// image: (B, 1, S, S, S). Returns logits (B, 1, S, S, S).
    torch::Tensor forward(const FeaturePyramid &pyramid, const CnnFeatureSet &cnn, const torch::Tensor &prompt_map,
                          const torch::Tensor &image);

    int64_t n_stages() const { return static_cast<int64_t>(stages->size()); }
    const DecoderConfig &config() const { return cfg_; }
    const DecoderGeometry &geometry() const { return geom_; }

    torch::nn::ModuleList tap_refine{nullptr}; // per tap: two conv blocks + transposed conv
    torch::nn::ModuleList stages{nullptr};     // per stage: upsample + conv block
    torch::nn::ModuleDict fusions{nullptr};    // keyed by stride
    ConvBlock final_block{nullptr};
    torch::nn::Conv3d head{nullptr};

private:
    int64_t channels_at(int64_t stride) const;

    DecoderConfig cfg_;
    DecoderGeometry geom_;
};
TORCH_MODULE(MaskDecoder);

/// sigmoid(logits) > threshold, strict. Accepts (S, S, S) or (1, 1, S, S, S).
MaskArray3 predict_mask(const torch::Tensor &logits, double threshold = 0.5);

} // namespace promise
