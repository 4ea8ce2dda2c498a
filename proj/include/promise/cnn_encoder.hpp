#pragma once

#include <array>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace promise {

enum class FusionMode { residual, concatenate };

std::string to_string(FusionMode m);
FusionMode fusion_mode_from_string(const std::string &s);

/// conv(k=3) -> instance norm -> leaky ReLU.
class ConvBlockImpl : public torch::nn::Module {
public:
    ConvBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride = 1);
    torch::Tensor forward(const torch::Tensor &x);

    torch::nn::Conv3d conv{nullptr};
    torch::nn::InstanceNorm3d norm{nullptr};
};
TORCH_MODULE(ConvBlock);

struct CnnLevel {
    torch::Tensor features; // (B, C, D, H, W)
    int64_t stride;         // relative to the model input
};

struct CnnFeatureSet {
    std::vector<CnnLevel> levels; // strides strictly increasing
    const CnnLevel *at_stride(int64_t stride) const;
};

/// Shallow three-stage encoder (two conv blocks per stage, stride-2 between stages).
class CnnEncoderImpl : public torch::nn::Module {
public:
    explicit CnnEncoderImpl(std::array<int64_t, 3> channels = {16, 32, 64});
    CnnFeatureSet forward(const torch::Tensor &image); // (B, 1, S, S, S)

    const std::array<int64_t, 3> &channels() const { return channels_; }

    torch::nn::ModuleList stages{nullptr};

private:
    std::array<int64_t, 3> channels_;
};
TORCH_MODULE(CnnEncoder);

/// Merges a CNN level into decoder features of the same spatial size.
/// residual: decoder + proj(cnn), proj is a bias-free 1x1 conv only when channel counts differ.
/// concatenate: 1x1 conv over [decoder, cnn] back to the decoder channel count.
class FusionImpl : public torch::nn::Module {
public:
    FusionImpl(int64_t cnn_channels, int64_t decoder_channels, FusionMode mode);
    torch::Tensor forward(const torch::Tensor &cnn, const torch::Tensor &decoder);

    FusionMode mode() const { return mode_; }

    torch::nn::Conv3d proj{nullptr};

private:
    FusionMode mode_;
};
TORCH_MODULE(Fusion);

} // namespace promise
