#include "promise/cnn_encoder.hpp"

#include <stdexcept>

namespace promise {

namespace F = torch::nn::functional;

std::string to_string(FusionMode m) { return m == FusionMode::residual ? "residual" : "concatenate"; }

FusionMode fusion_mode_from_string(const std::string &s) {
    if (s == "residual" || s == "R") return FusionMode::residual;
    if (s == "concatenate" || s == "C") return FusionMode::concatenate;
    throw std::invalid_argument("unknown fusion mode '" + s + "'");
}

ConvBlockImpl::ConvBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride) {
    conv = register_module("conv", torch::nn::Conv3d(
                                       torch::nn::Conv3dOptions(in_channels, out_channels, 3).stride(stride).padding(1)));
    norm = register_module("norm", torch::nn::InstanceNorm3d(torch::nn::InstanceNorm3dOptions(out_channels).affine(true)));
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor &x) {
    return F::leaky_relu(norm(conv(x)), F::LeakyReLUFuncOptions().negative_slope(0.01));
}

const CnnLevel *CnnFeatureSet::at_stride(int64_t stride) const {
    for (const auto &l : levels)
        if (l.stride == stride) return &l;
    return nullptr;
}

CnnEncoderImpl::CnnEncoderImpl(std::array<int64_t, 3> channels) : channels_(channels) {
    stages = register_module("stages", torch::nn::ModuleList());
    int64_t in = 1;
    for (std::size_t s = 0; s < channels.size(); ++s) {
        torch::nn::Sequential stage(ConvBlock(in, channels[s], s == 0 ? 1 : 2), ConvBlock(channels[s], channels[s]));
        stages->push_back(stage);
        in = channels[s];
    }
}

CnnFeatureSet CnnEncoderImpl::forward(const torch::Tensor &image) {
    auto x = image.dim() == 5 ? image : image.unsqueeze(1);
    for (int d = 2; d < 5; ++d)
        if (x.size(d) < 4) throw std::invalid_argument("cnn_encode: input must be at least 4 voxels per axis");
    CnnFeatureSet out;
    int64_t stride = 1;
    for (std::size_t s = 0; s < stages->size(); ++s) {
        x = stages[s]->as<torch::nn::Sequential>()->forward(x);
        out.levels.push_back({x, stride});
        stride *= 2;
    }
    return out;
}

FusionImpl::FusionImpl(int64_t cnn_channels, int64_t decoder_channels, FusionMode mode) : mode_(mode) {
    if (mode == FusionMode::concatenate) {
        proj = register_module("proj", torch::nn::Conv3d(torch::nn::Conv3dOptions(cnn_channels + decoder_channels,
                                                                                   decoder_channels, 1)));
    } else if (cnn_channels != decoder_channels) {
        proj = register_module("proj", torch::nn::Conv3d(
                                           torch::nn::Conv3dOptions(cnn_channels, decoder_channels, 1).bias(false)));
    }
}

torch::Tensor FusionImpl::forward(const torch::Tensor &cnn, const torch::Tensor &decoder) {
    if (cnn.sizes().slice(2) != decoder.sizes().slice(2))
        throw std::invalid_argument("fuse: spatial shape mismatch between CNN level and decoder features");
    if (mode_ == FusionMode::concatenate) return proj(torch::cat({decoder, cnn}, 1));
    return decoder + (proj ? proj(cnn) : cnn);
}

} // namespace promise
