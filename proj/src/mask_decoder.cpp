#include "promise/mask_decoder.hpp"

#include <stdexcept>

namespace promise {

namespace F = torch::nn::functional;

std::string to_string(UpsampleMode m) { return m == UpsampleMode::up_conv ? "up_conv" : "trilinear"; }

UpsampleMode upsample_mode_from_string(const std::string &s) {
    if (s == "up_conv") return UpsampleMode::up_conv;
    if (s == "trilinear") return UpsampleMode::trilinear;
    throw std::invalid_argument("unknown upsample mode '" + s + "'");
}

void DecoderConfig::validate() const {
    if (refine_channels <= 0) throw std::invalid_argument("decoder.refine_channels must be > 0");
}

Upsample2xImpl::Upsample2xImpl(int64_t channels, UpsampleMode mode) : mode_(mode) {
    if (mode == UpsampleMode::up_conv)
        deconv = register_module("deconv", torch::nn::ConvTranspose3d(
                                               torch::nn::ConvTranspose3dOptions(channels, channels, 2).stride(2)));
}

torch::Tensor Upsample2xImpl::forward(const torch::Tensor &x) {
    if (deconv) return deconv(x);
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .scale_factor(std::vector<double>{2.0, 2.0, 2.0})
                                 .mode(torch::kTrilinear)
                                 .align_corners(false));
}

namespace {

bool is_power_of_two(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

} // namespace

MaskDecoderImpl::MaskDecoderImpl(DecoderConfig cfg, DecoderGeometry geom) : cfg_(cfg), geom_(geom) {
    cfg_.validate();
    if (geom.n_taps < 1) throw std::invalid_argument("decoder: at least one tap is required");
    if (!is_power_of_two(geom.token_extent) || geom.token_extent < 2)
        throw std::invalid_argument("decoder: token extent must be a power of two >= 2");
    const auto r = cfg.refine_channels;

    tap_refine = register_module("tap_refine", torch::nn::ModuleList());
    for (int64_t i = 0; i < geom.n_taps; ++i) {
        const auto in = geom.embed_dim + (i == geom.n_taps - 1 ? geom.n_queries : 0);
        tap_refine->push_back(torch::nn::Sequential(
            ConvBlock(in, r), ConvBlock(r, r),
            torch::nn::ConvTranspose3d(torch::nn::ConvTranspose3dOptions(r, r, 2).stride(2))));
    }

    fusions = register_module("fusions", torch::nn::ModuleDict());
    stages = register_module("stages", torch::nn::ModuleList());
    auto add_fusion = [&](int64_t stride, int64_t dec_ch) {
        if (!geom_.cnn_channels) return;
        int64_t s = 1;
        for (auto c : *geom_.cnn_channels) {
            if (s == stride) fusions->update({{std::to_string(stride), Fusion(c, dec_ch, geom_.fusion).ptr()}});
            s *= 2;
        }
    };

    int64_t stride = geom.token_extent / 2;
    int64_t ch = r;
    add_fusion(stride, ch);
    while (stride > 1) {
        stride /= 2;
        const auto out = channels_at(stride);
        stages->push_back(torch::nn::Sequential(Upsample2x(ch, cfg.upsample_mode), ConvBlock(ch, out)));
        add_fusion(stride, out);
        ch = out;
    }
    final_block = register_module("final_block", ConvBlock(ch + 1, 16));
    head = register_module("head", torch::nn::Conv3d(torch::nn::Conv3dOptions(16, 1, 1)));
}

int64_t MaskDecoderImpl::channels_at(int64_t stride) const {
    if (geom_.cnn_channels) {
        int64_t s = 1;
        for (auto c : *geom_.cnn_channels) {
            if (s == stride) return c;
            s *= 2;
        }
    }
    return cfg_.refine_channels;
}

torch::Tensor MaskDecoderImpl::forward(const FeaturePyramid &pyramid, const CnnFeatureSet &cnn,
                                       const torch::Tensor &prompt_map, const torch::Tensor &image) {
    if (static_cast<int64_t>(pyramid.size()) != geom_.n_taps)
        throw std::invalid_argument("decode: expected " + std::to_string(geom_.n_taps) + " taps, got " +
                                    std::to_string(pyramid.size()));
    const auto grid = pyramid.back().grid_shape();
    for (std::size_t i = 0; i < pyramid.size(); ++i) {
        if (pyramid[i].grid_shape() != grid)
            throw std::invalid_argument("decode: tap " + std::to_string(i) + " grid differs from the deepest tap");
        if (pyramid[i].channels() != geom_.embed_dim)
            throw std::invalid_argument("decode: tap " + std::to_string(i) + " has the wrong channel count");
    }
    if (prompt_map.dim() != 5 || prompt_map.size(1) != grid[0] || prompt_map.size(2) != grid[1] ||
        prompt_map.size(3) != grid[2] || prompt_map.size(4) != geom_.n_queries)
        throw std::invalid_argument("decode: prompt map does not match the token grid");
    auto img = image.dim() == 5 ? image : image.unsqueeze(1);
    for (int a = 0; a < 3; ++a)
        if (img.size(a + 2) != grid[static_cast<std::size_t>(a)] * geom_.token_extent)
            throw std::invalid_argument("decode: original input does not match the token grid resolution");

    torch::Tensor x;
    for (std::size_t i = 0; i < pyramid.size(); ++i) {
        auto t = pyramid[i].tokens.permute({0, 4, 1, 2, 3});
        if (i + 1 == pyramid.size()) t = torch::cat({t, prompt_map.permute({0, 4, 1, 2, 3})}, 1);
        auto refined = tap_refine[i]->as<torch::nn::Sequential>()->forward(t.contiguous());
        x = x.defined() ? x + refined : refined;
    }

    auto fuse = [&](int64_t stride, const torch::Tensor &dec) {
        const auto key = std::to_string(stride);
        if (!fusions->contains(key)) return dec;
        const auto *level = cnn.at_stride(stride);
        if (level == nullptr) throw std::invalid_argument("decode: CNN level at stride " + key + " is missing");
        if (level->features.sizes().slice(2) != dec.sizes().slice(2))
            throw std::invalid_argument("decode: CNN level at stride " + key + " has the wrong spatial size");
        return fusions[key]->as<FusionImpl>()->forward(level->features, dec);
    };

    int64_t stride = geom_.token_extent / 2;
    x = fuse(stride, x);
    for (std::size_t s = 0; s < stages->size(); ++s) {
        stride /= 2;
        x = stages[s]->as<torch::nn::Sequential>()->forward(x);
        x = fuse(stride, x);
    }
    return head(final_block(torch::cat({x, img}, 1)));
}

MaskArray3 predict_mask(const torch::Tensor &logits, double threshold) {
    auto t = logits.detach().to(torch::kFloat32).contiguous();
    while (t.dim() > 3) {
        if (t.size(0) != 1) throw std::invalid_argument("predict_mask: expected a single volume");
        t = t.squeeze(0);
    }
    if (t.dim() != 3) throw std::invalid_argument("predict_mask: expected a 3D logit volume");
    if (torch::isnan(t).any().item<bool>()) throw std::runtime_error("predict_mask: NaN in logits");
    auto mask = (torch::sigmoid(t) > threshold).to(torch::kUInt8).contiguous();
    const Shape3 shape{t.size(0), t.size(1), t.size(2)};
    const auto *p = mask.data_ptr<uint8_t>();
    return MaskArray3(shape, std::vector<uint8_t>(p, p + shape.numel()));
}

} // namespace promise
