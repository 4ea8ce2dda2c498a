#include "promise/vit3d.hpp"

#include <algorithm>
#include <cmath>
#include <regex>
#include <stdexcept>

namespace promise {

namespace F = torch::nn::functional;

void EncoderConfig::validate() const {
    if (n_blocks < 1 || embed_dim < 1 || n_heads < 1) throw std::invalid_argument("encoder: sizes must be positive");
    if (embed_dim % n_heads != 0) throw std::invalid_argument("encoder: embed_dim must be divisible by n_heads");
    if (spatial_patch < 1 || depth_patch < 1) throw std::invalid_argument("encoder: patch sizes must be positive");
    if (!(adapter_ratio > 0.0 && adapter_ratio <= 1.0)) throw std::invalid_argument("encoder: adapter_ratio in (0,1]");
    if (tap_blocks.empty()) throw std::invalid_argument("encoder: tap_blocks must not be empty");
    for (auto t : tap_blocks)
        if (t < 1 || t > n_blocks) throw std::invalid_argument("encoder: tap block " + std::to_string(t) + " out of range");
    if (!std::is_sorted(tap_blocks.begin(), tap_blocks.end()) ||
        std::adjacent_find(tap_blocks.begin(), tap_blocks.end()) != tap_blocks.end())
        throw std::invalid_argument("encoder: tap_blocks must be strictly increasing");
    if (tap_blocks.back() != n_blocks) throw std::invalid_argument("encoder: tap_blocks must include the last block");
    if (pos_grid < 1 || depth_pos_len < 1) throw std::invalid_argument("encoder: positional table sizes must be positive");
}

int64_t EncoderConfig::adapter_dim() const {
    return std::max<int64_t>(1, static_cast<int64_t>(std::llround(static_cast<double>(embed_dim) * adapter_ratio)));
}

EncoderConfig EncoderConfig::tiny() { return EncoderConfig{}; }

EncoderConfig EncoderConfig::vit_b() {
    EncoderConfig c;
    c.n_blocks = 12;
    c.embed_dim = 768;
    c.n_heads = 12;
    c.tap_blocks = {3, 6, 9, 12};
    c.pos_grid = 64;
    return c;
}

// ---------------------------------------------------------------------------

AdapterImpl::AdapterImpl(int64_t dim, int64_t hidden) {
    norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6)));
    down = register_module("down", torch::nn::Linear(dim, hidden));
    dwconv = register_module("dwconv",
                             torch::nn::Conv3d(torch::nn::Conv3dOptions(hidden, hidden, 3).padding(1).groups(hidden)));
    up = register_module("up", torch::nn::Linear(hidden, dim));
    torch::NoGradGuard guard;
    up->weight.zero_();
    up->bias.zero_();
}

torch::Tensor AdapterImpl::forward(const torch::Tensor &x) {
    auto h = down(norm(x));                       // (B, D, H, W, r)
    h = dwconv(h.permute({0, 4, 1, 2, 3}));       // channels first for the 3D conv
    h = F::gelu(h.permute({0, 2, 3, 4, 1}));
    return x + up(h);
}

AttentionImpl::AttentionImpl(int64_t dim, int64_t heads) : n_heads(heads) {
    qkv = register_module("qkv", torch::nn::Linear(dim, dim * 3));
    proj = register_module("proj", torch::nn::Linear(dim, dim));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor &x) {
    const auto b = x.size(0), n = x.size(1), c = x.size(2);
    const auto head_dim = c / n_heads;
    auto qkv_t = qkv(x).reshape({b, n, 3, n_heads, head_dim}).permute({2, 0, 3, 1, 4});
    auto q = qkv_t[0], k = qkv_t[1], v = qkv_t[2];
    auto attn = torch::matmul(q * (1.0 / std::sqrt(static_cast<double>(head_dim))), k.transpose(-2, -1));
    attn = attn.softmax(-1);
    if (probe) last_attention_shape = attn.sizes().vec();
    auto out = torch::matmul(attn, v).permute({0, 2, 1, 3}).reshape({b, n, c});
    return proj(out);
}

MlpImpl::MlpImpl(int64_t dim, int64_t hidden) {
    lin1 = register_module("lin1", torch::nn::Linear(dim, hidden));
    lin2 = register_module("lin2", torch::nn::Linear(hidden, dim));
}

torch::Tensor MlpImpl::forward(const torch::Tensor &x) { return lin2(F::gelu(lin1(x))); }

BlockImpl::BlockImpl(const EncoderConfig &cfg) {
    const auto c = cfg.embed_dim;
    if (cfg.use_adapters) adapter1 = register_module("adapter1", Adapter(c, cfg.adapter_dim()));
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c}).eps(1e-6)));
    attn = register_module("attn", Attention(c, cfg.n_heads));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c}).eps(1e-6)));
    mlp = register_module("mlp", Mlp(c, c * cfg.mlp_ratio));
    if (cfg.use_adapters && cfg.use_second_adapter) adapter2 = register_module("adapter2", Adapter(c, cfg.adapter_dim()));
}

torch::Tensor BlockImpl::forward(const torch::Tensor &input) {
    auto x = adapter1 ? adapter1(input) : input;
    const auto sizes = x.sizes().vec();
    const auto b = sizes[0], c = sizes[4];
    auto flat = x.reshape({b, -1, c}); // global attention over all D'H'W' tokens
    flat = flat + attn(norm1(flat));
    flat = flat + mlp(norm2(flat));
    x = flat.reshape(sizes);
    return adapter2 ? adapter2(x) : x;
}

// ---------------------------------------------------------------------------

PatchEmbed3dImpl::PatchEmbed3dImpl(const EncoderConfig &cfg)
    : spatial_patch_(cfg.spatial_patch), depth_patch_(cfg.depth_patch) {
    const auto c = cfg.embed_dim;
    spatial = register_module(
        "spatial", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, c, cfg.spatial_patch).stride(cfg.spatial_patch)));
    depth_proj = register_module("depth_proj", torch::nn::Conv1d(torch::nn::Conv1dOptions(c, c, cfg.depth_patch)
                                                                     .stride(cfg.depth_patch)
                                                                     .groups(c)));
    pos_embed = register_parameter("pos_embed", torch::randn({1, cfg.pos_grid, cfg.pos_grid, c}) * 0.02);
    depth_pos = register_parameter("depth_pos", torch::zeros({1, cfg.depth_pos_len, c}));
    torch::NoGradGuard guard;
    depth_proj->weight.fill_(1.0 / static_cast<double>(cfg.depth_patch));
    depth_proj->bias.zero_();
}

torch::Tensor PatchEmbed3dImpl::positional(int64_t depth, int64_t height, int64_t width) const {
    auto spatial_pos = pos_embed; // (1, G, G, C)
    if (spatial_pos.size(1) != height || spatial_pos.size(2) != width) {
        spatial_pos = F::interpolate(spatial_pos.permute({0, 3, 1, 2}),
                                     F::InterpolateFuncOptions()
                                         .size(std::vector<int64_t>{height, width})
                                         .mode(torch::kBilinear)
                                         .align_corners(false))
                          .permute({0, 2, 3, 1});
    }
    auto dpos = depth_pos; // (1, L, C)
    if (dpos.size(1) != depth) {
        dpos = F::interpolate(dpos.permute({0, 2, 1}), F::InterpolateFuncOptions()
                                                           .size(std::vector<int64_t>{depth})
                                                           .mode(torch::kLinear)
                                                           .align_corners(false))
                   .permute({0, 2, 1});
    }
    // (1, D, H, W, C) by broadcast addition
    return spatial_pos.unsqueeze(1) + dpos.unsqueeze(2).unsqueeze(3);
}

TokenGrid PatchEmbed3dImpl::forward(const torch::Tensor &image) {
    auto x = image.dim() == 5 ? image : image.unsqueeze(1);
    if (x.dim() != 5 || x.size(1) != 1) throw std::invalid_argument("embed_3d: expected (B, 1, S, S, S) input");
    const auto b = x.size(0), sd = x.size(2), sh = x.size(3), sw = x.size(4);
    if (sd % depth_patch_ != 0 || sh % spatial_patch_ != 0 || sw % spatial_patch_ != 0)
        throw std::invalid_argument("embed_3d: input (" + std::to_string(sd) + "," + std::to_string(sh) + "," +
                                    std::to_string(sw) + ") not divisible by patch sizes (" +
                                    std::to_string(depth_patch_) + "," + std::to_string(spatial_patch_) + ")");
    const auto gh = sh / spatial_patch_, gw = sw / spatial_patch_, gd = sd / depth_patch_;

    auto slices = spatial(x.reshape({b * sd, 1, sh, sw}));           // (B*S, C, H', W')
    const auto c = slices.size(1);
    auto columns = slices.reshape({b, sd, c, gh, gw}).permute({0, 3, 4, 2, 1}).reshape({b * gh * gw, c, sd});
    auto tokens = depth_proj(columns)                                 // (B*H'W', C, D')
                      .reshape({b, gh, gw, c, gd})
                      .permute({0, 4, 1, 2, 3});                      // (B, D', H', W', C)
    return TokenGrid{tokens + positional(gd, gh, gw)};
}

// ---------------------------------------------------------------------------

Vit3dEncoderImpl::Vit3dEncoderImpl(EncoderConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    patch_embed = register_module("patch_embed", PatchEmbed3d(cfg_));
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (int64_t i = 0; i < cfg_.n_blocks; ++i) blocks->push_back(Block(cfg_));
    apply_freezing();
}

TokenGrid Vit3dEncoderImpl::embed(const torch::Tensor &image) { return patch_embed(image); }

FeaturePyramid Vit3dEncoderImpl::forward(const torch::Tensor &image) {
    auto x = patch_embed(image).tokens;
    FeaturePyramid taps;
    auto next_tap = cfg_.tap_blocks.begin();
    for (int64_t i = 0; i < cfg_.n_blocks; ++i) {
        x = blocks[static_cast<std::size_t>(i)]->as<Block>()->forward(x);
        if (next_tap != cfg_.tap_blocks.end() && *next_tap == i + 1) {
            taps.push_back(TokenGrid{x});
            ++next_tap;
        }
    }
    return taps;
}

bool is_frozen_encoder_parameter(const std::string &name) {
    static const std::regex frozen(R"(^(patch_embed\.spatial\..*|patch_embed\.pos_embed|blocks\.\d+\.(attn|mlp)\..*)$)");
    return std::regex_match(name, frozen);
}

ParameterPartition Vit3dEncoderImpl::partition() const {
    ParameterPartition p;
    for (const auto &item : named_parameters(true))
        (is_frozen_encoder_parameter(item.key()) ? p.frozen : p.trainable).insert(item.key());
    return p;
}

void Vit3dEncoderImpl::apply_freezing() {
    for (auto &item : named_parameters(true)) item.value().set_requires_grad(!is_frozen_encoder_parameter(item.key()));
}

int64_t copy_matching_parameters(torch::nn::Module &dst, const torch::nn::Module &src) {
    torch::NoGradGuard guard;
    const auto src_params = src.named_parameters(true);
    int64_t copied = 0;
    for (auto &item : dst.named_parameters(true)) {
        const auto *s = src_params.find(item.key());
        if (s != nullptr && s->sizes() == item.value().sizes()) {
            item.value().copy_(*s);
            ++copied;
        }
    }
    return copied;
}

int64_t count_parameters(const torch::nn::Module &m) {
    int64_t n = 0;
    for (const auto &p : m.parameters(true)) n += p.numel();
    return n;
}

} // namespace promise
