#pragma once

// Independent reference implementations used by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "promise/array3.hpp"
#include "promise/tensor_archive.hpp"
#include "promise/volume.hpp"

namespace promise::oracle {

/// |M - box average| with replicate padding, triple loop in double.
inline std::vector<double> boundary_map(const torch::Tensor &m, int k) {
    const auto d = m.size(0), h = m.size(1), w = m.size(2);
    const auto acc = m.to(torch::kFloat64).contiguous();
    const double *v = acc.data_ptr<double>();
    auto at = [&](int64_t z, int64_t y, int64_t x) {
        z = std::clamp<int64_t>(z, 0, d - 1);
        y = std::clamp<int64_t>(y, 0, h - 1);
        x = std::clamp<int64_t>(x, 0, w - 1);
        return v[(z * h + y) * w + x];
    };
    const int r = k / 2;
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(d * h * w));
    for (int64_t z = 0; z < d; ++z)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                double s = 0;
                for (int a = -r; a <= r; ++a)
                    for (int b = -r; b <= r; ++b)
                        for (int c = -r; c <= r; ++c) s += at(z + a, y + b, x + c);
                out.push_back(std::abs(at(z, y, x) - s / (k * k * k)));
            }
    return out;
}

inline double dice(const MaskArray3 &a, const MaskArray3 &b) {
    int64_t i = 0, na = 0, nb = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        na += a.values()[k];
        nb += b.values()[k];
        i += a.values()[k] && b.values()[k];
    }
    return na + nb == 0 ? 1.0 : 2.0 * static_cast<double>(i) / static_cast<double>(na + nb);
}

inline std::vector<Index3> surface(const MaskArray3 &m) {
    const auto &s = m.shape();
    std::vector<Index3> out;
    const Index3 nb[6] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    for (int64_t z = 0; z < s.d; ++z)
        for (int64_t y = 0; y < s.h; ++y)
            for (int64_t x = 0; x < s.w; ++x) {
                if (!m(z, y, x)) continue;
                for (const auto &o : nb) {
                    const Index3 n{z + o[0], y + o[1], x + o[2]};
                    if (!s.contains(n) || !m[n]) {
                        out.push_back({z, y, x});
                        break;
                    }
                }
            }
    return out;
}

/// All-pairs surface distances.
inline double nsd(const MaskArray3 &a, const MaskArray3 &b, double tol, const Spacing &sp) {
    const auto sa = surface(a), sb = surface(b);
    if (sa.empty() && sb.empty()) return 1.0;
    if (sa.empty() || sb.empty()) return 0.0;
    auto within = [&](const std::vector<Index3> &from, const std::vector<Index3> &to) {
        int64_t n = 0;
        for (const auto &p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto &q : to) {
                double d = 0;
                for (std::size_t k = 0; k < 3; ++k) {
                    const double t = static_cast<double>(p[k] - q[k]) * sp[k];
                    d += t * t;
                }
                best = std::min(best, d);
            }
            if (std::sqrt(best) <= tol + 1e-9) ++n;
        }
        return n;
    };
    return static_cast<double>(within(sa, sb) + within(sb, sa)) / static_cast<double>(sa.size() + sb.size());
}

/// Plain 2D ViT forward (global attention, no relative position bias) straight from source-model
/// keys: gray slice replicated to RGB, patch embedding, positional table resized to the token
/// grid, then every block. Returns the token grid after each block as (H', W', C) doubles.
inline std::vector<torch::Tensor> vit2d_forward(const TensorArchive &src, const torch::Tensor &gray, int64_t patch,
                                                int64_t n_blocks, int64_t n_heads) {
    namespace F = torch::nn::functional;
    const std::string p = src.contains("image_encoder.pos_embed") ? "image_encoder." : "";
    auto t = [&](const std::string &k) { return src.at(p + k).to(torch::kFloat64); };
    auto rgb = gray.to(torch::kFloat64).view({1, 1, gray.size(0), gray.size(1)}).expand({1, 3, gray.size(0), gray.size(1)});
    auto x = F::conv2d(rgb, t("patch_embed.proj.weight"), F::Conv2dFuncOptions().stride(patch).bias(t("patch_embed.proj.bias")));
    x = x.permute({0, 2, 3, 1}); // (1, H', W', C)
    const auto gh = x.size(1), gw = x.size(2), c = x.size(3);
    auto pos = t("pos_embed").to(torch::kFloat32);
    if (pos.size(1) != gh || pos.size(2) != gw)
        pos = F::interpolate(pos.permute({0, 3, 1, 2}),
                             F::InterpolateFuncOptions().size(std::vector<int64_t>{gh, gw}).mode(torch::kBilinear).align_corners(false))
                  .permute({0, 2, 3, 1});
    x = (x + pos.to(torch::kFloat64)).reshape({gh * gw, c});

    auto layer_norm = [&](const torch::Tensor &v, const std::string &k) {
        const auto mu = v.mean(-1, true);
        const auto var = (v - mu).square().mean(-1, true);
        return (v - mu) / torch::sqrt(var + 1e-6) * t(k + ".weight") + t(k + ".bias");
    };
    auto linear = [&](const torch::Tensor &v, const std::string &k) { return v.matmul(t(k + ".weight").t()) + t(k + ".bias"); };

    std::vector<torch::Tensor> outs;
    const auto hd = c / n_heads;
    for (int64_t i = 0; i < n_blocks; ++i) {
        const auto b = "blocks." + std::to_string(i) + ".";
        auto h = layer_norm(x, b + "norm1");
        auto qkv = linear(h, b + "attn.qkv").reshape({gh * gw, 3, n_heads, hd});
        torch::Tensor heads_out = torch::zeros({gh * gw, c}, torch::kFloat64);
        for (int64_t head = 0; head < n_heads; ++head) {
            auto q = qkv.index({torch::indexing::Slice(), 0, head});
            auto k = qkv.index({torch::indexing::Slice(), 1, head});
            auto v = qkv.index({torch::indexing::Slice(), 2, head});
            auto a = (q.matmul(k.t()) / std::sqrt(static_cast<double>(hd))).softmax(-1);
            heads_out.index_put_({torch::indexing::Slice(), torch::indexing::Slice(head * hd, (head + 1) * hd)}, a.matmul(v));
        }
        x = x + linear(heads_out, b + "attn.proj");
        h = layer_norm(x, b + "norm2");
        x = x + linear(F::gelu(linear(h, b + "mlp.lin1")), b + "mlp.lin2");
        outs.push_back(x.reshape({gh, gw, c}));
    }
    return outs;
}

} // namespace promise::oracle
