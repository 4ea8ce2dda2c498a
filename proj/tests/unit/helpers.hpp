#pragma once

#include <random>

#include <torch/torch.h>

#include "promise/array3.hpp"
#include "promise/config.hpp"
#include "promise/volume.hpp"
#include "promise/volume_io.hpp"

namespace promise {

// doctest stringification for containers compared in CHECKs
inline std::ostream &operator<<(std::ostream &os, const PointPrompt &p) {
    return os << '(' << p.position[0] << ", " << p.position[1] << ", " << p.position[2] << ")/"
              << static_cast<int>(p.label);
}
inline std::ostream &operator<<(std::ostream &os, Split s) { return os << to_string(s); }

} // namespace promise

namespace promise::testing {

inline MaskArray3 random_mask(const Shape3 &s, double p, std::mt19937_64 &rng) {
    MaskArray3 m(s);
    std::bernoulli_distribution b(p);
    for (auto &v : m.values()) v = b(rng) ? 1 : 0;
    return m;
}

/// Random axis-aligned boxes, closer to segmentation-like shapes than i.i.d. noise.
inline MaskArray3 random_blobby_mask(const Shape3 &s, std::mt19937_64 &rng) {
    MaskArray3 m(s);
    std::uniform_int_distribution<int> n_boxes(0, 3);
    const int n = n_boxes(rng);
    for (int b = 0; b < n; ++b) {
        Index3 lo{}, hi{};
        for (std::size_t a = 0; a < 3; ++a) {
            std::uniform_int_distribution<int64_t> u(0, s[a] - 1);
            auto x = u(rng), y = u(rng);
            lo[a] = std::min(x, y);
            hi[a] = std::max(x, y);
        }
        for (int64_t z = lo[0]; z <= hi[0]; ++z)
            for (int64_t y = lo[1]; y <= hi[1]; ++y)
                for (int64_t x = lo[2]; x <= hi[2]; ++x) m(z, y, x) = 1;
    }
    return m;
}

inline FloatArray3 random_volume(const Shape3 &s, std::mt19937_64 &rng, double lo = 0.0, double hi = 1.0) {
    FloatArray3 v(s);
    std::uniform_real_distribution<float> u(static_cast<float>(lo), static_cast<float>(hi));
    for (auto &x : v.values()) x = u(rng);
    return v;
}

inline torch::Tensor to_tensor(const FloatArray3 &a) {
    const auto &s = a.shape();
    return torch::from_blob(const_cast<float *>(a.data()), {s.d, s.h, s.w}, torch::kFloat32).clone();
}

/// Small, fast model configuration used across unit tests.
inline ModelConfig small_config() {
    ModelConfig c;
    c.encoder.n_blocks = 2;
    c.encoder.embed_dim = 32;
    c.encoder.n_heads = 2;
    c.encoder.spatial_patch = 8;
    c.encoder.depth_patch = 8;
    c.encoder.tap_blocks = {1, 2};
    c.encoder.pos_grid = 4;
    c.encoder.depth_pos_len = 4;
    c.decoder.refine_channels = 16;
    c.prompt.d_prompt = 32;
    c.prompt.n_heads = 4;
    c.prompt.n_train_points = 4;
    c.cnn_channels = {8, 8, 16};
    c.data.patch_size = 16;
    c.data.model_input_size = 32;
    c.data.preprocess.foreground = ForegroundRule::above_median;
    c.optim.iterations_per_epoch = 5;
    return c;
}

} // namespace promise::testing
