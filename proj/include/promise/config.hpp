#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "promise/cnn_encoder.hpp"
#include "promise/mask_decoder.hpp"
#include "promise/objectives.hpp"
#include "promise/prompt.hpp"
#include "promise/vit3d.hpp"
#include "promise/volume.hpp"

namespace promise {

struct DataConfig {
    PreprocessSpec preprocess;
    int64_t patch_size = 32;
    int64_t model_input_size = 128;
    bool augment = true;
    AugmentSpec augment_spec;

    void validate() const;
};

struct OptimConfig {
    double lr0 = 4e-4;
    double lr_decrement_per_epoch = 2e-6;
    int64_t max_epochs = 200;
    int64_t batch_size = 1;
    double weight_decay = 0.01;
    int64_t iterations_per_epoch = 50;
    uint64_t seed = 0;

    void validate() const;
};

struct ModelConfig {
    EncoderConfig encoder;
    DecoderConfig decoder;
    FusionMode fusion_mode = FusionMode::residual;
    bool use_cnn = true;
    std::array<int64_t, 3> cnn_channels{16, 32, 64};
    bool use_boundary_loss = true;
    LossWeights loss_weights;
    BoundarySpec boundary;
    PromptConfig prompt;
    DataConfig data;
    OptimConfig optim;

    void validate() const;

    /// Model-input voxels covered by one token.
    int64_t token_extent() const { return encoder.spatial_patch; }

    nlohmann::json to_json() const;
    /// Strict: unknown keys anywhere are rejected; missing keys take defaults.
    static ModelConfig from_json(const nlohmann::json &j);
    static ModelConfig load(const std::string &path);
    void save(const std::string &path) const;
};

struct AblationRow {
    std::string name;
    ModelConfig config;
};

/// Architecture variants: single adapter baseline, +two adapters, +up-conv, R, R-B, C, C-B.
std::vector<AblationRow> ablation_rows(const ModelConfig &base);

} // namespace promise
