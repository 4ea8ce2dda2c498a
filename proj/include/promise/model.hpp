#pragma once

#include <optional>
#include <vector>

#include <torch/torch.h>

#include "promise/cnn_encoder.hpp"
#include "promise/config.hpp"
#include "promise/mask_decoder.hpp"
#include "promise/prompt.hpp"
#include "promise/tensor_archive.hpp"
#include "promise/vit3d.hpp"

namespace promise {

class PromiseModelImpl : public torch::nn::Module {
public:
    /// Parameters are initialised from `init_seed`.
    explicit PromiseModelImpl(ModelConfig cfg, uint64_t init_seed = 0);

    struct Output {
        torch::Tensor logits;     // (B, 1, S, S, S)
        torch::Tensor prompt_map; // (B, D', H', W', n_queries)
    };

    /// image: (B, 1, S, S, S); prompts in model-input voxel coordinates, one list per item.
    Output forward(const torch::Tensor &image, const std::vector<std::vector<PointPrompt>> &prompts);

    /// Encoder partition lifted to model parameter names; all non-encoder parameters are trainable.
    ParameterPartition partition() const;
    void apply_freezing();
    /// Transplants pretrained weights into the encoder (no-op without an archive).
    void load_pretrained(const std::optional<TensorArchive> &archive);

    const ModelConfig &config() const { return cfg_; }

    Vit3dEncoder encoder{nullptr};
    CnnEncoder cnn{nullptr};
    PromptEncoder prompt_encoder{nullptr};
    MaskDecoder decoder{nullptr};

private:
    ModelConfig cfg_;
};
TORCH_MODULE(PromiseModel);

/// Parameter tensors as a name -> tensor archive (detached copies).
TensorArchive parameters_to_archive(const torch::nn::Module &m);

} // namespace promise
