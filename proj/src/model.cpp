#include "promise/model.hpp"

#include "promise/seed.hpp"
#include "promise/transplant.hpp"

namespace promise {

PromiseModelImpl::PromiseModelImpl(ModelConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    torch::manual_seed(init_seed);
    encoder = register_module("encoder", Vit3dEncoder(cfg_.encoder));
    if (cfg_.use_cnn) cnn = register_module("cnn", CnnEncoder(cfg_.cnn_channels));
    const auto te = cfg_.token_extent();
    prompt_encoder =
        register_module("prompt_encoder", PromptEncoder(cfg_.encoder.embed_dim, cfg_.prompt, std::array<int64_t, 3>{te, te, te}));
    DecoderGeometry geom;
    geom.embed_dim = cfg_.encoder.embed_dim;
    geom.n_taps = static_cast<int64_t>(cfg_.encoder.tap_blocks.size());
    geom.n_queries = cfg_.prompt.n_queries;
    geom.token_extent = te;
    if (cfg_.use_cnn) geom.cnn_channels = cfg_.cnn_channels;
    geom.fusion = cfg_.fusion_mode;
    decoder = register_module("decoder", MaskDecoder(cfg_.decoder, geom));
    apply_freezing();
}

PromiseModelImpl::Output PromiseModelImpl::forward(const torch::Tensor &image,
                                                   const std::vector<std::vector<PointPrompt>> &prompts) {
    auto x = image.dim() == 5 ? image : image.unsqueeze(1);
    auto pyramid = encoder->forward(x);
    CnnFeatureSet cnn_features;
    if (cnn) cnn_features = cnn->forward(x);
    auto prompted = prompt_encoder->forward(pyramid.back(), prompts);
    Output out;
    out.prompt_map = prompted.prompt_map;
    out.logits = decoder->forward(pyramid, cnn_features, prompted.prompt_map, x);
    return out;
}

ParameterPartition PromiseModelImpl::partition() const {
    const auto enc = encoder->partition();
    ParameterPartition p;
    for (const auto &item : named_parameters(true)) {
        const auto &name = item.key();
        const std::string prefix = "encoder.";
        if (name.rfind(prefix, 0) == 0 && enc.is_frozen(name.substr(prefix.size())))
            p.frozen.insert(name);
        else
            p.trainable.insert(name);
    }
    return p;
}

void PromiseModelImpl::apply_freezing() {
    const auto p = partition();
    for (auto &item : named_parameters(true)) item.value().set_requires_grad(!p.is_frozen(item.key()));
}

void PromiseModelImpl::load_pretrained(const std::optional<TensorArchive> &archive) {
    transplant_pretrained(archive, *encoder);
    apply_freezing();
}

TensorArchive parameters_to_archive(const torch::nn::Module &m) {
    TensorArchive a;
    for (const auto &item : m.named_parameters(true)) a.tensors[item.key()] = item.value().detach().clone();
    return a;
}

} // namespace promise
