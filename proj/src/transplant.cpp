#include "promise/transplant.hpp"

#include <regex>
#include <sstream>
#include <stdexcept>

namespace promise {

namespace F = torch::nn::functional;

namespace {

const std::string kPrefix = "image_encoder.";

std::string strip_prefix(const std::string &key) {
    return key.rfind(kPrefix, 0) == 0 ? key.substr(kPrefix.size()) : key;
}

struct Target {
    std::string key;
    std::string transform;
};

std::optional<Target> target_for(const std::string &source) {
    static const std::regex block_key(R"(^blocks\.(\d+)\.(norm1|norm2|attn\.qkv|attn\.proj|mlp\.lin1|mlp\.lin2)\.(weight|bias)$)");
    if (source == "patch_embed.proj.weight") return Target{"patch_embed.spatial.weight", "sum_rgb_to_gray"};
    if (source == "patch_embed.proj.bias") return Target{"patch_embed.spatial.bias", "copy"};
    if (source == "pos_embed") return Target{"patch_embed.pos_embed", "copy"};
    if (std::regex_match(source, block_key)) return Target{source, "copy"};
    return std::nullopt;
}

bool omitted_on_import(const std::string &source) {
    static const std::regex omitted(R"(^(neck\..*|blocks\.\d+\.attn\.rel_pos_[hw])$)");
    return std::regex_match(source, omitted);
}

torch::Tensor converted(const torch::Tensor &src, const std::string &transform, const std::vector<int64_t> &target_shape) {
    auto t = src.to(torch::kFloat32);
    if (transform == "sum_rgb_to_gray") return t.sum(1, /*keepdim=*/true);
    if (t.dim() == 4 && target_shape.size() == 4 && t.size(3) == target_shape[3] &&
        (t.size(1) != target_shape[1] || t.size(2) != target_shape[2])) {
        // positional grid of a different size
        return F::interpolate(t.permute({0, 3, 1, 2}), F::InterpolateFuncOptions()
                                                           .size(std::vector<int64_t>{target_shape[1], target_shape[2]})
                                                           .mode(torch::kBilinear)
                                                           .align_corners(false))
            .permute({0, 2, 3, 1})
            .contiguous();
    }
    return t;
}

std::vector<int64_t> converted_shape(const std::vector<int64_t> &src, const std::string &transform,
                                     const std::vector<int64_t> &target) {
    auto s = src;
    if (transform == "sum_rgb_to_gray" && s.size() == 4) s[1] = 1;
    if (s.size() == 4 && target.size() == 4 && s[0] == 1 && target[0] == 1 && s[3] == target[3] && s[1] == s[2])
        return target; // resizable positional grid
    return s;
}

} // namespace

bool TransplantReport::ok() const {
    for (const auto &e : entries)
        if (e.status != "mapped" && e.status != "omitted") return false;
    return true;
}

nlohmann::json TransplantReport::to_json() const {
    auto table = nlohmann::json::array();
    for (const auto &e : entries)
        table.push_back({{"source", e.source},
                         {"target", e.target.empty() ? nlohmann::json(nullptr) : nlohmann::json(e.target)},
                         {"transform", e.transform},
                         {"status", e.status},
                         {"source_shape", e.source_shape},
                         {"target_shape", e.target_shape}});
    return {{"ok", ok()}, {"mappings", table}};
}

TransplantReport plan_transplant(const TensorArchive &checkpoint, const Vit3dEncoderImpl &encoder) {
    const auto params = encoder.named_parameters(true);
    TransplantReport report;
    std::set<std::string> covered;
    for (const auto &[raw_key, tensor] : checkpoint.tensors) {
        const auto key = strip_prefix(raw_key);
        KeyMapping m{raw_key, "", "omit", "omitted", tensor.sizes().vec(), {}};
        if (auto target = target_for(key)) {
            m.target = target->key;
            m.transform = target->transform;
            const auto *dst = params.find(target->key);
            if (dst == nullptr) {
                m.status = "missing";
            } else {
                m.target_shape = dst->sizes().vec();
                m.status = converted_shape(m.source_shape, m.transform, m.target_shape) == m.target_shape
                               ? "mapped"
                               : "shape_mismatch";
                covered.insert(target->key);
            }
        } else if (!omitted_on_import(key)) {
            m.status = "missing"; // no target for this source key
        }
        report.entries.push_back(std::move(m));
    }
    // Pretrained targets the checkpoint failed to provide.
    for (const auto &item : params) {
        const auto &name = item.key();
        const bool imported = is_frozen_encoder_parameter(name) ||
                              std::regex_match(name, std::regex(R"(^blocks\.\d+\.norm[12]\..*$)"));
        if (imported && covered.count(name) == 0)
            report.entries.push_back({source_key_for(name), name, "copy", "missing", {}, item.value().sizes().vec()});
    }
    return report;
}

ParameterPartition transplant_pretrained(const std::optional<TensorArchive> &checkpoint, Vit3dEncoderImpl &encoder) {
    if (checkpoint) {
        const auto report = plan_transplant(*checkpoint, encoder);
        if (!report.ok()) {
            std::ostringstream msg;
            msg << "pretrained checkpoint does not match encoder config; offending keys:";
            for (const auto &e : report.entries)
                if (e.status != "mapped" && e.status != "omitted")
                    msg << "\n  " << e.source << " -> " << (e.target.empty() ? "?" : e.target) << " [" << e.status << "]";
            throw std::runtime_error(msg.str());
        }
        torch::NoGradGuard guard;
        auto params = encoder.named_parameters(true);
        for (const auto &e : report.entries) {
            if (e.status != "mapped") continue;
            auto &dst = params[e.target];
            dst.copy_(converted(checkpoint->at(e.source), e.transform, e.target_shape));
        }
    }
    encoder.apply_freezing();
    return encoder.partition();
}

std::string source_key_for(const std::string &target_key) {
    if (target_key == "patch_embed.spatial.weight") return kPrefix + "patch_embed.proj.weight";
    if (target_key == "patch_embed.spatial.bias") return kPrefix + "patch_embed.proj.bias";
    if (target_key == "patch_embed.pos_embed") return kPrefix + "pos_embed";
    return kPrefix + target_key;
}

TensorArchive make_random_source_checkpoint(const EncoderConfig &cfg, uint64_t seed) {
    auto gen = at::detail::createCPUGenerator(seed);
    const auto c = cfg.embed_dim, p = cfg.spatial_patch, g = cfg.pos_grid, hidden = c * cfg.mlp_ratio;
    TensorArchive a;
    auto put = [&](const std::string &k, std::vector<int64_t> shape, double scale) {
        a.tensors[kPrefix + k] = torch::randn(shape, gen) * scale;
    };
    put("patch_embed.proj.weight", {c, 3, p, p}, 0.02);
    put("patch_embed.proj.bias", {c}, 0.02);
    put("pos_embed", {1, g, g, c}, 0.02);
    for (int64_t i = 0; i < cfg.n_blocks; ++i) {
        const auto b = "blocks." + std::to_string(i) + ".";
        a.tensors[kPrefix + b + "norm1.weight"] = 1.0 + torch::randn({c}, gen) * 0.1;
        put(b + "norm1.bias", {c}, 0.1);
        put(b + "attn.qkv.weight", {3 * c, c}, 1.0 / std::sqrt(static_cast<double>(c)));
        put(b + "attn.qkv.bias", {3 * c}, 0.02);
        put(b + "attn.proj.weight", {c, c}, 1.0 / std::sqrt(static_cast<double>(c)));
        put(b + "attn.proj.bias", {c}, 0.02);
        put(b + "attn.rel_pos_h", {2 * 14 - 1, c / cfg.n_heads}, 0.02);
        put(b + "attn.rel_pos_w", {2 * 14 - 1, c / cfg.n_heads}, 0.02);
        a.tensors[kPrefix + b + "norm2.weight"] = 1.0 + torch::randn({c}, gen) * 0.1;
        put(b + "norm2.bias", {c}, 0.1);
        put(b + "mlp.lin1.weight", {hidden, c}, 1.0 / std::sqrt(static_cast<double>(c)));
        put(b + "mlp.lin1.bias", {hidden}, 0.02);
        put(b + "mlp.lin2.weight", {c, hidden}, 1.0 / std::sqrt(static_cast<double>(hidden)));
        put(b + "mlp.lin2.bias", {c}, 0.02);
    }
    put("neck.0.weight", {256, c, 1, 1}, 0.02);
    a.metadata["format"] = "sam-image-encoder";
    return a;
}

} // namespace promise
