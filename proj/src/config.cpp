#include "promise/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace promise {

using nlohmann::json;

void DataConfig::validate() const {
    preprocess.validate();
    if (patch_size < 1) throw std::invalid_argument("data.patch_size must be positive");
    if (model_input_size < patch_size) throw std::invalid_argument("data.model_input_size must be >= patch_size");
}

void OptimConfig::validate() const {
    if (lr0 <= 0) throw std::invalid_argument("optim.lr0 must be positive");
    if (lr_decrement_per_epoch < 0) throw std::invalid_argument("optim.lr_decrement_per_epoch must be >= 0");
    if (max_epochs < 1) throw std::invalid_argument("optim.max_epochs must be >= 1");
    // lr at the last epoch stays positive
    if (!(lr0 > static_cast<double>(max_epochs - 1) * lr_decrement_per_epoch))
        throw std::invalid_argument("optim: learning rate would reach zero before max_epochs");
    if (batch_size != 1) throw std::invalid_argument("optim.batch_size: only 1 is supported");
    if (weight_decay < 0) throw std::invalid_argument("optim.weight_decay must be >= 0");
    if (iterations_per_epoch < 1) throw std::invalid_argument("optim.iterations_per_epoch must be >= 1");
}

void ModelConfig::validate() const {
    encoder.validate();
    decoder.validate();
    loss_weights.validate();
    boundary.validate();
    data.validate();
    optim.validate();
    if (encoder.spatial_patch != encoder.depth_patch)
        throw std::invalid_argument("encoder: spatial_patch and depth_patch must match");
    if (data.model_input_size % encoder.spatial_patch != 0)
        throw std::invalid_argument("data.model_input_size must be divisible by the encoder patch size");
    if (prompt.d_prompt < 1 || prompt.n_queries < 1 || prompt.n_heads < 1 || prompt.d_prompt % prompt.n_heads != 0)
        throw std::invalid_argument("prompt: d_prompt must be positive and divisible by n_heads");
    if (prompt.n_train_points < 1) throw std::invalid_argument("prompt.n_train_points must be >= 1");
    for (auto c : cnn_channels)
        if (c < 1) throw std::invalid_argument("cnn_channels must be positive");
}

namespace {

class Reader {
public:
    Reader(const json &j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j.is_object()) throw std::invalid_argument("config: '" + path_ + "' must be an object");
    }
    ~Reader() noexcept(false) {
        if (std::uncaught_exceptions() > 0) return;
        for (const auto &item : j_.items())
            if (!seen_.count(item.key()))
                throw std::invalid_argument("config: unknown key '" + path_ + (path_.empty() ? "" : ".") + item.key() + "'");
    }
    template <typename T>
    void get(const char *key, T &out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception &e) {
            throw std::invalid_argument("config: bad value for '" + name(key) + "': " + e.what());
        }
    }
    const json *sub(const char *key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }
    std::string name(const char *key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    const json &j_;
    std::string path_;
    std::set<std::string> seen_;
};

std::string rule_name(ForegroundRule r) { return r == ForegroundRule::nonzero ? "nonzero" : "above_median"; }

ForegroundRule rule_from(const std::string &s) {
    if (s == "nonzero") return ForegroundRule::nonzero;
    if (s == "above_median") return ForegroundRule::above_median;
    throw std::invalid_argument("config: unknown foreground rule '" + s + "'");
}

} // namespace

json ModelConfig::to_json() const {
    json enc = {{"n_blocks", encoder.n_blocks},
                {"embed_dim", encoder.embed_dim},
                {"n_heads", encoder.n_heads},
                {"mlp_ratio", encoder.mlp_ratio},
                {"spatial_patch", encoder.spatial_patch},
                {"depth_patch", encoder.depth_patch},
                {"adapter_ratio", encoder.adapter_ratio},
                {"tap_blocks", encoder.tap_blocks},
                {"use_adapters", encoder.use_adapters},
                {"use_second_adapter", encoder.use_second_adapter},
                {"pos_grid", encoder.pos_grid},
                {"depth_pos_len", encoder.depth_pos_len},
                {"pretrained_path", encoder.pretrained_path ? json(*encoder.pretrained_path) : json(nullptr)}};
    const auto &a = data.augment_spec;
    json aug = {{"p_flip", a.p_flip},     {"p_rotate", a.p_rotate},   {"p_zoom", a.p_zoom},
                {"p_shift", a.p_shift},   {"zoom_min", a.zoom_min},   {"zoom_max", a.zoom_max},
                {"shift_max", a.shift_max}, {"arbitrary_rotation", a.arbitrary_rotation},
                {"max_rotation_deg", a.max_rotation_deg}};
    const auto &pp = data.preprocess;
    json pre = {{"target_spacing_mm", pp.target_spacing_mm},
                {"clip_lo_pct", pp.clip_lo_pct},
                {"clip_hi_pct", pp.clip_hi_pct},
                {"normalize", pp.normalize},
                {"foreground", rule_name(pp.foreground)}};
    return {{"encoder", enc},
            {"decoder", {{"refine_channels", decoder.refine_channels}, {"upsample_mode", to_string(decoder.upsample_mode)}}},
            {"fusion_mode", to_string(fusion_mode)},
            {"use_cnn", use_cnn},
            {"cnn_channels", cnn_channels},
            {"use_boundary_loss", use_boundary_loss},
            {"loss_weights", {{"structural", loss_weights.structural}, {"boundary", loss_weights.boundary}}},
            {"boundary_kernel", boundary.kernel_size},
            {"prompt",
             {{"n_train_points", prompt.n_train_points},
              {"n_queries", prompt.n_queries},
              {"d_prompt", prompt.d_prompt},
              {"n_heads", prompt.n_heads}}},
            {"data",
             {{"preprocess", pre},
              {"patch_size", data.patch_size},
              {"model_input_size", data.model_input_size},
              {"augment", data.augment},
              {"augment_spec", aug}}},
            {"optim",
             {{"lr0", optim.lr0},
              {"lr_decrement_per_epoch", optim.lr_decrement_per_epoch},
              {"max_epochs", optim.max_epochs},
              {"batch_size", optim.batch_size},
              {"weight_decay", optim.weight_decay},
              {"iterations_per_epoch", optim.iterations_per_epoch},
              {"seed", optim.seed}}}};
}

ModelConfig ModelConfig::from_json(const json &j) {
    ModelConfig c;
    {
        Reader r(j, "");
        if (const auto *e = r.sub("encoder")) {
            Reader re(*e, "encoder");
            auto &x = c.encoder;
            re.get("n_blocks", x.n_blocks);
            re.get("embed_dim", x.embed_dim);
            re.get("n_heads", x.n_heads);
            re.get("mlp_ratio", x.mlp_ratio);
            re.get("spatial_patch", x.spatial_patch);
            re.get("depth_patch", x.depth_patch);
            re.get("adapter_ratio", x.adapter_ratio);
            re.get("tap_blocks", x.tap_blocks);
            re.get("use_adapters", x.use_adapters);
            re.get("use_second_adapter", x.use_second_adapter);
            re.get("pos_grid", x.pos_grid);
            re.get("depth_pos_len", x.depth_pos_len);
            if (const auto *p = re.sub("pretrained_path"); p && !p->is_null()) x.pretrained_path = p->get<std::string>();
        }
        if (const auto *d = r.sub("decoder")) {
            Reader rd(*d, "decoder");
            rd.get("refine_channels", c.decoder.refine_channels);
            std::string mode = to_string(c.decoder.upsample_mode);
            rd.get("upsample_mode", mode);
            c.decoder.upsample_mode = upsample_mode_from_string(mode);
        }
        std::string fusion = to_string(c.fusion_mode);
        r.get("fusion_mode", fusion);
        c.fusion_mode = fusion_mode_from_string(fusion);
        r.get("use_cnn", c.use_cnn);
        r.get("cnn_channels", c.cnn_channels);
        r.get("use_boundary_loss", c.use_boundary_loss);
        if (const auto *w = r.sub("loss_weights")) {
            Reader rw(*w, "loss_weights");
            rw.get("structural", c.loss_weights.structural);
            rw.get("boundary", c.loss_weights.boundary);
        }
        r.get("boundary_kernel", c.boundary.kernel_size);
        if (const auto *p = r.sub("prompt")) {
            Reader rp(*p, "prompt");
            rp.get("n_train_points", c.prompt.n_train_points);
            rp.get("n_queries", c.prompt.n_queries);
            rp.get("d_prompt", c.prompt.d_prompt);
            rp.get("n_heads", c.prompt.n_heads);
        }
        if (const auto *d = r.sub("data")) {
            Reader rd(*d, "data");
            if (const auto *p = rd.sub("preprocess")) {
                Reader rp(*p, "data.preprocess");
                auto &x = c.data.preprocess;
                rp.get("target_spacing_mm", x.target_spacing_mm);
                rp.get("clip_lo_pct", x.clip_lo_pct);
                rp.get("clip_hi_pct", x.clip_hi_pct);
                rp.get("normalize", x.normalize);
                std::string rule = rule_name(x.foreground);
                rp.get("foreground", rule);
                x.foreground = rule_from(rule);
            }
            rd.get("patch_size", c.data.patch_size);
            rd.get("model_input_size", c.data.model_input_size);
            rd.get("augment", c.data.augment);
            if (const auto *a = rd.sub("augment_spec")) {
                Reader ra(*a, "data.augment_spec");
                auto &x = c.data.augment_spec;
                ra.get("p_flip", x.p_flip);
                ra.get("p_rotate", x.p_rotate);
                ra.get("p_zoom", x.p_zoom);
                ra.get("p_shift", x.p_shift);
                ra.get("zoom_min", x.zoom_min);
                ra.get("zoom_max", x.zoom_max);
                ra.get("shift_max", x.shift_max);
                ra.get("arbitrary_rotation", x.arbitrary_rotation);
                ra.get("max_rotation_deg", x.max_rotation_deg);
            }
        }
        if (const auto *o = r.sub("optim")) {
            Reader ro(*o, "optim");
            auto &x = c.optim;
            ro.get("lr0", x.lr0);
            ro.get("lr_decrement_per_epoch", x.lr_decrement_per_epoch);
            ro.get("max_epochs", x.max_epochs);
            ro.get("batch_size", x.batch_size);
            ro.get("weight_decay", x.weight_decay);
            ro.get("iterations_per_epoch", x.iterations_per_epoch);
            ro.get("seed", x.seed);
        }
    }
    c.validate();
    return c;
}

ModelConfig ModelConfig::load(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception &e) {
        throw std::invalid_argument("config " + path + ": " + e.what());
    }
    return from_json(j);
}

void ModelConfig::save(const std::string &path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write config " + path);
    out << to_json().dump(2) << '\n';
}

std::vector<AblationRow> ablation_rows(const ModelConfig &base) {
    std::vector<AblationRow> rows;
    auto baseline = base;
    baseline.encoder.use_adapters = true;
    baseline.encoder.use_second_adapter = false;
    baseline.decoder.upsample_mode = UpsampleMode::trilinear;
    baseline.use_cnn = false;
    baseline.use_boundary_loss = false;
    rows.push_back({"baseline", baseline});

    auto two = baseline;
    two.encoder.use_second_adapter = true;
    rows.push_back({"+two_adapters", two});

    auto up = two;
    up.decoder.upsample_mode = UpsampleMode::up_conv;
    rows.push_back({"+up_conv", up});

    for (auto mode : {FusionMode::residual, FusionMode::concatenate}) {
        auto row = up;
        row.use_cnn = true;
        row.fusion_mode = mode;
        const std::string tag = mode == FusionMode::residual ? "R" : "C";
        rows.push_back({tag, row});
        row.use_boundary_loss = true;
        rows.push_back({tag + "-B", row});
    }
    return rows;
}

} // namespace promise
