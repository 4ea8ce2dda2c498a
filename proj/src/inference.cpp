#include "promise/inference.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <stdexcept>

#include "promise/metrics.hpp"

namespace promise {

namespace F = torch::nn::functional;

std::string to_string(WindowPolicy p) { return p == WindowPolicy::tiled ? "tiled" : "prompt_centered"; }

WindowPolicy window_policy_from_string(const std::string &s) {
    if (s == "prompt_centered") return WindowPolicy::prompt_centered;
    if (s == "tiled") return WindowPolicy::tiled;
    throw std::invalid_argument("unknown window policy '" + s + "'");
}

namespace {

int64_t round_coord(double c) { return static_cast<int64_t>(std::floor(c + 0.5)); }

int64_t start_for(int64_t center, int64_t window, int64_t n) {
    return n <= window ? 0 : clamp_window_start(center, window, n);
}

// Window crop with edge replication where the window leaves the volume.
FloatArray3 crop_window(const FloatArray3 &v, const Index3 &start, int64_t window) {
    const auto &s = v.shape();
    FloatArray3 out(Shape3{window, window, window});
    for (int64_t z = 0; z < window; ++z)
        for (int64_t y = 0; y < window; ++y)
            for (int64_t x = 0; x < window; ++x)
                out(z, y, x) = v(std::min(start[0] + z, s.d - 1), std::min(start[1] + y, s.h - 1),
                                 std::min(start[2] + x, s.w - 1));
    return out;
}

} // namespace

std::vector<Index3> window_starts(const Shape3 &shape, int64_t window, const std::vector<PointPrompt> &prompts,
                                  WindowPolicy policy) {
    if (prompts.empty()) throw std::invalid_argument("inference requires at least one prompt");
    std::vector<Index3> starts;
    Index3 first{};
    for (std::size_t a = 0; a < 3; ++a) {
        const auto c = std::clamp<int64_t>(round_coord(prompts.front().position[a]), 0, shape[a] - 1);
        first[a] = start_for(c, window, shape[a]);
    }
    starts.push_back(first);
    if (policy == WindowPolicy::tiled) {
        std::array<std::vector<int64_t>, 3> axis_starts;
        for (std::size_t a = 0; a < 3; ++a) {
            const auto n = shape[a];
            for (int64_t s = 0; s < n; s += window) axis_starts[a].push_back(n <= window ? 0 : std::min(s, n - window));
            if (n <= window) axis_starts[a] = {0};
        }
        for (auto z : axis_starts[0])
            for (auto y : axis_starts[1])
                for (auto x : axis_starts[2]) {
                    const Index3 s{z, y, x};
                    if (std::find(starts.begin(), starts.end(), s) == starts.end()) starts.push_back(s);
                }
    }
    return starts;
}

InferenceResult infer_volume(PromiseModelImpl &model, const Volume &preprocessed, const InferenceRequest &req,
                             const LabelMask *ground_truth) {
    const auto &cfg = model.config();
    const auto p = cfg.data.patch_size, s = cfg.data.model_input_size;
    const auto &shape = preprocessed.shape();
    const auto starts = window_starts(shape, p, req.prompts, req.policy);

    std::vector<double> sum(static_cast<std::size_t>(shape.numel()), 0.0);
    std::vector<int32_t> count(sum.size(), 0);

    torch::NoGradGuard no_grad;
    const bool was_training = model.is_training();
    model.eval();
    for (const auto &start : starts) {
        Patch window;
        window.image = crop_window(preprocessed.data, start, p);
        window.mask = MaskArray3(window.image.shape());
        const auto up = upsample_patch(window, s);

        std::vector<PointPrompt> local;
        for (const auto &pr : req.prompts) {
            PointPrompt q = pr;
            for (std::size_t a = 0; a < 3; ++a) {
                const double rel = std::clamp(pr.position[a] - static_cast<double>(start[a]), 0.0, static_cast<double>(p - 1));
                q.position[a] = patch_to_model_coord(rel, p, s);
            }
            local.push_back(q);
        }

        auto image = torch::from_blob(const_cast<float *>(up.image.data()), {1, 1, s, s, s}, torch::kFloat32);
        auto logits = model.forward(image, {local}).logits;
        if (s != p)
            logits = F::interpolate(logits, F::InterpolateFuncOptions()
                                                .size(std::vector<int64_t>{p, p, p})
                                                .mode(torch::kTrilinear)
                                                .align_corners(false));
        logits = logits.reshape({p, p, p}).to(torch::kFloat64).contiguous();
        if (torch::isnan(logits).any().item<bool>()) throw std::runtime_error("inference produced NaN logits");
        const auto *l = logits.data_ptr<double>();
        for (int64_t z = 0; z < p && start[0] + z < shape.d; ++z)
            for (int64_t y = 0; y < p && start[1] + y < shape.h; ++y)
                for (int64_t x = 0; x < p && start[2] + x < shape.w; ++x) {
                    const auto i = preprocessed.data.offset(start[0] + z, start[1] + y, start[2] + x);
                    sum[i] += l[(z * p + y) * p + x];
                    count[i] += 1;
                }
    }
    if (was_training) model.train();

    InferenceResult out;
    out.window_starts = starts;
    out.logits = FloatArray3(shape);
    out.mask = MaskArray3(shape);
    for (std::size_t i = 0; i < sum.size(); ++i) {
        const double v = count[i] > 0 ? sum[i] / count[i] : 0.0;
        out.logits.values()[i] = static_cast<float>(v);
        out.mask.values()[i] = 1.0 / (1.0 + std::exp(-v)) > 0.5 ? 1 : 0;
    }
    if (ground_truth) out.dice = dice_score(out.mask, ground_truth->data);
    return out;
}

PointPrompt map_prompt_to_grid(const PointPrompt &p, const Spacing &from, const Spacing &to) {
    PointPrompt q = p;
    for (std::size_t a = 0; a < 3; ++a) q.position[a] = p.position[a] * from[a] / to[a];
    return q;
}

LabelMask infer_source_volume(PromiseModelImpl &model, const Volume &source, const InferenceRequest &req) {
    const auto &cfg = model.config();
    for (const auto &pr : req.prompts)
        for (std::size_t a = 0; a < 3; ++a)
            if (pr.position[a] < 0 || pr.position[a] > static_cast<double>(source.shape()[a] - 1))
                throw std::out_of_range("prompt outside the volume");
    const auto pre = preprocess(source, cfg.data.preprocess);
    InferenceRequest local = req;
    local.prompts.clear();
    for (const auto &pr : req.prompts)
        local.prompts.push_back(map_prompt_to_grid(pr, source.spacing, pre.spacing));
    const auto result = infer_volume(model, pre, local);
    LabelMask m{result.mask, pre.spacing, pre.origin};
    auto back = resample_to_shape(m, source.shape(), source.spacing);
    back.origin = source.origin;
    return back;
}

std::optional<Index3> centroid_foreground_voxel(const MaskArray3 &m) {
    double cz = 0, cy = 0, cx = 0;
    int64_t n = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (!m.values()[i]) continue;
        const auto idx = m.unravel(i);
        cz += static_cast<double>(idx[0]);
        cy += static_cast<double>(idx[1]);
        cx += static_cast<double>(idx[2]);
        ++n;
    }
    if (n == 0) return std::nullopt;
    cz /= static_cast<double>(n);
    cy /= static_cast<double>(n);
    cx /= static_cast<double>(n);
    double best = std::numeric_limits<double>::infinity();
    Index3 arg{};
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (!m.values()[i]) continue;
        const auto idx = m.unravel(i);
        const double d = (idx[0] - cz) * (idx[0] - cz) + (idx[1] - cy) * (idx[1] - cy) + (idx[2] - cx) * (idx[2] - cx);
        if (d < best) {
            best = d;
            arg = idx;
        }
    }
    return arg;
}

} // namespace promise
