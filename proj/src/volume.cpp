#include "promise/volume.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "promise/log.hpp"

namespace promise {

void Volume::validate() const {
    for (double s : spacing)
        if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("volume '" + id + "': spacing must be > 0");
    for (float v : data.values())
        if (!std::isfinite(v)) throw std::invalid_argument("volume '" + id + "': contains NaN/Inf");
}

void LabelMask::validate(const Volume *paired) const {
    for (uint8_t v : data.values())
        if (v > 1) throw std::invalid_argument("label mask is not binary (value " + std::to_string(v) + ")");
    if (paired == nullptr) return;
    if (!(paired->shape() == shape()))
        throw std::invalid_argument("mask shape " + shape().str() + " != image shape " + paired->shape().str());
    for (int a = 0; a < 3; ++a)
        if (std::abs(paired->spacing[a] - spacing[a]) > 1e-5)
            throw std::invalid_argument("mask spacing differs from image spacing on axis " + std::to_string(a));
}

void PreprocessSpec::validate() const {
    if (!(0.0 <= clip_lo_pct && clip_lo_pct < clip_hi_pct && clip_hi_pct <= 100.0))
        throw std::invalid_argument("PreprocessSpec: need 0 <= clip_lo_pct < clip_hi_pct <= 100");
    for (double s : target_spacing_mm)
        if (!(s > 0.0)) throw std::invalid_argument("PreprocessSpec: target spacing must be > 0");
}

// ---------------------------------------------------------------------------

Shape3 resampled_shape(const Shape3 &shape, const Spacing &from, const Spacing &to) {
    Shape3 out;
    for (std::size_t a = 0; a < 3; ++a) {
        if (!(from[a] > 0.0) || !(to[a] > 0.0)) throw std::invalid_argument("resample: spacing must be > 0");
        out[a] = static_cast<int64_t>(std::llround(static_cast<double>(shape[a]) * from[a] / to[a]));
        if (out[a] < 1)
            throw std::invalid_argument("resample: degenerate output shape " + out.str() + " from " + shape.str());
    }
    return out;
}

namespace {

// Output voxel o sits at world offset o * to; the matching source index is o * to / from.
template <typename Sampler>
void resample_into(const Shape3 &out_shape, const Spacing &from, const Spacing &to, Sampler &&write) {
    const double rz = to[0] / from[0], ry = to[1] / from[1], rx = to[2] / from[2];
    for (int64_t z = 0; z < out_shape.d; ++z)
        for (int64_t y = 0; y < out_shape.h; ++y)
            for (int64_t x = 0; x < out_shape.w; ++x)
                write(z, y, x, static_cast<double>(z) * rz, static_cast<double>(y) * ry, static_cast<double>(x) * rx);
}

} // namespace

Volume resample(const Volume &v, const Spacing &target_spacing) {
    const auto shape = resampled_shape(v.shape(), v.spacing, target_spacing);
    Volume out{FloatArray3(shape), target_spacing, v.origin, v.id};
    if (shape == v.shape() && target_spacing == v.spacing) {
        out.data = v.data;
        return out;
    }
    resample_into(shape, v.spacing, target_spacing, [&](int64_t z, int64_t y, int64_t x, double sz, double sy, double sx) {
        out.data(z, y, x) = sample_trilinear(v.data, sz, sy, sx);
    });
    return out;
}

LabelMask resample(const LabelMask &m, const Spacing &target_spacing) {
    return resample_to_shape(m, resampled_shape(m.shape(), m.spacing, target_spacing), target_spacing);
}

LabelMask resample_to_shape(const LabelMask &m, const Shape3 &shape, const Spacing &spacing) {
    LabelMask out{MaskArray3(shape), spacing, m.origin};
    resample_into(shape, m.spacing, spacing, [&](int64_t z, int64_t y, int64_t x, double sz, double sy, double sx) {
        out.data(z, y, x) = sample_nearest(m.data, sz, sy, sx);
    });
    return out;
}

// ---------------------------------------------------------------------------

double percentile(std::vector<float> values, double pct) {
    if (values.empty()) throw std::invalid_argument("percentile of empty set");
    const double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const double t = pos - static_cast<double>(lo);
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
    const double vlo = values[lo];
    if (t == 0.0 || lo + 1 >= values.size()) return vlo;
    const double vhi = *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(lo) + 1, values.end());
    return vlo + (vhi - vlo) * t;
}

LabelMask foreground_by_rule(const Volume &v, ForegroundRule rule) {
    LabelMask fg{MaskArray3(v.shape()), v.spacing, v.origin};
    const auto &vals = v.data.values();
    auto &out = fg.data.values();
    if (rule == ForegroundRule::nonzero) {
        for (std::size_t i = 0; i < vals.size(); ++i) out[i] = vals[i] != 0.0F ? 1 : 0;
    } else {
        const double median = percentile(vals, 50.0);
        for (std::size_t i = 0; i < vals.size(); ++i) out[i] = vals[i] > median ? 1 : 0;
    }
    return fg;
}

Volume clip_and_normalize(const Volume &v, const LabelMask &fg, const PreprocessSpec &spec, IntensityStats *stats_out) {
    spec.validate();
    if (!(fg.shape() == v.shape())) throw std::invalid_argument("clip_and_normalize: foreground shape mismatch");

    std::vector<float> fg_values;
    const auto &vals = v.data.values();
    const auto &mask = fg.data.values();
    for (std::size_t i = 0; i < vals.size(); ++i)
        if (mask[i] != 0) fg_values.push_back(vals[i]);
    if (fg_values.empty()) {
        log::warn("clip_and_normalize('", v.id, "'): empty foreground, using whole-volume statistics");
        fg_values = vals;
    }
    if (fg_values.empty()) throw std::invalid_argument("clip_and_normalize: empty volume");

    IntensityStats stats;
    stats.clip_lo = percentile(fg_values, spec.clip_lo_pct);
    stats.clip_hi = percentile(fg_values, spec.clip_hi_pct);

    double sum = 0.0;
    for (float &x : fg_values) {
        x = static_cast<float>(std::clamp(static_cast<double>(x), stats.clip_lo, stats.clip_hi));
        sum += x;
    }
    stats.mean = sum / static_cast<double>(fg_values.size());
    double ss = 0.0;
    for (float x : fg_values) ss += (x - stats.mean) * (x - stats.mean);
    stats.stddev = std::sqrt(ss / static_cast<double>(fg_values.size()));

    if (spec.normalize && !(stats.stddev > 0.0))
        throw std::invalid_argument("clip_and_normalize('" + v.id + "'): zero foreground intensity variance");

    Volume out{FloatArray3(v.shape()), v.spacing, v.origin, v.id};
    auto &dst = out.data.values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
        double x = std::clamp(static_cast<double>(vals[i]), stats.clip_lo, stats.clip_hi);
        if (spec.normalize) x = (x - stats.mean) / stats.stddev;
        dst[i] = static_cast<float>(x);
    }
    if (stats_out != nullptr) *stats_out = stats;
    return out;
}

Volume preprocess(const Volume &v, const PreprocessSpec &spec) {
    spec.validate();
    auto resampled = resample(v, spec.target_spacing_mm);
    const auto fg = foreground_by_rule(resampled, spec.foreground);
    return clip_and_normalize(resampled, fg, spec);
}

// ---------------------------------------------------------------------------
// Augmentation

bool AugmentPlan::is_identity() const {
    return !flip[0] && !flip[1] && !flip[2] && !rotate_axes && !zoom && !shift;
}

AugmentPlan plan_augmentation(uint64_t seed, const AugmentSpec &spec) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    AugmentPlan plan;
    for (auto &f : plan.flip) f = u01(rng) < spec.p_flip;
    if (u01(rng) < spec.p_rotate) {
        static constexpr std::array<std::array<int, 2>, 3> planes{{{0, 1}, {0, 2}, {1, 2}}};
        plan.rotate_axes = planes[std::uniform_int_distribution<int>(0, 2)(rng)];
        if (spec.arbitrary_rotation)
            plan.rotation_deg = std::uniform_real_distribution<double>(-spec.max_rotation_deg, spec.max_rotation_deg)(rng);
        else
            plan.quarter_turns = std::uniform_int_distribution<int>(1, 3)(rng);
    }
    if (u01(rng) < spec.p_zoom) plan.zoom = std::uniform_real_distribution<double>(spec.zoom_min, spec.zoom_max)(rng);
    if (u01(rng) < spec.p_shift) plan.shift = std::uniform_real_distribution<double>(-spec.shift_max, spec.shift_max)(rng);
    return plan;
}

namespace {

// Builds a patch by pulling each output voxel from a continuous source coordinate.
template <typename SourceOf>
Patch remap(const Patch &p, bool interpolate, SourceOf &&source_of) {
    Patch out = p;
    const auto &s = p.image.shape();
    for (int64_t z = 0; z < s.d; ++z)
        for (int64_t y = 0; y < s.h; ++y)
            for (int64_t x = 0; x < s.w; ++x) {
                const std::array<double, 3> src = source_of(std::array<double, 3>{double(z), double(y), double(x)});
                out.image(z, y, x) = interpolate ? sample_trilinear(p.image, src[0], src[1], src[2])
                                                 : sample_nearest(p.image, src[0], src[1], src[2]);
                out.mask(z, y, x) = sample_nearest(p.mask, src[0], src[1], src[2]);
            }
    out.contains_foreground = count_nonzero(out.mask) > 0;
    return out;
}

void check_axis(int axis) {
    if (axis < 0 || axis > 2) throw std::invalid_argument("axis must be 0, 1 or 2");
}

} // namespace

Patch flip(const Patch &p, int axis) {
    check_axis(axis);
    const double last = static_cast<double>(p.image.shape()[static_cast<std::size_t>(axis)] - 1);
    return remap(p, false, [&](std::array<double, 3> c) {
        c[static_cast<std::size_t>(axis)] = last - c[static_cast<std::size_t>(axis)];
        return c;
    });
}

Patch rotate90(const Patch &p, int axis_a, int axis_b, int quarter_turns) {
    check_axis(axis_a);
    check_axis(axis_b);
    const auto a = static_cast<std::size_t>(axis_a), b = static_cast<std::size_t>(axis_b);
    const auto &s = p.image.shape();
    if (a == b || s[a] != s[b]) throw std::invalid_argument("rotate90 needs two distinct axes of equal length");
    const int k = ((quarter_turns % 4) + 4) % 4;
    if (k == 0) return p;
    const double last = static_cast<double>(s[a] - 1);
    // One quarter turn maps output (oa, ob) to source (ob, last - oa).
    return remap(p, false, [&](std::array<double, 3> c) {
        for (int t = 0; t < k; ++t) {
            const double oa = c[a], ob = c[b];
            c[a] = ob;
            c[b] = last - oa;
        }
        return c;
    });
}

Patch rotate_arbitrary(const Patch &p, int axis_a, int axis_b, double degrees) {
    check_axis(axis_a);
    check_axis(axis_b);
    const auto a = static_cast<std::size_t>(axis_a), b = static_cast<std::size_t>(axis_b);
    const auto &s = p.image.shape();
    const double ca = (static_cast<double>(s[a]) - 1.0) / 2.0, cb = (static_cast<double>(s[b]) - 1.0) / 2.0;
    const double th = degrees * M_PI / 180.0, cs = std::cos(th), sn = std::sin(th);
    return remap(p, true, [&](std::array<double, 3> c) {
        const double da = c[a] - ca, db = c[b] - cb;
        c[a] = ca + cs * da + sn * db;
        c[b] = cb - sn * da + cs * db;
        return c;
    });
}

Patch zoom(const Patch &p, double factor) {
    if (!(factor > 0.0)) throw std::invalid_argument("zoom factor must be > 0");
    const auto &s = p.image.shape();
    const std::array<double, 3> ctr{(s.d - 1) / 2.0, (s.h - 1) / 2.0, (s.w - 1) / 2.0};
    return remap(p, true, [&](std::array<double, 3> c) {
        for (std::size_t i = 0; i < 3; ++i) c[i] = (c[i] - ctr[i]) / factor + ctr[i];
        return c;
    });
}

Patch shift_intensity(const Patch &p, double delta) {
    Patch out = p;
    for (float &v : out.image.values()) v = static_cast<float>(v + delta);
    return out;
}

Patch apply_augmentation(const Patch &p, const AugmentPlan &plan) {
    Patch out = p;
    for (int axis = 0; axis < 3; ++axis)
        if (plan.flip[static_cast<std::size_t>(axis)]) out = flip(out, axis);
    if (plan.rotate_axes) {
        const auto [a, b] = *plan.rotate_axes;
        if (plan.quarter_turns != 0) {
            if (out.image.shape()[static_cast<std::size_t>(a)] == out.image.shape()[static_cast<std::size_t>(b)])
                out = rotate90(out, a, b, plan.quarter_turns);
        } else if (plan.rotation_deg != 0.0) {
            out = rotate_arbitrary(out, a, b, plan.rotation_deg);
        }
    }
    if (plan.zoom) out = zoom(out, *plan.zoom);
    if (plan.shift) out = shift_intensity(out, *plan.shift);
    return out;
}

Patch augment(const Patch &p, uint64_t seed, const AugmentSpec &spec) {
    return apply_augmentation(p, plan_augmentation(seed, spec));
}

// ---------------------------------------------------------------------------
// Patch sampling

int64_t clamp_window_start(int64_t center, int64_t window, int64_t n) {
    const int64_t start = center - window / 2;
    return std::clamp<int64_t>(start, 0, std::max<int64_t>(0, n - window));
}

PatchSampler::PatchSampler(const Volume &v, const LabelMask &m, int64_t patch_size)
    : volume_(v), mask_(m), patch_size_(patch_size) {
    if (!(m.shape() == v.shape())) throw std::invalid_argument("sample_patch: mask/image shape mismatch");
    for (std::size_t a = 0; a < 3; ++a)
        if (patch_size < 1 || patch_size > v.shape()[a])
            throw std::invalid_argument("sample_patch: patch size " + std::to_string(patch_size) +
                                        " exceeds volume shape " + v.shape().str());
    const auto &vals = m.data.values();
    for (std::size_t i = 0; i < vals.size(); ++i) (vals[i] != 0 ? fg_ : bg_).push_back(static_cast<uint32_t>(i));
    if (fg_.empty()) log::info("sample_patch('", v.id, "'): no foreground voxels, all patches background-centred");
}

Patch PatchSampler::crop_at(const Index3 &center) const {
    const auto &s = volume_.shape();
    if (!s.contains(center)) throw std::out_of_range("patch centre outside volume");
    Patch p;
    p.center = center;
    for (std::size_t a = 0; a < 3; ++a) p.origin[a] = clamp_window_start(center[a], patch_size_, s[a]);
    const Shape3 extent{patch_size_, patch_size_, patch_size_};
    p.image = volume_.data.crop(p.origin, extent);
    p.mask = mask_.data.crop(p.origin, extent);
    p.contains_foreground = count_nonzero(p.mask) > 0;
    return p;
}

Patch PatchSampler::sample(uint64_t seed) const {
    std::mt19937_64 rng(seed);
    const bool want_fg = std::bernoulli_distribution(0.5)(rng);
    const auto &pool = (want_fg && !fg_.empty()) || bg_.empty() ? fg_ : bg_;
    const auto pick = std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng);
    return crop_at(volume_.data.unravel(pool[pick]));
}

Patch sample_patch(const Volume &v, const LabelMask &m, int64_t patch_size, uint64_t seed) {
    return PatchSampler(v, m, patch_size).sample(seed);
}

double patch_to_model_coord(double patch_coord, int64_t patch_size, int64_t model_input_size) {
    const double scale = static_cast<double>(model_input_size) / static_cast<double>(patch_size);
    return (patch_coord + 0.5) * scale - 0.5;
}

Patch upsample_patch(const Patch &p, int64_t model_input_size) {
    const auto &s = p.image.shape();
    for (std::size_t a = 0; a < 3; ++a)
        if (model_input_size < s[a]) throw std::invalid_argument("upsample_patch: model input smaller than patch");
    if (s.d == model_input_size && s.h == model_input_size && s.w == model_input_size) return p;

    const Shape3 out_shape{model_input_size, model_input_size, model_input_size};
    Patch out = p;
    out.image = FloatArray3(out_shape);
    out.mask = MaskArray3(out_shape);
    const double n = static_cast<double>(model_input_size);
    const std::array<double, 3> scale{s.d / n, s.h / n, s.w / n};
    for (int64_t z = 0; z < model_input_size; ++z)
        for (int64_t y = 0; y < model_input_size; ++y)
            for (int64_t x = 0; x < model_input_size; ++x) {
                // half-pixel aligned source coordinate (align_corners = false)
                const double sz = (z + 0.5) * scale[0] - 0.5, sy = (y + 0.5) * scale[1] - 0.5, sx = (x + 0.5) * scale[2] - 0.5;
                out.image(z, y, x) = sample_trilinear(p.image, sz, sy, sx);
                out.mask(z, y, x) = p.mask(static_cast<int64_t>(std::floor(z * scale[0])),
                                           static_cast<int64_t>(std::floor(y * scale[1])),
                                           static_cast<int64_t>(std::floor(x * scale[2])));
            }
    return out;
}

} // namespace promise
