#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "promise/array3.hpp"

namespace promise {

/// Millimetres per voxel, in array-axis order (z, y, x).
using Spacing = std::array<double, 3>;
/// World-space position of voxel (0,0,0) in millimetres, array-axis order.
using Origin = std::array<double, 3>;

struct Volume {
    FloatArray3 data;
    Spacing spacing{1.0, 1.0, 1.0};
    Origin origin{0.0, 0.0, 0.0};
    std::string id;

    const Shape3 &shape() const { return data.shape(); }
    /// Throws if spacing is non-positive or any value is NaN/Inf.
    void validate() const;
};

struct LabelMask {
    MaskArray3 data;
    Spacing spacing{1.0, 1.0, 1.0};
    Origin origin{0.0, 0.0, 0.0};

    const Shape3 &shape() const { return data.shape(); }
    /// Throws unless strictly binary and, when given, aligned with `paired`.
    void validate(const Volume *paired = nullptr) const;
};

struct Patch {
    FloatArray3 image;
    MaskArray3 mask;
    Index3 center{0, 0, 0}; // voxel in the source volume
    Index3 origin{0, 0, 0}; // first source voxel covered by the crop
    bool contains_foreground = false;
};

/// Which voxels supply the clipping / z-score statistics when no label is available.
enum class ForegroundRule { nonzero, above_median };

struct PreprocessSpec {
    Spacing target_spacing_mm{1.0, 1.0, 1.0};
    double clip_lo_pct = 0.5;
    double clip_hi_pct = 99.5;
    bool normalize = true;
    ForegroundRule foreground = ForegroundRule::nonzero;

    void validate() const;
};

// ---------------------------------------------------------------------------
// Resampling

Shape3 resampled_shape(const Shape3 &shape, const Spacing &from, const Spacing &to);
Volume resample(const Volume &v, const Spacing &target_spacing);
LabelMask resample(const LabelMask &m, const Spacing &target_spacing);
/// Nearest-neighbour resampling of a mask onto an explicit target grid.
LabelMask resample_to_shape(const LabelMask &m, const Shape3 &shape, const Spacing &spacing);

// ---------------------------------------------------------------------------
// Intensity preprocessing

/// Linear-interpolated percentile (numpy "linear" convention) of unsorted values.
double percentile(std::vector<float> values, double pct);

/// Foreground voxels according to `rule` (used for unlabeled intensity statistics).
LabelMask foreground_by_rule(const Volume &v, ForegroundRule rule);

struct IntensityStats {
    double clip_lo = 0.0;
    double clip_hi = 0.0;
    double mean = 0.0;
    double stddev = 1.0;
};

/// Clip to foreground percentiles, then z-score with foreground statistics.
Volume clip_and_normalize(const Volume &v, const LabelMask &fg, const PreprocessSpec &spec,
                          IntensityStats *stats_out = nullptr);

/// Resample to the target spacing and normalise with the rule-derived foreground.
Volume preprocess(const Volume &v, const PreprocessSpec &spec);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentSpec {
    double p_flip = 0.5;     // per axis
    double p_rotate = 0.5;
    double p_zoom = 0.5;
    double p_shift = 0.5;
    double zoom_min = 0.9;
    double zoom_max = 1.1;
    double shift_max = 0.1;
    bool arbitrary_rotation = false; // nearest-neighbour for masks when enabled
    double max_rotation_deg = 15.0;
};

struct AugmentPlan {
    std::array<bool, 3> flip{false, false, false};
    std::optional<std::array<int, 2>> rotate_axes; // rotation plane when set
    int quarter_turns = 0;
    double rotation_deg = 0.0; // used when arbitrary_rotation is enabled
    std::optional<double> zoom;
    std::optional<double> shift;

    bool is_identity() const;
};

AugmentPlan plan_augmentation(uint64_t seed, const AugmentSpec &spec = {});
Patch apply_augmentation(const Patch &p, const AugmentPlan &plan);
Patch augment(const Patch &p, uint64_t seed, const AugmentSpec &spec = {});

Patch flip(const Patch &p, int axis);
Patch rotate90(const Patch &p, int axis_a, int axis_b, int quarter_turns);
Patch rotate_arbitrary(const Patch &p, int axis_a, int axis_b, double degrees);
Patch zoom(const Patch &p, double factor);
Patch shift_intensity(const Patch &p, double delta);

// ---------------------------------------------------------------------------
// Patch sampling

/// Caches foreground/background voxel lists for repeated patch draws.
class PatchSampler {
public:
    PatchSampler(const Volume &v, const LabelMask &m, int64_t patch_size);

    Patch sample(uint64_t seed) const;
    /// Patch cropped around an explicit centre (window clamped inside the volume).
    Patch crop_at(const Index3 &center) const;

    bool has_foreground() const { return !fg_.empty(); }

private:
    const Volume &volume_;
    const LabelMask &mask_;
    int64_t patch_size_;
    std::vector<uint32_t> fg_;
    std::vector<uint32_t> bg_;
};

Patch sample_patch(const Volume &v, const LabelMask &m, int64_t patch_size, uint64_t seed);

/// Start of a length-`window` window centred on `center`, shifted inward to stay in [0, n).
int64_t clamp_window_start(int64_t center, int64_t window, int64_t n);

/// Trilinear image / nearest-neighbour mask upsampling to model_input_size^3.
Patch upsample_patch(const Patch &p, int64_t model_input_size);

/// Continuous model-input coordinate of a patch voxel coordinate (half-pixel aligned).
double patch_to_model_coord(double patch_coord, int64_t patch_size, int64_t model_input_size);

} // namespace promise
