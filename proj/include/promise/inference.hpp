#pragma once

#include <optional>
#include <string>
#include <vector>

#include "promise/model.hpp"
#include "promise/volume.hpp"

namespace promise {

enum class WindowPolicy { prompt_centered, tiled };

std::string to_string(WindowPolicy p);
WindowPolicy window_policy_from_string(const std::string &s);

struct InferenceRequest {
    std::string volume_id;
    std::vector<PointPrompt> prompts; // voxel coordinates of the volume being segmented
    WindowPolicy policy = WindowPolicy::prompt_centered;
};

struct InferenceResult {
    MaskArray3 mask;
    FloatArray3 logits;              // averaged logits, 0 where no window reached
    std::vector<Index3> window_starts;
    std::optional<double> dice;      // when ground truth is supplied
};

/// Starts of the model windows for a volume of `shape` under `policy`. The first window is
/// centred on the first prompt and clamped in bounds; tiled adds a non-overlapping cover.
std::vector<Index3> window_starts(const Shape3 &shape, int64_t window, const std::vector<PointPrompt> &prompts,
                                  WindowPolicy policy);

/// Segments a volume that is already preprocessed with the training-time spec.
InferenceResult infer_volume(PromiseModelImpl &model, const Volume &preprocessed, const InferenceRequest &req,
                             const LabelMask *ground_truth = nullptr);

/// Preprocesses a source volume, segments it and maps the mask back onto the source grid.
/// Prompts are in source voxel coordinates.
LabelMask infer_source_volume(PromiseModelImpl &model, const Volume &source, const InferenceRequest &req);

/// Preprocessed voxel coordinate of a source voxel coordinate.
PointPrompt map_prompt_to_grid(const PointPrompt &p, const Spacing &from, const Spacing &to);

/// Foreground voxel nearest to the mask centroid (ties broken by flat index).
std::optional<Index3> centroid_foreground_voxel(const MaskArray3 &m);

} // namespace promise
