#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "promise/array3.hpp"
#include "promise/volume.hpp"

namespace promise {

/// 2|S n G| / (|S| + |G|); 1 when both are empty.
double dice_score(const MaskArray3 &s, const MaskArray3 &g);

/// Foreground voxels with at least one 6-neighbour in background (outside counts as background).
MaskArray3 surface_voxels(const MaskArray3 &m);

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest nonzero voxel of
/// `seeds`. Infinity when `seeds` is empty.
std::vector<double> squared_distance_transform(const MaskArray3 &seeds, const Spacing &spacing);

constexpr double kDefaultNsdToleranceMm = 1.0;

/// Normalised surface Dice at `tolerance_mm`. 1 when both masks are empty, 0 when exactly one is.
double nsd_score(const MaskArray3 &s, const MaskArray3 &g, double tolerance_mm, const Spacing &spacing);

struct MetricsReport {
    std::string case_id;
    double dice = 0.0;
    double nsd = 0.0;
    double tolerance_mm = kDefaultNsdToleranceMm;
    int prompt_count = 0;

    nlohmann::json to_json() const;
};

} // namespace promise
