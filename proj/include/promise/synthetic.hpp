#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "promise/volume.hpp"

namespace promise {

struct SyntheticSpec {
    Shape3 shape{32, 32, 32};
    int n_blobs = 1;
    std::array<double, 2> blob_radius_range{4.0, 7.0}; // voxels
    double noise_std = 0.25;
    double contrast = 1.0;          // foreground mean elevation
    double bias_amplitude = 0.2;    // additive low-frequency bias field
    double boundary_roughness = 0.15; // relative radius perturbation
};

struct Ellipsoid {
    std::array<double, 3> center;
    std::array<double, 3> semi_axes;
};

struct SyntheticCase {
    Volume volume;
    LabelMask mask;
    std::vector<Ellipsoid> blobs;
};

/// Desk-scale stand-in for a CT tumour case: noisy background with a smooth bias
/// field and bright, irregular ellipsoidal lesions. Pure function of (spec, seed).
SyntheticCase generate_synthetic_case(const SyntheticSpec &spec, uint64_t seed);

} // namespace promise
