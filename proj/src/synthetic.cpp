#include "promise/synthetic.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace promise {

SyntheticCase generate_synthetic_case(const SyntheticSpec &spec, uint64_t seed) {
    const auto &shape = spec.shape;
    const double r_lo = spec.blob_radius_range[0], r_hi = spec.blob_radius_range[1];
    if (!(r_lo > 0.0) || r_hi < r_lo) throw std::invalid_argument("synthetic: invalid blob radius range");
    for (std::size_t a = 0; a < 3; ++a)
        if (spec.n_blobs > 0 && 2.0 * r_hi * (1.0 + spec.boundary_roughness) + 2.0 > static_cast<double>(shape[a]))
            throw std::invalid_argument("synthetic: blob radius does not fit shape " + shape.str());

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, spec.noise_std);

    SyntheticCase out;
    out.volume = Volume{FloatArray3(shape), {1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}, "synthetic-" + std::to_string(seed)};
    out.mask = LabelMask{MaskArray3(shape), {1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}};

    // Low-frequency bias: one random plane wave per axis.
    std::array<double, 3> freq{}, phase{};
    for (std::size_t a = 0; a < 3; ++a) {
        freq[a] = (0.5 + u01(rng)) * M_PI / static_cast<double>(shape[a]);
        phase[a] = u01(rng) * 2.0 * M_PI;
    }

    struct Lesion {
        Ellipsoid geom;
        std::array<double, 4> wobble; // roughness harmonics: amplitude weights and phases
    };
    std::vector<Lesion> lesions;
    for (int i = 0; i < spec.n_blobs; ++i) {
        Lesion l{};
        const double r = r_lo + (r_hi - r_lo) * u01(rng);
        for (std::size_t a = 0; a < 3; ++a) {
            l.geom.semi_axes[a] = r * (0.85 + 0.3 * u01(rng));
            const double margin = l.geom.semi_axes[a] * (1.0 + spec.boundary_roughness) + 1.0;
            l.geom.center[a] = margin + (static_cast<double>(shape[a]) - 1.0 - 2.0 * margin) * u01(rng);
        }
        for (auto &w : l.wobble) w = u01(rng) * 2.0 * M_PI;
        lesions.push_back(l);
        out.blobs.push_back(l.geom);
    }

    for (int64_t z = 0; z < shape.d; ++z)
        for (int64_t y = 0; y < shape.h; ++y)
            for (int64_t x = 0; x < shape.w; ++x) {
                const double bias = spec.bias_amplitude *
                                    (std::sin(freq[0] * z + phase[0]) + std::sin(freq[1] * y + phase[1]) +
                                     std::sin(freq[2] * x + phase[2])) / 3.0;
                bool inside = false;
                for (const auto &l : lesions) {
                    const double dz = (z - l.geom.center[0]) / l.geom.semi_axes[0];
                    const double dy = (y - l.geom.center[1]) / l.geom.semi_axes[1];
                    const double dx = (x - l.geom.center[2]) / l.geom.semi_axes[2];
                    const double rho = std::sqrt(dz * dz + dy * dy + dx * dx);
                    if (rho > 1.0 + spec.boundary_roughness) continue;
                    const double theta = std::atan2(dy, dx);
                    const double phi = std::atan2(std::sqrt(dx * dx + dy * dy), dz);
                    const double wobble = std::sin(3.0 * theta + l.wobble[0]) * std::sin(2.0 * phi + l.wobble[1]) * 0.6 +
                                          std::sin(2.0 * theta + l.wobble[2]) * std::cos(3.0 * phi + l.wobble[3]) * 0.4;
                    if (rho <= 1.0 + spec.boundary_roughness * wobble) {
                        inside = true;
                        break;
                    }
                }
                out.mask.data(z, y, x) = inside ? 1 : 0;
                out.volume.data(z, y, x) =
                    static_cast<float>(bias + (inside ? spec.contrast : 0.0) + noise(rng));
            }
    return out;
}

} // namespace promise
