#include "promise/array3.hpp"

#include <algorithm>
#include <cmath>

namespace promise {

std::string Shape3::str() const {
    return "(" + std::to_string(d) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
}

namespace {

struct AxisLerp {
    int64_t lo;
    int64_t hi;
    double t;
};

AxisLerp axis_lerp(double c, int64_t n) {
    if (n == 1 || c <= 0.0) return {0, 0, 0.0};
    if (c >= static_cast<double>(n - 1)) return {n - 1, n - 1, 0.0};
    const auto lo = static_cast<int64_t>(std::floor(c));
    return {lo, lo + 1, c - static_cast<double>(lo)};
}

} // namespace

float sample_trilinear(const FloatArray3 &a, double z, double y, double x) {
    const auto &s = a.shape();
    const auto az = axis_lerp(z, s.d);
    const auto ay = axis_lerp(y, s.h);
    const auto ax = axis_lerp(x, s.w);

    auto along_x = [&](int64_t zi, int64_t yi) {
        const double v0 = a(zi, yi, ax.lo);
        if (ax.t == 0.0) return v0;
        return v0 + (static_cast<double>(a(zi, yi, ax.hi)) - v0) * ax.t;
    };
    auto along_y = [&](int64_t zi) {
        const double v0 = along_x(zi, ay.lo);
        if (ay.t == 0.0) return v0;
        return v0 + (along_x(zi, ay.hi) - v0) * ay.t;
    };
    const double v0 = along_y(az.lo);
    if (az.t == 0.0) return static_cast<float>(v0);
    return static_cast<float>(v0 + (along_y(az.hi) - v0) * az.t);
}

int64_t count_nonzero(const MaskArray3 &m) {
    return std::count_if(m.values().begin(), m.values().end(), [](uint8_t v) { return v != 0; });
}

} // namespace promise
