#include "promise/metrics.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace promise {

namespace {

void require_same_shape(const MaskArray3 &a, const MaskArray3 &b) {
    if (!(a.shape() == b.shape()))
        throw std::invalid_argument("mask shapes differ: " + a.shape().str() + " vs " + b.shape().str());
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas, sample positions q * step.
void edt_1d(const double *f, double *d, int64_t n, double step, std::vector<int64_t> &v, std::vector<double> &z) {
    v.assign(static_cast<std::size_t>(n), 0);
    z.assign(static_cast<std::size_t>(n) + 1, 0.0);
    int64_t k = -1;
    for (int64_t q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        const double xq = static_cast<double>(q) * step;
        while (k >= 0) {
            const auto vk = v[static_cast<std::size_t>(k)];
            const double xv = static_cast<double>(vk) * step;
            const double s = ((f[q] + xq * xq) - (f[vk] + xv * xv)) / (2.0 * (xq - xv));
            if (s <= z[static_cast<std::size_t>(k)]) {
                --k;
            } else {
                break;
            }
        }
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        if (k == 0) {
            z[0] = -kInf;
        } else {
            const auto vk = v[static_cast<std::size_t>(k - 1)];
            const double xv = static_cast<double>(vk) * step;
            z[static_cast<std::size_t>(k)] = ((f[q] + xq * xq) - (f[vk] + xv * xv)) / (2.0 * (xq - xv));
        }
        z[static_cast<std::size_t>(k) + 1] = kInf;
    }
    if (k < 0) {
        std::fill(d, d + n, kInf);
        return;
    }
    int64_t j = 0;
    for (int64_t q = 0; q < n; ++q) {
        const double xq = static_cast<double>(q) * step;
        while (z[static_cast<std::size_t>(j) + 1] < xq) ++j;
        const auto vj = v[static_cast<std::size_t>(j)];
        const double dx = xq - static_cast<double>(vj) * step;
        d[q] = dx * dx + f[vj];
    }
}

} // namespace

double dice_score(const MaskArray3 &s, const MaskArray3 &g) {
    require_same_shape(s, g);
    int64_t ns = 0, ng = 0, both = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const bool a = s.values()[i] != 0, b = g.values()[i] != 0;
        ns += a;
        ng += b;
        both += a && b;
    }
    if (ns + ng == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(ns + ng);
}

MaskArray3 surface_voxels(const MaskArray3 &m) {
    const auto &sh = m.shape();
    MaskArray3 out(sh);
    static constexpr int64_t off[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
    for (int64_t z = 0; z < sh.d; ++z)
        for (int64_t y = 0; y < sh.h; ++y)
            for (int64_t x = 0; x < sh.w; ++x) {
                if (!m(z, y, x)) continue;
                for (const auto &o : off) {
                    const Index3 n{z + o[0], y + o[1], x + o[2]};
                    if (!sh.contains(n) || !m[n]) {
                        out(z, y, x) = 1;
                        break;
                    }
                }
            }
    return out;
}

std::vector<double> squared_distance_transform(const MaskArray3 &seeds, const Spacing &spacing) {
    const auto &sh = seeds.shape();
    std::vector<double> g(seeds.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = seeds.values()[i] ? 0.0 : kInf;

    const std::array<int64_t, 3> n{sh.d, sh.h, sh.w};
    const std::array<int64_t, 3> stride{sh.h * sh.w, sh.w, 1};
    std::vector<double> line_in, line_out;
    std::vector<int64_t> v;
    std::vector<double> z;
    for (std::size_t axis = 0; axis < 3; ++axis) {
        const auto len = n[axis];
        line_in.resize(static_cast<std::size_t>(len));
        line_out.resize(static_cast<std::size_t>(len));
        const auto a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
        for (int64_t i = 0; i < n[a1]; ++i)
            for (int64_t j = 0; j < n[a2]; ++j) {
                const auto base = i * stride[a1] + j * stride[a2];
                for (int64_t q = 0; q < len; ++q) line_in[static_cast<std::size_t>(q)] = g[static_cast<std::size_t>(base + q * stride[axis])];
                edt_1d(line_in.data(), line_out.data(), len, spacing[axis], v, z);
                for (int64_t q = 0; q < len; ++q) g[static_cast<std::size_t>(base + q * stride[axis])] = line_out[static_cast<std::size_t>(q)];
            }
    }
    return g;
}

double nsd_score(const MaskArray3 &s, const MaskArray3 &g, double tolerance_mm, const Spacing &spacing) {
    require_same_shape(s, g);
    if (tolerance_mm < 0) throw std::invalid_argument("nsd: tolerance must be >= 0");
    const auto ss = surface_voxels(s), gs = surface_voxels(g);
    const auto ns = count_nonzero(ss), ng = count_nonzero(gs);
    if (ns == 0 && ng == 0) return 1.0;
    if (ns == 0 || ng == 0) return 0.0;
    const auto ds = squared_distance_transform(gs, spacing); // distance to G surface
    const auto dg = squared_distance_transform(ss, spacing); // distance to S surface
    const double tol2 = tolerance_mm * tolerance_mm + 1e-9;
    int64_t within = 0;
    for (std::size_t i = 0; i < ss.size(); ++i) {
        if (ss.values()[i] && ds[i] <= tol2) ++within;
        if (gs.values()[i] && dg[i] <= tol2) ++within;
    }
    return static_cast<double>(within) / static_cast<double>(ns + ng);
}

nlohmann::json MetricsReport::to_json() const {
    return {{"case_id", case_id}, {"dice", dice}, {"nsd", nsd}, {"tolerance_mm", tolerance_mm}, {"prompt_count", prompt_count}};
}

} // namespace promise
