#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace promise {

/// Voxel index or extent in array-axis order (axis 0 = z, slowest; axis 2 = x, fastest).
using Index3 = std::array<int64_t, 3>;

struct Shape3 {
    int64_t d = 0;
    int64_t h = 0;
    int64_t w = 0;

    int64_t operator[](std::size_t axis) const { return axis == 0 ? d : (axis == 1 ? h : w); }
    int64_t &operator[](std::size_t axis) { return axis == 0 ? d : (axis == 1 ? h : w); }
    int64_t numel() const { return d * h * w; }
    bool contains(const Index3 &i) const {
        return i[0] >= 0 && i[0] < d && i[1] >= 0 && i[1] < h && i[2] >= 0 && i[2] < w;
    }
    bool operator==(const Shape3 &) const = default;
    std::string str() const;
};

/// Dense C-order 3D array.
template <typename T>
class Array3 {
public:
    Array3() = default;
    explicit Array3(Shape3 shape, T fill = T{}) : shape_(shape), data_(checked_size(shape), fill) {}
    Array3(Shape3 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != shape_.numel())
            throw std::invalid_argument("Array3: data size does not match shape " + shape_.str());
    }

    const Shape3 &shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::size_t offset(int64_t z, int64_t y, int64_t x) const {
        return static_cast<std::size_t>((z * shape_.h + y) * shape_.w + x);
    }
    T &operator()(int64_t z, int64_t y, int64_t x) { return data_[offset(z, y, x)]; }
    const T &operator()(int64_t z, int64_t y, int64_t x) const { return data_[offset(z, y, x)]; }
    T &operator[](const Index3 &i) { return (*this)(i[0], i[1], i[2]); }
    const T &operator[](const Index3 &i) const { return (*this)(i[0], i[1], i[2]); }

    Index3 unravel(std::size_t flat) const {
        const auto f = static_cast<int64_t>(flat);
        return {f / (shape_.h * shape_.w), (f / shape_.w) % shape_.h, f % shape_.w};
    }

    std::vector<T> &values() { return data_; }
    const std::vector<T> &values() const { return data_; }
    T *data() { return data_.data(); }
    const T *data() const { return data_.data(); }

    /// Copy of the box [start, start + extent).
    Array3 crop(const Index3 &start, const Shape3 &extent) const {
        Array3 out(extent);
        for (int64_t z = 0; z < extent.d; ++z)
            for (int64_t y = 0; y < extent.h; ++y)
                for (int64_t x = 0; x < extent.w; ++x)
                    out(z, y, x) = (*this)(start[0] + z, start[1] + y, start[2] + x);
        return out;
    }

    bool operator==(const Array3 &) const = default;

private:
    static std::size_t checked_size(const Shape3 &s) {
        if (s.d < 0 || s.h < 0 || s.w < 0) throw std::invalid_argument("Array3: negative extent " + s.str());
        return static_cast<std::size_t>(s.numel());
    }

    Shape3 shape_{};
    std::vector<T> data_;
};

using FloatArray3 = Array3<float>;
using MaskArray3 = Array3<uint8_t>;

/// Trilinear sample at a continuous index coordinate, clamped to the array bounds.
float sample_trilinear(const FloatArray3 &a, double z, double y, double x);

namespace detail {
inline int64_t clamp_round(double c, int64_t n) {
    auto i = static_cast<int64_t>(std::floor(c + 0.5));
    return i < 0 ? 0 : (i >= n ? n - 1 : i);
}
} // namespace detail

/// Nearest-neighbour sample (round half up), clamped to the array bounds.
template <typename T>
T sample_nearest(const Array3<T> &a, double z, double y, double x) {
    const auto &s = a.shape();
    return a(detail::clamp_round(z, s.d), detail::clamp_round(y, s.h), detail::clamp_round(x, s.w));
}

int64_t count_nonzero(const MaskArray3 &m);

} // namespace promise
