#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace promise {

struct Image2d {
    int64_t width = 0;
    int64_t height = 0;
    int channels = 1; // 1 = gray, 2 = gray + alpha
    std::vector<uint8_t> pixels; // row-major, interleaved channels
};

std::string encode_png(const Image2d &img);
/// Decodes 8-bit gray or gray+alpha PNGs (used to check round trips).
Image2d decode_png(const std::string &bytes);

} // namespace promise
