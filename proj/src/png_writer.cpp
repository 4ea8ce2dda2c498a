#include "promise/png_writer.hpp"

#include <cstring>
#include <stdexcept>

#include <png.h>

namespace promise {

namespace {

void write_to_string(png_structp png, png_bytep data, png_size_t length) {
    auto *out = static_cast<std::string *>(png_get_io_ptr(png));
    out->append(reinterpret_cast<const char *>(data), length);
}

void flush_noop(png_structp) {}

struct ReadCursor {
    const std::string *bytes;
    std::size_t pos;
};

void read_from_string(png_structp png, png_bytep data, png_size_t length) {
    auto *cur = static_cast<ReadCursor *>(png_get_io_ptr(png));
    if (cur->pos + length > cur->bytes->size()) png_error(png, "truncated PNG");
    std::memcpy(data, cur->bytes->data() + cur->pos, length);
    cur->pos += length;
}

[[noreturn]] void on_error(png_structp, png_const_charp msg) { throw std::runtime_error(std::string("png: ") + msg); }
void on_warning(png_structp, png_const_charp) {}

} // namespace

std::string encode_png(const Image2d &img) {
    if (img.channels != 1 && img.channels != 2) throw std::invalid_argument("encode_png: 1 or 2 channels supported");
    if (img.width < 1 || img.height < 1 ||
        static_cast<int64_t>(img.pixels.size()) != img.width * img.height * img.channels)
        throw std::invalid_argument("encode_png: pixel buffer does not match the image size");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, on_error, on_warning);
    if (!png) throw std::runtime_error("png: cannot create write struct");
    png_infop info = png_create_info_struct(png);
    std::string out;
    try {
        png_set_write_fn(png, &out, write_to_string, flush_noop);
        png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                     img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_GRAY_ALPHA, PNG_INTERLACE_NONE,
                     PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        const auto stride = static_cast<std::size_t>(img.width * img.channels);
        for (int64_t r = 0; r < img.height; ++r)
            png_write_row(png, const_cast<png_bytep>(img.pixels.data() + static_cast<std::size_t>(r) * stride));
        png_write_end(png, nullptr);
    } catch (...) {
        png_destroy_write_struct(&png, &info);
        throw;
    }
    png_destroy_write_struct(&png, &info);
    return out;
}

Image2d decode_png(const std::string &bytes) {
    if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0)
        throw std::invalid_argument("decode_png: not a PNG stream");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, on_error, on_warning);
    if (!png) throw std::runtime_error("png: cannot create read struct");
    png_infop info = png_create_info_struct(png);
    ReadCursor cur{&bytes, 0};
    Image2d img;
    try {
        png_set_read_fn(png, &cur, read_from_string);
        png_read_info(png, info);
        const auto type = png_get_color_type(png, info);
        if (png_get_bit_depth(png, info) != 8 || (type != PNG_COLOR_TYPE_GRAY && type != PNG_COLOR_TYPE_GRAY_ALPHA))
            throw std::invalid_argument("decode_png: only 8-bit gray / gray+alpha supported");
        img.width = png_get_image_width(png, info);
        img.height = png_get_image_height(png, info);
        img.channels = type == PNG_COLOR_TYPE_GRAY ? 1 : 2;
        img.pixels.resize(static_cast<std::size_t>(img.width * img.height * img.channels));
        const auto stride = static_cast<std::size_t>(img.width * img.channels);
        for (int64_t r = 0; r < img.height; ++r) png_read_row(png, img.pixels.data() + static_cast<std::size_t>(r) * stride, nullptr);
        png_read_end(png, nullptr);
    } catch (...) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

} // namespace promise
