#include "pliv/png_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace pliv::io {

void write_png_rgb8(const std::string& path, int w, int h, const uint8_t* rgb) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw std::runtime_error("png: cannot open for write: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("png: write failed: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, png_uint_32(w), png_uint_32(h), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(size_t(h), nullptr);
    for (int y = 0; y < h; ++y) rows[size_t(y)] = const_cast<png_bytep>(rgb + int64_t(y) * w * 3);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

std::vector<uint8_t> read_png_rgb8(const std::string& path, int& w, int& h) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw std::runtime_error("png: cannot open for read: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("png: read failed: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    w = int(png_get_image_width(png, info));
    h = int(png_get_image_height(png, info));
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    std::vector<uint8_t> out(size_t(w) * size_t(h) * 3, 0);
    std::vector<png_bytep> rows(size_t(h), nullptr);
    for (int y = 0; y < h; ++y) rows[size_t(y)] = out.data() + int64_t(y) * w * 3;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return out;
}

std::vector<uint8_t> frame_to_rgb8(const Frame& f) {
    const int h = f.dim(1), w = f.dim(2);
    std::vector<uint8_t> rgb(size_t(w) * size_t(h) * 3);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                float v = f.d[size_t((c * h + y) * w + x)];
                v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
                rgb[size_t((y * w + x) * 3 + c)] = uint8_t(std::lround(v * 255.0f));
            }
    return rgb;
}

Frame rgb8_to_frame(const std::vector<uint8_t>& rgb, int w, int h) {
    Frame f({3, h, w});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                f.d[size_t((c * h + y) * w + x)] = float(rgb[size_t((y * w + x) * 3 + c)]) / 255.0f;
    return f;
}

void write_frame_png(const std::string& path, const Frame& f) {
    write_png_rgb8(path, f.dim(2), f.dim(1), frame_to_rgb8(f).data());
}

Frame read_frame_png(const std::string& path) {
    int w = 0, h = 0;
    auto rgb = read_png_rgb8(path, w, h);
    return rgb8_to_frame(rgb, w, h);
}

}  // namespace pliv::io
