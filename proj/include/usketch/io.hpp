#pragma once

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "usketch/error.hpp"
#include "usketch/tensor.hpp"

namespace usketch {

// 8-bit grayscale raster held as rows of bytes.
struct GrayImage {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> v;  // row-major

    uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
    uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
};

namespace detail {

struct PngReadCloser {
    png_structp png = nullptr;
    png_infop info = nullptr;
    FILE* fp = nullptr;
    ~PngReadCloser() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (fp) std::fclose(fp);
    }
};
struct PngWriteCloser {
    png_structp png = nullptr;
    png_infop info = nullptr;
    FILE* fp = nullptr;
    ~PngWriteCloser() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (fp) std::fclose(fp);
    }
};

}  // namespace detail

// Reads an 8-bit PNG. Grayscale is taken as-is; RGB(A) collapses to gray by
// integer-average (exact for the monochrome files this project writes).
inline GrayImage read_png_gray(const std::string& path) {
    detail::PngReadCloser c;
    c.fp = std::fopen(path.c_str(), "rb");
    if (!c.fp) throw IoError("cannot open image '" + path + "'");
    png_byte header[8];
    if (std::fread(header, 1, 8, c.fp) != 8 || png_sig_cmp(header, 0, 8)) {
        throw IoError("'" + path + "' is not a PNG file");
    }
    c.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!c.png) throw IoError("png reader allocation failed");
    c.info = png_create_info_struct(c.png);
    if (!c.info) throw IoError("png reader allocation failed");
    if (setjmp(png_jmpbuf(c.png))) throw IoError("failed to decode PNG '" + path + "'");
    png_init_io(c.png, c.fp);
    png_set_sig_bytes(c.png, 8);
    png_read_info(c.png, c.info);

    png_set_strip_16(c.png);
    png_set_strip_alpha(c.png);
    png_set_palette_to_rgb(c.png);
    png_set_expand_gray_1_2_4_to_8(c.png);
    png_read_update_info(c.png, c.info);

    const int w = static_cast<int>(png_get_image_width(c.png, c.info));
    const int h = static_cast<int>(png_get_image_height(c.png, c.info));
    const int ch = png_get_channels(c.png, c.info);
    if (ch != 1 && ch != 3) throw IoError("'" + path + "' has unsupported channel count");

    std::vector<uint8_t> row(static_cast<size_t>(w) * ch);
    GrayImage img;
    img.h = h;
    img.w = w;
    img.v.resize(static_cast<size_t>(h) * w);
    for (int y = 0; y < h; ++y) {
        png_read_row(c.png, row.data(), nullptr);
        if (ch == 1) {
            std::copy(row.begin(), row.end(), img.v.begin() + static_cast<size_t>(y) * w);
        } else {
            for (int x = 0; x < w; ++x) {
                const int sum = row[3 * x] + row[3 * x + 1] + row[3 * x + 2];
                img.v[static_cast<size_t>(y) * w + x] = static_cast<uint8_t>((sum + 1) / 3);
            }
        }
    }
    return img;
}

// Writes an 8-bit grayscale PNG (atomically: temp file + rename). Output
// bytes depend only on the pixel data, so identical images produce
// identical files.
inline void write_png_gray(const GrayImage& img, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        detail::PngWriteCloser c;
        c.fp = std::fopen(tmp.c_str(), "wb");
        if (!c.fp) throw IoError("cannot open '" + tmp + "' for writing");
        c.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        if (!c.png) throw IoError("png writer allocation failed");
        c.info = png_create_info_struct(c.png);
        if (!c.info) throw IoError("png writer allocation failed");
        if (setjmp(png_jmpbuf(c.png))) throw IoError("failed to encode PNG '" + tmp + "'");
        png_init_io(c.png, c.fp);
        png_set_IHDR(c.png, c.info, img.w, img.h, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                     PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(c.png, c.info);
        for (int y = 0; y < img.h; ++y) {
            png_write_row(c.png, const_cast<png_bytep>(img.v.data() + static_cast<size_t>(y) * img.w));
        }
        png_write_end(c.png, nullptr);
    }
    std::filesystem::rename(tmp, path);
}

// [0,1] float plane -> 8-bit, round half away from zero, clamped.
template <typename S>
GrayImage to_gray8(const Tensor<S>& t) {
    if (t.c != 1) throw InputError("to_gray8: expected a single-channel tensor, got " +
                                   t.shape_str());
    GrayImage img;
    img.h = t.h;
    img.w = t.w;
    img.v.resize(t.plane_size());
    for (size_t i = 0; i < img.v.size(); ++i) {
        const double x = std::round(static_cast<double>(t.v[i]) * 255.0);
        img.v[i] = static_cast<uint8_t>(std::min(255.0, std::max(0.0, x)));
    }
    return img;
}

template <typename S>
Tensor<S> from_gray8(const GrayImage& img) {
    Tensor<S> t(1, img.h, img.w);
    for (size_t i = 0; i < img.v.size(); ++i) {
        t.v[i] = static_cast<S>(img.v[i] / 255.0);
    }
    return t;
}

}  // namespace usketch
