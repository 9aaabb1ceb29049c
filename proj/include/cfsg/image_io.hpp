#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <png.h>

#include "cfsg/error.hpp"
#include "cfsg/image.hpp"

namespace cfsg {

namespace detail {

struct FileHandle {
    std::FILE* f = nullptr;
    explicit FileHandle(const std::string& path, const char* mode)
        : f(std::fopen(path.c_str(), mode)) {}
    ~FileHandle() { if (f) std::fclose(f); }
    FileHandle(const FileHandle&) = delete;
    FileHandle& operator=(const FileHandle&) = delete;
};

inline std::uint8_t to_byte(float v) {
    const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

// Reads an arbitrary PNG as 8-bit rows with `channels` samples per pixel.
inline std::vector<std::uint8_t> read_png_rows(const std::string& path, int& w,
                                               int& h, int channels) {
    FileHandle fh(path, "rb");
    if (!fh.f) throw IoError("cannot open " + path);
    png_byte sig[8];
    if (std::fread(sig, 1, 8, fh.f) != 8 || png_sig_cmp(sig, 0, 8))
        throw DataError(path + ": not a PNG file");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                             nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError(path + ": corrupt or truncated PNG");
    }
    png_init_io(png, fh.f);
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    w = static_cast<int>(png_get_image_width(png, info));
    h = static_cast<int>(png_get_image_height(png, info));
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (channels == 3) {
        if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
            png_set_gray_to_rgb(png);
        png_set_strip_alpha(png);
    } else {
        if (color != PNG_COLOR_TYPE_GRAY)
            png_set_rgb_to_gray_fixed(png, 1, -1, -1);
        png_set_strip_alpha(png);
    }
    png_read_update_info(png, info);
    std::vector<std::uint8_t> rows(static_cast<std::size_t>(w) * h * channels);
    std::vector<png_bytep> ptrs(h);
    for (int y = 0; y < h; ++y)
        ptrs[y] = rows.data() + static_cast<std::size_t>(y) * w * channels;
    png_read_image(png, ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return rows;
}

// Writes go to a temporary sibling first and are renamed into place, so a
// failed save never leaves a partial raster behind.
inline void write_png_rows(const std::string& path,
                           const std::vector<std::uint8_t>& rows, int w, int h,
                           int channels) {
    const std::string tmp = path + ".tmp";
    {
        FileHandle fh(tmp, "wb");
        if (!fh.f) throw IoError("cannot open " + tmp + " for writing");
        png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING,
                                                  nullptr, nullptr, nullptr);
        png_infop info = png_create_info_struct(png);
        if (setjmp(png_jmpbuf(png))) {
            png_destroy_write_struct(&png, &info);
            throw IoError(path + ": PNG write failed");
        }
        png_init_io(png, fh.f);
        png_set_IHDR(png, info, w, h, 8,
                     channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                     PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                     PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        std::vector<png_bytep> ptrs(h);
        for (int y = 0; y < h; ++y)
            ptrs[y] = const_cast<png_bytep>(
                rows.data() + static_cast<std::size_t>(y) * w * channels);
        png_write_image(png, ptrs.data());
        png_write_end(png, nullptr);
        png_destroy_write_struct(&png, &info);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename " + tmp + " -> " + path + ": " + ec.message());
}

inline bool has_png_signature(const std::string& path) {
    FileHandle fh(path, "rb");
    if (!fh.f) throw IoError("cannot open " + path);
    png_byte sig[8];
    if (std::fread(sig, 1, 8, fh.f) != 8) throw DataError(path + ": truncated file");
    return png_sig_cmp(sig, 0, 8) == 0;
}

} // namespace detail

/// Loads an RGB image from PNG or binary PPM (P6); detects format by magic.
inline ImageRGB load_image(const std::string& path) {
    if (detail::has_png_signature(path)) {
        int w = 0, h = 0;
        const auto rows = detail::read_png_rows(path, w, h, 3);
        ImageRGB img(w, h);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c)
                    img.at(c, y, x) =
                        rows[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0f;
        return img;
    }
    // PPM P6
    detail::FileHandle fh(path, "rb");
    if (!fh.f) throw IoError("cannot open " + path);
    char magic[3] = {0, 0, 0};
    if (std::fscanf(fh.f, "%2s", magic) != 1 || std::strcmp(magic, "P6") != 0)
        throw DataError(path + ": unsupported image format (want PNG or PPM P6)");
    int w = 0, h = 0, maxval = 0;
    if (std::fscanf(fh.f, "%d %d %d", &w, &h, &maxval) != 3 || w < 1 || h < 1 ||
        maxval != 255)
        throw DataError(path + ": malformed PPM header");
    std::fgetc(fh.f); // single whitespace after header
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(w) * h * 3);
    if (std::fread(buf.data(), 1, buf.size(), fh.f) != buf.size())
        throw DataError(path + ": truncated PPM payload");
    ImageRGB img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) =
                    buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0f;
    return img;
}

/// Saves an RGB image; format chosen by extension (.png or .ppm).
inline void save_image(const ImageRGB& img, const std::string& path) {
    std::vector<std::uint8_t> rows(static_cast<std::size_t>(img.width) *
                                   img.height * 3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                rows[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] =
                    detail::to_byte(img.at(c, y, x));
    const auto ext = std::filesystem::path(path).extension().string();
    if (ext == ".ppm") {
        const std::string tmp = path + ".tmp";
        {
            detail::FileHandle fh(tmp, "wb");
            if (!fh.f) throw IoError("cannot open " + tmp + " for writing");
            std::fprintf(fh.f, "P6\n%d %d\n255\n", img.width, img.height);
            if (std::fwrite(rows.data(), 1, rows.size(), fh.f) != rows.size())
                throw IoError(tmp + ": short write");
        }
        std::error_code ec;
        std::filesystem::rename(tmp, path, ec);
        if (ec)
            throw IoError("rename " + tmp + " -> " + path + ": " + ec.message());
    } else {
        detail::write_png_rows(path, rows, img.width, img.height, 3);
    }
}

/// Loads a class mask from a single-channel PNG; values must be < num_classes.
inline LabelMask load_mask(const std::string& path, int num_classes = 3) {
    int w = 0, h = 0;
    const auto rows = detail::read_png_rows(path, w, h, 1);
    LabelMask m(w, h);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= num_classes)
            throw DataError(path + ": mask value " + std::to_string(rows[i]) +
                            " outside [0," + std::to_string(num_classes) + ")");
        m.ids[i] = rows[i];
    }
    return m;
}

/// Stores class ids directly as 8-bit grayscale PNG samples.
inline void save_mask(const LabelMask& mask, const std::string& path) {
    std::vector<std::uint8_t> rows(mask.ids.begin(), mask.ids.end());
    detail::write_png_rows(path, rows, mask.width, mask.height, 1);
}

/// Color-coded class map (soil brown, crop green, weed red).
inline ImageRGB colorize_mask(const LabelMask& mask) {
    static const float palette[3][3] = {
        {0.41f, 0.27f, 0.18f}, // soil
        {0.13f, 0.63f, 0.15f}, // crop
        {0.86f, 0.16f, 0.16f}, // weed
    };
    ImageRGB img(mask.width, mask.height);
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x) {
            const int id = std::min<int>(mask.at(y, x), 2);
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = palette[id][c];
        }
    return img;
}

} // namespace cfsg
