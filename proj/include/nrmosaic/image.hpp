#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nrmosaic/geometry.hpp"

namespace nrmosaic {

/// Interleaved 8-bit raster: 1 (gray), 3 (RGB) or 4 (RGBA) channels.
struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> data;

    static ImageU8 make(int w, int h, int c, std::uint8_t fill = 0) {
        ImageU8 im;
        im.width = w;
        im.height = h;
        im.channels = c;
        im.data.assign(static_cast<std::size_t>(w) * h * c, fill);
        return im;
    }

    bool empty() const { return width == 0 || height == 0; }
    std::uint8_t& at(int x, int y, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::uint8_t at(int x, int y, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

/// Single-channel float image, used for detector responses and gray frames.
struct ImageF {
    int width = 0;
    int height = 0;
    std::vector<float> data;

    static ImageF make(int w, int h, float fill = 0.f) {
        ImageF im;
        im.width = w;
        im.height = h;
        im.data.assign(static_cast<std::size_t>(w) * h, fill);
        return im;
    }

    float& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
    float at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

inline ImageF to_gray(const ImageU8& im) {
    ImageF g = ImageF::make(im.width, im.height);
    const std::size_t n = static_cast<std::size_t>(im.width) * im.height;
    if (im.channels == 1) {
        for (std::size_t i = 0; i < n; ++i) g.data[i] = im.data[i] * (1.f / 255.f);
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint8_t* p = &im.data[i * im.channels];
            g.data[i] = (0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2]) * (1.f / 255.f);
        }
    }
    return g;
}

/// Bilinear RGB sample; caller guarantees 0 <= x <= w-1, 0 <= y <= h-1.
inline std::array<double, 3> sample_bilinear_rgb(const ImageU8& im, double x, double y) {
    const int x0 = std::min(static_cast<int>(x), im.width - 2 >= 0 ? im.width - 2 : 0);
    const int y0 = std::min(static_cast<int>(y), im.height - 2 >= 0 ? im.height - 2 : 0);
    const double fx = x - x0, fy = y - y0;
    const int x1 = std::min(x0 + 1, im.width - 1);
    const int y1 = std::min(y0 + 1, im.height - 1);
    std::array<double, 3> out{};
    for (int c = 0; c < 3; ++c) {
        const int ch = im.channels == 1 ? 0 : c;
        const double v00 = im.at(x0, y0, ch), v10 = im.at(x1, y0, ch);
        const double v01 = im.at(x0, y1, ch), v11 = im.at(x1, y1, ch);
        out[c] = ((1 - fx) * v00 + fx * v10) * (1 - fy) + ((1 - fx) * v01 + fx * v11) * fy;
    }
    return out;
}

inline float sample_bilinear(const ImageF& im, double x, double y) {
    const int x0 = std::min(static_cast<int>(x), im.width - 2 >= 0 ? im.width - 2 : 0);
    const int y0 = std::min(static_cast<int>(y), im.height - 2 >= 0 ? im.height - 2 : 0);
    const double fx = x - x0, fy = y - y0;
    const int x1 = std::min(x0 + 1, im.width - 1);
    const int y1 = std::min(y0 + 1, im.height - 1);
    const double v00 = im.at(x0, y0), v10 = im.at(x1, y0);
    const double v01 = im.at(x0, y1), v11 = im.at(x1, y1);
    return static_cast<float>(((1 - fx) * v00 + fx * v10) * (1 - fy) +
                              ((1 - fx) * v01 + fx * v11) * fy);
}

// ---------------------------------------------------------------------------
// PNG I/O (libpng)
// ---------------------------------------------------------------------------

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline ImageU8 load_png(const std::string& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw std::runtime_error("cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw std::runtime_error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("failed to decode PNG " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    const png_byte color_type = png_get_color_type(png, info);
    const png_byte bit_depth = png_get_bit_depth(png, info);
    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_read_update_info(png, info);

    ImageU8 im;
    im.width = static_cast<int>(png_get_image_width(png, info));
    im.height = static_cast<int>(png_get_image_height(png, info));
    im.channels = static_cast<int>(png_get_channels(png, info));
    im.data.resize(static_cast<std::size_t>(im.width) * im.height * im.channels);

    std::vector<png_bytep> rows(im.height);
    const std::size_t stride = static_cast<std::size_t>(im.width) * im.channels;
    for (int y = 0; y < im.height; ++y) rows[y] = im.data.data() + y * stride;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return im;
}

inline void save_png(const std::string& path, const ImageU8& im) {
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("cannot write " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("failed to encode PNG " + path);
    }
    int color_type;
    switch (im.channels) {
        case 1: color_type = PNG_COLOR_TYPE_GRAY; break;
        case 3: color_type = PNG_COLOR_TYPE_RGB; break;
        case 4: color_type = PNG_COLOR_TYPE_RGBA; break;
        default: png_destroy_write_struct(&png, &info);
                 throw std::runtime_error("unsupported channel count");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, im.width, im.height, 8, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t stride = static_cast<std::size_t>(im.width) * im.channels;
    for (int y = 0; y < im.height; ++y)
        png_write_row(png, const_cast<png_bytep>(im.data.data() + y * stride));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// ---------------------------------------------------------------------------
// PGM / PPM (binary, maxval 255)
// ---------------------------------------------------------------------------

inline ImageU8 load_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string magic;
    in >> magic;
    int channels;
    if (magic == "P5") channels = 1;
    else if (magic == "P6") channels = 3;
    else throw std::runtime_error(path + ": unsupported PNM magic '" + magic + "'");

    auto next_int = [&in, &path]() {
        for (;;) {
            int c = in.peek();
            if (c == '#') { std::string line; std::getline(in, line); continue; }
            if (std::isspace(c)) { in.get(); continue; }
            break;
        }
        int v;
        if (!(in >> v)) throw std::runtime_error(path + ": truncated PNM header");
        return v;
    };
    const int w = next_int(), h = next_int(), maxval = next_int();
    if (maxval != 255) throw std::runtime_error(path + ": only maxval 255 supported");
    in.get();  // single whitespace after header

    ImageU8 im = ImageU8::make(w, h, channels);
    in.read(reinterpret_cast<char*>(im.data.data()), static_cast<std::streamsize>(im.data.size()));
    if (in.gcount() != static_cast<std::streamsize>(im.data.size()))
        throw std::runtime_error(path + ": truncated PNM payload");
    return im;
}

inline void save_pnm(const std::string& path, const ImageU8& im) {
    if (im.channels != 1 && im.channels != 3)
        throw std::runtime_error("PNM supports 1 or 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << (im.channels == 1 ? "P5" : "P6") << "\n"
        << im.width << " " << im.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(im.data.data()),
              static_cast<std::streamsize>(im.data.size()));
}

inline ImageU8 load_image(const std::string& path) {
    const auto dot = path.find_last_of('.');
    std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    if (ext == "png") return load_png(path);
    if (ext == "pgm" || ext == "ppm" || ext == "pnm") return load_pnm(path);
    throw std::runtime_error(path + ": unsupported image extension '" + ext + "'");
}

/// Frame sequences: image files in a directory ordered by the last number in
/// the file name (then lexicographically as a tie break).
inline std::vector<std::string> list_frames(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw std::runtime_error(dir + ": not a directory");
    std::vector<std::pair<long long, std::string>> keyed;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string name = entry.path().filename().string();
        std::string ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(),
                       [](unsigned char c) { return std::tolower(c); });
        if (ext != ".png" && ext != ".pgm" && ext != ".ppm" && ext != ".pnm") continue;
        long long num = -1;
        for (std::size_t i = 0; i < name.size();) {
            if (std::isdigit(static_cast<unsigned char>(name[i]))) {
                long long v = 0;
                while (i < name.size() && std::isdigit(static_cast<unsigned char>(name[i])))
                    v = v * 10 + (name[i++] - '0');
                num = v;
            } else {
                ++i;
            }
        }
        keyed.emplace_back(num, entry.path().string());
    }
    std::sort(keyed.begin(), keyed.end());
    std::vector<std::string> out;
    out.reserve(keyed.size());
    for (auto& [num, path] : keyed) out.push_back(std::move(path));
    return out;
}

}  // namespace nrmosaic
