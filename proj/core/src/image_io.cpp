#include "sparsesplat/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace ssplat {

namespace {

static_assert(std::endian::native == std::endian::little,
              "float maps are written in host order and must be little-endian");

std::string next_token(std::istream& in) {
    std::string tok;
    in >> tok;
    return tok;
}

} // namespace

void write_pfm(const std::filesystem::path& path, const ImageF& image) {
    if (image.channels() != 1 && image.channels() != 3)
        throw Error(ErrorCode::ShapeMismatch, "PFM supports 1 or 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw Error(ErrorCode::Io, "cannot open " + path.string() + " for writing");
    out << (image.channels() == 3 ? "PF" : "Pf") << '\n'
        << image.width() << ' ' << image.height() << '\n'
        << "-1.0\n";
    const std::size_t row = static_cast<std::size_t>(image.width()) * image.channels();
    for (int y = image.height() - 1; y >= 0; --y)
        out.write(reinterpret_cast<const char*>(image.data().data() + y * row),
                  static_cast<std::streamsize>(row * sizeof(float)));
    if (!out)
        throw Error(ErrorCode::Io, "failed writing " + path.string());
}

ImageF read_pfm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error(ErrorCode::MissingFile, "missing float map " + path.string());
    const std::string magic = next_token(in);
    int channels = 0;
    if (magic == "PF")
        channels = 3;
    else if (magic == "Pf")
        channels = 1;
    else
        throw Error(ErrorCode::MalformedFrame, path.string() + " is not a PFM file");
    int width = 0, height = 0;
    double scale = 0.0;
    in >> width >> height >> scale;
    in.get(); // single whitespace before the raster
    if (!in || width <= 0 || height <= 0)
        throw Error(ErrorCode::MalformedFrame, path.string() + " has a malformed PFM header");
    if (scale >= 0.0)
        throw Error(ErrorCode::MalformedFrame, path.string() + " is big-endian; only little-endian is supported");
    ImageF image(width, height, channels);
    const std::size_t row = static_cast<std::size_t>(width) * channels;
    for (int y = height - 1; y >= 0; --y)
        in.read(reinterpret_cast<char*>(image.data().data() + y * row),
                static_cast<std::streamsize>(row * sizeof(float)));
    if (!in)
        throw Error(ErrorCode::MalformedFrame, path.string() + " is truncated");
    return image;
}

void write_png(const std::filesystem::path& path, const ImageF& image) {
    const int channels = image.channels();
    if (channels != 1 && channels != 3)
        throw Error(ErrorCode::ShapeMismatch, "PNG export supports 1 or 3 channels");
    std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!file)
        throw Error(ErrorCode::Io, "cannot open " + path.string() + " for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw Error(ErrorCode::Io, "libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error(ErrorCode::Io, "libpng failed writing " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, image.width(), image.height(), 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<std::size_t>(image.width()) * channels);
    for (int y = 0; y < image.height(); ++y) {
        for (int x = 0; x < image.width(); ++x)
            for (int c = 0; c < channels; ++c) {
                const float v = std::clamp(image.at(x, y, c), 0.0f, 1.0f);
                row[static_cast<std::size_t>(x) * channels + c] =
                    static_cast<png_byte>(std::lround(v * 255.0f));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

ImageF normalize_for_display(const ImageF& map) {
    ImageF out(map.width(), map.height(), map.channels());
    if (map.empty())
        return out;
    const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
    const float range = *hi - *lo;
    if (!(range > 0.0f))
        return out;
    for (std::size_t i = 0; i < map.size(); ++i)
        out[i] = (map[i] - *lo) / range;
    return out;
}

} // namespace ssplat
