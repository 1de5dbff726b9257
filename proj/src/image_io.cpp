#include "sfl/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace sfl {
namespace {

bool has_extension(const std::filesystem::path& path, std::string_view ext) {
    std::string e = path.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e == ext;
}

// Skips whitespace and '#' comments in a PNM header.
void skip_pnm_space(std::istream& in) {
    for (;;) {
        const int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            return;
        }
    }
}

std::size_t read_pnm_int(std::istream& in, const std::filesystem::path& path) {
    skip_pnm_space(in);
    long v = -1;
    in >> v;
    if (!in || v < 0) throw std::runtime_error("malformed PGM header in " + path.string());
    return static_cast<std::size_t>(v);
}

Raster read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    if (magic != "P5" && magic != "P2") throw std::runtime_error("unsupported PGM variant in " + path.string());
    Raster r;
    r.width = read_pnm_int(in, path);
    r.height = read_pnm_int(in, path);
    const std::size_t maxval = read_pnm_int(in, path);
    if (r.width == 0 || r.height == 0 || maxval == 0 || maxval > 255)
        throw std::runtime_error("unsupported PGM geometry or depth in " + path.string());
    r.channels = 1;
    r.pixels.resize(r.width * r.height);
    if (magic == "P5") {
        in.get();  // single whitespace before raster
        in.read(reinterpret_cast<char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
        if (in.gcount() != static_cast<std::streamsize>(r.pixels.size()))
            throw std::runtime_error("truncated PGM raster in " + path.string());
    } else {
        for (auto& px : r.pixels) px = static_cast<std::uint8_t>(read_pnm_int(in, path));
    }
    if (maxval != 255)
        for (auto& px : r.pixels) px = static_cast<std::uint8_t>(std::lround(px * 255.0 / static_cast<double>(maxval)));
    return r;
}

Raster read_png(const std::filesystem::path& path) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.string().c_str()))
        throw std::runtime_error("cannot read PNG " + path.string() + ": " + image.message);
    const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
    image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    Raster r;
    r.width = image.width;
    r.height = image.height;
    r.channels = color ? 3 : 1;
    r.pixels.resize(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, r.pixels.data(), 0, nullptr)) {
        const std::string msg = image.message;
        png_image_free(&image);
        throw std::runtime_error("cannot decode PNG " + path.string() + ": " + msg);
    }
    return r;
}

}  // namespace

Raster read_raster(const std::filesystem::path& path) {
    if (has_extension(path, ".pgm")) return read_pgm(path);
    return read_png(path);
}

void write_png(const std::filesystem::path& path, const Raster& raster) {
    if (raster.channels != 1 && raster.channels != 3)
        throw std::invalid_argument("write_png: only gray or RGB rasters are supported");
    if (raster.pixels.size() != raster.width * raster.height * raster.channels)
        throw std::invalid_argument("write_png: pixel buffer size does not match geometry");
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(raster.width);
    image.height = static_cast<png_uint_32>(raster.height);
    image.format = raster.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&image, path.string().c_str(), 0, raster.pixels.data(), 0, nullptr))
        throw std::runtime_error("cannot write PNG " + path.string() + ": " + image.message);
}

Tensor raster_to_tensor(const Raster& raster) {
    Tensor t({raster.channels, raster.height, raster.width});
    for (std::size_t y = 0; y < raster.height; ++y)
        for (std::size_t x = 0; x < raster.width; ++x)
            for (std::size_t c = 0; c < raster.channels; ++c)
                t(c, y, x) = raster.pixels[(y * raster.width + x) * raster.channels + c] / 255.0;
    return t;
}

Raster tensor_to_raster(const Tensor& image) {
    if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
        throw std::invalid_argument("tensor_to_raster: expected [1|3,H,W], got " + shape_str(image.shape()));
    Raster r{image.dim(2), image.dim(1), image.dim(0), {}};
    r.pixels.resize(r.width * r.height * r.channels);
    for (std::size_t y = 0; y < r.height; ++y)
        for (std::size_t x = 0; x < r.width; ++x)
            for (std::size_t c = 0; c < r.channels; ++c) {
                const double v = std::clamp(image(c, y, x), 0.0, 1.0);
                r.pixels[(y * r.width + x) * r.channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
    return r;
}

void write_pfm(const std::filesystem::path& path, const Tensor& plane) {
    if (plane.rank() != 2) throw std::invalid_argument("write_pfm: expected [H,W], got " + shape_str(plane.shape()));
    static_assert(std::endian::native == std::endian::little, "PFM writer assumes a little-endian host");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    const std::size_t h = plane.dim(0), w = plane.dim(1);
    out << "Pf\n" << w << " " << h << "\n-1.0\n";
    std::vector<float> row(w);
    for (std::size_t y = h; y-- > 0;) {
        for (std::size_t x = 0; x < w; ++x) row[x] = static_cast<float>(plane(y, x));
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(w * sizeof(float)));
    }
}

Tensor read_pfm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string magic;
    std::size_t w = 0, h = 0;
    double scale = 0.0;
    in >> magic >> w >> h >> scale;
    in.get();
    if (magic != "Pf" || w == 0 || h == 0 || scale >= 0.0)
        throw std::runtime_error("unsupported PFM header in " + path.string());
    Tensor plane({h, w});
    std::vector<float> row(w);
    for (std::size_t y = h; y-- > 0;) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(w * sizeof(float)));
        if (!in) throw std::runtime_error("truncated PFM raster in " + path.string());
        for (std::size_t x = 0; x < w; ++x) plane(y, x) = row[x];
    }
    return plane;
}

}  // namespace sfl
