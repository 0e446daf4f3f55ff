#include "spatseg/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

namespace spatseg {

std::size_t LabelMap::count(std::uint8_t cls) const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), cls));
}

namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string next_token(std::istream& in, const std::filesystem::path& path) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    if (tok.empty()) throw IoError("PGM " + path.string() + ": truncated header");
    return tok;
}

std::size_t parse_header_number(const std::string& tok, const std::filesystem::path& path) {
    if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(c); })) {
        throw IoError("PGM " + path.string() + ": bad header field '" + tok + "'");
    }
    return std::stoul(tok);
}

}  // namespace

GrayPixels read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    if (next_token(in, path) != "P5") throw IoError("PGM " + path.string() + ": not a binary (P5) PGM");
    GrayPixels out;
    out.width = parse_header_number(next_token(in, path), path);
    out.height = parse_header_number(next_token(in, path), path);
    out.maxval = static_cast<unsigned>(parse_header_number(next_token(in, path), path));
    if (out.width == 0 || out.height == 0 || out.maxval == 0 || out.maxval > 65535) {
        throw IoError("PGM " + path.string() + ": invalid dimensions or maxval");
    }
    // next_token consumed exactly one whitespace byte after maxval.
    const std::size_t n = out.width * out.height;
    const std::size_t bytes_per = out.maxval < 256 ? 1 : 2;
    std::vector<unsigned char> raw(n * bytes_per);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
        throw IoError("PGM " + path.string() + ": truncated pixel data");
    }
    out.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.values[i] = bytes_per == 1 ? raw[i] : static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
        if (out.values[i] > out.maxval) throw IoError("PGM " + path.string() + ": value exceeds maxval");
    }
    return out;
}

void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& values) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

void write_image_pgm(const std::filesystem::path& path, const Image& image) {
    std::vector<std::uint8_t> bytes(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) {
        const double v = std::clamp(image.pixels[i], 0.0, 1.0);
        bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    write_pgm(path, image.height, image.width, bytes);
}

Image read_image_pgm(const std::filesystem::path& path) {
    const GrayPixels g = read_pgm(path);
    Image img(g.height, g.width);
    for (std::size_t i = 0; i < g.values.size(); ++i) img.pixels[i] = static_cast<double>(g.values[i]) / g.maxval;
    return img;
}

void write_mask_pgm(const std::filesystem::path& path, const LabelMap& mask) {
    std::vector<std::uint8_t> bytes(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) bytes[i] = mask.labels[i] ? 255 : 0;
    write_pgm(path, mask.height, mask.width, bytes);
}

LabelMap read_mask_pgm(const std::filesystem::path& path) {
    const GrayPixels g = read_pgm(path);
    LabelMap m(g.height, g.width);
    for (std::size_t i = 0; i < g.values.size(); ++i) m.labels[i] = 2u * g.values[i] > g.maxval ? 1 : 0;
    return m;
}

Image resize_bilinear(const Image& image, std::size_t height, std::size_t width) {
    if (image.height == height && image.width == width) return image;
    Image out(height, width);
    // Pixel-center alignment.
    const double sy = static_cast<double>(image.height) / height;
    const double sx = static_cast<double>(image.width) / width;
    for (std::size_t y = 0; y < height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, image.height - 1);
        const double ty = fy - y0;
        for (std::size_t x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, image.width - 1);
            const double tx = fx - x0;
            const double top = image(y0, x0) * (1 - tx) + image(y0, x1) * tx;
            const double bot = image(y1, x0) * (1 - tx) + image(y1, x1) * tx;
            out(y, x) = top * (1 - ty) + bot * ty;
        }
    }
    return out;
}

LabelMap resize_nearest(const LabelMap& mask, std::size_t height, std::size_t width) {
    if (mask.height == height && mask.width == width) return mask;
    LabelMap out(height, width);
    for (std::size_t y = 0; y < height; ++y) {
        const std::size_t sy = std::min(mask.height - 1, ((2 * y + 1) * mask.height) / (2 * height));
        for (std::size_t x = 0; x < width; ++x) {
            const std::size_t sx = std::min(mask.width - 1, ((2 * x + 1) * mask.width) / (2 * width));
            out(y, x) = mask(sy, sx);
        }
    }
    return out;
}

}  // namespace spatseg
