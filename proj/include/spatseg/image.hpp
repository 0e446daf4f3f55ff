#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace spatseg {

/// Grayscale image, row-major, intensities nominally in [0,1].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;

    Image() = default;
    Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w, fill) {}

    std::size_t size() const { return pixels.size(); }
    double& operator()(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
    double operator()(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }

    friend bool operator==(const Image&, const Image&) = default;
};

/// Per-pixel class ids, row-major.
struct LabelMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> labels;

    LabelMap() = default;
    LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), labels(h * w, fill) {}

    std::size_t size() const { return labels.size(); }
    std::uint8_t& operator()(std::size_t y, std::size_t x) { return labels[y * width + x]; }
    std::uint8_t operator()(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
    std::size_t count(std::uint8_t cls) const;

    friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

class IoError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Raw 8-bit PGM (P5). Values are kept as stored, 0..maxval.
struct GrayPixels {
    std::size_t height = 0;
    std::size_t width = 0;
    unsigned maxval = 255;
    std::vector<std::uint16_t> values;
};

GrayPixels read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& values);

/// Image intensities map [0,1] to 0..255 with rounding; values outside are clamped.
void write_image_pgm(const std::filesystem::path& path, const Image& image);
Image read_image_pgm(const std::filesystem::path& path);

/// Masks are written 0 = background, 255 = foreground. On read, any value
/// above maxval/2 is foreground.
void write_mask_pgm(const std::filesystem::path& path, const LabelMap& mask);
LabelMap read_mask_pgm(const std::filesystem::path& path);

Image resize_bilinear(const Image& image, std::size_t height, std::size_t width);
LabelMap resize_nearest(const LabelMap& mask, std::size_t height, std::size_t width);

}  // namespace spatseg
