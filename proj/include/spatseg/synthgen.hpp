#pragma once

// Procedural nerve-fiber images: smooth speckled background, polynomial
// fibers of random width stamped with disks and Gaussian-blurred, plus two
// label maps per image: the full-width truth mask and a deliberately
// inaccurate training label (the single-pixel centerline of each fiber,
// rigidly displaced by up to shift_radius pixels per axis).

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "spatseg/image.hpp"
#include "json.hpp"

namespace spatseg {

struct IntRange {
    int min = 0;
    int max = 0;
};

struct RealRange {
    double min = 0.0;
    double max = 0.0;
};

struct SynthConfig {
    std::size_t width = 128;
    std::size_t height = 128;
    IntRange curves_per_image{3, 8};
    IntRange fiber_width{2, 6};
    int poly_degree = 3;
    /// Curve parameter extent as a fraction of min(width, height).
    RealRange curve_length{0.5, 1.2};
    RealRange amplitude{0.45, 0.65};
    double blur_sigma = 1.0;
    int shift_radius = 3;
    double background_mean = 0.25;
    double background_contrast = 0.2;
    double speckle = 0.2;
    /// Cells per side of the coarse noise grid behind the background.
    std::size_t background_grid = 8;
    /// When set, backgrounds are drawn from the PGM files in this directory
    /// (resized to the canvas) instead of being synthesized.
    std::string background_dir;
    std::uint64_t seed = 1;

    void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

struct CurveSpec {
    /// y = c1 t + c2 t^2 + c3 t^3 in the curve's local frame, t in [-extent/2, extent/2].
    std::array<double, 4> coeffs{};
    double rotation = 0.0;  // radians, local x axis direction
    double center_x = 0.0;
    double center_y = 0.0;
    double extent = 0.0;
    int width = 1;  // stroke width w; disks of radius floor(w/2)
    double amplitude = 0.5;
};

struct Pixel {
    int y = 0;
    int x = 0;
    friend bool operator==(const Pixel&, const Pixel&) = default;
};

struct SyntheticSample {
    Image image;
    LabelMap truth;
    LabelMap pseudo;
};

using Rng = std::mt19937_64;

Image gen_background(const SynthConfig& config, Rng& rng);
std::vector<CurveSpec> gen_curves(const SynthConfig& config, Rng& rng);

/// Thin 8-connected pixel path along the analytic curve (not clipped).
std::vector<Pixel> centerline_pixels(const CurveSpec& curve);

struct Raster {
    LabelMap stencil;
    LabelMap centerline;
};
Raster rasterize_fiber(const CurveSpec& curve, std::size_t height, std::size_t width);

/// Separable Gaussian blur (radius ceil(3 sigma), normalized kernel). Mass
/// reaching past an edge is reflected back, so the image total is kept.
Image gaussian_blur(const Image& field, double sigma);

struct Composite {
    Image image;
    LabelMap truth;
};
Composite compose_image(const Image& background, const std::vector<CurveSpec>& curves, const SynthConfig& config);

/// Clears one pixel of every fully set 2x2 block.
void break_2x2_blocks(LabelMap& mask);

LabelMap make_pseudo_label(const std::vector<CurveSpec>& curves, const SynthConfig& config, Rng& rng);

struct GeneratedSample {
    SyntheticSample sample;
    std::vector<CurveSpec> curves;
};

/// One sample from its own seed: background, curves, compose, pseudo label.
GeneratedSample generate_sample(const SynthConfig& config, std::uint64_t sample_seed);

/// Per-sample seed derived from the master seed.
std::uint64_t sample_seed(std::uint64_t master_seed, std::uint64_t index);

std::string sample_id(std::size_t index);

/// Writes images/, truth/, labels/ (PGM) and manifest.json under out_dir.
/// On failure every file and directory it created is removed.
nlohmann::json generate_dataset(const SynthConfig& config, std::size_t count, const std::filesystem::path& out_dir);

}  // namespace spatseg
