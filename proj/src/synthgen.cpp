#include "spatseg/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "spatseg/tensor.hpp"

namespace spatseg {

void SynthConfig::validate() const {
    if (width == 0 || height == 0) throw ConfigError("SynthConfig: canvas must be non-empty");
    if (curves_per_image.min < 0 || curves_per_image.min > curves_per_image.max) {
        throw ConfigError("SynthConfig: curves_per_image range is empty");
    }
    if (fiber_width.min < 1 || fiber_width.min > fiber_width.max) {
        throw ConfigError("SynthConfig: fiber_width range must be non-empty and >= 1");
    }
    if (poly_degree < 1 || poly_degree > 3) throw ConfigError("SynthConfig: poly_degree must be 1..3");
    if (!(curve_length.min > 0.0) || curve_length.min > curve_length.max) {
        throw ConfigError("SynthConfig: curve_length range is empty");
    }
    if (amplitude.min > amplitude.max) throw ConfigError("SynthConfig: amplitude range is empty");
    if (!(blur_sigma > 0.0)) throw ConfigError("SynthConfig: blur_sigma must be > 0");
    if (shift_radius < 0) throw ConfigError("SynthConfig: shift_radius must be >= 0");
    if (background_grid == 0) throw ConfigError("SynthConfig: background_grid must be >= 1");
    if (background_contrast < 0.0 || speckle < 0.0) throw ConfigError("SynthConfig: contrast/speckle must be >= 0");
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
    j = nlohmann::json{{"width", c.width},
                       {"height", c.height},
                       {"curves_per_image", {c.curves_per_image.min, c.curves_per_image.max}},
                       {"fiber_width", {c.fiber_width.min, c.fiber_width.max}},
                       {"poly_degree", c.poly_degree},
                       {"curve_length", {c.curve_length.min, c.curve_length.max}},
                       {"amplitude", {c.amplitude.min, c.amplitude.max}},
                       {"blur_sigma", c.blur_sigma},
                       {"shift_radius", c.shift_radius},
                       {"background_mean", c.background_mean},
                       {"background_contrast", c.background_contrast},
                       {"speckle", c.speckle},
                       {"background_grid", c.background_grid},
                       {"background_dir", c.background_dir},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
    SynthConfig d;
    auto int_range = [&](const char* key, IntRange def) {
        if (!j.contains(key)) return def;
        const auto& a = j.at(key);
        return IntRange{a.at(0).get<int>(), a.at(1).get<int>()};
    };
    auto real_range = [&](const char* key, RealRange def) {
        if (!j.contains(key)) return def;
        const auto& a = j.at(key);
        return RealRange{a.at(0).get<double>(), a.at(1).get<double>()};
    };
    c.width = j.value("width", d.width);
    c.height = j.value("height", d.height);
    c.curves_per_image = int_range("curves_per_image", d.curves_per_image);
    c.fiber_width = int_range("fiber_width", d.fiber_width);
    c.poly_degree = j.value("poly_degree", d.poly_degree);
    c.curve_length = real_range("curve_length", d.curve_length);
    c.amplitude = real_range("amplitude", d.amplitude);
    c.blur_sigma = j.value("blur_sigma", d.blur_sigma);
    c.shift_radius = j.value("shift_radius", d.shift_radius);
    c.background_mean = j.value("background_mean", d.background_mean);
    c.background_contrast = j.value("background_contrast", d.background_contrast);
    c.speckle = j.value("speckle", d.speckle);
    c.background_grid = j.value("background_grid", d.background_grid);
    c.background_dir = j.value("background_dir", d.background_dir);
    c.seed = j.value("seed", d.seed);
}

// ---- background -----------------------------------------------------------------------

namespace {

Image background_from_dir(const SynthConfig& config, Rng& rng) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(config.background_dir))
        if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
    if (files.empty()) throw IoError("background_dir " + config.background_dir + " holds no .pgm files");
    std::sort(files.begin(), files.end());
    std::uniform_int_distribution<std::size_t> pick(0, files.size() - 1);
    return resize_bilinear(read_image_pgm(files[pick(rng)]), config.height, config.width);
}

}  // namespace

Image gen_background(const SynthConfig& config, Rng& rng) {
    if (!config.background_dir.empty()) return background_from_dir(config, rng);
    const std::size_t g = config.background_grid;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> grid((g + 1) * (g + 1));
    for (double& v : grid) v = unit(rng);

    Image img(config.height, config.width);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t y = 0; y < config.height; ++y) {
        const double gy = (y + 0.5) * g / config.height;
        const auto y0 = std::min(static_cast<std::size_t>(gy), g - 1);
        const double ty = gy - y0;
        for (std::size_t x = 0; x < config.width; ++x) {
            const double gx = (x + 0.5) * g / config.width;
            const auto x0 = std::min(static_cast<std::size_t>(gx), g - 1);
            const double tx = gx - x0;
            const double top = grid[y0 * (g + 1) + x0] * (1 - tx) + grid[y0 * (g + 1) + x0 + 1] * tx;
            const double bot = grid[(y0 + 1) * (g + 1) + x0] * (1 - tx) + grid[(y0 + 1) * (g + 1) + x0 + 1] * tx;
            const double smooth = config.background_mean + config.background_contrast * (top * (1 - ty) + bot * ty - 0.5);
            const double v = smooth * (1.0 + config.speckle * normal(rng));
            img(y, x) = std::clamp(v, 0.0, 1.0);
        }
    }
    return img;
}

// ---- curves -----------------------------------------------------------------------------

std::vector<CurveSpec> gen_curves(const SynthConfig& config, Rng& rng) {
    config.validate();
    std::uniform_int_distribution<int> count_dist(config.curves_per_image.min, config.curves_per_image.max);
    std::uniform_int_distribution<int> width_dist(config.fiber_width.min, config.fiber_width.max);
    std::uniform_int_distribution<int> degree_dist(1, config.poly_degree);
    std::uniform_real_distribution<double> sym(-1.0, 1.0);
    std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
    std::uniform_real_distribution<double> length(config.curve_length.min, config.curve_length.max);
    std::uniform_real_distribution<double> amp(config.amplitude.min, config.amplitude.max);
    std::uniform_real_distribution<double> cx(0.0, static_cast<double>(config.width));
    std::uniform_real_distribution<double> cy(0.0, static_cast<double>(config.height));
    const double side = static_cast<double>(std::min(config.width, config.height));

    const int n = count_dist(rng);
    std::vector<CurveSpec> curves;
    curves.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        CurveSpec c;
        c.extent = length(rng) * side;
        const int degree = degree_dist(rng);
        // Bending is scaled to the extent so lateral excursion stays a modest
        // fraction of the length whatever the size.
        c.coeffs[1] = 0.5 * sym(rng);
        c.coeffs[2] = degree >= 2 ? 0.6 * sym(rng) / c.extent : 0.0;
        c.coeffs[3] = degree >= 3 ? 0.8 * sym(rng) / (c.extent * c.extent) : 0.0;
        c.rotation = angle(rng);
        c.center_x = cx(rng);
        c.center_y = cy(rng);
        c.width = width_dist(rng);
        c.amplitude = amp(rng);
        curves.push_back(c);
    }
    return curves;
}

std::vector<Pixel> centerline_pixels(const CurveSpec& curve) {
    const double ct = std::cos(curve.rotation), st = std::sin(curve.rotation);
    const auto& a = curve.coeffs;
    auto lateral = [&](double t) { return a[0] + t * (a[1] + t * (a[2] + t * a[3])); };
    auto slope = [&](double t) { return a[1] + t * (2 * a[2] + t * 3 * a[3]); };
    auto to_pixel = [&](double t) {
        const double u = t, v = lateral(t);
        const double x = curve.center_x + ct * u - st * v;
        const double y = curve.center_y + st * u + ct * v;
        return Pixel{static_cast<int>(std::lround(y)), static_cast<int>(std::lround(x))};
    };

    // Consecutive samples are < 1 px apart, so rounded positions differ by at
    // most one step per axis and the path is 8-connected.
    std::vector<Pixel> path;
    auto push = [&](Pixel q) {
        if (!path.empty() && path.back() == q) return;
        // Drop staircase corners: if q touches the pixel before last, the last
        // one is redundant for connectivity.
        while (path.size() >= 2) {
            const Pixel& prev = path[path.size() - 2];
            if (std::abs(prev.y - q.y) <= 1 && std::abs(prev.x - q.x) <= 1) {
                path.pop_back();
            } else {
                break;
            }
        }
        if (path.empty() || !(path.back() == q)) path.push_back(q);
    };
    const double half = 0.5 * curve.extent;
    double t = -half;
    while (t < half) {
        push(to_pixel(t));
        const double speed = std::sqrt(1.0 + slope(t) * slope(t));
        t += 0.25 / speed;
    }
    push(to_pixel(half));
    return path;
}

Raster rasterize_fiber(const CurveSpec& curve, std::size_t height, std::size_t width) {
    Raster r{LabelMap(height, width), LabelMap(height, width)};
    const int h = static_cast<int>(height), w = static_cast<int>(width);
    const int radius = curve.width / 2;
    for (const Pixel& p : centerline_pixels(curve)) {
        if (p.y >= 0 && p.y < h && p.x >= 0 && p.x < w) r.centerline(p.y, p.x) = 1;
        for (int dy = -radius; dy <= radius; ++dy)
            for (int dx = -radius; dx <= radius; ++dx) {
                if (dy * dy + dx * dx > radius * radius) continue;
                const int y = p.y + dy, x = p.x + dx;
                if (y >= 0 && y < h && x >= 0 && x < w) r.stencil(y, x) = 1;
            }
    }
    return r;
}

// ---- compositing -------------------------------------------------------------------------

namespace {

std::size_t reflect_index(long i, long n) {
    // Symmetric reflection about the edges: -1 -> 0, n -> n-1.
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return static_cast<std::size_t>(i);
}

}  // namespace

Image gaussian_blur(const Image& field, double sigma) {
    if (!(sigma > 0.0)) throw ConfigError("gaussian_blur: sigma must be > 0");
    const long radius = static_cast<long>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double ksum = 0.0;
    for (long d = -radius; d <= radius; ++d) {
        kernel[static_cast<std::size_t>(d + radius)] = std::exp(-0.5 * d * d / (sigma * sigma));
        ksum += kernel[static_cast<std::size_t>(d + radius)];
    }
    for (double& k : kernel) k /= ksum;

    const long h = static_cast<long>(field.height), w = static_cast<long>(field.width);
    // Scatter form: every input pixel's mass lands inside the canvas.
    Image rows(field.height, field.width);
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            const double v = field(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
            if (v == 0.0) continue;
            for (long d = -radius; d <= radius; ++d)
                rows(static_cast<std::size_t>(y), reflect_index(x + d, w)) += kernel[static_cast<std::size_t>(d + radius)] * v;
        }
    Image out(field.height, field.width);
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            const double v = rows(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
            if (v == 0.0) continue;
            for (long d = -radius; d <= radius; ++d)
                out(reflect_index(y + d, h), static_cast<std::size_t>(x)) += kernel[static_cast<std::size_t>(d + radius)] * v;
        }
    return out;
}

Composite compose_image(const Image& background, const std::vector<CurveSpec>& curves, const SynthConfig& config) {
    Composite c{background, LabelMap(background.height, background.width)};
    Image fibers(background.height, background.width);
    for (const CurveSpec& curve : curves) {
        const Raster r = rasterize_fiber(curve, background.height, background.width);
        for (std::size_t i = 0; i < r.stencil.size(); ++i) {
            if (!r.stencil.labels[i]) continue;
            fibers.pixels[i] += curve.amplitude;
            c.truth.labels[i] = 1;
        }
    }
    const Image blurred = gaussian_blur(fibers, config.blur_sigma);
    for (std::size_t i = 0; i < c.image.size(); ++i) {
        c.image.pixels[i] = std::clamp(background.pixels[i] + blurred.pixels[i], 0.0, 1.0);
    }
    return c;
}

void break_2x2_blocks(LabelMap& m) {
    if (m.height < 2 || m.width < 2) return;
    auto degree = [&](std::size_t y, std::size_t x) {
        int n = 0;
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                if (!dy && !dx) continue;
                const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(m.height) || xx >= static_cast<long>(m.width)) continue;
                n += m(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) != 0;
            }
        return n;
    };
    for (std::size_t y = 0; y + 1 < m.height; ++y)
        for (std::size_t x = 0; x + 1 < m.width; ++x) {
            if (!(m(y, x) && m(y, x + 1) && m(y + 1, x) && m(y + 1, x + 1))) continue;
            const std::array<Pixel, 4> block{{{int(y), int(x)}, {int(y), int(x + 1)}, {int(y + 1), int(x)},
                                             {int(y + 1), int(x + 1)}}};
            Pixel drop = block[0];
            int best = 100;
            for (const Pixel& p : block) {
                const int d = degree(static_cast<std::size_t>(p.y), static_cast<std::size_t>(p.x));
                if (d < best) {
                    best = d;
                    drop = p;
                }
            }
            m(static_cast<std::size_t>(drop.y), static_cast<std::size_t>(drop.x)) = 0;
        }
}

LabelMap make_pseudo_label(const std::vector<CurveSpec>& curves, const SynthConfig& config, Rng& rng) {
    LabelMap pseudo(config.height, config.width);
    std::uniform_int_distribution<int> shift(-config.shift_radius, config.shift_radius);
    const int h = static_cast<int>(config.height), w = static_cast<int>(config.width);
    for (const CurveSpec& curve : curves) {
        const int dx = shift(rng);
        const int dy = shift(rng);
        for (const Pixel& p : centerline_pixels(curve)) {
            const int y = p.y + dy, x = p.x + dx;
            if (y >= 0 && y < h && x >= 0 && x < w) pseudo(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1;
        }
    }
    break_2x2_blocks(pseudo);
    return pseudo;
}

GeneratedSample generate_sample(const SynthConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    GeneratedSample g;
    const Image background = gen_background(config, rng);
    g.curves = gen_curves(config, rng);
    Composite comp = compose_image(background, g.curves, config);
    g.sample.image = std::move(comp.image);
    g.sample.truth = std::move(comp.truth);
    g.sample.pseudo = make_pseudo_label(g.curves, config, rng);
    return g;
}

std::uint64_t sample_seed(std::uint64_t master_seed, std::uint64_t index) {
    // splitmix64 finalizer over (seed, index)
    std::uint64_t z = master_seed + (index + 1) * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::string sample_id(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04zu", index);
    return buf;
}

nlohmann::json generate_dataset(const SynthConfig& config, std::size_t count, const std::filesystem::path& out_dir) {
    namespace fs = std::filesystem;
    config.validate();
    std::vector<fs::path> created_files;
    std::vector<fs::path> created_dirs;
    auto ensure_dir = [&](const fs::path& d) {
        if (!fs::exists(d)) {
            fs::create_directories(d);
            created_dirs.push_back(d);
        } else if (!fs::is_directory(d)) {
            throw IoError(d.string() + " exists and is not a directory");
        }
    };
    nlohmann::json manifest;
    try {
        ensure_dir(out_dir);
        for (const char* sub : {"images", "truth", "labels"}) ensure_dir(out_dir / sub);

        manifest["config"] = config;
        manifest["master_seed"] = config.seed;
        manifest["count"] = count;
        manifest["samples"] = nlohmann::json::array();
        for (std::size_t i = 0; i < count; ++i) {
            const std::uint64_t seed = sample_seed(config.seed, i);
            const GeneratedSample g = generate_sample(config, seed);
            const std::string id = sample_id(i);
            const std::string img = "images/" + id + ".pgm", tru = "truth/" + id + ".pgm", lab = "labels/" + id + ".pgm";
            created_files.push_back(out_dir / img);
            write_image_pgm(out_dir / img, g.sample.image);
            created_files.push_back(out_dir / tru);
            write_mask_pgm(out_dir / tru, g.sample.truth);
            created_files.push_back(out_dir / lab);
            write_mask_pgm(out_dir / lab, g.sample.pseudo);
            manifest["samples"].push_back({{"id", id},
                                           {"seed", seed},
                                           {"files", {{"image", img}, {"truth", tru}, {"label", lab}}},
                                           {"curve_count", g.curves.size()}});
        }
        created_files.push_back(out_dir / "manifest.json");
        std::ofstream out(out_dir / "manifest.json", std::ios::trunc);
        if (!out) throw IoError("cannot write " + (out_dir / "manifest.json").string());
        out << manifest.dump(2) << '\n';
        if (!out) throw IoError("write failed: " + (out_dir / "manifest.json").string());
    } catch (...) {
        std::error_code ec;
        for (const auto& f : created_files) fs::remove(f, ec);
        for (auto it = created_dirs.rbegin(); it != created_dirs.rend(); ++it) fs::remove(*it, ec);
        throw;
    }
    return manifest;
}

}  // namespace spatseg
