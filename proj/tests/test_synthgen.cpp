#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "spatseg/metrics.hpp"
#include "spatseg/synthgen.hpp"
#include "test_support.hpp"

using namespace spatseg;
using spatseg::testing::TempDir;

namespace {

std::vector<char> file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

CurveSpec straight_line(int width, double cx = 16.0, double cy = 16.0, double extent = 20.0) {
    CurveSpec c;
    c.center_x = cx;
    c.center_y = cy;
    c.extent = extent;
    c.rotation = 0.0;
    c.width = width;
    return c;
}

LabelMap centerline_union(const std::vector<CurveSpec>& curves, std::size_t h, std::size_t w) {
    LabelMap m(h, w);
    for (const auto& c : curves)
        for (const Pixel& p : centerline_pixels(c))
            if (p.y >= 0 && p.x >= 0 && p.y < static_cast<int>(h) && p.x < static_cast<int>(w)) m(p.y, p.x) = 1;
    return m;
}

bool has_full_2x2(const LabelMap& m) {
    for (std::size_t y = 0; y + 1 < m.height; ++y)
        for (std::size_t x = 0; x + 1 < m.width; ++x)
            if (m(y, x) && m(y, x + 1) && m(y + 1, x) && m(y + 1, x + 1)) return true;
    return false;
}

}  // namespace

TEST(SynthConfig, Validation) {
    SynthConfig c;
    EXPECT_NO_THROW(c.validate());
    c.curves_per_image = {5, 3};
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.shift_radius = -1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.blur_sigma = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.fiber_width = {0, 3};
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(SynthConfig, JsonRoundTrip) {
    SynthConfig c;
    c.fiber_width = {3, 4};
    c.seed = 99;
    const nlohmann::json j = c;
    EXPECT_EQ(j["fiber_width"], nlohmann::json::array({3, 4}));
    const SynthConfig back = j.get<SynthConfig>();
    EXPECT_EQ(nlohmann::json(back), j);
}

// ---- background ----------------------------------------------------------------------------------

TEST(Background, FlatWhenNoContrastOrSpeckle) {
    SynthConfig c;
    c.background_contrast = 0.0;
    c.speckle = 0.0;
    Rng rng(1);
    const Image bg = gen_background(c, rng);
    for (double v : bg.pixels) EXPECT_EQ(v, c.background_mean);
}

TEST(Background, SeededAndMeanClose) {
    SynthConfig c;
    Rng a(5), b(5);
    const Image bg = gen_background(c, a);
    EXPECT_EQ(bg, gen_background(c, b));
    double mean = 0.0;
    for (double v : bg.pixels) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        mean += v;
    }
    EXPECT_NEAR(mean / static_cast<double>(bg.size()), c.background_mean, 0.05);
}

TEST(Background, FromDirectory) {
    TempDir dir("bg");
    Image src(10, 12, 0.5);
    write_image_pgm(dir.path() / "a.pgm", src);
    SynthConfig c;
    c.width = 32;
    c.height = 24;
    c.background_dir = dir.path().string();
    Rng rng(1);
    const Image bg = gen_background(c, rng);
    EXPECT_EQ(bg.height, 24u);
    EXPECT_EQ(bg.width, 32u);
    for (double v : bg.pixels) EXPECT_NEAR(v, 128.0 / 255.0, 1e-12);
}

// ---- curves ------------------------------------------------------------------------------------------

TEST(Curves, ExactCount) {
    SynthConfig c;
    c.curves_per_image = {1, 1};
    for (std::uint64_t s = 0; s < 20; ++s) {
        Rng rng(s);
        EXPECT_EQ(gen_curves(c, rng).size(), 1u);
    }
}

TEST(Curves, WidthsInRangeAndUniform) {
    SynthConfig c;
    std::map<int, int> hist;
    std::size_t total = 0;
    Rng rng(7);
    while (total < 1000) {
        for (const auto& cv : gen_curves(c, rng)) {
            EXPECT_GE(cv.width, 2);
            EXPECT_LE(cv.width, 6);
            EXPECT_GE(cv.rotation, 0.0);
            EXPECT_LT(cv.rotation, M_PI);
            EXPECT_EQ(cv.coeffs[0], 0.0);
            ++hist[cv.width];
            ++total;
        }
    }
    // Chi-square against uniform over 5 bins; critical value for 4 dof at alpha 0.01 is 13.277.
    const double expect = static_cast<double>(total) / 5.0;
    double chi2 = 0.0;
    for (int w = 2; w <= 6; ++w) chi2 += (hist[w] - expect) * (hist[w] - expect) / expect;
    EXPECT_LT(chi2, 13.277);
}

// ---- rasterization ---------------------------------------------------------------------------------

TEST(Rasterize, WidthOneStencilIsCenterline) {
    const Raster r = rasterize_fiber(straight_line(1), 32, 32);
    EXPECT_EQ(r.stencil, r.centerline);
    EXPECT_GT(r.centerline.count(1), 15u);
}

TEST(Rasterize, WidthFiveSpansFiveRows) {
    const Raster r = rasterize_fiber(straight_line(5), 32, 32);
    std::size_t rows = 0;
    for (std::size_t y = 0; y < 32; ++y) rows += r.stencil(y, 16);
    EXPECT_EQ(rows, 5u);
    for (int dy = -2; dy <= 2; ++dy) EXPECT_EQ(r.stencil(16 + dy, 16), 1);
}

TEST(Rasterize, OutsideCanvasIsEmpty) {
    const Raster r = rasterize_fiber(straight_line(3, 500.0, 500.0), 32, 32);
    EXPECT_EQ(r.stencil.count(1), 0u);
    EXPECT_EQ(r.centerline.count(1), 0u);
}

TEST(Rasterize, CenterlineEightConnectedAndThin) {
    SynthConfig c;
    for (std::uint64_t s = 0; s < 50; ++s) {
        Rng rng(s);
        for (const auto& cv : gen_curves(c, rng)) {
            const auto path = centerline_pixels(cv);
            ASSERT_FALSE(path.empty());
            std::set<std::pair<int, int>> seen;
            for (std::size_t i = 0; i < path.size(); ++i) {
                EXPECT_TRUE(seen.insert({path[i].y, path[i].x}).second) << "duplicate pixel";
                if (i == 0) continue;
                EXPECT_LE(std::abs(path[i].y - path[i - 1].y), 1);
                EXPECT_LE(std::abs(path[i].x - path[i - 1].x), 1);
                if (i >= 2) {
                    // No staircase corner: the path never turns back next to its
                    // second-to-last pixel.
                    const bool touches = std::abs(path[i].y - path[i - 2].y) <= 1 &&
                                         std::abs(path[i].x - path[i - 2].x) <= 1;
                    EXPECT_FALSE(touches);
                }
            }
        }
    }
}

TEST(Rasterize, StencilContainsCenterline) {
    SynthConfig c;
    Rng rng(3);
    for (const auto& cv : gen_curves(c, rng)) {
        const Raster r = rasterize_fiber(cv, c.height, c.width);
        for (std::size_t i = 0; i < r.centerline.size(); ++i) {
            if (r.centerline.labels[i]) {
                EXPECT_EQ(r.stencil.labels[i], 1);
            }
        }
    }
}

// ---- blur and composition ---------------------------------------------------------------------------

TEST(Blur, PreservesMass) {
    std::mt19937_64 rng(4);
    for (double sigma : {0.5, 1.0, 2.5}) {
        Image f = spatseg::testing::random_image(20, 17, rng);
        double before = 0.0, after = 0.0;
        for (double v : f.pixels) before += v;
        for (double v : gaussian_blur(f, sigma).pixels) after += v;
        EXPECT_NEAR(after, before, 1e-6);
    }
}

TEST(Blur, SpreadsAnImpulse) {
    Image f(15, 15, 0.0);
    f(7, 7) = 1.0;
    const Image b = gaussian_blur(f, 1.0);
    EXPECT_LT(b(7, 7), 1.0);
    EXPECT_NEAR(b(7, 8), b(8, 7), 1e-15);
    EXPECT_NEAR(b(7, 8) / b(7, 7), std::exp(-0.5), 1e-12);
    EXPECT_EQ(b(7, 11), 0.0);  // radius ceil(3 sigma) = 3
}

TEST(Compose, NoCurvesGivesBackground) {
    SynthConfig c;
    Rng rng(1);
    const Image bg = gen_background(c, rng);
    const Composite out = compose_image(bg, {}, c);
    EXPECT_EQ(out.image, bg);
    EXPECT_EQ(out.truth.count(1), 0u);
}

TEST(Compose, TruthIndependentOfBlurAndContainsCenterline) {
    SynthConfig c;
    Rng rng(2);
    const Image bg = gen_background(c, rng);
    const auto curves = gen_curves(c, rng);
    const Composite a = compose_image(bg, curves, c);
    c.blur_sigma = 3.0;
    const Composite b = compose_image(bg, curves, c);
    EXPECT_EQ(a.truth, b.truth);
    EXPECT_NE(a.image, b.image);
    const LabelMap cl = centerline_union(curves, c.height, c.width);
    for (std::size_t i = 0; i < cl.size(); ++i) {
        if (cl.labels[i]) {
            EXPECT_EQ(a.truth.labels[i], 1);
        }
    }
    for (double v : a.image.pixels) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

// ---- pseudo labels ---------------------------------------------------------------------------------

TEST(Pseudo, ZeroShiftIsCenterlineUnion) {
    SynthConfig c;
    c.shift_radius = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        Rng rng(s);
        const auto curves = gen_curves(c, rng);
        LabelMap expect = centerline_union(curves, c.height, c.width);
        break_2x2_blocks(expect);
        EXPECT_EQ(make_pseudo_label(curves, c, rng), expect);
    }
}

TEST(Pseudo, BreakBlocksLeavesNoFullBlock) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        LabelMap m = spatseg::testing::random_labels(10, 10, 2, rng);
        const LabelMap before = m;
        break_2x2_blocks(m);
        EXPECT_FALSE(has_full_2x2(m));
        for (std::size_t i = 0; i < m.size(); ++i) EXPECT_LE(m.labels[i], before.labels[i]);
    }
}

TEST(Pseudo, ThinAndWithinShiftRadius) {
    SynthConfig c;
    for (std::uint64_t s = 0; s < 40; ++s) {
        const GeneratedSample g = generate_sample(c, sample_seed(3, s));
        const LabelMap& pseudo = g.sample.pseudo;
        EXPECT_FALSE(has_full_2x2(pseudo));
        // The unshifted centerline may run outside the canvas.
        std::set<std::pair<int, int>> cl;
        for (const auto& cv : g.curves)
            for (const Pixel& p : centerline_pixels(cv)) cl.insert({p.y, p.x});
        for (std::size_t y = 0; y < c.height; ++y)
            for (std::size_t x = 0; x < c.width; ++x) {
                if (!pseudo(y, x)) continue;
                bool near = false;
                for (int dy = -c.shift_radius; dy <= c.shift_radius && !near; ++dy)
                    for (int dx = -c.shift_radius; dx <= c.shift_radius && !near; ++dx)
                        near = cl.count({static_cast<int>(y) + dy, static_cast<int>(x) + dx}) > 0;
                EXPECT_TRUE(near) << y << "," << x;
            }
    }
}

TEST(Pseudo, LabelsAreGenuinelyInaccurate) {
    SynthConfig c;
    std::vector<ImageScores> rows;
    for (std::uint64_t s = 0; s < 30; ++s) {
        const GeneratedSample g = generate_sample(c, sample_seed(9, s));
        const SegmentationScores sc = scores(confusion(g.sample.pseudo, g.sample.truth));
        rows.push_back({sample_id(s), sc.dice, sc.precision, sc.recall});
    }
    EXPECT_LT(aggregate(rows).dice.mean, 0.6);
}

// ---- samples and datasets ----------------------------------------------------------------------------

TEST(Sample, DeterministicPerSeed) {
    SynthConfig c;
    const GeneratedSample a = generate_sample(c, 42), b = generate_sample(c, 42), d = generate_sample(c, 43);
    EXPECT_EQ(a.sample.image, b.sample.image);
    EXPECT_EQ(a.sample.truth, b.sample.truth);
    EXPECT_EQ(a.sample.pseudo, b.sample.pseudo);
    EXPECT_NE(a.sample.image, d.sample.image);
    EXPECT_EQ(sample_id(7), "0007");
    EXPECT_NE(sample_seed(1, 0), sample_seed(1, 1));
    EXPECT_NE(sample_seed(1, 0), sample_seed(2, 0));
}

TEST(Dataset, CountZero) {
    TempDir dir("ds");
    SynthConfig c;
    const nlohmann::json m = generate_dataset(c, 0, dir.path() / "out");
    EXPECT_TRUE(m["samples"].empty());
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "out" / "manifest.json"));
    EXPECT_TRUE(std::filesystem::is_empty(dir.path() / "out" / "images"));
}

TEST(Dataset, FilesAndBitIdenticalRegeneration) {
    TempDir dir("ds");
    SynthConfig c;
    c.width = c.height = 32;
    c.seed = 11;
    const nlohmann::json m = generate_dataset(c, 3, dir.path() / "a");
    generate_dataset(c, 3, dir.path() / "b");
    ASSERT_EQ(m["samples"].size(), 3u);
    EXPECT_EQ(m["samples"][2]["id"], "0002");
    EXPECT_EQ(m["master_seed"], 11);
    for (const char* sub : {"images", "truth", "labels"})
        for (int i = 0; i < 3; ++i) {
            const auto rel = std::filesystem::path(sub) / (sample_id(i) + ".pgm");
            ASSERT_TRUE(std::filesystem::exists(dir.path() / "a" / rel));
            EXPECT_EQ(file_bytes(dir.path() / "a" / rel), file_bytes(dir.path() / "b" / rel));
        }
    EXPECT_EQ(file_bytes(dir.path() / "a" / "manifest.json"), file_bytes(dir.path() / "b" / "manifest.json"));
    const GrayPixels mask = read_pgm(dir.path() / "a" / "truth" / "0001.pgm");
    for (auto v : mask.values) EXPECT_TRUE(v == 0 || v == 255);
}

TEST(Dataset, FailureRemovesPartialOutput) {
    TempDir dir("ds");
    SynthConfig c;
    c.width = c.height = 16;
    c.background_dir = (dir.path() / "no_such_dir").string();
    const auto out = dir.path() / "out";
    EXPECT_ANY_THROW(generate_dataset(c, 2, out));
    EXPECT_FALSE(std::filesystem::exists(out));
}
