#include <gtest/gtest.h>

#include <cmath>

#include "spatseg/spatial_loss.hpp"
#include "spatseg/unet.hpp"
#include "test_support.hpp"

using namespace spatseg;
using spatseg::testing::random_image;
using spatseg::testing::random_labels;
using spatseg::testing::random_tensor;

namespace {

double psi_sum(const Image& img, const LabelMap& labels, const Tensor& conf, const SpatialLossConfig& cfg,
               PairwiseField* out = nullptr) {
    PairwiseField f = neighbor_weights(img, labels, cfg);
    Tape t;
    const double v = pairwise_cost(f, t.constant(conf), cfg.pairwise_reduction).value()[0];
    if (out) *out = std::move(f);
    return v;
}

Tensor conf_tensor(std::size_t h, std::size_t w, double v) { return Tensor({h, w}, v); }

}  // namespace

TEST(LossConfig, Validation) {
    SpatialLossConfig c;
    EXPECT_NO_THROW(c.validate());
    c.sigma = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.lambda = -1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.pairwise_reduction = Reduction::Mean;
    const nlohmann::json j = c;
    EXPECT_EQ(j.at("pairwise_reduction"), "mean");
    EXPECT_EQ(j.get<SpatialLossConfig>().pairwise_reduction, Reduction::Mean);
}

// ---- neighbor weights ------------------------------------------------------------------------

TEST(NeighborWeights, DirectFormula) {
    SpatialLossConfig cfg;
    Image img(1, 2);
    LabelMap same(1, 2, 0), diff(1, 2, 0);
    diff.labels[1] = 1;

    img.pixels = {0.3, 0.3};
    EXPECT_EQ(neighbor_weights(img, same, cfg).mu_at(0, 0, 4), -1.0);

    img.pixels = {0.25, 0.75};
    EXPECT_NEAR(neighbor_weights(img, diff, cfg).mu_at(0, 0, 4), 0.606530659712633, 1e-15);

    img.pixels = {0.0, 1.0};
    EXPECT_NEAR(neighbor_weights(img, same, cfg).mu_at(0, 0, 4), -0.135335283236613, 1e-15);
}

TEST(NeighborWeights, OutOfImageIsZeroAndMagnitudeSymmetric) {
    std::mt19937_64 rng(1);
    SpatialLossConfig cfg;
    const Image img = random_image(5, 6, rng);
    const LabelMap lab = random_labels(5, 6, 2, rng);
    const PairwiseField f = neighbor_weights(img, lab, cfg);
    for (long y = 0; y < 5; ++y)
        for (long x = 0; x < 6; ++x)
            for (std::size_t s = 0; s < 8; ++s) {
                const long ny = y + kNeighborOffsets[s][0], nx = x + kNeighborOffsets[s][1];
                const double mu = f.mu_at(y, x, s);
                EXPECT_LE(std::abs(mu), 1.0);
                if (ny < 0 || nx < 0 || ny >= 5 || nx >= 6) {
                    EXPECT_EQ(mu, 0.0);
                    continue;
                }
                EXPECT_EQ(std::abs(mu), std::abs(f.mu_at(ny, nx, 7 - s)));
                EXPECT_EQ(mu < 0, lab(y, x) == lab(ny, nx));
            }
}

TEST(NeighborWeights, ShapeMismatchThrows) {
    EXPECT_THROW(neighbor_weights(Image(3, 3), LabelMap(3, 4), SpatialLossConfig{}), ShapeError);
}

TEST(NeighborWeights, IntensityKernelLimits) {
    Image img(1, 2);
    img.pixels = {0.0, 1.0};
    LabelMap lab(1, 2, 0);
    SpatialLossConfig wide;
    wide.sigma = 1e6;
    EXPECT_NEAR(neighbor_weights(img, lab, wide).mu_at(0, 0, 4), -1.0, 1e-12);
    img.pixels = {0.0, 40.0};
    EXPECT_EQ(neighbor_weights(img, lab, SpatialLossConfig{}).mu_at(0, 0, 4), -0.0);
}

// ---- pairwise cost: closed forms -----------------------------------------------------------------

TEST(PairwiseCost, UniformImageSameClass) {
    PairwiseField f;
    const double s = psi_sum(Image(3, 3, 0.4), LabelMap(3, 3, 1), conf_tensor(3, 3, 0.9), {}, &f);
    for (double p : f.psi) EXPECT_NEAR(p, -0.81, 1e-15);
    EXPECT_NEAR(s, -7.29, 1e-14);
}

TEST(PairwiseCost, CheckerboardInteriorIsZero) {
    LabelMap lab(5, 5);
    for (std::size_t y = 0; y < 5; ++y)
        for (std::size_t x = 0; x < 5; ++x) lab(y, x) = static_cast<std::uint8_t>((x + y) % 2);
    PairwiseField f;
    psi_sum(Image(5, 5, 0.5), lab, conf_tensor(5, 5, 1.0), {}, &f);
    for (std::size_t y = 1; y < 4; ++y)
        for (std::size_t x = 1; x < 4; ++x) EXPECT_EQ(f.psi[y * 5 + x], 0.0);
}

TEST(PairwiseCost, TwoPixels) {
    PairwiseField f;
    const double a = 0.3, b = 0.8;
    psi_sum(Image(1, 2, 0.2), LabelMap(1, 2, 0), Tensor({1, 2}, {a, b}), {}, &f);
    EXPECT_DOUBLE_EQ(f.psi[0], -a * b);
    EXPECT_DOUBLE_EQ(f.psi[1], -a * b);
}

TEST(PairwiseCost, AllDifferentLabelsGivesN) {
    // Three classes on a 1x3 strip so every neighbor pair disagrees.
    LabelMap lab(1, 3);
    lab.labels = {0, 1, 2};
    EXPECT_EQ(psi_sum(Image(1, 3, 0.6), lab, conf_tensor(1, 3, 1.0), {}), 3.0);
    LabelMap cb(4, 4);
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) cb(y, x) = static_cast<std::uint8_t>((y % 2) * 2 + x % 2);
    EXPECT_EQ(psi_sum(Image(4, 4, 0.6), cb, conf_tensor(4, 4, 1.0), {}), 16.0);
}

TEST(PairwiseCost, MeanReduction) {
    SpatialLossConfig cfg;
    cfg.pairwise_reduction = Reduction::Mean;
    EXPECT_NEAR(psi_sum(Image(3, 3, 0.4), LabelMap(3, 3, 1), conf_tensor(3, 3, 0.9), cfg), -0.81, 1e-15);
}

TEST(PairwiseCost, SinglePixelThrows) {
    PairwiseField f = neighbor_weights(Image(1, 1, 0.5), LabelMap(1, 1), SpatialLossConfig{});
    Tape t;
    EXPECT_THROW(pairwise_cost(f, t.constant(conf_tensor(1, 1, 0.5)), Reduction::Sum), std::domain_error);
}

// ---- oracle equivalence and properties ---------------------------------------------------------

TEST(PairwiseCost, MatchesBruteForceOn200Instances) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t h = 1 + rng() % 8, w = (h == 1 ? 2 : 1) + rng() % 8;
        SpatialLossConfig cfg;
        cfg.sigma = 0.1 + static_cast<double>(rng() % 100) / 100.0;
        const Image img = random_image(h, w, rng);
        const LabelMap lab = random_labels(h, w, 2 + rng() % 2, rng);
        const Tensor conf = random_tensor({h, w}, rng, 0.0, 1.0);
        EXPECT_NEAR(psi_sum(img, lab, conf, cfg), brute_force_pairwise(img, lab, conf.storage(), cfg), 1e-12)
            << h << "x" << w;
    }
}

TEST(PairwiseCost, PsiBoundAndSignLaw) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t h = 2 + rng() % 7, w = 2 + rng() % 7;
        const Image img = random_image(h, w, rng);
        // Sparse foreground so that some pixels have all-agreeing neighborhoods.
        LabelMap lab(h, w);
        for (auto& v : lab.labels) v = rng() % 5 == 0;
        PairwiseField f;
        psi_sum(img, lab, random_tensor({h, w}, rng, 0.0, 1.0), {}, &f);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double psi = f.psi[y * w + x];
                EXPECT_LE(std::abs(psi), 1.0);
                bool all_same = true, all_diff = true;
                for (std::size_t s = 0; s < 8; ++s) {
                    const double mu = f.mu_at(y, x, s);
                    if (mu == 0.0) continue;
                    all_same &= mu < 0;
                    all_diff &= mu > 0;
                }
                if (all_same) {
                    EXPECT_LE(psi, 0.0);
                }
                if (all_diff) {
                    EXPECT_GE(psi, 0.0);
                }
            }
    }
}

TEST(PairwiseCost, MonotoneInOwnConfidence) {
    std::mt19937_64 rng(4);
    const Image img = random_image(4, 4, rng);
    const LabelMap lab(4, 4, 1);
    Tensor conf = random_tensor({4, 4}, rng, 0.0, 1.0);
    double prev = INFINITY;
    for (double p = 0.0; p <= 1.0; p += 0.05) {
        conf[1 * 4 + 2] = p;
        PairwiseField f;
        psi_sum(img, lab, Tensor({4, 4}, conf.storage()), {}, &f);
        EXPECT_LE(f.psi[1 * 4 + 2], prev);
        prev = f.psi[1 * 4 + 2];
    }
}

TEST(PairwiseCostGrad, RandomInstances) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const Image img = random_image(4, 5, rng);
        const LabelMap lab = random_labels(4, 5, 2, rng);
        ScalarFn f = [&](Tape&, Var p) {
            PairwiseField fld = neighbor_weights(img, lab, SpatialLossConfig{});
            return pairwise_cost(fld, p, Reduction::Sum);
        };
        EXPECT_LT(grad_check(f, random_tensor({4, 5}, rng, 0.0, 1.0)).max_rel_error, 1e-4);
    }
}

// ---- total loss ------------------------------------------------------------------------------------

TEST(TotalLoss, LambdaZeroIsCrossEntropy) {
    std::mt19937_64 rng(6);
    Tape t;
    Var probs = softmax_channels(t.constant(random_tensor({2, 4, 4}, rng)));
    const LabelMap y = random_labels(4, 4, 2, rng);
    SpatialLossConfig cfg;
    cfg.lambda = 0.0;
    const LossBreakdown b = total_loss(probs, y, random_image(4, 4, rng), cfg);
    EXPECT_EQ(b.total, cross_entropy_mean(probs, y).value()[0]);
    EXPECT_EQ(b.total, b.unary);
}

TEST(TotalLoss, UniformClosedForm) {
    Tape t;
    Tensor p({2, 3, 3});
    for (std::size_t i = 0; i < 9; ++i) {
        p[i] = 0.1;
        p[9 + i] = 0.9;
    }
    const LossBreakdown b = total_loss(t.constant(p), LabelMap(3, 3, 1), Image(3, 3, 0.5), SpatialLossConfig{});
    EXPECT_NEAR(b.unary, 0.105360515657826, 1e-14);
    EXPECT_NEAR(b.pairwise, -7.29, 1e-14);
    EXPECT_NEAR(b.total, -7.184639484342174, 1e-13);
}

TEST(TotalLoss, BookkeepingIdentity) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Tape t;
        Var probs = softmax_channels(t.constant(random_tensor({2, 5, 5}, rng, -3, 3)));
        SpatialLossConfig cfg;
        cfg.lambda = static_cast<double>(rng() % 40) / 10.0;
        const LossBreakdown b = total_loss(probs, random_labels(5, 5, 2, rng), random_image(5, 5, rng), cfg);
        EXPECT_EQ(b.total, b.unary + cfg.lambda * b.pairwise);
        EXPECT_GE(b.unary, 0.0);
    }
}

TEST(TotalLoss, ConfidenceIsArgmaxProbability) {
    std::mt19937_64 rng(8);
    Tape t;
    Var probs = softmax_channels(t.constant(random_tensor({3, 4, 4}, rng, -2, 2)));
    const ConfidenceMap c = confidence_map(probs);
    EXPECT_EQ(c.predicted, argmax_channels(probs.value()));
    for (std::size_t i = 0; i < 16; ++i) {
        double best = 0.0;
        for (std::size_t k = 0; k < 3; ++k) best = std::max(best, probs.value()[k * 16 + i]);
        EXPECT_EQ(c.confidence.value()[i], best);
        EXPECT_GE(best, 1.0 / 3.0);
        EXPECT_LE(best, 1.0);
    }
}

TEST(TotalLossGrad, Fifty6x6Instances) {
    std::size_t checked = 0;
    for (std::uint64_t seed = 0; checked < 50 && seed < 500; ++seed) {
        std::mt19937_64 rng(seed);
        const Image img = random_image(6, 6, rng);
        const LabelMap y = random_labels(6, 6, 2, rng);
        const Tensor logits = random_tensor({2, 6, 6}, rng, -2, 2);
        SpatialLossConfig cfg;
        ScalarFn f = [&](Tape&, Var x) { return total_loss(softmax_channels(x), y, img, cfg).total_var; };
        Tape probe;
        f(probe, probe.constant(logits));
        if (probe.decision_margin() <= 1e-3) continue;
        const GradCheckReport r = grad_check(f, logits);
        EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
        ++checked;
    }
    EXPECT_EQ(checked, 50u);
}

TEST(TotalLoss, StopGradientMuUnchangedUnderArgmaxPreservingPerturbation) {
    std::mt19937_64 rng(9);
    ModelParams base = init_params([] {
        UNetConfig c;
        c.depth = 2;
        c.base_channels = 2;
        return c;
    }(), 5);
    // Pixels whose features are all zero would otherwise sit on an exact tie.
    base.at("head.bias")[0] = 0.05;
    const Image img = random_image(8, 8, rng);
    const LabelMap y = random_labels(8, 8, 2, rng);
    Tape t0;
    const LossBreakdown ref = total_loss(forward(base, img, Mode::Eval, t0).probs, y, img, SpatialLossConfig{});
    std::size_t compared = 0;
    for (int trial = 0; trial < 50; ++trial) {
        ModelParams p = base;
        Tensor& w = p.at("head.bias");
        w[rng() % w.numel()] += 1e-6 * (static_cast<double>(rng() % 200) / 100.0 - 1.0);
        Tape t;
        const LossBreakdown b = total_loss(forward(p, img, Mode::Eval, t).probs, y, img, SpatialLossConfig{});
        if (b.predicted != ref.predicted) continue;
        EXPECT_EQ(b.field.mu, ref.field.mu);
        ++compared;
    }
    EXPECT_GE(compared, 45u);
}

TEST(TotalLoss, CrossEntropyOnlySkipsPairwise) {
    std::mt19937_64 rng(10);
    Tape t;
    Var probs = softmax_channels(t.constant(random_tensor({2, 4, 4}, rng)));
    const LabelMap y = random_labels(4, 4, 2, rng);
    const LossBreakdown b = total_loss(probs, y, random_image(4, 4, rng), SpatialLossConfig{}, false);
    EXPECT_EQ(b.pairwise, 0.0);
    EXPECT_EQ(b.total, b.unary);
    EXPECT_TRUE(b.field.mu.empty());
}
