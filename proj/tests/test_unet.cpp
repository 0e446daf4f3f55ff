#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "spatseg/spatial_loss.hpp"
#include "spatseg/unet.hpp"
#include "test_support.hpp"

using namespace spatseg;
using spatseg::testing::random_image;
using spatseg::testing::random_labels;
using spatseg::testing::TempDir;

namespace {

UNetConfig small_config(std::size_t depth, bool bn = true, double dropout = 0.25) {
    UNetConfig c;
    c.depth = depth;
    c.base_channels = 2;
    c.use_batchnorm = bn;
    c.dropout_rate = dropout;
    return c;
}

void expect_prob_map(const Tensor& p, std::size_t k, std::size_t h, std::size_t w) {
    ASSERT_EQ(p.shape(), (Shape{k, h, w}));
    for (std::size_t i = 0; i < h * w; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            const double v = p[c * h * w + i];
            EXPECT_GT(v, 0.0);
            EXPECT_LT(v, 1.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

}  // namespace

TEST(UNetConfig, Validation) {
    UNetConfig c;
    EXPECT_NO_THROW(c.validate());
    c.depth = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.base_channels = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.num_classes = 1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.dropout_rate = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(UNetConfig, JsonRoundTrip) {
    UNetConfig c = small_config(4, false, 0.1);
    c.num_classes = 3;
    const nlohmann::json j = c;
    EXPECT_EQ(j.get<UNetConfig>(), c);
}

TEST(Params, LayoutOrderAndShapes) {
    const ModelParams p = param_layout(small_config(2));
    std::vector<std::string> names;
    for (const auto& e : p.entries) names.push_back(e.name);
    const std::vector<std::string> expected = {
        "enc0.conv1.weight", "enc0.conv1.bn.gamma", "enc0.conv1.bn.beta", "enc0.conv1.bn.running_mean",
        "enc0.conv1.bn.running_var", "enc0.conv2.weight", "enc0.conv2.bn.gamma", "enc0.conv2.bn.beta",
        "enc0.conv2.bn.running_mean", "enc0.conv2.bn.running_var", "enc1.conv1.weight", "enc1.conv1.bn.gamma",
        "enc1.conv1.bn.beta", "enc1.conv1.bn.running_mean", "enc1.conv1.bn.running_var", "enc1.conv2.weight",
        "enc1.conv2.bn.gamma", "enc1.conv2.bn.beta", "enc1.conv2.bn.running_mean", "enc1.conv2.bn.running_var",
        "dec0.up.weight", "dec0.up.bias", "dec0.conv1.weight", "dec0.conv1.bn.gamma", "dec0.conv1.bn.beta",
        "dec0.conv1.bn.running_mean", "dec0.conv1.bn.running_var", "dec0.conv2.weight", "dec0.conv2.bn.gamma",
        "dec0.conv2.bn.beta", "dec0.conv2.bn.running_mean", "dec0.conv2.bn.running_var", "head.weight", "head.bias"};
    EXPECT_EQ(names, expected);
    EXPECT_EQ(p.at("enc0.conv1.weight").shape(), (Shape{2, 1, 3, 3}));
    EXPECT_EQ(p.at("enc1.conv1.weight").shape(), (Shape{4, 2, 3, 3}));
    EXPECT_EQ(p.at("dec0.up.weight").shape(), (Shape{4, 2, 2, 2}));
    EXPECT_EQ(p.at("dec0.conv1.weight").shape(), (Shape{2, 4, 3, 3}));
    EXPECT_EQ(p.at("head.weight").shape(), (Shape{2, 2, 1, 1}));
    EXPECT_EQ(p.at("head.bias").shape(), (Shape{2}));
}

TEST(Params, NoBatchNormUsesBiases) {
    const ModelParams p = param_layout(small_config(1, false));
    std::vector<std::string> names;
    for (const auto& e : p.entries) names.push_back(e.name);
    EXPECT_EQ(names, (std::vector<std::string>{"enc0.conv1.weight", "enc0.conv1.bias", "enc0.conv2.weight",
                                               "enc0.conv2.bias", "head.weight", "head.bias"}));
}

TEST(Params, InitDeterministicAndBiasesZero) {
    const UNetConfig c = small_config(3, false);
    const ModelParams a = init_params(c, 5), b = init_params(c, 5), other = init_params(c, 6);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        EXPECT_EQ(a.entries[i].value, b.entries[i].value);
        any_diff |= a.entries[i].value != other.entries[i].value;
        if (a.entries[i].kind == ParamKind::Bias) {
            for (double v : a.entries[i].value.storage()) EXPECT_EQ(v, 0.0);
        }
    }
    EXPECT_TRUE(any_diff);
}

TEST(Params, InitBatchNormDefaults) {
    const ModelParams p = init_params(small_config(2), 1);
    for (const auto& e : p.entries) {
        const double expect = e.kind == ParamKind::Gamma || e.kind == ParamKind::RunningVar ? 1.0 : 0.0;
        if (e.kind == ParamKind::Kernel) continue;
        for (double v : e.value.storage()) EXPECT_EQ(v, expect) << e.name;
    }
}

TEST(Params, HeStdWithinTenPercent) {
    UNetConfig c;
    c.depth = 3;
    c.base_channels = 32;  // enc2.conv2.weight has 128*128*9 draws
    const ModelParams p = init_params(c, 3);
    for (const auto& e : p.entries) {
        if (e.kind != ParamKind::Kernel || e.value.numel() < 10000) continue;
        double ss = 0.0, s = 0.0;
        for (double v : e.value.storage()) {
            s += v;
            ss += v * v;
        }
        const double n = static_cast<double>(e.value.numel());
        const double sd = std::sqrt(ss / n - (s / n) * (s / n));
        const double expect = std::sqrt(2.0 / static_cast<double>(kernel_fan_in(e)));
        EXPECT_NEAR(sd, expect, 0.1 * expect) << e.name;
    }
    EXPECT_EQ(kernel_fan_in(p.entries[p.index_of("enc1.conv1.weight")]), 32u * 9u);
    EXPECT_EQ(kernel_fan_in(p.entries[p.index_of("dec1.up.weight")]), 128u);
}

TEST(Forward, ShapeLawAndNormalization) {
    std::mt19937_64 rng(1);
    for (std::size_t depth : {1, 2, 3}) {
        const ModelParams p = init_params(small_config(depth), depth);
        const std::size_t d = p.config.required_divisor();
        for (std::size_t h : {d, 2 * d, 3 * d})
            for (std::size_t w : {d, 4 * d}) {
                Tape t(1);
                ForwardResult r = forward(p, random_image(h, w, rng), Mode::Eval, t);
                expect_prob_map(r.probs.value(), 2, h, w);
            }
    }
}

TEST(Forward, Depth3On64x64) {
    std::mt19937_64 rng(2);
    UNetConfig c;
    const ModelParams p = init_params(c, 1);
    Tape t;
    expect_prob_map(forward(p, random_image(64, 64, rng), Mode::Eval, t).probs.value(), 2, 64, 64);
}

TEST(Forward, EvalIsDeterministic) {
    std::mt19937_64 rng(3);
    const ModelParams p = init_params(small_config(3), 9);
    const Image img = random_image(16, 16, rng);
    Tape a(1), b(2);
    EXPECT_EQ(forward(p, img, Mode::Eval, a).probs.value(), forward(p, img, Mode::Eval, b).probs.value());
}

TEST(Forward, TrainModeDropoutFollowsTapeSeed) {
    std::mt19937_64 rng(4);
    const ModelParams p = init_params(small_config(2), 9);
    const Image img = random_image(8, 8, rng);
    Tape a(1), b(1), c(2);
    const Tensor pa = forward(p, img, Mode::Train, a).probs.value();
    EXPECT_EQ(pa, forward(p, img, Mode::Train, b).probs.value());
    EXPECT_NE(pa, forward(p, img, Mode::Train, c).probs.value());
}

TEST(Forward, IndivisibleSizeNamesDivisor) {
    const ModelParams p = init_params(small_config(3), 1);
    Tape t;
    try {
        forward(p, Image(12, 10), Mode::Eval, t);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("divisible by 4"), std::string::npos) << e.what();
    }
}

TEST(Forward, BatchStatsReportedInTrainMode) {
    std::mt19937_64 rng(5);
    ModelParams p = init_params(small_config(2), 1);
    Tape t(1);
    ForwardResult r = forward(p, random_image(8, 8, rng), Mode::Train, t);
    EXPECT_EQ(r.batch_stats.size(), 6u);
    const std::size_t idx = p.index_of("enc0.conv1.bn.running_mean");
    const Tensor before = p.entries[idx].value;
    apply_batch_stats(p, r);
    EXPECT_NE(p.entries[idx].value, before);
}

TEST(Predict, ArgmaxAndTieRule) {
    const LabelMap m = argmax_channels(Tensor({2, 1, 2}, {0.9, 0.5, 0.1, 0.5}));
    EXPECT_EQ(m.labels, (std::vector<std::uint8_t>{0, 0}));
}

TEST(Predict, LabelsMatchProbabilityArgmax) {
    std::mt19937_64 rng(6);
    const ModelParams p = init_params(small_config(2), 4);
    const Prediction pr = predict(p, random_image(8, 8, rng));
    EXPECT_EQ(pr.labels, argmax_channels(pr.probs));
}

TEST(Predict, ArgmaxInvariantUnderMonotoneRescaling) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor logits = spatseg::testing::random_tensor({3, 4, 4}, rng, -3, 3);
        const LabelMap base = argmax_channels(logits);
        Tensor scaled = logits;
        const double a = 0.1 + static_cast<double>(rng() % 100) / 10.0;
        for (auto& v : scaled.storage()) v = std::exp(a * v) + 7.0;
        EXPECT_EQ(argmax_channels(scaled), base);
        Tape t;
        EXPECT_EQ(argmax_channels(softmax_channels(t.constant(logits)).value()), base);
    }
}

// End-to-end gradient through the depth-2 network, one parameter tensor at a time.
TEST(NetworkGrad, TotalLossThroughDepth2) {
    UNetConfig c = small_config(2, true, 0.25);
    ModelParams base = init_params(c, 11);
    // Dropped-out pixels have all-zero features and would tie on a zero bias.
    base.at("head.bias")[0] = 0.05;
    std::mt19937_64 rng(12);
    const Image img = random_image(8, 8, rng);
    const LabelMap target = random_labels(8, 8, 2, rng);
    SpatialLossConfig lc;
    std::size_t checked = 0;
    for (std::size_t e = 0; e < base.entries.size(); ++e) {
        if (!base.entries[e].trainable()) continue;
        bool done = false;
        for (std::uint64_t seed = 0; seed < 50 && !done; ++seed) {
            ScalarFn f = [&, e](Tape& t, Var x) {
                std::vector<Var> bound;
                for (std::size_t k = 0; k < base.entries.size(); ++k)
                    bound.push_back(k == e ? x : t.constant(base.entries[k].value));
                ForwardResult r = forward(base, bound, img, Mode::Train, t);
                return total_loss(r.probs, target, img, lc).total_var;
            };
            Tape probe(seed);
            f(probe, probe.constant(base.entries[e].value));
            if (probe.decision_margin() < 1e-4 || probe.relu_margin() < 1e-4) continue;
            const GradCheckReport r = grad_check(f, base.entries[e].value, 1e-5, seed);
            EXPECT_LT(r.max_rel_error, 1e-4) << base.entries[e].name << " seed " << seed;
            done = true;
        }
        EXPECT_TRUE(done) << base.entries[e].name;
        ++checked;
    }
    EXPECT_EQ(checked, base.trainable_count());
}

// ---- checkpoints ---------------------------------------------------------------------------------

TEST(Checkpoint, RoundTripBitExact) {
    TempDir dir("ckpt");
    ModelParams p = init_params(small_config(3), 21);
    p.at("enc0.conv1.bn.running_mean")[0] = 1.0 / 3.0;
    TrainingState st;
    st.global_step = 17;
    st.epoch = 2;
    st.epoch_step = 1;
    st.adam_t = 17;
    for (const auto& e : p.entries)
        if (e.trainable()) {
            st.adam_m.push_back(e.value);
            st.adam_v.emplace_back(e.value.shape(), 0.125);
        }
    st.run_config = {{"seed", 3}};
    const auto path = dir.path() / "m.ckpt";
    save_checkpoint(path, p, &st);
    const Checkpoint c = load_checkpoint(path, &p.config);
    EXPECT_EQ(c.params.config, p.config);
    ASSERT_EQ(c.params.entries.size(), p.entries.size());
    for (std::size_t i = 0; i < p.entries.size(); ++i) {
        EXPECT_EQ(c.params.entries[i].name, p.entries[i].name);
        EXPECT_EQ(c.params.entries[i].value, p.entries[i].value);
    }
    ASSERT_TRUE(c.training.has_value());
    EXPECT_EQ(c.training->global_step, 17u);
    EXPECT_EQ(c.training->epoch_step, 1u);
    EXPECT_EQ(c.training->adam_m, st.adam_m);
    EXPECT_EQ(c.training->adam_v, st.adam_v);
    EXPECT_EQ(c.training->run_config, st.run_config);
}

TEST(Checkpoint, HeaderBytes) {
    const auto bytes = encode_checkpoint(init_params(small_config(1), 1));
    ASSERT_GT(bytes.size(), 12u);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SCDN");
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
}

TEST(Checkpoint, TruncatedFileRejected) {
    const auto bytes = encode_checkpoint(init_params(small_config(2), 1));
    for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
        std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<long>(cut));
        EXPECT_THROW(decode_checkpoint(part), CheckpointError) << cut;
    }
}

TEST(Checkpoint, CorruptMagicAndVersion) {
    auto bytes = encode_checkpoint(init_params(small_config(1), 1));
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad), CheckpointError);
    bad = bytes;
    bad[4] = 2;
    EXPECT_THROW(decode_checkpoint(bad), CheckpointError);
    bad = bytes;
    bad.push_back(0);
    EXPECT_THROW(decode_checkpoint(bad), CheckpointError);
}

TEST(Checkpoint, ConfigMismatch) {
    TempDir dir("ckpt");
    UNetConfig c3 = small_config(3), c5 = small_config(5);
    save_checkpoint(dir.path() / "m.ckpt", init_params(c3, 1));
    EXPECT_THROW(load_checkpoint(dir.path() / "m.ckpt", &c5), CheckpointError);
    EXPECT_NO_THROW(load_checkpoint(dir.path() / "m.ckpt", &c3));
}

TEST(Checkpoint, MissingFile) {
    TempDir dir("ckpt");
    EXPECT_THROW(load_checkpoint(dir.path() / "absent.ckpt"), IoError);
}
