#include "spatseg/unet.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace spatseg {

void UNetConfig::validate() const {
    if (depth < 1) throw ConfigError("UNetConfig: depth must be >= 1");
    if (depth > 16) throw ConfigError("UNetConfig: depth " + std::to_string(depth) + " is unreasonably large");
    if (base_channels < 1) throw ConfigError("UNetConfig: base_channels must be >= 1");
    if (in_channels < 1) throw ConfigError("UNetConfig: in_channels must be >= 1");
    if (num_classes < 2) throw ConfigError("UNetConfig: num_classes must be >= 2");
    if (num_classes > 255) throw ConfigError("UNetConfig: num_classes must fit a LabelMap (<= 255)");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("UNetConfig: dropout_rate must be in [0,1)");
}

void to_json(nlohmann::json& j, const UNetConfig& c) {
    j = nlohmann::json{{"depth", c.depth},
                       {"base_channels", c.base_channels},
                       {"in_channels", c.in_channels},
                       {"num_classes", c.num_classes},
                       {"dropout_rate", c.dropout_rate},
                       {"use_batchnorm", c.use_batchnorm}};
}

void from_json(const nlohmann::json& j, UNetConfig& c) {
    UNetConfig d;
    c.depth = j.value("depth", d.depth);
    c.base_channels = j.value("base_channels", d.base_channels);
    c.in_channels = j.value("in_channels", d.in_channels);
    c.num_classes = j.value("num_classes", d.num_classes);
    c.dropout_rate = j.value("dropout_rate", d.dropout_rate);
    c.use_batchnorm = j.value("use_batchnorm", d.use_batchnorm);
}

std::size_t ModelParams::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < entries.size(); ++i)
        if (entries[i].name == name) return i;
    throw std::out_of_range("ModelParams: no entry named " + name);
}

std::size_t ModelParams::trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.trainable();
    return n;
}

namespace {

std::size_t level_channels(const UNetConfig& c, std::size_t level) { return c.base_channels << level; }

void add_conv3x3(ModelParams& p, const std::string& prefix, std::size_t cin, std::size_t cout) {
    p.entries.push_back({prefix + ".weight", ParamKind::Kernel, Tensor({cout, cin, 3, 3})});
    if (p.config.use_batchnorm) {
        p.entries.push_back({prefix + ".bn.gamma", ParamKind::Gamma, Tensor({cout}, 1.0)});
        p.entries.push_back({prefix + ".bn.beta", ParamKind::Beta, Tensor({cout})});
        p.entries.push_back({prefix + ".bn.running_mean", ParamKind::RunningMean, Tensor({cout})});
        p.entries.push_back({prefix + ".bn.running_var", ParamKind::RunningVar, Tensor({cout}, 1.0)});
    } else {
        p.entries.push_back({prefix + ".bias", ParamKind::Bias, Tensor({cout})});
    }
}

}  // namespace

ModelParams param_layout(const UNetConfig& config) {
    config.validate();
    ModelParams p;
    p.config = config;
    for (std::size_t l = 0; l < config.depth; ++l) {
        const std::size_t cin = l == 0 ? config.in_channels : level_channels(config, l - 1);
        const std::size_t ch = level_channels(config, l);
        const std::string pre = "enc" + std::to_string(l);
        add_conv3x3(p, pre + ".conv1", cin, ch);
        add_conv3x3(p, pre + ".conv2", ch, ch);
    }
    for (std::size_t l = config.depth - 1; l-- > 0;) {
        const std::size_t ch = level_channels(config, l);
        const std::string pre = "dec" + std::to_string(l);
        p.entries.push_back({pre + ".up.weight", ParamKind::Kernel, Tensor({2 * ch, ch, 2, 2})});
        p.entries.push_back({pre + ".up.bias", ParamKind::Bias, Tensor({ch})});
        add_conv3x3(p, pre + ".conv1", 2 * ch, ch);
        add_conv3x3(p, pre + ".conv2", ch, ch);
    }
    p.entries.push_back({"head.weight", ParamKind::Kernel, Tensor({config.num_classes, config.base_channels, 1, 1})});
    p.entries.push_back({"head.bias", ParamKind::Bias, Tensor({config.num_classes})});
    return p;
}

std::size_t kernel_fan_in(const ParamEntry& entry) {
    const Shape& s = entry.value.shape();
    // Transposed-conv kernels are [C_in,C_out,2,2]; each output pixel sees C_in inputs.
    if (entry.name.ends_with(".up.weight")) return s[0];
    return s[1] * s[2] * s[3];
}

ModelParams init_params(const UNetConfig& config, std::uint64_t seed) {
    ModelParams p = param_layout(config);
    std::mt19937_64 rng(seed);
    for (auto& e : p.entries) {
        if (e.kind != ParamKind::Kernel) continue;
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(kernel_fan_in(e))));
        for (double& v : e.value.values()) v = normal(rng);
    }
    return p;
}

std::vector<Var> bind_params(const ModelParams& params, Tape& tape) {
    std::vector<Var> out;
    out.reserve(params.entries.size());
    for (const auto& e : params.entries) out.push_back(e.trainable() ? tape.variable(e.value) : tape.constant(e.value));
    return out;
}

namespace {

class ParamCursor {
   public:
    ParamCursor(const ModelParams& params, std::span<const Var> bound) : params_(params), bound_(bound) {}

    Var take(const std::string& name) {
        if (pos_ >= params_.entries.size() || params_.entries[pos_].name != name) {
            throw std::logic_error("forward: parameter order mismatch at " + name);
        }
        return bound_[pos_++];
    }
    std::size_t position() const { return pos_; }
    bool done() const { return pos_ == params_.entries.size(); }

   private:
    const ModelParams& params_;
    std::span<const Var> bound_;
    std::size_t pos_ = 0;
};

}  // namespace

ForwardResult forward(const ModelParams& params, std::span<const Var> bound, const Image& image, Mode mode,
                      Tape& tape) {
    const UNetConfig& cfg = params.config;
    if (bound.size() != params.entries.size()) throw std::invalid_argument("forward: bound parameter count mismatch");
    if (cfg.in_channels != 1) throw ConfigError("forward: grayscale images need in_channels == 1");
    const std::size_t div = cfg.required_divisor();
    if (image.height == 0 || image.width == 0 || image.height % div || image.width % div) {
        throw ShapeError("forward: H and W must be divisible by " + std::to_string(div) + " for depth " +
                         std::to_string(cfg.depth) + ", got " + std::to_string(image.height) + "x" +
                         std::to_string(image.width));
    }

    ForwardResult result;
    ParamCursor cur(params, bound);

    auto conv_block = [&](Var x, const std::string& prefix) {
        Var k = cur.take(prefix + ".weight");
        Var y;
        if (cfg.use_batchnorm) {
            y = conv2d(x, k);
            Var gamma = cur.take(prefix + ".bn.gamma");
            Var beta = cur.take(prefix + ".bn.beta");
            const std::size_t rm_index = cur.position();
            Var rm = cur.take(prefix + ".bn.running_mean");
            Var rv = cur.take(prefix + ".bn.running_var");
            BatchNormStats stats;
            y = batchnorm(y, gamma, beta, mode, rm.value(), rv.value(), &stats);
            if (mode == Mode::Train) result.batch_stats.emplace_back(rm_index, std::move(stats));
        } else {
            y = conv2d(x, k, cur.take(prefix + ".bias"));
        }
        return dropout(relu(y), cfg.dropout_rate, mode);
    };

    Var x = tape.constant(Tensor({1, image.height, image.width}, image.pixels));
    std::vector<Var> skips;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const std::string pre = "enc" + std::to_string(l);
        x = conv_block(x, pre + ".conv1");
        x = conv_block(x, pre + ".conv2");
        if (l + 1 < cfg.depth) {
            skips.push_back(x);
            x = maxpool_2x2(x).output;
        }
    }
    for (std::size_t l = cfg.depth - 1; l-- > 0;) {
        const std::string pre = "dec" + std::to_string(l);
        Var kw = cur.take(pre + ".up.weight");
        Var kb = cur.take(pre + ".up.bias");
        x = upconv_2x2(x, kw, kb);
        x = concat_channels(skips[l], x);
        x = conv_block(x, pre + ".conv1");
        x = conv_block(x, pre + ".conv2");
    }
    Var hw = cur.take("head.weight");
    Var hb = cur.take("head.bias");
    result.probs = softmax_channels(conv2d(x, hw, hb));
    if (!cur.done()) throw std::logic_error("forward: unused parameters remain");
    return result;
}

ForwardResult forward(const ModelParams& params, const Image& image, Mode mode, Tape& tape) {
    const std::vector<Var> bound = bind_params(params, tape);
    return forward(params, bound, image, mode, tape);
}

void apply_batch_stats(ModelParams& params, const ForwardResult& result) {
    for (const auto& [rm_index, stats] : result.batch_stats) {
        update_running_stats(params.entries.at(rm_index).value, params.entries.at(rm_index + 1).value, stats);
    }
}

Prediction predict(const ModelParams& params, const Image& image) {
    Tape tape;
    std::vector<Var> bound;
    bound.reserve(params.entries.size());
    for (const auto& e : params.entries) bound.push_back(tape.constant(e.value));
    ForwardResult fr = forward(params, bound, image, Mode::Eval, tape);
    Prediction p;
    p.probs = fr.probs.value();
    p.labels = argmax_channels(p.probs);
    return p;
}

// ---- checkpoint encoding -------------------------------------------------------------

namespace {

class ByteWriter {
   public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
    void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
    void tensor(const std::string& name, const Tensor& t) {
        u32(static_cast<std::uint32_t>(name.size()));
        raw(name);
        u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) u32(static_cast<std::uint32_t>(d));
        for (double v : t.values()) f64(v);
    }
    std::vector<std::uint8_t> take() { return std::move(bytes_); }

   private:
    std::vector<std::uint8_t> bytes_;
};

class ByteReader {
   public:
    explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}

    void need(std::size_t n) const {
        if (b_.size() - pos_ < n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    double f64() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return std::bit_cast<double>(bits);
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::pair<std::string, Tensor> tensor() {
        std::string name = str(u32());
        const std::uint32_t rank = u32();
        if (rank > 8) throw CheckpointError("checkpoint entry " + name + ": implausible rank " + std::to_string(rank));
        Shape shape(rank);
        std::size_t n = 1;
        for (auto& d : shape) {
            d = u32();
            n *= d;
        }
        need(n * 8);
        std::vector<double> values(n);
        for (double& v : values) v = f64();
        return {std::move(name), Tensor(std::move(shape), std::move(values))};
    }
    bool at_end() const { return pos_ == b_.size(); }

   private:
    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params, const TrainingState* training) {
    nlohmann::json header;
    header["model"] = params.config;
    std::vector<std::string> trainable;
    for (const auto& e : params.entries)
        if (e.trainable()) trainable.push_back(e.name);
    if (training) {
        if (training->adam_m.size() != trainable.size() || training->adam_v.size() != trainable.size()) {
            throw CheckpointError("save_checkpoint: optimizer state does not match trainable parameters");
        }
        header["training"] = {{"global_step", training->global_step},
                              {"epoch", training->epoch},
                              {"epoch_step", training->epoch_step},
                              {"adam_t", training->adam_t},
                              {"run_config", training->run_config}};
    }
    const std::string text = header.dump();

    ByteWriter w;
    w.raw(std::string_view(kCheckpointMagic, 4));
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(text.size()));
    w.raw(text);
    for (const auto& e : params.entries) w.tensor(e.name, e.value);
    if (training) {
        for (std::size_t i = 0; i < trainable.size(); ++i) w.tensor("adam.m:" + trainable[i], training->adam_m[i]);
        for (std::size_t i = 0; i < trainable.size(); ++i) w.tensor("adam.v:" + trainable[i], training->adam_v[i]);
    }
    return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const UNetConfig* expected) {
    ByteReader r(bytes);
    if (r.str(4) != std::string_view(kCheckpointMagic, 4)) throw CheckpointError("checkpoint: bad magic (want SCDN)");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(r.str(r.u32()));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: bad header JSON: ") + e.what());
    }
    if (!header.contains("model")) throw CheckpointError("checkpoint: header lacks model config");
    UNetConfig config;
    try {
        config = header["model"].get<UNetConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: bad model config: ") + e.what());
    }
    if (expected && !(*expected == config)) {
        throw CheckpointError("checkpoint: config mismatch; file has " + header["model"].dump() + ", expected " +
                              nlohmann::json(*expected).dump());
    }

    Checkpoint ck;
    try {
        ck.params = param_layout(config);
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint: invalid model config: ") + e.what());
    }
    for (auto& e : ck.params.entries) {
        auto [name, value] = r.tensor();
        if (name != e.name || value.shape() != e.value.shape()) {
            throw CheckpointError("checkpoint: expected " + e.name + " " + shape_str(e.value.shape()) + ", found " +
                                  name + " " + shape_str(value.shape()));
        }
        e.value = std::move(value);
    }
    if (header.contains("training")) {
        const auto& t = header["training"];
        TrainingState st;
        try {
            st.global_step = t.at("global_step").get<std::uint64_t>();
            st.epoch = t.at("epoch").get<std::uint64_t>();
            st.epoch_step = t.at("epoch_step").get<std::uint64_t>();
            st.adam_t = t.at("adam_t").get<std::uint64_t>();
            st.run_config = t.value("run_config", nlohmann::json::object());
        } catch (const nlohmann::json::exception& e) {
            throw CheckpointError(std::string("checkpoint: bad training state: ") + e.what());
        }
        for (auto* moments : {&st.adam_m, &st.adam_v}) {
            const std::string prefix = moments == &st.adam_m ? "adam.m:" : "adam.v:";
            for (const auto& e : ck.params.entries) {
                if (!e.trainable()) continue;
                auto [name, value] = r.tensor();
                if (name != prefix + e.name || value.shape() != e.value.shape()) {
                    throw CheckpointError("checkpoint: bad optimizer entry " + name);
                }
                moments->push_back(std::move(value));
            }
        }
        ck.training = std::move(st);
    }
    if (!r.at_end()) throw CheckpointError("checkpoint: trailing bytes after last entry");
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const TrainingState* training) {
    const auto bytes = encode_checkpoint(params, training);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const UNetConfig* expected) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes, expected);
}

}  // namespace spatseg
