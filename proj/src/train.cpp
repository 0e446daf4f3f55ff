#include "spatseg/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

namespace spatseg {

// ---- Adam ---------------------------------------------------------------------------------

void to_json(nlohmann::json& j, const AdamHyper& h) {
    j = nlohmann::json{{"lr", h.lr}, {"beta1", h.beta1}, {"beta2", h.beta2}, {"eps", h.eps}};
}

void from_json(const nlohmann::json& j, AdamHyper& h) {
    AdamHyper d;
    h.lr = j.value("lr", d.lr);
    h.beta1 = j.value("beta1", d.beta1);
    h.beta2 = j.value("beta2", d.beta2);
    h.eps = j.value("eps", d.eps);
}

AdamState AdamState::zeros_like(const ModelParams& params) {
    AdamState s;
    for (const auto& e : params.entries) {
        if (!e.trainable()) continue;
        s.m.emplace_back(e.value.shape(), 0.0);
        s.v.emplace_back(e.value.shape(), 0.0);
    }
    return s;
}

void adam_step(ModelParams& params, const std::vector<Tensor>& grads, AdamState& state, const AdamHyper& hyper) {
    if (grads.size() != params.entries.size()) throw std::invalid_argument("adam_step: one gradient slot per entry");
    if (state.m.size() != params.trainable_count()) throw std::invalid_argument("adam_step: state not initialized");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!params.entries[i].trainable() || grads[i].numel() == 0) continue;
        if (grads[i].shape() != params.entries[i].value.shape()) {
            throw ShapeError("adam_step: gradient for " + params.entries[i].name + " has shape " +
                             shape_str(grads[i].shape()));
        }
        if (!grads[i].all_finite()) throw NonFiniteGradient("adam_step: non-finite gradient for " + params.entries[i].name);
    }
    ++state.t;
    const double t = static_cast<double>(state.t);
    const double bc1 = 1.0 - std::pow(hyper.beta1, t);
    const double bc2 = 1.0 - std::pow(hyper.beta2, t);
    std::size_t slot = 0;
    for (std::size_t i = 0; i < grads.size(); ++i) {
        ParamEntry& e = params.entries[i];
        if (!e.trainable()) continue;
        Tensor& m = state.m[slot];
        Tensor& v = state.v[slot];
        ++slot;
        const bool has_grad = grads[i].numel() != 0;
        for (std::size_t k = 0; k < e.value.numel(); ++k) {
            const double g = has_grad ? grads[i][k] : 0.0;
            m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g;
            v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g * g;
            const double m_hat = m[k] / bc1;
            const double v_hat = v[k] / bc2;
            e.value[k] -= hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
        }
    }
}

// ---- RunConfig ---------------------------------------------------------------------------------

void RunConfig::validate() const {
    model.validate();
    loss.validate();
    if (!(optimizer.lr > 0.0)) throw ConfigError("RunConfig: lr must be > 0");
    if (epochs < 1) throw ConfigError("RunConfig: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("RunConfig: batch_size must be >= 1");
    if (range_end != 0 && range_end <= range_begin) throw ConfigError("RunConfig: empty training range");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
    j = nlohmann::json{{"model", c.model},
                       {"loss", c.loss},
                       {"loss_kind", c.loss_kind == LossKind::Spatial ? "spatial" : "ce-only"},
                       {"optimizer", c.optimizer},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"seed", c.seed},
                       {"init_seed", c.init_seed},
                       {"data_dir", c.data_dir},
                       {"label_source", c.label_source == LabelSource::Pseudo ? "pseudo" : "truth"},
                       {"resize", c.resize},
                       {"range", {c.range_begin, c.range_end}},
                       {"log_wall_time", c.log_wall_time}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    RunConfig d;
    c.model = j.value("model", d.model);
    c.loss = j.value("loss", d.loss);
    const std::string kind = j.value("loss_kind", std::string("spatial"));
    if (kind == "spatial") {
        c.loss_kind = LossKind::Spatial;
    } else if (kind == "ce-only") {
        c.loss_kind = LossKind::CrossEntropyOnly;
    } else {
        throw ConfigError("loss_kind must be 'spatial' or 'ce-only', got '" + kind + "'");
    }
    c.optimizer = j.value("optimizer", d.optimizer);
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.seed = j.value("seed", d.seed);
    c.init_seed = j.value("init_seed", d.init_seed);
    c.data_dir = j.value("data_dir", d.data_dir);
    const std::string src = j.value("label_source", std::string("pseudo"));
    if (src == "pseudo") {
        c.label_source = LabelSource::Pseudo;
    } else if (src == "truth") {
        c.label_source = LabelSource::Truth;
    } else {
        throw ConfigError("label_source must be 'pseudo' or 'truth', got '" + src + "'");
    }
    c.resize = j.value("resize", d.resize);
    if (j.contains("range")) {
        c.range_begin = j["range"].at(0).get<std::size_t>();
        c.range_end = j["range"].at(1).get<std::size_t>();
    }
    c.log_wall_time = j.value("log_wall_time", d.log_wall_time);
}

// ---- data -----------------------------------------------------------------------------------------

std::vector<DatasetItem> load_dataset(const std::filesystem::path& dir, bool need_pseudo, bool need_truth,
                                      std::size_t resize) {
    namespace fs = std::filesystem;
    const fs::path images = dir / "images", labels = dir / "labels", truth = dir / "truth";
    if (!fs::is_directory(images)) throw DataError("dataset " + dir.string() + ": missing images/ directory");
    if (need_pseudo && !fs::is_directory(labels)) throw DataError("dataset " + dir.string() + ": missing labels/ directory");
    if (need_truth && !fs::is_directory(truth)) throw DataError("dataset " + dir.string() + ": missing truth/ directory");

    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(images))
        if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
    std::sort(files.begin(), files.end());

    std::vector<DatasetItem> items;
    for (const auto& f : files) {
        DatasetItem it;
        it.id = f.stem().string();
        it.image = read_image_pgm(f);
        const std::size_t h = resize ? resize : it.image.height, w = resize ? resize : it.image.width;
        it.image = resize_bilinear(it.image, h, w);
        const fs::path name = f.filename();
        if (fs::is_directory(labels)) {
            if (fs::exists(labels / name)) {
                it.pseudo = resize_nearest(read_mask_pgm(labels / name), h, w);
            } else if (need_pseudo) {
                throw DataError("dataset: no training label for " + it.id);
            }
        }
        if (fs::is_directory(truth)) {
            if (fs::exists(truth / name)) {
                it.truth = resize_nearest(read_mask_pgm(truth / name), h, w);
            } else if (need_truth) {
                throw DataError("dataset: no truth mask for " + it.id);
            }
        }
        items.push_back(std::move(it));
    }
    return items;
}

// ---- training --------------------------------------------------------------------------------------

std::string format_log_row(const LogRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,%.6f", r.epoch, r.step, r.unary, r.pairwise, r.total,
                  r.wall_time);
    return buf;
}

void write_train_log(const std::filesystem::path& path, const std::vector<LogRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << kTrainLogHeader << '\n';
    for (const auto& r : rows) out << format_log_row(r) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

namespace {

std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix(seed ^ mix(0x5EED0000ULL + epoch)));
    // Fisher-Yates on raw draws keeps the order independent of the
    // standard library's distribution implementations.
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    return order;
}

std::uint64_t step_seed(std::uint64_t seed, std::size_t global_step) {
    return mix(mix(seed) + 0x9E3779B97F4A7C15ULL * (global_step + 1));
}

TrainResult train(const RunConfig& config, const std::vector<DatasetItem>& all_items, const TrainOptions& options,
                  const Checkpoint* resume) {
    config.validate();
    const std::size_t begin = std::min(config.range_begin, all_items.size());
    const std::size_t end = config.range_end ? std::min(config.range_end, all_items.size()) : all_items.size();
    if (begin >= end) throw DataError("train: no training images in the selected range");
    std::vector<const DatasetItem*> items;
    for (std::size_t i = begin; i < end; ++i) items.push_back(&all_items[i]);

    const std::size_t div = config.model.required_divisor();
    for (const auto* it : items) {
        if (it->image.height % div || it->image.width % div) {
            throw ShapeError("train: image " + it->id + " is " + std::to_string(it->image.height) + "x" +
                             std::to_string(it->image.width) + "; depth " + std::to_string(config.model.depth) +
                             " needs sides divisible by " + std::to_string(div));
        }
        const LabelMap& target = config.label_source == LabelSource::Pseudo ? it->pseudo : it->truth;
        if (target.height != it->image.height || target.width != it->image.width) {
            throw DataError("train: image " + it->id + " lacks a matching " +
                            (config.label_source == LabelSource::Pseudo ? "training label" : "truth mask"));
        }
    }

    TrainResult res;
    std::size_t start_epoch = 0, start_epoch_step = 0, global_step = 0;
    if (resume) {
        if (!resume->training) throw CheckpointError("train: checkpoint carries no training state to resume");
        if (!(resume->params.config == config.model)) throw CheckpointError("train: checkpoint model config differs");
        res.params = resume->params;
        res.adam.t = resume->training->adam_t;
        res.adam.m = resume->training->adam_m;
        res.adam.v = resume->training->adam_v;
        start_epoch = resume->training->epoch;
        start_epoch_step = resume->training->epoch_step;
        global_step = resume->training->global_step;
    } else {
        res.params = init_params(config.model, config.init_seed);
        res.adam = AdamState::zeros_like(res.params);
    }

    const bool spatial = config.loss_kind == LossKind::Spatial;
    const std::size_t n = items.size();
    const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t epoch = start_epoch, epoch_step = start_epoch_step;
    bool stopped = false;

    for (; epoch < config.epochs && !stopped; ++epoch, epoch_step = 0) {
        const std::vector<std::size_t> order = epoch_order(config.seed, epoch, n);
        for (; epoch_step < steps_per_epoch; ++epoch_step) {
            if (options.max_steps && global_step >= options.max_steps) {
                stopped = true;
                break;
            }
            const std::size_t first = epoch_step * config.batch_size;
            const std::size_t last = std::min(n, first + config.batch_size);
            const double inv_b = 1.0 / static_cast<double>(last - first);

            std::vector<Tensor> grads(res.params.entries.size());
            LogRow row;
            row.epoch = epoch;
            row.step = global_step;
            std::mt19937_64 step_rng(step_seed(config.seed, global_step));
            std::vector<ForwardResult> forwards;
            for (std::size_t b = first; b < last; ++b) {
                const DatasetItem& item = *items[order[b]];
                const LabelMap& target = config.label_source == LabelSource::Pseudo ? item.pseudo : item.truth;
                Tape item_tape(step_rng());
                const std::vector<Var> bound = bind_params(res.params, item_tape);
                ForwardResult fr = forward(res.params, bound, item.image, Mode::Train, item_tape);
                LossBreakdown loss = total_loss(fr.probs, target, item.image, config.loss, spatial);
                item_tape.backward(loss.total_var);
                for (std::size_t k = 0; k < bound.size(); ++k) {
                    if (!bound[k].requires_grad() || bound[k].grad().numel() == 0) continue;
                    if (grads[k].numel() == 0) grads[k] = Tensor(bound[k].shape(), 0.0);
                    for (std::size_t q = 0; q < grads[k].numel(); ++q) grads[k][q] += inv_b * bound[k].grad()[q];
                }
                row.unary += inv_b * loss.unary;
                row.pairwise += inv_b * loss.pairwise;
                forwards.push_back(std::move(fr));
            }
            row.total = row.unary + config.loss.lambda * row.pairwise;
            if (!spatial) row.total = row.unary;
            adam_step(res.params, grads, res.adam, config.optimizer);
            for (const auto& fr : forwards) apply_batch_stats(res.params, fr);
            if (config.log_wall_time) {
                row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            }
            res.log.push_back(row);
            if (options.on_step) options.on_step(row);
            ++global_step;
        }
        if (stopped) break;
    }

    res.state.global_step = global_step;
    if (stopped) {
        res.state.epoch = epoch;
        res.state.epoch_step = epoch_step;
    } else {
        res.state.epoch = config.epochs;
        res.state.epoch_step = 0;
    }
    res.state.adam_t = res.adam.t;
    res.state.adam_m = res.adam.m;
    res.state.adam_v = res.adam.v;
    res.state.run_config = config;
    return res;
}

// ---- evaluation -------------------------------------------------------------------------------

double pixel_accuracy(const LabelMap& pred, const LabelMap& truth) {
    if (pred.size() != truth.size() || pred.size() == 0) throw ShapeError("pixel_accuracy: size mismatch");
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred.labels[i] == truth.labels[i];
    return static_cast<double>(ok) / static_cast<double>(pred.size());
}

std::size_t eval_threads_from_env() {
    if (const char* env = std::getenv("SPATSEG_THREADS")) {
        char* endp = nullptr;
        const long v = std::strtol(env, &endp, 10);
        if (endp != env && v >= 1) return static_cast<std::size_t>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

MetricsReport evaluate(const std::vector<DatasetItem>& items,
                       const std::function<LabelMap(const DatasetItem&)>& predict_fn, std::size_t threads,
                       std::string method, std::string dataset) {
    for (const auto& it : items) {
        if (it.truth.size() == 0) throw DataError("evaluate: image " + it.id + " has no truth mask");
    }
    std::vector<ImageScores> rows(items.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mu;
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < items.size();) {
            try {
                const LabelMap pred = predict_fn(items[i]);
                const SegmentationScores s = scores(confusion(pred, items[i].truth));
                rows[i] = {items[i].id, s.dice, s.precision, s.recall};
            } catch (...) {
                std::lock_guard lock(failure_mu);
                if (!failure) failure = std::current_exception();
                next = items.size();
            }
        }
    };
    threads = std::max<std::size_t>(1, std::min(threads, items.size()));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (failure) std::rethrow_exception(failure);
    return aggregate(std::move(rows), std::move(method), std::move(dataset));
}

}  // namespace spatseg
